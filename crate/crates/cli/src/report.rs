use std::collections::HashSet;
use std::fs;
use std::path::Path;

use oob_core::eval::{emit_report, RunEntry};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::{write_config, Resolver};
use crate::CliError;

pub const SUMMARY_FILE: &str = "summary.json";

/// Contents of `summary.json` in an attack or eval directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub asr: Option<f64>,
    #[serde(flatten)]
    pub run: RunEntry,
}

impl RunSummary {
    pub fn new(run: RunEntry) -> Self {
        Self { asr: run.asr(), run }
    }
}

pub fn write_summary(summary: &RunSummary, dir: &Path) -> Result<(), CliError> {
    let path = dir.join(SUMMARY_FILE);
    let text = serde_json::to_string_pretty(summary).expect("summaries serialize") + "\n";
    fs::write(&path, text).map_err(|e| CliError::io(&path, e))
}

pub fn read_summary(dir: &Path) -> Result<RunSummary, CliError> {
    let path = dir.join(SUMMARY_FILE);
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Core(oob_core::Error::Json(e)))
}

pub fn run(config: Option<&Path>, overrides: Vec<(&str, Option<Value>)>) -> Result<(), CliError> {
    let mut r = Resolver::new(config, overrides)?;
    let dirs = r.path_list("runs");
    let out = r.required_path("out");
    for dir in &dirs {
        if !dir.join(SUMMARY_FILE).is_file() {
            r.problem(format!("runs: {} has no {SUMMARY_FILE}", dir.display()));
        }
    }
    let resolved = r.finish()?;

    let mut seen = HashSet::new();
    let mut runs = Vec::with_capacity(dirs.len());
    for dir in &dirs {
        let mut entry = read_summary(dir)?.run;
        let base = entry.name.clone();
        let mut suffix = 2;
        while !seen.insert(entry.name.clone()) {
            entry.name = format!("{base}_{suffix}");
            suffix += 1;
        }
        runs.push(entry);
    }
    write_config(&resolved, &out)?;
    let files = emit_report(&runs, &out)?;
    for run in &runs {
        match run.asr() {
            Some(asr) => println!("{:<24} asr {asr:.4}", run.name),
            None => println!("{:<24} asr n/a", run.name),
        }
    }
    println!("summary: {} ({} plots)", files.summary.display(), files.plots.len());
    Ok(())
}
