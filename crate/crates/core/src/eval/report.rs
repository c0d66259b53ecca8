use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::plot::{confidence_plot_spec, loss_plot_spec, render_bar_plot, render_line_plot};
use super::{EvalResult, SequenceResult};
use crate::error::{Error, Result};
use crate::uapgd::AttackReport;

/// One named run with whatever results it produced.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunEntry {
    pub name: String,
    pub report: Option<AttackReport>,
    pub eval: Option<EvalResult>,
    pub sequence: Option<SequenceResult>,
}

impl RunEntry {
    pub fn asr(&self) -> Option<f64> {
        self.eval.as_ref().map(|e| e.asr).or_else(|| self.report.as_ref().and_then(|r| r.asr))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportFiles {
    pub summary: PathBuf,
    pub records: PathBuf,
    pub plots: Vec<PathBuf>,
}

fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Loss curves for runs with epochs, confidence curves for runs with a
/// sequence, and an ASR bar chart when at least two runs have an ASR.
/// `plots_dir` is only created when something is drawn.
pub fn emit_plots(runs: &[RunEntry], plots_dir: &Path) -> Result<Vec<PathBuf>> {
    let threshold = |run: &RunEntry| run.eval.as_ref().map_or(crate::detector::DETECTION_THRESHOLD, |e| e.threshold);
    let mut plots = Vec::new();
    let ensure_dir = || fs::create_dir_all(plots_dir).map_err(|e| Error::io(plots_dir, e));
    for run in runs {
        if let Some(report) = run.report.as_ref().filter(|r| !r.epochs.is_empty()) {
            ensure_dir()?;
            let path = plots_dir.join(format!("loss_{}.png", file_stem(&run.name)));
            render_line_plot(&loss_plot_spec(&run.name, report), &path)?;
            plots.push(path);
        }
        if let Some(seq) = &run.sequence {
            ensure_dir()?;
            let path = plots_dir.join(format!("confidence_{}.png", file_stem(&run.name)));
            render_line_plot(&confidence_plot_spec(&run.name, seq, threshold(run)), &path)?;
            plots.push(path);
        }
    }
    let bars: Vec<(String, f64)> = runs.iter().filter_map(|r| r.asr().map(|a| (r.name.clone(), a))).collect();
    if bars.len() >= 2 {
        ensure_dir()?;
        let path = plots_dir.join("asr_comparison.png");
        render_bar_plot("ASR by method", &bars, &path)?;
        plots.push(path);
    }
    Ok(plots)
}

/// Writes `summary.json`, `records.jsonl` and any applicable plots under
/// `output_dir/plots`.
pub fn emit_report(runs: &[RunEntry], output_dir: &Path) -> Result<ReportFiles> {
    fs::create_dir_all(output_dir).map_err(|e| Error::io(output_dir, e))?;
    let entries: Vec<_> = runs
        .iter()
        .map(|run| {
            let report = run.report.as_ref();
            json!({
                "name": run.name,
                "method": report.map(|r| r.method),
                "asr": run.asr(),
                "epochs": report.map(|r| r.epochs.len()),
                "l_best": report.and_then(|r| r.l_best),
                "final_eta": report.map(|r| r.final_eta),
                "halving_events": report.map(|r| r.halving_events.clone()),
                "placement_failures": run.eval.as_ref().map(EvalResult::placement_failures),
                "undetected_proportion": run.sequence.as_ref().map(|s| s.undetected_proportion),
            })
        })
        .collect();
    let comparison: Vec<_> = runs
        .iter()
        .filter_map(|r| r.asr().map(|asr| json!({ "name": r.name, "asr": asr })))
        .collect();
    let summary_path = output_dir.join("summary.json");
    let summary = json!({ "runs": entries, "comparison": comparison });
    fs::write(&summary_path, serde_json::to_string_pretty(&summary)? + "\n").map_err(|e| Error::io(&summary_path, e))?;

    let records_path = output_dir.join("records.jsonl");
    let mut records = Vec::new();
    for run in runs {
        if let Some(eval) = &run.eval {
            for rec in &eval.per_image {
                serde_json::to_writer(&mut records, &json!({ "run": run.name, "kind": "image", "record": rec }))?;
                records.push(b'\n');
            }
        }
        if let Some(seq) = &run.sequence {
            for (frame, rec) in seq.records.iter().enumerate() {
                serde_json::to_writer(&mut records, &json!({ "run": run.name, "kind": "frame", "frame": frame, "record": rec }))?;
                records.push(b'\n');
            }
        }
    }
    fs::File::create(&records_path)
        .and_then(|mut f| f.write_all(&records))
        .map_err(|e| Error::io(&records_path, e))?;

    let plots = emit_plots(runs, &output_dir.join("plots"))?;
    Ok(ReportFiles {
        summary: summary_path,
        records: records_path,
        plots,
    })
}
