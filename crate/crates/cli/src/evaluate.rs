use std::fs;
use std::path::Path;

use oob_core::dataset::{load_dataset, ANNOTATION_FILE};
use oob_core::detector::{ToyDetector, DETECTION_THRESHOLD};
use oob_core::eval::{emit_plots, evaluate_asr, evaluate_sequence, load_sequence, EvalSettings, ImageRecord, RunEntry};
use oob_core::renderer::{PlacementMode, PlacementRule};
use oob_core::trigger::TriggerImage;
use serde_json::Value;

use crate::config::{write_config, Resolver};
use crate::report::{write_summary, RunSummary};
use crate::CliError;

/// Reads the placement rule, target class, threshold and worker count. An
/// unset `target_class` is returned as `None` and left at 0 in the settings.
pub fn eval_settings(r: &mut Resolver) -> (EvalSettings, Option<usize>) {
    let defaults = PlacementRule::default();
    let mode = r.choice::<PlacementMode>("placement", "below").unwrap_or(defaults.mode);
    let relative_scale = r.real("relative_scale", defaults.relative_scale);
    let gap_fraction = r.real("gap_fraction", defaults.gap_fraction);
    let target_class = r.optional_count("target_class");
    let threshold = r.real("threshold", DETECTION_THRESHOLD);
    let workers = r.count("workers", 1);
    if relative_scale <= 0.0 {
        r.problem(format!("relative_scale: must be positive, got {relative_scale}"));
    }
    if gap_fraction < 0.0 {
        r.problem(format!("gap_fraction: must be non-negative, got {gap_fraction}"));
    }
    if !(0.0..=1.0).contains(&threshold) {
        r.problem(format!("threshold: must lie in [0, 1], got {threshold}"));
    }
    if workers == 0 {
        r.problem("workers: must be at least 1");
    }
    let mut settings = EvalSettings::new(
        PlacementRule {
            mode,
            relative_scale,
            gap_fraction,
        },
        target_class.unwrap_or(0),
        threshold,
    );
    settings.workers = workers;
    (settings, target_class)
}

/// Default run name: the output directory's last component.
pub fn run_name(r: &mut Resolver, out: &Path) -> String {
    let fallback = out.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
    r.text("name", &fallback)
}

pub fn write_records(records: &[ImageRecord], path: &Path) -> Result<(), CliError> {
    let mut text = String::new();
    for rec in records {
        text += &serde_json::to_string(rec).expect("records serialize");
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn run(config: Option<&Path>, overrides: Vec<(&str, Option<Value>)>) -> Result<(), CliError> {
    let mut r = Resolver::new(config, overrides)?;
    let detector_path = r.existing_path("detector");
    let dataset_dir = r.optional_path("dataset");
    let sequence_dir = r.optional_path("sequence");
    let trigger_path = r.optional_path("trigger");
    let no_trigger = r.flag("no_trigger", false);
    let out = r.required_path("out");
    let name = run_name(&mut r, &out);
    match (&dataset_dir, &sequence_dir) {
        (Some(_), Some(_)) => r.problem("dataset/sequence: give one, not both"),
        (None, None) => r.problem("dataset/sequence: one of them is required"),
        _ => {}
    }
    for (key, dir) in [("dataset", &dataset_dir), ("sequence", &sequence_dir)] {
        if let Some(dir) = dir.as_ref().filter(|d| !d.exists()) {
            r.problem(format!("{key}: {} does not exist", dir.display()));
        }
    }
    match (&trigger_path, no_trigger) {
        (Some(_), true) => r.problem("trigger/no_trigger: a trigger was given together with no_trigger"),
        (None, false) => r.problem("trigger: required unless no_trigger is set"),
        (Some(p), false) if !p.exists() => r.problem(format!("trigger: {} does not exist", p.display())),
        _ => {}
    }
    let (mut settings, target_class) = eval_settings(&mut r);
    let resolved = r.finish()?;

    let detector = ToyDetector::load(&detector_path)?;
    let trigger = trigger_path.map(|p| TriggerImage::load_png(&p)).transpose()?;
    let mut entry = RunEntry {
        name,
        ..Default::default()
    };
    let records = if let Some(dir) = sequence_dir {
        let seq = load_sequence(&dir)?;
        settings.target_class = target_class.unwrap_or(seq.frames.target_class);
        let result = evaluate_sequence(&seq, trigger.as_ref(), &detector, &settings)?;
        println!(
            "undetected proportion: {:.4} over {} frames ({:.1} s)",
            result.undetected_proportion,
            seq.len(),
            seq.duration()
        );
        let records = result.records.clone();
        entry.sequence = Some(result);
        records
    } else {
        let dir = dataset_dir.expect("checked above");
        let dataset = load_dataset(&dir, &dir.join(ANNOTATION_FILE))?;
        settings.target_class = target_class.unwrap_or(dataset.target_class);
        let result = evaluate_asr(&dataset, trigger.as_ref(), &detector, &settings)?;
        println!(
            "asr: {:.4} over {} images ({} placement failures)",
            result.asr,
            result.per_image.len(),
            result.placement_failures()
        );
        let records = result.per_image.clone();
        entry.eval = Some(result);
        records
    };
    write_config(&resolved, &out)?;
    write_records(&records, &out.join("records.jsonl"))?;
    emit_plots(std::slice::from_ref(&entry), &out.join("plots"))?;
    write_summary(&RunSummary::new(entry), &out)
}
