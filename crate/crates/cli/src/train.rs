use std::fs;
use std::path::Path;

use oob_core::dataset::{load_dataset, ANNOTATION_FILE};
use oob_core::detector::{clean_detection_rate, train_toy_detector_with, TrainConfig};
use serde_json::{json, Value};

use crate::config::{write_config, Resolver};
use crate::CliError;

/// Checkpoint file name inside the output directory.
pub const CHECKPOINT_FILE: &str = "detector.ckpt";

pub fn run(config: Option<&Path>, overrides: Vec<(&str, Option<Value>)>) -> Result<(), CliError> {
    let mut r = Resolver::new(config, overrides)?;
    let dataset_dir = r.existing_path("dataset");
    let out = r.required_path("out");
    let defaults = TrainConfig::default();
    let train = TrainConfig {
        epochs: r.count("epochs", defaults.epochs),
        batch_size: r.count("batch_size", defaults.batch_size),
        learning_rate: r.real("learning_rate", defaults.learning_rate),
        seed: r.seed("seed", defaults.seed),
    };
    let holdout = r.count("holdout", 0);
    if train.batch_size == 0 {
        r.problem("batch_size: must be positive");
    }
    if train.learning_rate <= 0.0 {
        r.problem(format!("learning_rate: must be positive, got {}", train.learning_rate));
    }
    let resolved = r.finish()?;

    let dataset = load_dataset(&dataset_dir, &dataset_dir.join(ANNOTATION_FILE))?;
    if holdout >= dataset.len() && holdout > 0 {
        return Err(CliError::Config(vec![format!(
            "holdout: {holdout} leaves no training samples out of {}",
            dataset.len()
        )]));
    }
    let (train_set, held) = dataset.split_tail(holdout);
    let (detector, metrics) = train_toy_detector_with(&train_set, &train)?;
    let (rate, measured_on) = if held.is_empty() {
        (metrics.clean_detection_rate, "training set")
    } else {
        (clean_detection_rate(&detector, &held)?, "held-out set")
    };
    write_config(&resolved, &out)?;
    let ckpt = out.join(CHECKPOINT_FILE);
    detector.save(&ckpt)?;
    let metrics_path = out.join("metrics.json");
    let doc = json!({
        "epoch_losses": metrics.epoch_losses,
        "clean_detection_rate": rate,
        "measured_on": measured_on,
        "train_samples": train_set.len(),
        "holdout_samples": held.len(),
    });
    fs::write(&metrics_path, serde_json::to_string_pretty(&doc).expect("JSON values serialize") + "\n")
        .map_err(|e| CliError::io(&metrics_path, e))?;
    println!("clean detection rate: {rate:.4} ({measured_on}, {} images)", if held.is_empty() { train_set.len() } else { held.len() });
    println!("checkpoint: {}", ckpt.display());
    Ok(())
}
