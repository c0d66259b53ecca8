use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use oob_core::augment::EotConfig;
use oob_core::dataset::{load_dataset, Dataset, ANNOTATION_FILE, DEFAULT_GRAY};
use oob_core::detector::{DetectorContract, ToyDetector};
use oob_core::eval::{emit_plots, evaluate_asr, RunEntry};
use oob_core::losses::{FeatureTap, LossContext, LossWeights, DEFAULT_EPS_TV};
use oob_core::trigger::TriggerImage;
use oob_core::uapgd::{initial_trigger, run_attack, AttackReport, DatasetObjective, Method, SlackMode, TriggerInit, UapgdConfig, UapgdState};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{write_config, Resolver};
use crate::evaluate::{eval_settings, run_name, write_records};
use crate::report::{write_summary, RunSummary};
use crate::CliError;

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TRIGGER_FILE: &str = "trigger.png";

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    config: Value,
    state: UapgdState,
}

fn metric_lines(report: &AttackReport, epoch: usize) -> String {
    let mut out = String::new();
    let tagged = |kind: &str, value: Value| {
        let mut obj = json!({ "kind": kind });
        if let (Value::Object(dst), Value::Object(src)) = (&mut obj, value) {
            dst.extend(src);
        }
        serde_json::to_string(&obj).expect("records serialize") + "\n"
    };
    for b in report.batches.iter().filter(|b| b.epoch == epoch) {
        out += &tagged("batch", serde_json::to_value(b).expect("records serialize"));
    }
    for e in report.epochs.iter().filter(|e| e.epoch == epoch) {
        out += &tagged("epoch", serde_json::to_value(e).expect("records serialize"));
    }
    out
}

fn write_atomic(path: &Path, text: &str) -> Result<(), CliError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text).map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

fn load_images(dir: &Path, detector: &ToyDetector) -> Result<Dataset, CliError> {
    let dataset = load_dataset(dir, &dir.join(ANNOTATION_FILE))?;
    match dataset.image_size() {
        Some(size) if size != detector.input_size() => Err(CliError::Config(vec![format!(
            "{}: images are {}x{} but the detector expects {}x{}",
            dir.display(),
            size.0,
            size.1,
            detector.input_size().0,
            detector.input_size().1
        )])),
        _ => Ok(dataset),
    }
}

pub fn run(config: Option<&Path>, overrides: Vec<(&str, Option<Value>)>, resume: bool) -> Result<(), CliError> {
    let mut r = Resolver::new(config, overrides)?;
    let dataset_dir = r.existing_path("dataset");
    let detector_path = r.existing_path("detector");
    let out = r.required_path("out");
    let name = run_name(&mut r, &out);
    let method = r.choice::<Method>("mode", "uapgd").unwrap_or(Method::Uapgd);
    let use_fg = r.flag("use_fg", true);
    let lambda_fg = r.real("lambda_fg", 0.1);
    let weights = LossWeights {
        lambda_fg: if use_fg { lambda_fg } else { 0.0 },
        lambda_tv: r.real("lambda_tv", 0.0),
        eps_tv: r.real("eps_tv", DEFAULT_EPS_TV),
    };
    let d = UapgdConfig::default();
    let slack = match r.text("slack", "relative").as_str() {
        "relative" => SlackMode::Relative,
        "absolute" => SlackMode::Absolute,
        other => {
            r.problem(format!("slack: expected relative or absolute, got `{other}`"));
            SlackMode::Relative
        }
    };
    let uapgd = UapgdConfig {
        eta0: r.real("eta0", d.eta0),
        n_epoch: r.count("n_epoch", d.n_epoch),
        l_c: r.count("l_c", d.l_c),
        l_o: r.count("l_o", d.l_o),
        eps1: r.real("eps1", d.eps1),
        eps2: r.real("eps2", d.eps2),
        slack,
        eta_floor: r.real("eta_floor", d.eta_floor),
        batch_size: r.count("batch_size", d.batch_size),
        seed: r.seed("seed", d.seed),
    };
    let init = r.choice::<TriggerInit>("init", "random").unwrap_or_default();
    let dims = (r.count("trigger_height", 16), r.count("trigger_width", 32));
    let e = EotConfig::default();
    let eot = if r.flag("eot", true) {
        EotConfig {
            noise_amplitude: r.real("eot_noise", e.noise_amplitude),
            brightness_delta: r.real("eot_brightness", e.brightness_delta),
            contrast_range: (r.real("eot_contrast_min", e.contrast_range.0), r.real("eot_contrast_max", e.contrast_range.1)),
            rotation_max: r.real("eot_rotation_deg", e.rotation_max.to_degrees()).to_radians(),
            seed: r.seed("eot_seed", e.seed),
        }
    } else {
        EotConfig::disabled()
    };
    let (mut settings, target_class) = eval_settings(&mut r);
    let gray = r.real("gray_value", DEFAULT_GRAY);
    let tap = match r.text("feature_tap", "all").as_str() {
        "all" => FeatureTap::All,
        level => FeatureTap::Level(level.to_string()),
    };
    let eval_dir = r.optional_path("eval_dataset");
    let checkpoint_every = r.count("checkpoint_every", 5);

    for p in uapgd.problems() {
        r.problem(p);
    }
    if let Err(err) = weights.validate() {
        r.problem(format!("lambda_fg/lambda_tv/eps_tv: {err}"));
    }
    if let Err(err) = eot.validate() {
        r.problem(format!("eot_*: {err}"));
    }
    if dims.0 == 0 || dims.1 == 0 {
        r.problem(format!("trigger_height/trigger_width: must be positive, got {}x{}", dims.0, dims.1));
    }
    if !(0.0..=1.0).contains(&gray) {
        r.problem(format!("gray_value: must lie in [0, 1], got {gray}"));
    }
    if checkpoint_every == 0 {
        r.problem("checkpoint_every: must be at least 1");
    }
    if let Some(dir) = eval_dir.as_ref().filter(|d| !d.exists()) {
        r.problem(format!("eval_dataset: {} does not exist", dir.display()));
    }
    let resolved = r.finish()?;

    let detector = ToyDetector::load(&detector_path)?;
    let dataset = load_images(&dataset_dir, &detector)?;
    settings.target_class = target_class.unwrap_or(dataset.target_class);
    if let FeatureTap::Level(level) = &tap {
        if !detector.level_names().contains(level) {
            return Err(CliError::Config(vec![format!(
                "feature_tap: `{level}` is not one of all, {}",
                detector.level_names().join(", ")
            )]));
        }
    }

    let checkpoint_path = out.join(CHECKPOINT_FILE);
    let state = if resume && checkpoint_path.is_file() {
        let text = fs::read_to_string(&checkpoint_path).map_err(|e| CliError::io(&checkpoint_path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| CliError::Core(e.into()))?;
        let comparable = |c: &Value| {
            let mut c = c.clone();
            if let Value::Object(map) = &mut c {
                map.remove("n_epoch");
            }
            c
        };
        if comparable(&ckpt.config) != comparable(&resolved) {
            return Err(CliError::Config(vec![format!(
                "resume: {} was written with a different configuration (only n_epoch may change)",
                checkpoint_path.display()
            )]));
        }
        println!("resuming after epoch {}", ckpt.state.epoch);
        ckpt.state
    } else {
        UapgdState::new(method, &uapgd, initial_trigger(dims, init, uapgd.seed)?)
    };
    write_config(&resolved, &out)?;

    let context = LossContext::new(&dataset, &detector, weights, eot, settings.placement, settings.target_class, tap, gray)?;
    let mut objective = DatasetObjective::new(context, uapgd.batch_size, uapgd.seed)?;

    let metrics_path = out.join(METRICS_FILE);
    let mut history = String::new();
    for epoch in 0..state.epoch {
        history += &metric_lines(&state.report, epoch);
    }
    fs::write(&metrics_path, history).map_err(|e| CliError::io(&metrics_path, e))?;
    let mut metrics: File = OpenOptions::new()
        .append(true)
        .open(&metrics_path)
        .map_err(|e| CliError::io(&metrics_path, e))?;

    let mut on_epoch = |s: &UapgdState| -> oob_core::Result<()> {
        let epoch = s.epoch - 1;
        let io = |e| oob_core::Error::Io {
            path: metrics_path.clone(),
            source: e,
        };
        metrics.write_all(metric_lines(&s.report, epoch).as_bytes()).map_err(io)?;
        let rec = s.report.epochs.last().expect("epoch recorded");
        println!(
            "epoch {:>4}  loss {:.6}  best {:.6}  eta {:.6}{}",
            rec.epoch,
            rec.loss,
            rec.l_best,
            rec.eta,
            if rec.halved { "  halved" } else { "" }
        );
        if s.epoch.is_multiple_of(checkpoint_every) || s.epoch == uapgd.n_epoch {
            let text = serde_json::to_string(&Checkpoint {
                config: resolved.clone(),
                state: s.clone(),
            })?;
            write_atomic(&checkpoint_path, &text).map_err(|e| match e {
                CliError::Io { path, source } => oob_core::Error::Io { path, source },
                other => oob_core::Error::Config(other.to_string()),
            })?;
        }
        Ok(())
    };
    let state = run_attack(&uapgd, &mut objective, state, &mut on_epoch)?;

    let trigger_path: PathBuf = out.join(TRIGGER_FILE);
    state.a_best.save_png(&trigger_path)?;
    let mut report = state.report;
    let mut entry = RunEntry {
        name,
        ..Default::default()
    };
    if let Some(dir) = eval_dir {
        let test = load_images(&dir, &detector)?;
        let saved = TriggerImage::load_png(&trigger_path)?;
        let result = evaluate_asr(&test, Some(&saved), &detector, &settings)?;
        println!("asr on {}: {:.4} over {} images", dir.display(), result.asr, result.per_image.len());
        write_records(&result.per_image, &out.join("records.jsonl"))?;
        report.asr = Some(result.asr);
        entry.eval = Some(result);
    }
    println!(
        "{method}: best loss {:.6}, halvings at {:?}, final eta {:.6}",
        report.l_best.unwrap_or(f64::NAN),
        report.halving_events,
        report.final_eta
    );
    entry.report = Some(report);
    emit_plots(std::slice::from_ref(&entry), &out.join("plots"))?;
    write_summary(&RunSummary::new(entry), &out)?;
    println!("trigger: {}", trigger_path.display());
    Ok(())
}
