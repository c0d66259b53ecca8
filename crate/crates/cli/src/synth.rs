use std::path::Path;

use oob_core::dataset::{generate_synthetic_dataset, save_dataset};
use oob_core::eval::{generate_approach_sequence, save_sequence};
use serde_json::Value;

use crate::config::{write_config, Resolver};
use crate::CliError;

pub fn run(config: Option<&Path>, overrides: Vec<(&str, Option<Value>)>) -> Result<(), CliError> {
    let mut r = Resolver::new(config, overrides)?;
    let n = r.count("n", 500);
    let size = r.count("size", 64);
    let seed = r.seed("seed", 0);
    let out = r.required_path("out");
    let sequence = r.flag("sequence", false);
    let frames = r.count("frames", 90);
    let frame_rate = r.real("frame_rate", 10.0);
    let scale_min = r.real("scale_min", 0.15);
    let scale_max = r.real("scale_max", 0.45);
    if size < 32 {
        r.problem(format!("size: images need a side of at least 32, got {size}"));
    }
    if sequence {
        if frames < 2 {
            r.problem(format!("frames: a sequence needs at least 2 frames, got {frames}"));
        }
        if frame_rate <= 0.0 {
            r.problem(format!("frame_rate: must be positive, got {frame_rate}"));
        }
        if !(0.0 < scale_min && scale_min < scale_max && scale_max <= 0.55) {
            r.problem(format!("scale_min/scale_max: need 0 < min < max <= 0.55, got {scale_min}/{scale_max}"));
        }
    }
    let resolved = r.finish()?;
    if sequence {
        let seq = generate_approach_sequence(frames, (size, size), (scale_min, scale_max), seed, frame_rate)?;
        save_sequence(&seq, &out)?;
        println!("wrote {} frames ({:.1} s) to {}", seq.len(), seq.duration(), out.display());
    } else {
        let dataset = generate_synthetic_dataset(n, (size, size), seed)?;
        save_dataset(&dataset, &out)?;
        println!("wrote {} samples to {}", dataset.len(), out.display());
    }
    write_config(&resolved, &out)
}
