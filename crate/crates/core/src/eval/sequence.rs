use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{
    load_dataset, render_sign_scene, save_dataset, Annotation, Dataset, Sample, SignPlacement, ANNOTATION_FILE,
    SYNTHETIC_CLASSES,
};
use crate::error::{Error, Result};
use crate::rng::stream_rng;

/// Sidecar holding the frame rate of a sequence directory.
pub const SEQUENCE_FILE: &str = "sequence.json";

/// Ordered frames with per-frame annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    /// Frames in playback order.
    pub frames: Dataset,
    /// Frames per second.
    pub frame_rate: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct SequenceMeta {
    frame_rate: f64,
}

impl FrameSequence {
    pub fn new(frames: Dataset, frame_rate: f64) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::argument("frame sequence is empty"));
        }
        if !(frame_rate.is_finite() && frame_rate > 0.0) {
            return Err(Error::argument(format!("frame rate must be positive, got {frame_rate}")));
        }
        Ok(Self { frames, frame_rate })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Playback length in seconds.
    pub fn duration(&self) -> f64 {
        self.len() as f64 / self.frame_rate
    }
}

/// Frames `frame_000000.png`, ... plus annotations and [`SEQUENCE_FILE`].
pub fn save_sequence(sequence: &FrameSequence, dir: &Path) -> Result<()> {
    save_dataset(&sequence.frames, dir)?;
    let path = dir.join(SEQUENCE_FILE);
    let text = serde_json::to_string_pretty(&SequenceMeta {
        frame_rate: sequence.frame_rate,
    })?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub fn load_sequence(dir: &Path) -> Result<FrameSequence> {
    let frames = load_dataset(dir, &dir.join(ANNOTATION_FILE))?;
    let path = dir.join(SEQUENCE_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: SequenceMeta = serde_json::from_str(&text)?;
    FrameSequence::new(frames, meta.frame_rate)
}

/// A fixed roadside scene in which the target sign grows linearly from
/// `scale_range.0` to `scale_range.1` of the shorter image side, drifting
/// right as if the camera were approaching it.
pub fn generate_approach_sequence(
    n_frames: usize,
    image_size: (usize, usize),
    scale_range: (f64, f64),
    seed: u64,
    frame_rate: f64,
) -> Result<FrameSequence> {
    let (h, w) = image_size;
    let (lo, hi) = scale_range;
    if n_frames < 2 {
        return Err(Error::argument(format!("an approach needs at least 2 frames, got {n_frames}")));
    }
    if !(0.0 < lo && lo < hi && hi <= 0.55) {
        return Err(Error::argument(format!("scale range ({lo}, {hi}) must satisfy 0 < lo < hi <= 0.55")));
    }
    if h < 32 || w < 32 {
        return Err(Error::argument(format!("frames need H, W >= 32, got {h}x{w}")));
    }
    let short = h.min(w) as f64;
    let samples = (0..n_frames)
        .map(|i| {
            let t = i as f64 / (n_frames - 1) as f64;
            let size = (lo + (hi - lo) * t) * short;
            let cx = (w as f64 * (0.45 + 0.15 * t)).clamp(0.5 * size + 1.0, w as f64 - 0.5 * size - 1.0);
            let y_min = ((h as f64 - 1.75 * size - 1.0) * 0.4).max(1.0);
            let sign = SignPlacement {
                center: (cx, y_min + 0.5 * size),
                size,
            };
            let mut rng = stream_rng(seed, 0);
            let (image, objects) = render_sign_scene(&mut rng, image_size, Some(sign), 1);
            Sample {
                id: format!("frame_{i:06}.png"),
                image,
                annotations: objects
                    .iter()
                    .map(|o| Annotation {
                        bbox: o.bounding_box(),
                        class_id: o.class_id,
                    })
                    .collect(),
            }
        })
        .collect();
    let frames = Dataset::new(samples, SYNTHETIC_CLASSES.iter().map(|s| s.to_string()).collect(), 0)?;
    FrameSequence::new(frames, frame_rate)
}
