//! Supervised training of the toy detector.
//!
//! Every object is assigned to the cell containing its center at both levels.
//! Objectness uses logistic loss with positives and negatives averaged
//! separately, classes use cross-entropy and boxes a squared error on the
//! sigmoid outputs, all on positive cells only.

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use super::nn::{sigmoid, softmax, Adam};
use super::toy::{ToyDetector, BOX_SPAN, HEAD_PREFIX, LEVEL_STRIDES};
use super::{max_class_score, DetectorContract, DETECTION_THRESHOLD};
use crate::dataset::{epoch_batches, Dataset, Sample};
use crate::error::{Error, Result};

/// Training runs on at least this many samples.
pub const MIN_TRAINING_SAMPLES: usize = 50;
const BOX_WEIGHT: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak Adam step; decays on a cosine to a tenth of this by the last epoch.
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 16,
            learning_rate: 3e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    /// Mean per-sample training loss of each epoch.
    pub epoch_losses: Vec<f64>,
    /// Fraction of target-bearing training samples detected after training.
    pub clean_detection_rate: f64,
}

pub fn train_toy_detector(dataset: &Dataset, epochs: usize, seed: u64) -> Result<(ToyDetector, TrainMetrics)> {
    train_toy_detector_with(
        dataset,
        &TrainConfig {
            epochs,
            seed,
            ..TrainConfig::default()
        },
    )
}

pub fn train_toy_detector_with(dataset: &Dataset, config: &TrainConfig) -> Result<(ToyDetector, TrainMetrics)> {
    if dataset.len() < MIN_TRAINING_SAMPLES {
        return Err(Error::Config(format!(
            "training needs at least {MIN_TRAINING_SAMPLES} samples, got {}",
            dataset.len()
        )));
    }
    if config.batch_size == 0 || !(config.learning_rate > 0.0) {
        return Err(Error::Config(format!("invalid training config {config:?}")));
    }
    let input_size = dataset.image_size().expect("non-empty");
    let mut detector = ToyDetector::new(dataset.class_names.clone(), input_size, config.seed)?;
    let mut adam = Adam::new(config.learning_rate, &detector.parameter_sizes());
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let progress = epoch as f64 / config.epochs.max(1) as f64;
        adam.learning_rate = config.learning_rate * (0.1 + 0.45 * (1.0 + (std::f64::consts::PI * progress).cos()));
        let mut total = 0.0;
        for batch in epoch_batches(dataset.len(), config.batch_size, config.seed, epoch as u64)? {
            let mut acc: Option<Vec<(Array2<f64>, Array1<f64>)>> = None;
            let scale = 1.0 / batch.len() as f64;
            for &i in &batch {
                let sample = &dataset.samples[i];
                let (_, pass) = detector.run(&sample.image);
                let (loss, d_heads) = sample_loss(&pass.heads, sample, detector.class_count());
                total += loss;
                let (_, grads) = detector.backward(&pass, &d_heads, None, true);
                let grads = grads.expect("requested");
                match acc.as_mut() {
                    None => acc = Some(grads.into_iter().map(|(w, b)| (w * scale, b * scale)).collect()),
                    Some(acc) => {
                        for ((aw, ab), (w, b)) in acc.iter_mut().zip(grads) {
                            aw.scaled_add(scale, &w);
                            ab.scaled_add(scale, &b);
                        }
                    }
                }
            }
            let acc = acc.expect("batches are non-empty");
            let grad_slices: Vec<&[f64]> = acc
                .iter()
                .flat_map(|(w, b)| [w.as_slice().expect("contiguous"), b.as_slice().expect("contiguous")])
                .collect();
            let mut params: Vec<&mut [f64]> = detector
                .layers
                .iter_mut()
                .flat_map(|l| [l.weight.as_slice_mut().expect("contiguous"), l.bias.as_slice_mut().expect("contiguous")])
                .collect();
            adam.update(&mut params, &grad_slices);
        }
        let mean = total / dataset.len() as f64;
        if !mean.is_finite() {
            return Err(Error::NonFinite { epoch, batch: 0 });
        }
        epoch_losses.push(mean);
    }
    let clean_detection_rate = clean_detection_rate(&detector, dataset)?;
    Ok((
        detector,
        TrainMetrics {
            epoch_losses,
            clean_detection_rate,
        },
    ))
}

/// Fraction of samples carrying the target class on which the detector
/// reports a target detection scoring at least [`DETECTION_THRESHOLD`].
pub fn clean_detection_rate<D: DetectorContract>(detector: &D, dataset: &Dataset) -> Result<f64> {
    let samples = dataset.with_target();
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for sample in &samples {
        if max_class_score(&detector.detect(&sample.image)?, dataset.target_class) >= DETECTION_THRESHOLD {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}

struct CellTarget {
    row: usize,
    col: usize,
    class_id: usize,
    /// Targets for `σ(tx), σ(ty), σ(tw), σ(th)`.
    box_params: [f64; 4],
}

fn assign_targets(sample: &Sample, level: usize, grid: (usize, usize)) -> Vec<CellTarget> {
    let stride = LEVEL_STRIDES[level] as f64;
    let mut order: Vec<_> = sample.annotations.iter().collect();
    order.sort_by(|a, b| b.bbox.area().total_cmp(&a.bbox.area()));
    let mut out: Vec<CellTarget> = Vec::new();
    for ann in order {
        let (cx, cy) = ann.bbox.center();
        let row = ((cy / stride) as usize).min(grid.0 - 1);
        let col = ((cx / stride) as usize).min(grid.1 - 1);
        if out.iter().any(|t| t.row == row && t.col == col) {
            continue;
        }
        let span = BOX_SPAN * stride;
        out.push(CellTarget {
            row,
            col,
            class_id: ann.class_id,
            box_params: [
                (cx / stride - col as f64).clamp(0.0, 1.0),
                (cy / stride - row as f64).clamp(0.0, 1.0),
                (ann.bbox.width() / span).min(1.0),
                (ann.bbox.height() / span).min(1.0),
            ],
        });
    }
    out
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Loss of one sample and its gradient w.r.t. the raw head outputs.
fn sample_loss(heads: &[Array3<f64>; 2], sample: &Sample, class_count: usize) -> (f64, [Array3<f64>; 2]) {
    let mut grads = [Array3::zeros(heads[0].dim()), Array3::zeros(heads[1].dim())];
    let mut loss = 0.0;
    for (level, raw) in heads.iter().enumerate() {
        let (_, gh, gw) = raw.dim();
        let targets = assign_targets(sample, level, (gh, gw));
        let grad = &mut grads[level];
        let n_pos = targets.len().max(1) as f64;
        let n_neg = (gh * gw - targets.len()).max(1) as f64;
        for row in 0..gh {
            for col in 0..gw {
                let o = raw[[4, row, col]];
                let positive = targets.iter().any(|t| t.row == row && t.col == col);
                let (t, norm) = if positive { (1.0, n_pos) } else { (0.0, n_neg) };
                loss += (softplus(o) - t * o) / norm;
                grad[[4, row, col]] = (sigmoid(o) - t) / norm;
            }
        }
        for t in &targets {
            let logits: Vec<f64> = (0..class_count).map(|c| raw[[HEAD_PREFIX + c, t.row, t.col]]).collect();
            let probs = softmax(&logits);
            loss -= probs[t.class_id].max(1e-300).ln() / n_pos;
            for (c, p) in probs.iter().enumerate() {
                let onehot = if c == t.class_id { 1.0 } else { 0.0 };
                grad[[HEAD_PREFIX + c, t.row, t.col]] = (p - onehot) / n_pos;
            }
            for (k, target) in t.box_params.iter().enumerate() {
                let s = sigmoid(raw[[k, t.row, t.col]]);
                loss += BOX_WEIGHT * (s - target).powi(2) / n_pos;
                grad[[k, t.row, t.col]] = BOX_WEIGHT * 2.0 * (s - target) * s * (1.0 - s) / n_pos;
            }
        }
    }
    (loss, grads)
}
