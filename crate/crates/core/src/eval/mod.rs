//! Attack success metrics over image sets and frame sequences.
//!
//! An image counts as detected when, after class-aware NMS, some detection of
//! the target class scores at least the threshold. Images whose trigger cannot
//! be placed are evaluated clean, counted as detected and flagged.

mod plot;
mod report;
mod sequence;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Sample};
use crate::detector::{nms, DetectorContract, NMS_IOU};
use crate::error::{Error, Result};
use crate::losses::{composite, layout_for};
use crate::renderer::PlacementRule;
use crate::trigger::TriggerImage;

pub use plot::{confidence_plot_spec, loss_plot_spec, LinePlotSpec};
pub use report::{emit_plots, emit_report, ReportFiles, RunEntry};
pub use sequence::{generate_approach_sequence, load_sequence, save_sequence, FrameSequence, SEQUENCE_FILE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub detected: bool,
    /// Highest post-NMS target-class score, 0 when there is none.
    pub max_conf: f64,
    pub placement_failed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub asr: f64,
    pub per_image: Vec<ImageRecord>,
    pub threshold: f64,
}

impl EvalResult {
    pub fn placement_failures(&self) -> usize {
        self.per_image.iter().filter(|r| r.placement_failed).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceResult {
    /// Per-frame max target-class score.
    pub series: Vec<f64>,
    pub undetected_proportion: f64,
    pub frame_rate: f64,
    pub records: Vec<ImageRecord>,
}

/// Evaluation settings shared by image sets and sequences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSettings {
    pub placement: PlacementRule,
    pub target_class: usize,
    pub threshold: f64,
    /// Worker threads; 1 evaluates inline.
    pub workers: usize,
}

impl EvalSettings {
    pub fn new(placement: PlacementRule, target_class: usize, threshold: f64) -> Self {
        Self {
            placement,
            target_class,
            threshold,
            workers: 1,
        }
    }
}

fn evaluate_sample<D: DetectorContract>(
    sample: &Sample,
    trigger: Option<&TriggerImage>,
    detector: &D,
    settings: &EvalSettings,
) -> Result<ImageRecord> {
    let mut placement_failed = false;
    let image = match trigger {
        None => sample.image.clone(),
        Some(t) => match layout_for(sample, settings.target_class, &settings.placement, t.dims()) {
            Ok(layout) => composite(&sample.image, t.pixels().view(), &layout, 0.0).0,
            Err(Error::Placement(_)) => {
                placement_failed = true;
                sample.image.clone()
            }
            Err(e) => return Err(e),
        },
    };
    let kept = nms(&detector.detect(&image)?, NMS_IOU);
    let target: Vec<f64> = kept
        .iter()
        .filter(|d| d.class_id == settings.target_class)
        .map(|d| d.score())
        .collect();
    let max_conf = target.iter().copied().fold(0.0, f64::max);
    let detected = placement_failed || target.iter().any(|s| *s >= settings.threshold);
    Ok(ImageRecord {
        id: sample.id.clone(),
        detected,
        max_conf,
        placement_failed,
    })
}

fn evaluate_samples<D: DetectorContract>(
    samples: &[&Sample],
    trigger: Option<&TriggerImage>,
    detector: &D,
    settings: &EvalSettings,
) -> Result<Vec<ImageRecord>> {
    if !(0.0..=1.0).contains(&settings.threshold) {
        return Err(Error::argument(format!("threshold {} outside [0, 1]", settings.threshold)));
    }
    let run = || -> Result<Vec<ImageRecord>> {
        samples
            .par_iter()
            .map(|s| evaluate_sample(s, trigger, detector, settings))
            .collect()
    };
    if settings.workers <= 1 {
        samples.iter().map(|s| evaluate_sample(s, trigger, detector, settings)).collect()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(settings.workers)
            .build()
            .map_err(|e| Error::Config(format!("cannot start {} workers: {e}", settings.workers)))?
            .install(run)
    }
}

/// Fraction of target-bearing images on which the target goes undetected.
/// Images without a target object are not scored.
pub fn evaluate_asr<D: DetectorContract>(
    dataset: &Dataset,
    trigger: Option<&TriggerImage>,
    detector: &D,
    settings: &EvalSettings,
) -> Result<EvalResult> {
    let samples: Vec<&Sample> = dataset
        .samples
        .iter()
        .filter(|s| s.has_class(settings.target_class))
        .collect();
    let per_image = evaluate_samples(&samples, trigger, detector, settings)?;
    let asr = if per_image.is_empty() {
        0.0
    } else {
        per_image.iter().filter(|r| !r.detected).count() as f64 / per_image.len() as f64
    };
    Ok(EvalResult {
        asr,
        per_image,
        threshold: settings.threshold,
    })
}

/// Per-frame confidence series and the fraction of frames left undetected.
pub fn evaluate_sequence<D: DetectorContract>(
    sequence: &FrameSequence,
    trigger: Option<&TriggerImage>,
    detector: &D,
    settings: &EvalSettings,
) -> Result<SequenceResult> {
    let frames: Vec<&Sample> = sequence.frames.samples.iter().collect();
    let records = evaluate_samples(&frames, trigger, detector, settings)?;
    let undetected = records.iter().filter(|r| !r.detected).count();
    Ok(SequenceResult {
        series: records.iter().map(|r| r.max_conf).collect(),
        undetected_proportion: undetected as f64 / records.len() as f64,
        frame_rate: sequence.frame_rate,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic_dataset, BoundingBox, Image};
    use crate::detector::{ConfidenceSeed, Detection, FeatureMap, ForwardOutput, ToyDetector};
    use ndarray::Array3;

    /// Reports a fixed candidate list regardless of input.
    struct Fixed(Vec<Detection>);

    impl DetectorContract for Fixed {
        type Pass = ();

        fn class_count(&self) -> usize {
            4
        }

        fn input_size(&self) -> (usize, usize) {
            (64, 64)
        }

        fn level_names(&self) -> Vec<String> {
            vec!["p".into()]
        }

        fn differentiable(&self) -> bool {
            false
        }

        fn forward(&self, _: &Image) -> Result<ForwardOutput<()>> {
            Ok(ForwardOutput {
                detections: self.0.clone(),
                features: FeatureMap::new(vec![Array3::zeros((1, 1, 1))], vec!["p".into()])?,
                pass: (),
            })
        }

        fn input_gradient(&self, _: &(), _: &[ConfidenceSeed], _: Option<&FeatureMap>) -> Result<Image> {
            Err(Error::argument("not differentiable"))
        }
    }

    fn candidate(class_id: usize, score: f64) -> Detection {
        Detection {
            bbox: BoundingBox::new(1.0, 1.0, 9.0, 9.0).unwrap(),
            class_id,
            conf_coor: score,
            conf_cls: 1.0,
            cell: crate::detector::CellRef { level: 0, row: 0, col: 0 },
        }
    }

    fn settings(threshold: f64) -> EvalSettings {
        EvalSettings::new(PlacementRule::default(), 0, threshold)
    }

    #[test]
    fn silent_detector_gives_full_asr() {
        let ds = generate_synthetic_dataset(5, (64, 64), 1).unwrap();
        let r = evaluate_asr(&ds, None, &Fixed(vec![]), &settings(0.5)).unwrap();
        assert_eq!(r.asr, 1.0);
        assert_eq!(r.per_image.len(), 5);
    }

    #[test]
    fn zero_threshold_detects_everything() {
        let ds = generate_synthetic_dataset(5, (64, 64), 1).unwrap();
        let r = evaluate_asr(&ds, None, &Fixed(vec![candidate(0, 0.01)]), &settings(0.0)).unwrap();
        assert_eq!(r.asr, 0.0);
        let other = evaluate_asr(&ds, None, &Fixed(vec![candidate(2, 0.9)]), &settings(0.0)).unwrap();
        assert_eq!(other.asr, 1.0);
    }

    #[test]
    fn threshold_is_monotone_and_workers_agree() {
        let ds = generate_synthetic_dataset(12, (64, 64), 2).unwrap();
        let det = ToyDetector::new(ds.class_names.clone(), (64, 64), 3).unwrap();
        let trigger = TriggerImage::random((8, 16), 0).unwrap();
        let mut last = -1.0;
        for t in [0.0, 0.001, 0.002, 0.004, 0.01, 0.5, 1.0] {
            let r = evaluate_asr(&ds, Some(&trigger), &det, &settings(t)).unwrap();
            assert!(r.asr >= last && (0.0..=1.0).contains(&r.asr));
            last = r.asr;
        }
        let mut parallel = settings(0.004);
        parallel.workers = 3;
        assert_eq!(
            evaluate_asr(&ds, Some(&trigger), &det, &settings(0.004)).unwrap(),
            evaluate_asr(&ds, Some(&trigger), &det, &parallel).unwrap()
        );
    }

    #[test]
    fn placement_failure_counts_as_detected() {
        let mut ds = generate_synthetic_dataset(2, (64, 64), 3).unwrap();
        ds.samples[0].annotations[0].bbox = BoundingBox::new(0.0, 0.0, 64.0, 64.0).unwrap();
        let trigger = TriggerImage::filled((8, 16), 0.5).unwrap();
        let r = evaluate_asr(&ds, Some(&trigger), &Fixed(vec![]), &settings(0.5)).unwrap();
        assert!(r.per_image[0].detected && r.per_image[0].placement_failed);
        assert_eq!(r.asr, 0.5);
        assert_eq!(r.placement_failures(), 1);
    }

    #[test]
    fn single_frame_sequence_matches_asr() {
        let det = ToyDetector::new(crate::dataset::SYNTHETIC_CLASSES.iter().map(|s| s.to_string()).collect(), (64, 64), 5).unwrap();
        let seq = generate_approach_sequence(3, (64, 64), (0.2, 0.3), 4, 10.0).unwrap();
        let first = FrameSequence::new(
            Dataset::new(vec![seq.frames.samples[0].clone()], seq.frames.class_names.clone(), 0).unwrap(),
            10.0,
        )
        .unwrap();
        for t in [0.0, 0.003, 0.5] {
            let s = evaluate_sequence(&first, None, &det, &settings(t)).unwrap();
            let a = evaluate_asr(&first.frames, None, &det, &settings(t)).unwrap();
            assert_eq!(s.undetected_proportion, if a.per_image[0].detected { 0.0 } else { 1.0 });
            assert_eq!(s.series, vec![a.per_image[0].max_conf]);
        }
        let all = evaluate_sequence(&seq, None, &Fixed(vec![]), &settings(0.5)).unwrap();
        assert_eq!(all.undetected_proportion, 1.0);
        assert_eq!(all.series.len(), 3);
    }
}
