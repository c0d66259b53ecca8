//! Attack objective terms and the per-batch composite pipeline.
//!
//! `l_all = l_det + λ_fg · l_fg + λ_tv · l_tv`, where `l_det` and `l_fg` are
//! batch means over the images that could host a trigger and `l_tv` is a
//! property of the trigger alone.

use ndarray::{Array3, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::augment::{apply_eot, sample_eot, EotConfig, EotDraw};
use crate::dataset::{make_masked_image, Dataset, Image, Sample};
use crate::detector::{ConfidenceSeed, DetectorContract, Detection, FeatureMap};
use crate::error::{Error, Result};
use crate::renderer::{affine_params, placement, render_with_tape, AffineParams, PlacementRule, RenderTape};
use crate::trigger::TriggerImage;

pub const DEFAULT_EPS_TV: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_fg: f64,
    pub lambda_tv: f64,
    /// Added under the square root of every TV term.
    #[serde(default = "default_eps_tv")]
    pub eps_tv: f64,
}

fn default_eps_tv() -> f64 {
    DEFAULT_EPS_TV
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_fg: 0.0,
            lambda_tv: 0.0,
            eps_tv: DEFAULT_EPS_TV,
        }
    }
}

impl LossWeights {
    pub fn new(lambda_fg: f64, lambda_tv: f64) -> Result<Self> {
        let weights = Self {
            lambda_fg,
            lambda_tv,
            eps_tv: DEFAULT_EPS_TV,
        };
        weights.validate()?;
        Ok(weights)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = [self.lambda_fg, self.lambda_tv, self.eps_tv].iter().all(|v| v.is_finite() && *v >= 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("loss weights must be finite and non-negative, got {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_det: f64,
    pub l_fg: f64,
    pub l_tv: f64,
    pub l_all: f64,
    /// Images contributing to the batch means.
    pub evaluated: usize,
    /// Images dropped because no trigger region fits next to a target box.
    pub skipped: usize,
}

impl LossBreakdown {
    pub fn combine(l_det: f64, l_fg: f64, l_tv: f64, weights: &LossWeights) -> Self {
        Self {
            l_det,
            l_fg,
            l_tv,
            l_all: l_det + weights.lambda_fg * l_fg + weights.lambda_tv * l_tv,
            evaluated: 0,
            skipped: 0,
        }
    }
}

/// Highest-scoring candidate of `target_class`, if any.
pub fn strongest_candidate(candidates: &[Detection], target_class: usize) -> Option<&Detection> {
    candidates
        .iter()
        .filter(|d| d.class_id == target_class)
        .max_by(|a, b| a.score().total_cmp(&b.score()))
}

/// Max target-class confidence product, 0 when there is no such candidate.
pub fn l_det(candidates: &[Detection], target_class: usize) -> f64 {
    strongest_candidate(candidates, target_class).map_or(0.0, Detection::score)
}

/// Batch mean of per-image `l_det` values.
pub fn l_det_batch(per_image: &[f64]) -> f64 {
    if per_image.is_empty() {
        0.0
    } else {
        per_image.iter().sum::<f64>() / per_image.len() as f64
    }
}

/// Which neck levels feature guidance compares.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureTap {
    #[default]
    All,
    Level(String),
}

impl FeatureTap {
    fn selects(&self, name: &str) -> bool {
        match self {
            FeatureTap::All => true,
            FeatureTap::Level(level) => level == name,
        }
    }

    fn check(&self, features: &FeatureMap) -> Result<()> {
        match self {
            FeatureTap::Level(level) if features.level_index(level).is_none() => Err(Error::Config(format!(
                "feature level `{level}` not among {:?}",
                features.level_names
            ))),
            _ => Ok(()),
        }
    }
}

/// Sum over levels of `||adv - mask||_2 / sqrt(len)`.
pub fn l_fg(adv: &FeatureMap, mask: &FeatureMap) -> Result<f64> {
    Ok(l_fg_with_gradient(adv, mask, &FeatureTap::All)?.0)
}

/// `l_fg` over the selected levels and its gradient w.r.t. `adv`.
///
/// Where a level's difference is exactly zero its gradient is taken as zero.
pub fn l_fg_with_gradient(adv: &FeatureMap, mask: &FeatureMap, tap: &FeatureTap) -> Result<(f64, FeatureMap)> {
    if adv.levels.len() != mask.levels.len() {
        return Err(Error::argument(format!(
            "feature maps have {} and {} levels",
            adv.levels.len(),
            mask.levels.len()
        )));
    }
    tap.check(adv)?;
    let mut total = 0.0;
    let mut grad = adv.zeros_like();
    for (i, (a, m)) in adv.levels.iter().zip(&mask.levels).enumerate() {
        if a.dim() != m.dim() {
            return Err(Error::argument(format!(
                "level {} shapes differ: {:?} vs {:?}",
                adv.level_names[i],
                a.dim(),
                m.dim()
            )));
        }
        if !tap.selects(&adv.level_names[i]) {
            continue;
        }
        let diff = a - m;
        let norm = diff.iter().map(|d| d * d).sum::<f64>().sqrt();
        let scale = (a.len() as f64).sqrt();
        total += norm / scale;
        if norm > 0.0 {
            grad.levels[i] = diff / (norm * scale);
        }
    }
    Ok((total, grad))
}

/// Total variation of a `C x U x V` array, differences beyond the edge taken
/// as zero.
pub fn l_tv(trigger: ArrayView3<f64>, eps_tv: f64) -> f64 {
    l_tv_with_gradient(trigger, eps_tv).0
}

pub fn l_tv_with_gradient(trigger: ArrayView3<f64>, eps_tv: f64) -> (f64, Array3<f64>) {
    let (c, u, v) = trigger.dim();
    let mut grad = Array3::zeros((c, u, v));
    let mut total = 0.0;
    for ch in 0..c {
        for i in 0..u {
            for j in 0..v {
                let here = trigger[[ch, i, j]];
                let down = if i + 1 < u { here - trigger[[ch, i + 1, j]] } else { 0.0 };
                let right = if j + 1 < v { here - trigger[[ch, i, j + 1]] } else { 0.0 };
                let term = (down * down + right * right + eps_tv).sqrt();
                total += term;
                if term > 0.0 {
                    grad[[ch, i, j]] += (down + right) / term;
                    if i + 1 < u {
                        grad[[ch, i + 1, j]] -= down / term;
                    }
                    if j + 1 < v {
                        grad[[ch, i, j + 1]] -= right / term;
                    }
                }
            }
        }
    }
    (total, grad)
}

/// Neck features of each sample's masked image, computed once.
#[derive(Debug, Clone)]
pub struct MaskFeatureCache {
    features: Vec<Option<FeatureMap>>,
}

impl MaskFeatureCache {
    /// Samples without a target object get no entry.
    pub fn build<D: DetectorContract>(dataset: &Dataset, detector: &D, target_class: usize, gray_value: f64) -> Result<Self> {
        let features = dataset
            .samples
            .iter()
            .map(|sample| {
                if !sample.has_class(target_class) {
                    return Ok(None);
                }
                let masked = make_masked_image(sample, target_class, gray_value)?;
                detector.features(&masked).map(Some)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { features })
    }

    pub fn get(&self, index: usize) -> Option<&FeatureMap> {
        self.features.get(index).and_then(Option::as_ref)
    }
}

/// Loss terms and trigger gradient for one batch.
#[derive(Debug, Clone)]
pub struct BatchEvaluation {
    pub breakdown: LossBreakdown,
    pub gradient: Array3<f64>,
}

/// Fixed ingredients of the attack objective on a dataset.
pub struct LossContext<'a, D: DetectorContract> {
    pub dataset: &'a Dataset,
    pub detector: &'a D,
    pub weights: LossWeights,
    pub eot: EotConfig,
    pub placement: PlacementRule,
    pub target_class: usize,
    pub feature_tap: FeatureTap,
    include_detection: bool,
    mask_features: Option<MaskFeatureCache>,
}

/// Where and how the trigger lands on one image.
pub struct TriggerLayout {
    pub params: Vec<AffineParams>,
}

/// Regions for every target box of `sample`, or a placement error.
pub fn layout_for(sample: &Sample, target_class: usize, rule: &PlacementRule, trigger_dims: (usize, usize)) -> Result<TriggerLayout> {
    let size = (sample.height(), sample.width());
    let params = sample
        .boxes_of(target_class)
        .map(|bbox| {
            let region = placement(bbox, rule, trigger_dims, size)?;
            affine_params(&region, trigger_dims, size)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TriggerLayout { params })
}

/// Renders `pixels` at every placement of `layout`, last one on top.
pub fn composite(image: &Image, pixels: ArrayView3<f64>, layout: &TriggerLayout, rotation: f64) -> (Image, Vec<RenderTape>) {
    let mut out = image.clone();
    let mut tapes = Vec::with_capacity(layout.params.len());
    for params in &layout.params {
        let (next, tape) = render_with_tape(&out, pixels, &params.with_rotation(rotation));
        out = next;
        tapes.push(tape);
    }
    (out, tapes)
}

impl<'a, D: DetectorContract> LossContext<'a, D> {
    /// Builds the masked-feature cache when feature guidance is active.
    pub fn new(
        dataset: &'a Dataset,
        detector: &'a D,
        weights: LossWeights,
        eot: EotConfig,
        placement: PlacementRule,
        target_class: usize,
        feature_tap: FeatureTap,
        gray_value: f64,
    ) -> Result<Self> {
        weights.validate()?;
        eot.validate()?;
        if target_class >= detector.class_count() {
            return Err(Error::Config(format!("target class {target_class} unknown to the detector")));
        }
        if !detector.differentiable() {
            return Err(Error::Config("attack needs a differentiable detector".into()));
        }
        let mask_features = if weights.lambda_fg > 0.0 {
            let cache = MaskFeatureCache::build(dataset, detector, target_class, gray_value)?;
            if let Some(first) = cache.features.iter().flatten().next() {
                feature_tap.check(first)?;
            }
            Some(cache)
        } else {
            None
        };
        Ok(Self {
            dataset,
            detector,
            weights,
            eot,
            placement,
            target_class,
            feature_tap,
            include_detection: true,
            mask_features,
        })
    }

    /// Drops `l_det` from the objective (reported as zero).
    pub fn without_detection_term(mut self) -> Self {
        self.include_detection = false;
        self
    }

    /// Loss and gradient on the samples at `batch`.
    ///
    /// Sample `i` uses EOT draw number `eot_round * len(dataset) + i`.
    pub fn evaluate(&self, batch: &[usize], trigger: &TriggerImage, eot_round: u64) -> Result<BatchEvaluation> {
        let dims = trigger.dims();
        let mut jobs = Vec::with_capacity(batch.len());
        let mut skipped = 0;
        for &index in batch {
            let sample = self
                .dataset
                .samples
                .get(index)
                .ok_or_else(|| Error::argument(format!("sample index {index} out of range")))?;
            if !sample.has_class(self.target_class) {
                return Err(Error::Validation {
                    id: sample.id.clone(),
                    message: format!("attack batch image has no object of class {}", self.target_class),
                });
            }
            match layout_for(sample, self.target_class, &self.placement, dims) {
                Ok(layout) => jobs.push((index, sample, layout)),
                Err(Error::Placement(_)) => skipped += 1,
                Err(e) => return Err(e),
            }
        }
        let n = jobs.len();
        let mut gradient = Array3::zeros(trigger.pixels().dim());
        let (mut det_sum, mut fg_sum) = (0.0, 0.0);
        for (index, sample, layout) in jobs {
            let draw = if self.eot == EotConfig::disabled() {
                EotDraw::IDENTITY
            } else {
                sample_eot(&self.eot, eot_round * self.dataset.len() as u64 + index as u64)
            };
            let eot = apply_eot(trigger.pixels().view(), &draw);
            let (adv, tapes) = composite(&sample.image, eot.pixels.view(), &layout, draw.rotation);
            let out = self.detector.forward(&adv)?;
            let scale = 1.0 / n as f64;
            let mut seeds = Vec::new();
            if self.include_detection {
                if let Some(best) = strongest_candidate(&out.detections, self.target_class) {
                    det_sum += best.score();
                    seeds.push(ConfidenceSeed {
                        cell: best.cell,
                        class_id: best.class_id,
                        d_conf_coor: best.conf_cls * scale,
                        d_conf_cls: best.conf_coor * scale,
                    });
                }
            }
            let mut feature_grads = None;
            if let Some(cache) = &self.mask_features {
                let mask = cache.get(index).expect("target samples are cached");
                let (value, mut grad) = l_fg_with_gradient(&out.features, mask, &self.feature_tap)?;
                fg_sum += value;
                let factor = self.weights.lambda_fg * scale;
                for level in &mut grad.levels {
                    *level *= factor;
                }
                feature_grads = Some(grad);
            }
            if seeds.is_empty() && feature_grads.is_none() {
                continue;
            }
            let mut image_grad = self.detector.input_gradient(&out.pass, &seeds, feature_grads.as_ref())?;
            let mut eot_grad = Array3::zeros(gradient.dim());
            for tape in tapes.iter().rev() {
                tape.backward(&mut image_grad, &mut eot_grad);
            }
            gradient += &eot.backward(&eot_grad);
        }
        let (l_det, l_fg) = if n == 0 { (0.0, 0.0) } else { (det_sum / n as f64, fg_sum / n as f64) };
        let l_tv = if self.weights.lambda_tv > 0.0 {
            let (value, grad) = l_tv_with_gradient(trigger.pixels().view(), self.weights.eps_tv);
            gradient.scaled_add(self.weights.lambda_tv, &grad);
            value
        } else {
            0.0
        };
        let mut breakdown = LossBreakdown::combine(l_det, l_fg, l_tv, &self.weights);
        breakdown.evaluated = n;
        breakdown.skipped = skipped;
        Ok(BatchEvaluation { breakdown, gradient })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic_dataset, BoundingBox};
    use crate::detector::{CellRef, ToyDetector};
    use crate::rng::stream_rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn cand(class_id: usize, score: f64) -> Detection {
        Detection {
            bbox: BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap(),
            class_id,
            conf_coor: score,
            conf_cls: 1.0,
            cell: CellRef { level: 0, row: 0, col: 0 },
        }
    }

    #[test]
    fn l_det_examples() {
        assert_eq!(l_det(&[cand(1, 0.9)], 0), 0.0);
        assert_eq!(l_det(&[cand(0, 0.2), cand(0, 0.9), cand(0, 0.4), cand(1, 0.95)], 0), 0.9);
        assert!((l_det_batch(&[0.8, 0.4]) - 0.6).abs() < 1e-15);
    }

    fn fmap(levels: Vec<Array3<f64>>) -> FeatureMap {
        let names = (0..levels.len()).map(|i| format!("l{i}")).collect();
        FeatureMap::new(levels, names).unwrap()
    }

    #[test]
    fn l_fg_examples() {
        let mut rng = stream_rng(1, 1);
        let a = fmap(vec![
            Array3::from_shape_simple_fn((2, 3, 3), || rng.gen::<f64>()),
            Array3::from_shape_simple_fn((4, 2, 1), || rng.gen::<f64>()),
        ]);
        assert_eq!(l_fg(&a, &a).unwrap(), 0.0);
        let mut b = a.clone();
        b.levels[1] += 1.0;
        assert!((l_fg(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(l_fg(&a, &b).unwrap(), l_fg(&b, &a).unwrap());
        let c = fmap(vec![Array3::zeros((2, 3, 3)), Array3::zeros((4, 2, 2))]);
        assert!(matches!(l_fg(&a, &c), Err(Error::Argument(_))));
        let only = FeatureTap::Level("l1".into());
        let (v, g) = l_fg_with_gradient(&a, &b, &only).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
        assert!(g.levels[0].iter().all(|x| *x == 0.0));
        assert!(l_fg_with_gradient(&a, &b, &FeatureTap::Level("p9".into())).is_err());
    }

    #[test]
    fn l_tv_examples() {
        assert_eq!(l_tv(Array3::from_elem((3, 4, 4), 0.3).view(), 0.0), 0.0);
        let pair = Array3::from_shape_vec((1, 1, 2), vec![0.0, 1.0]).unwrap();
        assert_eq!(l_tv(pair.view(), 0.0), 1.0);
    }

    #[test]
    fn l_tv_gradient_matches_finite_differences() {
        let mut rng = stream_rng(2, 2);
        let t = Array3::from_shape_simple_fn((3, 5, 4), || rng.gen::<f64>());
        let (_, g) = l_tv_with_gradient(t.view(), DEFAULT_EPS_TV);
        let h = 1e-6;
        for idx in ndarray::indices(t.dim()) {
            let mut p = t.clone();
            p[idx] += h;
            let mut m = t.clone();
            m[idx] -= h;
            let fd = (l_tv(p.view(), DEFAULT_EPS_TV) - l_tv(m.view(), DEFAULT_EPS_TV)) / (2.0 * h);
            assert!((fd - g[idx]).abs() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn l_tv_is_positively_homogeneous(values in prop::collection::vec(0.0f64..1.0, 12), c in 0.0f64..4.0) {
            let t = Array3::from_shape_vec((1, 3, 4), values).unwrap();
            let scaled = t.mapv(|x| c * x);
            let (a, b) = (l_tv(scaled.view(), 0.0), c * l_tv(t.view(), 0.0));
            prop_assert!((a - b).abs() <= 1e-12 * b.max(1.0));
            prop_assert!(a >= 0.0);
        }
    }

    fn toy_setup() -> (Dataset, ToyDetector) {
        let ds = generate_synthetic_dataset(4, (32, 32), 21).unwrap();
        let det = ToyDetector::new(ds.class_names.clone(), (32, 32), 2).unwrap();
        (ds, det)
    }

    #[test]
    fn zero_weights_reduce_to_detection_loss() {
        let (ds, det) = toy_setup();
        let ctx = LossContext::new(&ds, &det, LossWeights::default(), EotConfig::disabled(), PlacementRule::default(), 0, FeatureTap::All, 0.5).unwrap();
        let trigger = TriggerImage::random((4, 8), 3).unwrap();
        let eval = ctx.evaluate(&[0, 1, 2, 3], &trigger, 0).unwrap();
        let b = eval.breakdown;
        assert_eq!(b.l_all, b.l_det);
        assert_eq!(b.evaluated + b.skipped, 4);
        assert!(b.l_det > 0.0);
    }

    #[test]
    fn breakdown_identity_and_tv_additivity() {
        let (ds, det) = toy_setup();
        let weights = LossWeights::new(0.5, 0.25).unwrap();
        let ctx = LossContext::new(&ds, &det, weights, EotConfig::default(), PlacementRule::default(), 0, FeatureTap::All, 0.5).unwrap();
        let trigger = TriggerImage::random((4, 8), 4).unwrap();
        let b = ctx.evaluate(&[0, 1], &trigger, 3).unwrap().breakdown;
        assert_eq!(b.l_all, b.l_det + 0.5 * b.l_fg + 0.25 * b.l_tv);
        assert!(b.l_det >= 0.0 && b.l_fg >= 0.0 && b.l_tv >= 0.0);
        assert_eq!(b.l_tv, l_tv(trigger.pixels().view(), DEFAULT_EPS_TV));
    }

    #[test]
    fn mask_features_against_themselves_vanish() {
        let (ds, det) = toy_setup();
        let cache = MaskFeatureCache::build(&ds, &det, 0, 0.5).unwrap();
        let m = cache.get(0).unwrap();
        assert_eq!(l_fg(m, m).unwrap(), 0.0);
    }

    #[test]
    fn placement_failures_are_skipped() {
        let (mut ds, det) = toy_setup();
        ds.samples[1].annotations[0].bbox = BoundingBox::new(0.0, 0.0, 32.0, 32.0).unwrap();
        let ctx = LossContext::new(&ds, &det, LossWeights::default(), EotConfig::disabled(), PlacementRule::default(), 0, FeatureTap::All, 0.5).unwrap();
        let b = ctx.evaluate(&[0, 1], &TriggerImage::filled((4, 8), 0.5).unwrap(), 0).unwrap().breakdown;
        assert_eq!((b.evaluated, b.skipped), (1, 1));
    }
}
