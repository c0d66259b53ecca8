//! Four stride-2 backbone stages, a two-level top-down neck and a dense
//! anchor-free head per level.
//!
//! Each head cell predicts `[tx, ty, tw, th, obj, logits...]`. The box is
//! decoded as `cx = (col + σ(tx)) · stride`, `w = 4 · stride · σ(tw)` (same
//! for y/h), objectness is `σ(obj)` and the class distribution is a softmax.

use ndarray::{s, Array1, Array2, Array3};

use super::nn::{sigmoid, silu, silu_backward, softmax, upsample2, upsample2_backward, Conv2d};
use super::{check_image, CellRef, ConfidenceSeed, DetectorContract, Detection, FeatureMap, ForwardOutput, DEFAULT_CANDIDATE_FLOOR};
use crate::dataset::{BoundingBox, Image};
use crate::error::{Error, Result};
use crate::rng::stream_rng;

/// Neck level names, finest first.
pub const TOY_LEVELS: [&str; 2] = ["p3", "p4"];
pub(crate) const LEVEL_STRIDES: [usize; 2] = [8, 16];
/// Box side at `σ = 1`, in units of the level stride.
pub(crate) const BOX_SPAN: f64 = 4.0;
/// Number of per-cell regression + objectness channels before the logits.
pub(crate) const HEAD_PREFIX: usize = 5;
const OBJ: usize = 4;

const BACKBONE_WIDTHS: [usize; 4] = [12, 24, 32, 48];
const NECK_WIDTH: usize = 32;

/// `(name, in, out, kernel, stride, pad)`; head output widths are filled in
/// from the class count.
pub(crate) fn layer_specs(class_count: usize) -> Vec<(&'static str, usize, usize, usize, usize, usize)> {
    let [w1, w2, w3, w4] = BACKBONE_WIDTHS;
    let head = HEAD_PREFIX + class_count;
    vec![
        ("backbone.c1", 3, w1, 3, 2, 1),
        ("backbone.c2", w1, w2, 3, 2, 1),
        ("backbone.c3", w2, w3, 3, 2, 1),
        ("backbone.c4", w3, w4, 3, 2, 1),
        ("neck.lateral4", w4, NECK_WIDTH, 3, 1, 1),
        ("neck.fuse3", NECK_WIDTH, NECK_WIDTH, 3, 1, 1),
        ("head.p3", NECK_WIDTH, head, 1, 1, 0),
        ("head.p4", NECK_WIDTH, head, 1, 1, 0),
    ]
}

const C1: usize = 0;
const C2: usize = 1;
const C3: usize = 2;
const C4: usize = 3;
const LAT4: usize = 4;
const FUSE3: usize = 5;
const HEAD3: usize = 6;
const HEAD4: usize = 7;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDetector {
    pub(crate) layers: Vec<Conv2d>,
    class_names: Vec<String>,
    input_size: (usize, usize),
    pub candidate_floor: f64,
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Debug, Clone)]
pub struct ToyPass {
    input_dims: (usize, usize, usize),
    cols: Vec<Array2<f64>>,
    /// Pre-activations of c1..c4, lateral4 and fuse3.
    pre: Vec<Array3<f64>>,
    /// Raw head outputs per level.
    pub(crate) heads: [Array3<f64>; 2],
}

impl ToyDetector {
    pub fn new(class_names: Vec<String>, input_size: (usize, usize), seed: u64) -> Result<Self> {
        if class_names.is_empty() {
            return Err(Error::Config("detector needs at least one class".into()));
        }
        let (h, w) = input_size;
        if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
            return Err(Error::Config(format!("input size {h}x{w} must be a positive multiple of 16")));
        }
        let mut rng = stream_rng(seed, 0);
        let mut layers: Vec<Conv2d> = layer_specs(class_names.len())
            .into_iter()
            .map(|(_, cin, cout, k, s, p)| Conv2d::new(cin, cout, k, s, p, &mut rng))
            .collect();
        for head in [HEAD3, HEAD4] {
            layers[head].weight.mapv_inplace(|v| v * 0.1);
            // Start with low objectness so early training is not swamped by negatives
            layers[head].bias[OBJ] = -4.0;
        }
        Ok(Self {
            layers,
            class_names,
            input_size,
            candidate_floor: DEFAULT_CANDIDATE_FLOOR,
        })
    }

    pub(crate) fn from_parts(layers: Vec<Conv2d>, class_names: Vec<String>, input_size: (usize, usize)) -> Self {
        Self {
            layers,
            class_names,
            input_size,
            candidate_floor: DEFAULT_CANDIDATE_FLOOR,
        }
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    /// Same weights, different accepted input size.
    pub fn with_input_size(&self, input_size: (usize, usize)) -> Result<Self> {
        let mut out = Self::new(self.class_names.clone(), input_size, 0)?;
        out.layers = self.layers.clone();
        out.candidate_floor = self.candidate_floor;
        Ok(out)
    }

    pub(crate) fn run(&self, image: &Image) -> (FeatureMap, ToyPass) {
        let x = image.view().permuted_axes([2, 0, 1]).as_standard_layout().into_owned();
        let l = &self.layers;
        let mut cols = Vec::with_capacity(l.len());
        let mut pre = Vec::with_capacity(6);
        let mut act = x.clone();
        let mut a3 = None;
        for (i, layer) in l[C1..=C4].iter().enumerate() {
            let (z, c) = layer.forward(&act);
            cols.push(c);
            act = silu(&z);
            pre.push(z);
            if i + C1 == C3 {
                a3 = Some(act.clone());
            }
        }
        let (zl, c) = l[LAT4].forward(&act);
        cols.push(c);
        let n4 = silu(&zl);
        pre.push(zl);
        let fused_in = a3.expect("c3 ran") + &upsample2(&n4);
        let (zf, c) = l[FUSE3].forward(&fused_in);
        cols.push(c);
        let n3 = silu(&zf);
        pre.push(zf);
        let (h3, c) = l[HEAD3].forward(&n3);
        cols.push(c);
        let (h4, c) = l[HEAD4].forward(&n4);
        cols.push(c);
        let features = FeatureMap {
            levels: vec![n3, n4],
            level_names: TOY_LEVELS.iter().map(|s| s.to_string()).collect(),
        };
        let pass = ToyPass {
            input_dims: x.dim(),
            cols,
            pre,
            heads: [h3, h4],
        };
        (features, pass)
    }

    pub(crate) fn decode(&self, heads: &[Array3<f64>; 2]) -> Vec<Detection> {
        let (img_h, img_w) = self.input_size;
        let k = self.class_names.len();
        let mut out = Vec::new();
        for (level, raw) in heads.iter().enumerate() {
            let stride = LEVEL_STRIDES[level] as f64;
            let (_, gh, gw) = raw.dim();
            for row in 0..gh {
                for col in 0..gw {
                    let cell = raw.slice(s![.., row, col]);
                    let conf_coor = sigmoid(cell[OBJ]);
                    let logits: Vec<f64> = (0..k).map(|c| cell[HEAD_PREFIX + c]).collect();
                    let probs = softmax(&logits);
                    let (class_id, conf_cls) = probs
                        .iter()
                        .copied()
                        .enumerate()
                        .fold((0, f64::NEG_INFINITY), |best, (i, p)| if p > best.1 { (i, p) } else { best });
                    if conf_coor * conf_cls < self.candidate_floor {
                        continue;
                    }
                    let cx = (col as f64 + sigmoid(cell[0])) * stride;
                    let cy = (row as f64 + sigmoid(cell[1])) * stride;
                    let bw = BOX_SPAN * stride * sigmoid(cell[2]);
                    let bh = BOX_SPAN * stride * sigmoid(cell[3]);
                    let bbox = BoundingBox::from_array([cx - bw / 2.0, cy - bh / 2.0, cx + bw / 2.0, cy + bh / 2.0])
                        .clipped(img_h, img_w);
                    out.push(Detection {
                        bbox,
                        class_id,
                        conf_coor,
                        conf_cls,
                        cell: CellRef { level, row, col },
                    });
                }
            }
        }
        out
    }

    /// Backpropagates head and feature gradients to the input (`C x H x W`),
    /// optionally collecting parameter gradients in layer order.
    pub(crate) fn backward(
        &self,
        pass: &ToyPass,
        d_heads: &[Array3<f64>; 2],
        d_features: Option<&FeatureMap>,
        want_params: bool,
    ) -> (Array3<f64>, Option<Vec<(Array2<f64>, Array1<f64>)>>) {
        let l = &self.layers;
        let mut grads: Vec<Option<(Array2<f64>, Array1<f64>)>> = vec![None; l.len()];
        let mut param = |idx: usize, dy: &Array3<f64>| {
            if want_params {
                grads[idx] = Some(l[idx].backward_params(dy, &pass.cols[idx]));
            }
        };
        let [z1, z2, z3, z4, zl, zf] = [0, 1, 2, 3, 4, 5].map(|i| &pass.pre[i]);

        param(HEAD3, &d_heads[0]);
        param(HEAD4, &d_heads[1]);
        let mut dn3 = l[HEAD3].backward_input(&d_heads[0], zf.dim());
        let mut dn4 = l[HEAD4].backward_input(&d_heads[1], zl.dim());
        if let Some(df) = d_features {
            dn3 += &df.levels[0];
            dn4 += &df.levels[1];
        }
        let dzf = silu_backward(zf, &dn3);
        param(FUSE3, &dzf);
        let du = l[FUSE3].backward_input(&dzf, zf.dim());
        dn4 += &upsample2_backward(&du);
        let dzl = silu_backward(zl, &dn4);
        param(LAT4, &dzl);
        let da4 = l[LAT4].backward_input(&dzl, z4.dim());
        let dz4 = silu_backward(z4, &da4);
        param(C4, &dz4);
        let da3 = du + &l[C4].backward_input(&dz4, z3.dim());
        let dz3 = silu_backward(z3, &da3);
        param(C3, &dz3);
        let da2 = l[C3].backward_input(&dz3, z2.dim());
        let dz2 = silu_backward(z2, &da2);
        param(C2, &dz2);
        let da1 = l[C2].backward_input(&dz2, z1.dim());
        let dz1 = silu_backward(z1, &da1);
        param(C1, &dz1);
        let dx = l[C1].backward_input(&dz1, pass.input_dims);
        let params = want_params.then(|| grads.into_iter().map(|g| g.expect("every layer visited")).collect());
        (dx, params)
    }

    pub(crate) fn parameter_sizes(&self) -> Vec<usize> {
        self.layers.iter().flat_map(|l| [l.weight.len(), l.bias.len()]).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_sizes().iter().sum()
    }
}

impl DetectorContract for ToyDetector {
    type Pass = ToyPass;

    fn class_count(&self) -> usize {
        self.class_names.len()
    }

    fn input_size(&self) -> (usize, usize) {
        self.input_size
    }

    fn level_names(&self) -> Vec<String> {
        TOY_LEVELS.iter().map(|s| s.to_string()).collect()
    }

    fn differentiable(&self) -> bool {
        true
    }

    fn forward(&self, image: &Image) -> Result<ForwardOutput<ToyPass>> {
        check_image(image, self.input_size)?;
        let (features, pass) = self.run(image);
        let detections = self.decode(&pass.heads);
        Ok(ForwardOutput {
            detections,
            features,
            pass,
        })
    }

    fn input_gradient(&self, pass: &ToyPass, seeds: &[ConfidenceSeed], feature_grads: Option<&FeatureMap>) -> Result<Image> {
        let k = self.class_names.len();
        let mut d_heads = [Array3::zeros(pass.heads[0].dim()), Array3::zeros(pass.heads[1].dim())];
        for seed in seeds {
            let CellRef { level, row, col } = seed.cell;
            let raw = pass.heads.get(level).ok_or_else(|| Error::argument(format!("no head level {level}")))?;
            let (_, gh, gw) = raw.dim();
            if row >= gh || col >= gw || seed.class_id >= k {
                return Err(Error::argument(format!("seed {seed:?} outside the head grid")));
            }
            let p_obj = sigmoid(raw[[OBJ, row, col]]);
            d_heads[level][[OBJ, row, col]] += seed.d_conf_coor * p_obj * (1.0 - p_obj);
            let logits: Vec<f64> = (0..k).map(|c| raw[[HEAD_PREFIX + c, row, col]]).collect();
            let probs = softmax(&logits);
            let p_k = probs[seed.class_id];
            for (j, p_j) in probs.iter().enumerate() {
                let delta = if j == seed.class_id { 1.0 } else { 0.0 };
                d_heads[level][[HEAD_PREFIX + j, row, col]] += seed.d_conf_cls * p_k * (delta - p_j);
            }
        }
        if let Some(fg) = feature_grads {
            let ok = fg.levels.len() == 2
                && fg.levels[0].dim() == pass.pre[5].dim()
                && fg.levels[1].dim() == pass.pre[4].dim();
            if !ok {
                return Err(Error::argument("feature gradient shapes do not match the neck"));
            }
        }
        let (dx, _) = self.backward(pass, &d_heads, feature_grads, false);
        Ok(dx.permuted_axes([1, 2, 0]).as_standard_layout().into_owned())
    }
}

#[cfg(test)]
fn head_outputs(detector: &ToyDetector, image: &Image) -> [Array3<f64>; 2] {
    detector.run(image).1.heads
}
