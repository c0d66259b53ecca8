//! Trigger placement and differentiable compositing.
//!
//! The trigger is mapped into the image by the affine matrix
//!
//! ```text
//!     | S_h cos a   -S_h sin a   T_h |
//!     | S_v sin a    S_v cos a   T_v |
//!     |    0            0         1  |
//! ```
//!
//! acting on normalized coordinates: both the trigger and the image span
//! `[-1, 1]` on each axis, with the image's `x` running over `[0, W]` pixels.
//! Compositing is an inverse warp: every destination pixel centre is pulled
//! back into trigger coordinates and, when it lands inside the trigger's
//! `[-1, 1]^2` square, replaced by a bilinear sample of the trigger.

use ndarray::{Array3, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::dataset::{BoundingBox, Image};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlacementMode {
    Below,
    Above,
    Left,
    Right,
}

impl std::str::FromStr for PlacementMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "below" => Ok(Self::Below),
            "above" => Ok(Self::Above),
            "left" => Ok(Self::Left),
            "right" => Ok(Self::Right),
            other => Err(Error::argument(format!("unknown placement mode `{other}`"))),
        }
    }
}

/// Where the trigger goes relative to the object box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlacementRule {
    pub mode: PlacementMode,
    /// Trigger extent across the free axis, as a multiple of the box extent.
    pub relative_scale: f64,
    /// Gap between box and trigger, as a fraction of the box extent along
    /// the placement axis.
    pub gap_fraction: f64,
}

impl Default for PlacementRule {
    fn default() -> Self {
        Self {
            mode: PlacementMode::Below,
            relative_scale: 1.0,
            gap_fraction: 0.1,
        }
    }
}

/// Region next to (never on) `bbox` that receives the trigger.
///
/// The region keeps the trigger's `U:V` aspect. If it would leave the image it
/// is shifted inward: freely along the axis parallel to the box edge, and
/// toward the box along the placement axis until it touches the box.
pub fn placement(
    bbox: &BoundingBox,
    rule: &PlacementRule,
    trigger_dims: (usize, usize),
    image_size: (usize, usize),
) -> Result<BoundingBox> {
    let (u, v) = trigger_dims;
    let (h, w) = (image_size.0 as f64, image_size.1 as f64);
    if u == 0 || v == 0 {
        return Err(Error::argument("trigger dims must be positive"));
    }
    if !(rule.relative_scale > 0.0) || !(rule.gap_fraction >= 0.0) {
        return Err(Error::argument(format!("invalid placement rule {rule:?}")));
    }
    if !bbox.is_well_formed() || !bbox.fits_in(image_size.0, image_size.1) {
        return Err(Error::argument(format!("box {:?} not inside image", bbox.to_array())));
    }
    let aspect = u as f64 / v as f64; // rows per column
    let (cx, cy) = bbox.center();

    let region = match rule.mode {
        PlacementMode::Below | PlacementMode::Above => {
            let rw = bbox.width() * rule.relative_scale;
            let rh = rw * aspect;
            if rw > w || rh > h {
                return Err(Error::Placement(format!("{rw:.2}x{rh:.2} region exceeds image")));
            }
            let x_min = (cx - 0.5 * rw).clamp(0.0, w - rw);
            let gap = rule.gap_fraction * bbox.height();
            let y_min = if rule.mode == PlacementMode::Below {
                let y = (bbox.y_max + gap).min(h - rh);
                if y < bbox.y_max {
                    return Err(Error::Placement("no room below the object".into()));
                }
                y
            } else {
                let y = (bbox.y_min - gap - rh).max(0.0);
                if y + rh > bbox.y_min {
                    return Err(Error::Placement("no room above the object".into()));
                }
                y
            };
            BoundingBox {
                x_min,
                y_min,
                x_max: x_min + rw,
                y_max: y_min + rh,
            }
        }
        PlacementMode::Left | PlacementMode::Right => {
            let rh = bbox.height() * rule.relative_scale;
            let rw = rh / aspect;
            if rw > w || rh > h {
                return Err(Error::Placement(format!("{rw:.2}x{rh:.2} region exceeds image")));
            }
            let y_min = (cy - 0.5 * rh).clamp(0.0, h - rh);
            let gap = rule.gap_fraction * bbox.width();
            let x_min = if rule.mode == PlacementMode::Right {
                let x = (bbox.x_max + gap).min(w - rw);
                if x < bbox.x_max {
                    return Err(Error::Placement("no room right of the object".into()));
                }
                x
            } else {
                let x = (bbox.x_min - gap - rw).max(0.0);
                if x + rw > bbox.x_min {
                    return Err(Error::Placement("no room left of the object".into()));
                }
                x
            };
            BoundingBox {
                x_min,
                y_min,
                x_max: x_min + rw,
                y_max: y_min + rh,
            }
        }
    };
    debug_assert_eq!(region.intersection_area(bbox), 0.0);
    Ok(region)
}

/// Parameters of the trigger-to-image affine matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub s_h: f64,
    pub s_v: f64,
    /// Rotation in radians.
    pub alpha: f64,
    pub t_h: f64,
    pub t_v: f64,
}

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams {
        s_h: 1.0,
        s_v: 1.0,
        alpha: 0.0,
        t_h: 0.0,
        t_v: 0.0,
    };

    pub fn matrix(&self) -> [[f64; 3]; 3] {
        let (sin, cos) = self.alpha.sin_cos();
        [
            [self.s_h * cos, -self.s_h * sin, self.t_h],
            [self.s_v * sin, self.s_v * cos, self.t_v],
            [0.0, 0.0, 1.0],
        ]
    }

    /// Trigger normalized `(u, v)` to image normalized `(x, y)`.
    pub fn forward(&self, u: f64, v: f64) -> (f64, f64) {
        let m = self.matrix();
        (
            m[0][0] * u + m[0][1] * v + m[0][2],
            m[1][0] * u + m[1][1] * v + m[1][2],
        )
    }

    /// Image normalized `(x, y)` back to trigger normalized `(u, v)`.
    pub fn inverse(&self, x: f64, y: f64) -> (f64, f64) {
        let (sin, cos) = self.alpha.sin_cos();
        let dx = (x - self.t_h) / self.s_h;
        let dy = (y - self.t_v) / self.s_v;
        (cos * dx + sin * dy, -sin * dx + cos * dy)
    }

    pub fn with_rotation(self, delta: f64) -> Self {
        Self {
            alpha: self.alpha + delta,
            ..self
        }
    }

    /// Image-pixel corners of the warped trigger, in order
    /// top-left, top-right, bottom-right, bottom-left.
    pub fn footprint_polygon(&self, image_size: (usize, usize)) -> [(f64, f64); 4] {
        let (h, w) = (image_size.0 as f64, image_size.1 as f64);
        [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)].map(|(u, v)| {
            let (x, y) = self.forward(u, v);
            ((x + 1.0) * 0.5 * w, (y + 1.0) * 0.5 * h)
        })
    }
}

/// Affine parameters that carry the trigger's corners onto `region`'s.
pub fn affine_params(region: &BoundingBox, trigger_dims: (usize, usize), image_size: (usize, usize)) -> Result<AffineParams> {
    if trigger_dims.0 == 0 || trigger_dims.1 == 0 {
        return Err(Error::argument("trigger dims must be positive"));
    }
    if !(region.area() > 0.0) || !region.is_well_formed() {
        return Err(Error::argument(format!("degenerate region {:?}", region.to_array())));
    }
    if !region.fits_in(image_size.0, image_size.1) {
        return Err(Error::argument(format!("region {:?} leaves the image", region.to_array())));
    }
    let (h, w) = (image_size.0 as f64, image_size.1 as f64);
    Ok(AffineParams {
        s_h: region.width() / w,
        s_v: region.height() / h,
        alpha: 0.0,
        t_h: (region.x_min + region.x_max) / w - 1.0,
        t_v: (region.y_min + region.y_max) / h - 1.0,
    })
}

#[derive(Debug, Clone, Copy)]
struct Tap {
    row: usize,
    col: usize,
    /// `(trigger row, trigger col, weight)` for the four bilinear neighbours.
    samples: [(usize, usize, f64); 4],
}

/// Record of which trigger pixels fed which image pixels.
#[derive(Debug, Clone)]
pub struct RenderTape {
    taps: Vec<Tap>,
    trigger_dims: (usize, usize),
}

impl RenderTape {
    /// Destination pixels `(row, col)` replaced by the trigger.
    pub fn footprint(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.taps.iter().map(|t| (t.row, t.col))
    }

    pub fn footprint_len(&self) -> usize {
        self.taps.len()
    }

    /// Adds `d loss / d trigger` into `trigger_grad` and zeroes the consumed
    /// footprint entries of `output_grad`, leaving the gradient with respect
    /// to the underlying image.
    pub fn backward(&self, output_grad: &mut Image, trigger_grad: &mut Array3<f64>) {
        debug_assert_eq!(trigger_grad.dim(), (3, self.trigger_dims.0, self.trigger_dims.1));
        for tap in &self.taps {
            for ch in 0..3 {
                let g = output_grad[[tap.row, tap.col, ch]];
                output_grad[[tap.row, tap.col, ch]] = 0.0;
                if g == 0.0 {
                    continue;
                }
                for &(sr, sc, weight) in &tap.samples {
                    trigger_grad[[ch, sr, sc]] += weight * g;
                }
            }
        }
    }
}

/// Composites `trigger` (`3 x U x V`) onto `image` under `params`.
pub fn render(image: &Image, trigger: ArrayView3<f64>, params: &AffineParams) -> Image {
    render_with_tape(image, trigger, params).0
}

pub fn render_with_tape(image: &Image, trigger: ArrayView3<f64>, params: &AffineParams) -> (Image, RenderTape) {
    let (h, w, _) = image.dim();
    let (_, u, v) = trigger.dim();
    let mut out = image.clone();
    let mut taps = Vec::new();

    let polygon = params.footprint_polygon((h, w));
    let (mut x_lo, mut x_hi, mut y_lo, mut y_hi) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for (x, y) in polygon {
        x_lo = x_lo.min(x);
        x_hi = x_hi.max(x);
        y_lo = y_lo.min(y);
        y_hi = y_hi.max(y);
    }
    let span = |lo: f64, hi: f64, n: usize| {
        let start = (lo.floor() - 1.0).max(0.0).min(n as f64) as usize;
        let end = (hi.ceil() + 1.0).max(0.0).min(n as f64) as usize;
        start..end
    };

    for row in span(y_lo, y_hi, h) {
        let y = 2.0 * (row as f64 + 0.5) / h as f64 - 1.0;
        for col in span(x_lo, x_hi, w) {
            let x = 2.0 * (col as f64 + 0.5) / w as f64 - 1.0;
            let (tu, tv) = params.inverse(x, y);
            if !(tu.abs() <= 1.0 && tv.abs() <= 1.0) {
                continue;
            }
            let sx = (tu + 1.0) * 0.5 * v as f64 - 0.5;
            let sy = (tv + 1.0) * 0.5 * u as f64 - 0.5;
            let samples = bilinear_taps(sy, sx, u, v);
            for ch in 0..3 {
                out[[row, col, ch]] = samples
                    .iter()
                    .map(|&(sr, sc, weight)| weight * trigger[[ch, sr, sc]])
                    .sum();
            }
            taps.push(Tap { row, col, samples });
        }
    }
    (
        out,
        RenderTape {
            taps,
            trigger_dims: (u, v),
        },
    )
}

/// Bilinear neighbours with edge replication.
fn bilinear_taps(sy: f64, sx: f64, rows: usize, cols: usize) -> [(usize, usize, f64); 4] {
    let y0f = sy.floor();
    let x0f = sx.floor();
    let fy = sy - y0f;
    let fx = sx - x0f;
    let clamp = |i: f64, n: usize| i.clamp(0.0, (n - 1) as f64) as usize;
    let (y0, y1) = (clamp(y0f, rows), clamp(y0f + 1.0, rows));
    let (x0, x1) = (clamp(x0f, cols), clamp(x0f + 1.0, cols));
    [
        (y0, x0, (1.0 - fy) * (1.0 - fx)),
        (y0, x1, (1.0 - fy) * fx),
        (y1, x0, fy * (1.0 - fx)),
        (y1, x1, fy * fx),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = stream_rng(seed, 1);
        Image::from_shape_simple_fn((h, w, 3), || rng.gen())
    }

    fn random_trigger(u: usize, v: usize, seed: u64) -> Array3<f64> {
        let mut rng = stream_rng(seed, 2);
        Array3::from_shape_simple_fn((3, u, v), || rng.gen())
    }

    #[test]
    fn below_placement_matches_hand_computation() {
        let bbox = BoundingBox::from_array([10.0, 10.0, 30.0, 30.0]);
        let region = placement(&bbox, &PlacementRule::default(), (1, 2), (100, 100)).unwrap();
        assert!((region.y_min - 32.0).abs() < 1e-12);
        assert!((region.width() - 20.0).abs() < 1e-12);
        assert!((region.height() - 10.0).abs() < 1e-12);
        assert!((region.x_min - 10.0).abs() < 1e-12);
        assert_eq!(region.intersection_area(&bbox), 0.0);
    }

    #[test]
    fn full_image_object_cannot_be_placed() {
        let bbox = BoundingBox::from_array([0.0, 0.0, 64.0, 64.0]);
        for mode in [PlacementMode::Below, PlacementMode::Above, PlacementMode::Left, PlacementMode::Right] {
            let rule = PlacementRule { mode, ..Default::default() };
            assert!(matches!(placement(&bbox, &rule, (16, 32), (64, 64)), Err(Error::Placement(_))));
        }
    }

    #[test]
    fn region_is_shifted_inward_not_clipped() {
        // box hugging the left edge: region centred under it would start at x < 0
        let bbox = BoundingBox::from_array([0.0, 5.0, 10.0, 15.0]);
        let rule = PlacementRule { relative_scale: 2.0, ..Default::default() };
        let region = placement(&bbox, &rule, (1, 1), (40, 40)).unwrap();
        assert_eq!(region.x_min, 0.0);
        assert!((region.width() - 20.0).abs() < 1e-12);
        // near the bottom: gap shrinks instead of leaving the image
        let low = BoundingBox::from_array([10.0, 20.0, 20.0, 30.0]);
        let region = placement(&low, &PlacementRule::default(), (1, 1), (40, 40)).unwrap();
        assert_eq!(region.y_max, 40.0);
        assert!(region.y_min >= low.y_max);
    }

    #[test]
    fn identity_warp_reproduces_trigger() {
        let trigger = random_trigger(12, 12, 4);
        let image = Image::zeros((12, 12, 3));
        let out = render(&image, trigger.view(), &AffineParams::IDENTITY);
        for ((r, c, ch), v) in out.indexed_iter() {
            assert!((v - trigger[[ch, r, c]]).abs() < 1e-12);
        }
    }

    #[test]
    fn centred_native_size_region_is_pure_scale() {
        let region = BoundingBox::from_array([24.0, 28.0, 40.0, 36.0]);
        let p = affine_params(&region, (8, 16), (64, 64)).unwrap();
        assert_eq!((p.s_h, p.s_v, p.alpha, p.t_h, p.t_v), (0.25, 0.125, 0.0, 0.0, 0.0));
        let half = BoundingBox::from_array([28.0, 30.0, 36.0, 34.0]);
        let q = affine_params(&half, (8, 16), (64, 64)).unwrap();
        assert_eq!((q.s_h, q.s_v), (p.s_h / 2.0, p.s_v / 2.0));
    }

    #[test]
    fn zero_area_region_is_rejected() {
        let flat = BoundingBox::from_array([4.0, 4.0, 4.0, 9.0]);
        assert!(affine_params(&flat, (4, 4), (32, 32)).is_err());
    }

    #[test]
    fn sum_gradient_matches_finite_differences() {
        let trigger = random_trigger(8, 8, 11);
        let image = random_image(40, 40, 11);
        let params = AffineParams {
            s_h: 0.35,
            s_v: 0.3,
            alpha: 0.3,
            t_h: 0.1,
            t_v: -0.2,
        };
        let (_, tape) = render_with_tape(&image, trigger.view(), &params);
        let mut grad = Array3::zeros(trigger.dim());
        let mut upstream = Image::ones(image.dim());
        tape.backward(&mut upstream, &mut grad);

        let step = 1e-3;
        for idx in ndarray::indices(trigger.dim()) {
            let mut plus = trigger.clone();
            plus[idx] += step;
            let mut minus = trigger.clone();
            minus[idx] -= step;
            let fd = (render(&image, plus.view(), &params).sum() - render(&image, minus.view(), &params).sum()) / (2.0 * step);
            let err = (grad[idx] - fd).abs();
            assert!(err <= 1e-3 * fd.abs().max(1e-3), "pixel {idx:?}: analytic {} fd {fd}", grad[idx]);
        }
        // upstream gradient inside the footprint was consumed
        for (r, c) in tape.footprint() {
            assert_eq!(upstream[[r, c, 0]], 0.0);
        }
    }

    fn point_in_polygon(p: (f64, f64), poly: &[(f64, f64); 4]) -> bool {
        let mut inside = false;
        let mut j = poly.len() - 1;
        for i in 0..poly.len() {
            let (xi, yi) = poly[i];
            let (xj, yj) = poly[j];
            if (yi > p.1) != (yj > p.1) && p.0 < (xj - xi) * (p.1 - yi) / (yj - yi) + xi {
                inside = !inside;
            }
            j = i;
        }
        inside
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn corners_map_onto_region(x0 in 0.0f64..50.0, y0 in 0.0f64..50.0, rw in 0.5f64..14.0, rh in 0.5f64..14.0, u in 1usize..20, v in 1usize..20) {
            let region = BoundingBox::from_array([x0, y0, x0 + rw, y0 + rh]);
            let p = affine_params(&region, (u, v), (64, 64)).unwrap();
            let poly = p.footprint_polygon((64, 64));
            let want = [(x0, y0), (x0 + rw, y0), (x0 + rw, y0 + rh), (x0, y0 + rh)];
            for (got, want) in poly.iter().zip(want) {
                prop_assert!((got.0 - want.0).abs() < 1e-6 && (got.1 - want.1).abs() < 1e-6);
            }
        }

        #[test]
        fn render_only_touches_the_footprint(seed in any::<u64>(), s_h in 0.05f64..0.8, s_v in 0.05f64..0.8, alpha in -0.6f64..0.6, t_h in -0.8f64..0.8, t_v in -0.8f64..0.8) {
            let image = random_image(32, 32, seed);
            let trigger = random_trigger(6, 9, seed);
            let params = AffineParams { s_h, s_v, alpha, t_h, t_v };
            let out = render(&image, trigger.view(), &params);
            let poly = params.footprint_polygon((32, 32));
            for ((r, c, ch), v) in out.indexed_iter() {
                let centre = (c as f64 + 0.5, r as f64 + 0.5);
                // pixels clearly outside the polygon (allow boundary ties)
                let shifted = [(-1e-9, 0.0), (1e-9, 0.0), (0.0, -1e-9), (0.0, 1e-9)]
                    .iter()
                    .any(|(dx, dy)| point_in_polygon((centre.0 + dx, centre.1 + dy), &poly));
                if !shifted {
                    prop_assert_eq!(v.to_bits(), image[[r, c, ch]].to_bits());
                }
            }
        }

        #[test]
        fn placement_never_overlaps(x0 in 0.0f64..40.0, y0 in 0.0f64..40.0, bw in 1.0f64..24.0, bh in 1.0f64..24.0,
                                    mode in 0usize..4, scale in 0.2f64..2.0, gap in 0.0f64..0.5, u in 1usize..20, v in 1usize..20) {
            let bbox = BoundingBox::from_array([x0, y0, (x0 + bw).min(64.0), (y0 + bh).min(64.0)]);
            let mode = [PlacementMode::Below, PlacementMode::Above, PlacementMode::Left, PlacementMode::Right][mode];
            let rule = PlacementRule { mode, relative_scale: scale, gap_fraction: gap };
            if let Ok(region) = placement(&bbox, &rule, (u, v), (64, 64)) {
                prop_assert_eq!(region.intersection_area(&bbox), 0.0);
                prop_assert!(region.x_min >= 0.0 && region.y_min >= 0.0 && region.fits_in(64, 64));
                prop_assert!(((region.height() / region.width()) - u as f64 / v as f64).abs() < 1e-9);
            }
        }
    }
}
