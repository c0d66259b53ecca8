//! Expectation-over-transformation draws applied to the trigger before it is
//! composited: per-pixel noise, brightness, contrast and a rotation that is
//! folded into the placement's affine angle.

use ndarray::{Array3, ArrayView3, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream_rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EotConfig {
    /// Half-width of the per-pixel uniform noise.
    pub noise_amplitude: f64,
    /// Brightness offsets are drawn from `[-delta, +delta]`.
    pub brightness_delta: f64,
    /// Contrast gains are drawn from `[lo, hi]`, `0 < lo <= 1 <= hi`.
    pub contrast_range: (f64, f64),
    /// Rotation offsets (radians) are drawn from `[-max, +max]`.
    pub rotation_max: f64,
    pub seed: u64,
}

impl Default for EotConfig {
    fn default() -> Self {
        Self {
            noise_amplitude: 4.0 / 255.0,
            brightness_delta: 0.1,
            contrast_range: (0.9, 1.1),
            rotation_max: 5f64.to_radians(),
            seed: 0,
        }
    }
}

impl EotConfig {
    /// All ranges collapsed: every draw is the identity.
    pub fn disabled() -> Self {
        Self {
            noise_amplitude: 0.0,
            brightness_delta: 0.0,
            contrast_range: (1.0, 1.0),
            rotation_max: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.contrast_range;
        let ok = self.noise_amplitude >= 0.0
            && self.brightness_delta >= 0.0
            && self.rotation_max >= 0.0
            && lo > 0.0
            && lo <= 1.0
            && 1.0 <= hi;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid EOT ranges {self:?}")))
        }
    }
}

/// One sampled transformation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EotDraw {
    pub brightness: f64,
    pub contrast: f64,
    pub rotation: f64,
    pub noise_amplitude: f64,
    /// Seeds the per-pixel noise field, realized at application time.
    pub noise_seed: u64,
}

impl EotDraw {
    pub const IDENTITY: EotDraw = EotDraw {
        brightness: 0.0,
        contrast: 1.0,
        rotation: 0.0,
        noise_amplitude: 0.0,
        noise_seed: 0,
    };
}

/// Deterministic draw number `stream_index` of `config`.
pub fn sample_eot(config: &EotConfig, stream_index: u64) -> EotDraw {
    let mut rng = stream_rng(config.seed, stream_index);
    let mut symmetric = |half_width: f64| half_width * (2.0 * rng.gen::<f64>() - 1.0);
    let brightness = symmetric(config.brightness_delta);
    let rotation = symmetric(config.rotation_max);
    let (lo, hi) = config.contrast_range;
    let contrast = lo + (hi - lo) * rng.gen::<f64>();
    EotDraw {
        brightness,
        contrast,
        rotation,
        noise_amplitude: config.noise_amplitude,
        noise_seed: rng.gen(),
    }
}

/// Transformed trigger plus what is needed to pull gradients back through it.
#[derive(Debug, Clone)]
pub struct EotOutput {
    pub pixels: Array3<f64>,
    /// `d output / d input` per pixel: the contrast gain where the clamp is
    /// inactive, zero where it saturates.
    gain: Array3<f64>,
}

impl EotOutput {
    pub fn backward(&self, output_grad: &Array3<f64>) -> Array3<f64> {
        output_grad * &self.gain
    }
}

/// `clamp(contrast * trigger + brightness + noise, 0, 1)`.
///
/// The draw's rotation is not applied here; callers add it to the affine
/// angle so the trigger is resampled once.
pub fn apply_eot(trigger: ArrayView3<f64>, draw: &EotDraw) -> EotOutput {
    let mut pixels = trigger.mapv(|p| draw.contrast * p + draw.brightness);
    if draw.noise_amplitude > 0.0 {
        let mut rng = stream_rng(draw.noise_seed, 0);
        pixels.mapv_inplace(|p| p + draw.noise_amplitude * (2.0 * rng.gen::<f64>() - 1.0));
    }
    let mut gain = Array3::zeros(pixels.dim());
    Zip::from(&mut pixels).and(&mut gain).for_each(|p, g| {
        if (0.0..=1.0).contains(p) {
            *g = draw.contrast;
        } else {
            *p = p.clamp(0.0, 1.0);
        }
    });
    EotOutput { pixels, gain }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trigger(value: f64) -> Array3<f64> {
        Array3::from_elem((3, 4, 5), value)
    }

    #[test]
    fn zero_ranges_give_identity_draw() {
        let draw = sample_eot(&EotConfig::disabled(), 17);
        assert_eq!(draw.brightness, 0.0);
        assert_eq!(draw.contrast, 1.0);
        assert_eq!(draw.rotation, 0.0);
        assert_eq!(draw.noise_amplitude, 0.0);
    }

    #[test]
    fn identity_draw_is_bitwise_identity() {
        let mut rng = stream_rng(3, 3);
        let t = Array3::from_shape_simple_fn((3, 6, 7), || rng.gen::<f64>());
        let out = apply_eot(t.view(), &sample_eot(&EotConfig::disabled(), 5));
        assert!(out.pixels.iter().zip(t.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn draws_replay() {
        let config = EotConfig {
            seed: 99,
            ..Default::default()
        };
        assert_eq!(sample_eot(&config, 4), sample_eot(&config, 4));
        assert_ne!(sample_eot(&config, 4), sample_eot(&config, 5));
        let t = trigger(0.5);
        let a = apply_eot(t.view(), &sample_eot(&config, 4)).pixels;
        let b = apply_eot(t.view(), &sample_eot(&config, 4)).pixels;
        assert_eq!(a, b);
    }

    #[test]
    fn brightness_shift_is_additive() {
        let draw = EotDraw {
            brightness: 0.1,
            ..EotDraw::IDENTITY
        };
        let out = apply_eot(trigger(0.5).view(), &draw);
        assert!(out.pixels.iter().all(|p| (p - 0.6).abs() < 1e-15));
    }

    #[test]
    fn brightness_mean_is_centred() {
        let config = EotConfig {
            seed: 2024,
            ..Default::default()
        };
        let n = 10_000;
        let mean = (0..n).map(|i| sample_eot(&config, i).brightness).sum::<f64>() / n as f64;
        // Uniform[-d, d] has standard deviation d / sqrt(3)
        let sigma = config.brightness_delta / 3f64.sqrt() / (n as f64).sqrt();
        assert!(mean.abs() < 3.0 * sigma, "mean {mean} vs 3 sigma {}", 3.0 * sigma);
        for i in 0..200 {
            let d = sample_eot(&config, i);
            assert!(d.brightness.abs() <= config.brightness_delta);
            assert!((0.9..=1.1).contains(&d.contrast));
            assert!(d.rotation.abs() <= config.rotation_max);
        }
    }

    #[test]
    fn gradient_is_contrast_where_unclamped() {
        let mut rng = stream_rng(8, 0);
        let t = Array3::from_shape_simple_fn((3, 4, 4), || rng.gen_range(0.05..0.95));
        let draw = EotDraw {
            brightness: 0.3,
            contrast: 1.2,
            rotation: 0.0,
            noise_amplitude: 0.02,
            noise_seed: 7,
        };
        let out = apply_eot(t.view(), &draw);
        let grad = out.backward(&Array3::ones(t.dim()));
        let step = 1e-6;
        for idx in ndarray::indices(t.dim()) {
            let mut plus = t.clone();
            plus[idx] += step;
            let mut minus = t.clone();
            minus[idx] -= step;
            let fd = (apply_eot(plus.view(), &draw).pixels.sum() - apply_eot(minus.view(), &draw).pixels.sum()) / (2.0 * step);
            assert!((grad[idx] - fd).abs() < 1e-6, "{idx:?}: {} vs {fd}", grad[idx]);
            assert!(grad[idx] == 1.2 || grad[idx] == 0.0);
        }
        assert!(out.pixels.iter().all(|p| (0.0..=1.0).contains(p)));
        assert!(grad.iter().any(|g| *g == 0.0), "fixture should saturate some pixels");
    }

    #[test]
    fn validation_rejects_bad_ranges() {
        let bad = EotConfig {
            contrast_range: (1.1, 1.2),
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(EotConfig::default().validate().is_ok());
    }
}
