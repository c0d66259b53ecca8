//! The learnable trigger patch.

use std::path::Path;

use image::RgbImage;
use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Image;
use crate::error::{Error, Result};
use crate::rng::stream_rng;

/// A `3 x U x V` patch with every pixel in `[0, 1]`. `U` is the row count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Array3<f64>", into = "Array3<f64>")]
pub struct TriggerImage {
    pixels: Array3<f64>,
}

impl TryFrom<Array3<f64>> for TriggerImage {
    type Error = Error;

    fn try_from(pixels: Array3<f64>) -> Result<Self> {
        Self::new(pixels)
    }
}

impl From<TriggerImage> for Array3<f64> {
    fn from(trigger: TriggerImage) -> Self {
        trigger.pixels
    }
}

impl TriggerImage {
    pub fn new(pixels: Array3<f64>) -> Result<Self> {
        let (c, u, v) = pixels.dim();
        if c != 3 || u == 0 || v == 0 {
            return Err(Error::argument(format!("trigger must be 3 x U x V, got {c} x {u} x {v}")));
        }
        if let Some(bad) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::argument(format!("trigger pixel {bad} outside [0, 1]")));
        }
        Ok(Self { pixels })
    }

    pub fn filled(dims: (usize, usize), value: f64) -> Result<Self> {
        Self::new(Array3::from_elem((3, dims.0, dims.1), value))
    }

    /// Uniform random pixels drawn from `seed`.
    pub fn random(dims: (usize, usize), seed: u64) -> Result<Self> {
        let mut rng = stream_rng(seed, u64::MAX);
        Self::new(Array3::from_shape_simple_fn((3, dims.0, dims.1), || rng.gen::<f64>()))
    }

    /// `(U, V)`.
    pub fn dims(&self) -> (usize, usize) {
        let (_, u, v) = self.pixels.dim();
        (u, v)
    }

    pub fn pixels(&self) -> &Array3<f64> {
        &self.pixels
    }

    /// Replaces the pixels, clamping into `[0, 1]`.
    pub(crate) fn from_unclamped(mut pixels: Array3<f64>) -> Self {
        pixels.mapv_inplace(|p| p.clamp(0.0, 1.0));
        Self { pixels }
    }

    pub fn to_hwc(&self) -> Image {
        self.pixels.clone().permuted_axes([1, 2, 0]).as_standard_layout().to_owned()
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        crate::dataset::write_png_image(&self.to_hwc(), path)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let hwc = crate::dataset::read_png_image(path)?;
        Self::new(hwc.permuted_axes([2, 0, 1]).as_standard_layout().to_owned())
    }

    /// 8-bit RGB view of the patch.
    pub fn to_rgb8(&self) -> RgbImage {
        let (u, v) = self.dims();
        RgbImage::from_fn(v as u32, u as u32, |x, y| {
            let px = |ch| crate::dataset::quantize_channel(self.pixels[[ch, y as usize, x as usize]]);
            image::Rgb([px(0), px(1), px(2)])
        })
    }
}
