//! PNG charts drawn with plotters onto an in-memory RGB buffer.
//!
//! Axis text needs a TrueType font; one is looked up once from
//! `OOB_PLOT_FONT` or a few common system locations. Without one, charts are
//! drawn without captions and tick labels.

use std::convert::Infallible;
use std::path::Path;
use std::sync::OnceLock;

use image::{Rgb, RgbImage};
use plotters::prelude::*;
use plotters_backend::{BackendColor, BackendCoord, DrawingErrorKind};

use super::SequenceResult;
use crate::error::{Error, Result};
use crate::uapgd::AttackReport;

const WIDTH: u32 = 800;
const HEIGHT: u32 = 480;
const FONT_FAMILY: &str = "sans-serif";
const FONT_CANDIDATES: [&str; 5] = [
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
    "/Library/Fonts/Arial.ttf",
    "C:\\Windows\\Fonts\\arial.ttf",
];

/// A line chart with optional point markers and a horizontal reference line.
#[derive(Debug, Clone, PartialEq)]
pub struct LinePlotSpec {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<(f64, f64)>,
    pub markers: Vec<(f64, f64)>,
    pub reference: Option<f64>,
}

/// Epoch loss curve with one marker per halving event.
pub fn loss_plot_spec(name: &str, report: &AttackReport) -> LinePlotSpec {
    let series: Vec<(f64, f64)> = report.epochs.iter().map(|e| (e.epoch as f64, e.loss)).collect();
    let markers = report
        .halving_events
        .iter()
        .filter_map(|&h| report.epochs.iter().find(|e| e.epoch == h))
        .map(|e| (e.epoch as f64, e.loss))
        .collect();
    LinePlotSpec {
        title: format!("{name}: epoch loss ({})", report.method),
        x_label: "epoch".into(),
        y_label: "L_all".into(),
        series,
        markers,
        reference: None,
    }
}

/// Per-frame target confidence with the detection threshold drawn across.
pub fn confidence_plot_spec(name: &str, result: &SequenceResult, threshold: f64) -> LinePlotSpec {
    LinePlotSpec {
        title: format!("{name}: target confidence per frame"),
        x_label: "frame".into(),
        y_label: "confidence".into(),
        series: result.series.iter().enumerate().map(|(i, c)| (i as f64, *c)).collect(),
        markers: Vec::new(),
        reference: Some(threshold),
    }
}

fn font_ready() -> bool {
    static READY: OnceLock<bool> = OnceLock::new();
    *READY.get_or_init(|| {
        let env = std::env::var("OOB_PLOT_FONT").ok();
        let found = env
            .iter()
            .map(String::as_str)
            .chain(FONT_CANDIDATES)
            .filter_map(|p| std::fs::read(p).ok())
            .any(|bytes| {
                let bytes: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                plotters::style::register_font(FONT_FAMILY, FontStyle::Normal, bytes).is_ok()
            });
        found
    })
}

struct PixelBackend<'a> {
    image: &'a mut RgbImage,
}

impl DrawingBackend for PixelBackend<'_> {
    type ErrorType = Infallible;

    fn get_size(&self) -> (u32, u32) {
        self.image.dimensions()
    }

    fn ensure_prepared(&mut self) -> Result<(), DrawingErrorKind<Infallible>> {
        Ok(())
    }

    fn present(&mut self) -> Result<(), DrawingErrorKind<Infallible>> {
        Ok(())
    }

    fn draw_pixel(&mut self, point: BackendCoord, color: BackendColor) -> Result<(), DrawingErrorKind<Infallible>> {
        let (w, h) = self.image.dimensions();
        let (x, y) = point;
        if x < 0 || y < 0 || x as u32 >= w || y as u32 >= h {
            return Ok(());
        }
        let alpha = color.alpha.clamp(0.0, 1.0);
        let px = self.image.get_pixel_mut(x as u32, y as u32);
        let src = [color.rgb.0, color.rgb.1, color.rgb.2];
        for (dst, s) in px.0.iter_mut().zip(src) {
            *dst = (alpha * s as f64 + (1.0 - alpha) * *dst as f64).round() as u8;
        }
        Ok(())
    }
}

fn plot_error(e: impl std::fmt::Display) -> Error {
    Error::Plot(e.to_string())
}

fn padded_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    let pad = if hi > lo { 0.05 * (hi - lo) } else { 0.5 * lo.abs().max(1.0) };
    (lo - pad, hi + pad)
}

fn save(image: &RgbImage, path: &Path) -> Result<()> {
    image.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn render_line_plot(spec: &LinePlotSpec, path: &Path) -> Result<()> {
    render_line_plot_with(spec, path, font_ready())
}

fn render_line_plot_with(spec: &LinePlotSpec, path: &Path, text: bool) -> Result<()> {
    let mut image = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    {
        let root = PixelBackend { image: &mut image }.into_drawing_area();
        let (x0, x1) = padded_range(spec.series.iter().map(|p| p.0));
        let (y0, y1) = padded_range(spec.series.iter().map(|p| p.1).chain(spec.reference));
        let mut builder = ChartBuilder::on(&root);
        builder.margin(16);
        if text {
            builder
                .caption(&spec.title, (FONT_FAMILY, 20))
                .x_label_area_size(36)
                .y_label_area_size(56);
        }
        let mut chart = builder.build_cartesian_2d(x0..x1, y0..y1).map_err(plot_error)?;
        let mut mesh = chart.configure_mesh();
        if text {
            mesh.x_desc(spec.x_label.as_str()).y_desc(spec.y_label.as_str());
        } else {
            mesh.x_labels(0).y_labels(0);
        }
        mesh.draw().map_err(plot_error)?;
        chart
            .draw_series(LineSeries::new(spec.series.iter().copied(), BLUE.stroke_width(2)))
            .map_err(plot_error)?;
        if let Some(r) = spec.reference {
            chart
                .draw_series(LineSeries::new([(x0, r), (x1, r)], RED.mix(0.6)))
                .map_err(plot_error)?;
        }
        chart
            .draw_series(spec.markers.iter().map(|&p| Circle::new(p, 6, RED.filled())))
            .map_err(plot_error)?;
        root.present().map_err(plot_error)?;
    }
    save(&image, path)
}

pub(crate) fn render_bar_plot(title: &str, bars: &[(String, f64)], path: &Path) -> Result<()> {
    render_bar_plot_with(title, bars, path, font_ready())
}

fn render_bar_plot_with(title: &str, bars: &[(String, f64)], path: &Path, text: bool) -> Result<()> {
    let mut image = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    {
        let root = PixelBackend { image: &mut image }.into_drawing_area();
        let mut builder = ChartBuilder::on(&root);
        builder.margin(16);
        if text {
            builder.caption(title, (FONT_FAMILY, 20)).x_label_area_size(36).y_label_area_size(56);
        }
        let n = bars.len().max(1) as f64;
        let mut chart = builder.build_cartesian_2d(0.0..n, 0.0..1.05).map_err(plot_error)?;
        let mut mesh = chart.configure_mesh();
        mesh.disable_x_mesh();
        if text {
            mesh.y_desc("ASR").x_labels(0);
        } else {
            mesh.x_labels(0).y_labels(0);
        }
        mesh.draw().map_err(plot_error)?;
        chart
            .draw_series(bars.iter().enumerate().map(|(i, (_, v))| {
                let color = Palette99::pick(i).filled();
                Rectangle::new([(i as f64 + 0.15, 0.0), (i as f64 + 0.85, *v)], color)
            }))
            .map_err(plot_error)?;
        if text {
            chart
                .draw_series(bars.iter().enumerate().map(|(i, (name, v))| {
                    Text::new(format!("{name} {:.1}%", 100.0 * v), (i as f64 + 0.15, (v + 0.04).min(1.04)), (FONT_FAMILY, 14))
                }))
                .map_err(plot_error)?;
        }
        root.present().map_err(plot_error)?;
    }
    save(&image, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::uapgd::{EpochRecord, Method};

    fn report(halvings: Vec<usize>) -> AttackReport {
        AttackReport {
            method: Method::Uapgd,
            epochs: (0..10)
                .map(|e| EpochRecord {
                    epoch: e,
                    loss: 1.0 / (1.0 + e as f64),
                    l_best: 1.0 / (1.0 + e as f64),
                    eta: 0.1,
                    halved: halvings.contains(&e),
                    skipped: 0,
                })
                .collect(),
            batches: vec![],
            halving_events: halvings,
            final_eta: 0.025,
            l_best: Some(0.1),
            asr: None,
        }
    }

    #[test]
    fn one_marker_per_halving() {
        let spec = loss_plot_spec("run", &report(vec![4, 9]));
        assert_eq!(spec.markers, vec![(4.0, 0.2), (9.0, 0.1)]);
        assert_eq!(spec.series.len(), 10);
        assert!(loss_plot_spec("run", &report(vec![])).markers.is_empty());
    }

    #[test]
    fn renders_with_and_without_text() {
        let dir = tempfile::tempdir().unwrap();
        let spec = loss_plot_spec("run", &report(vec![4]));
        for text in [false, font_ready()] {
            let path = dir.path().join(format!("loss_{text}.png"));
            render_line_plot_with(&spec, &path, text).unwrap();
            let img = image::open(&path).unwrap().to_rgb8();
            assert_eq!(img.dimensions(), (WIDTH, HEIGHT));
            assert!(img.pixels().any(|p| p.0 == [255, 0, 0]), "halving marker drawn");
            let bars = vec![("pgd".to_string(), 0.3), ("uapgd+fg".to_string(), 0.6)];
            render_bar_plot_with("asr", &bars, &dir.path().join(format!("bars_{text}.png")), text).unwrap();
        }
    }
}
