//! Procedural street-sign scenes used as a desk-scale stand-in for real
//! photographs. The target class is a red octagon on a pole; three
//! distractor sign shapes share its palette so a detector has to look at
//! shape, not just colour.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Annotation, BoundingBox, Dataset, Image, Sample};
use crate::error::{Error, Result};
use crate::rng::stream_rng;

/// Class vocabulary of the synthetic generator. Index 0 is the target.
pub const SYNTHETIC_CLASSES: [&str; 4] = ["stop_sign", "round_sign", "yield_sign", "info_sign"];

const SUPERSAMPLE: usize = 4;

/// Exact render-time geometry of one object.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectGeometry {
    pub class_id: usize,
    /// `(x, y)` of the shape centre.
    pub center: (f64, f64),
    /// Side of the square bounding box for octagons, disks and squares; base
    /// width for triangles.
    pub size: f64,
}

impl ObjectGeometry {
    pub fn bounding_box(&self) -> BoundingBox {
        let (cx, cy) = self.center;
        let half_w = 0.5 * self.size;
        let half_h = if self.class_id == 2 {
            0.5 * self.size * 3f64.sqrt() / 2.0
        } else {
            half_w
        };
        BoundingBox {
            x_min: cx - half_w,
            y_min: cy - half_h,
            x_max: cx + half_w,
            y_max: cy + half_h,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub sample: Sample,
    pub objects: Vec<ObjectGeometry>,
}

/// Position and size of the target sign in a scene.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignPlacement {
    pub center: (f64, f64),
    pub size: f64,
}

/// Vertices of the flat-topped regular octagon whose bounding box is the
/// `size x size` square centred on `center`.
pub fn octagon_vertices(center: (f64, f64), size: f64) -> [(f64, f64); 8] {
    let radius = 0.5 * size / (PI / 8.0).cos();
    std::array::from_fn(|k| {
        let angle = PI / 8.0 + k as f64 * PI / 4.0;
        (center.0 + radius * angle.cos(), center.1 + radius * angle.sin())
    })
}

/// Generates `n_samples` scenes of `image_size = (H, W)`; a pure function of
/// its arguments.
pub fn generate_synthetic_scenes(n_samples: usize, image_size: (usize, usize), seed: u64) -> Result<Vec<SyntheticScene>> {
    let (h, w) = image_size;
    if h < 32 || w < 32 {
        return Err(Error::argument(format!("synthetic images need H, W >= 32, got {h}x{w}")));
    }
    Ok((0..n_samples)
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            let short = h.min(w) as f64;
            let size = rng.gen_range(0.14 * short..0.42 * short);
            let x_min = rng.gen_range(1.0..w as f64 - size - 1.0);
            // leave at least 0.75 * size of pole below the sign
            let y_min = rng.gen_range(1.0..h as f64 - 1.75 * size - 1.0);
            let sign = SignPlacement {
                center: (x_min + 0.5 * size, y_min + 0.5 * size),
                size,
            };
            let distractors = rng.gen_range(1..=2);
            let (image, objects) = render_sign_scene(&mut rng, image_size, Some(sign), distractors);
            let annotations = objects
                .iter()
                .map(|o| Annotation {
                    bbox: o.bounding_box(),
                    class_id: o.class_id,
                })
                .collect();
            SyntheticScene {
                sample: Sample {
                    id: format!("{i:06}.png"),
                    image,
                    annotations,
                },
                objects,
            }
        })
        .collect())
}

pub fn generate_synthetic_dataset(n_samples: usize, image_size: (usize, usize), seed: u64) -> Result<Dataset> {
    let samples = generate_synthetic_scenes(n_samples, image_size, seed)?
        .into_iter()
        .map(|s| s.sample)
        .collect();
    Dataset::new(samples, SYNTHETIC_CLASSES.iter().map(|s| s.to_string()).collect(), 0)
}

/// Draws a background, the optional target sign with its pole, and up to
/// `distractors` other signs that avoid the target and the space under it.
pub fn render_sign_scene(
    rng: &mut ChaCha8Rng,
    image_size: (usize, usize),
    sign: Option<SignPlacement>,
    distractors: usize,
) -> (Image, Vec<ObjectGeometry>) {
    let (h, w) = image_size;
    let mut canvas = Canvas::new(h, w);
    draw_background(&mut canvas, rng);

    let mut objects = Vec::new();
    let mut keep_out = Vec::new();
    if let Some(sign) = sign {
        let bbox = ObjectGeometry {
            class_id: 0,
            center: sign.center,
            size: sign.size,
        }
        .bounding_box();
        keep_out.push(BoundingBox {
            x_min: bbox.x_min - 2.0,
            y_min: bbox.y_min - 2.0,
            x_max: bbox.x_max + 2.0,
            y_max: h as f64,
        });
    }

    let short = h.min(w) as f64;
    for _ in 0..distractors {
        let class_id = rng.gen_range(1..SYNTHETIC_CLASSES.len());
        let size = rng.gen_range(0.15 * short..0.35 * short);
        for _attempt in 0..20 {
            let cx = rng.gen_range(0.5 * size + 1.0..w as f64 - 0.5 * size - 1.0);
            let cy = rng.gen_range(0.5 * size + 1.0..h as f64 - 0.5 * size - 1.0);
            let geom = ObjectGeometry {
                class_id,
                center: (cx, cy),
                size,
            };
            let bbox = geom.bounding_box();
            if bbox.fits_in(h, w) && keep_out.iter().all(|k| k.intersection_area(&bbox) == 0.0) {
                keep_out.push(BoundingBox {
                    x_min: bbox.x_min - 1.0,
                    y_min: bbox.y_min - 1.0,
                    x_max: bbox.x_max + 1.0,
                    y_max: h as f64,
                });
                objects.push(geom);
                break;
            }
        }
    }

    // poles first so no sign face is painted over
    let all: Vec<ObjectGeometry> = sign
        .map(|s| ObjectGeometry {
            class_id: 0,
            center: s.center,
            size: s.size,
        })
        .into_iter()
        .chain(objects.iter().copied())
        .collect();
    for geom in &all {
        draw_pole(&mut canvas, geom, rng);
    }
    for geom in &all {
        draw_sign(&mut canvas, geom, rng);
    }
    (canvas.image, all)
}

struct Canvas {
    image: Image,
}

impl Canvas {
    fn new(h: usize, w: usize) -> Self {
        Self {
            image: Image::zeros((h, w, 3)),
        }
    }

    /// Alpha-composites `color` over every pixel in proportion to the
    /// supersampled coverage of `inside`.
    fn fill(&mut self, bbox: BoundingBox, color: [f64; 3], inside: impl Fn(f64, f64) -> bool) {
        let (h, w, _) = self.image.dim();
        let (rows, cols) = bbox.pixel_span(h, w);
        let step = 1.0 / SUPERSAMPLE as f64;
        for r in rows {
            for c in cols.clone() {
                let mut hits = 0;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let x = c as f64 + (sx as f64 + 0.5) * step;
                        let y = r as f64 + (sy as f64 + 0.5) * step;
                        if inside(x, y) {
                            hits += 1;
                        }
                    }
                }
                if hits > 0 {
                    let a = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
                    for ch in 0..3 {
                        let px = &mut self.image[[r, c, ch]];
                        *px = a * color[ch] + (1.0 - a) * *px;
                    }
                }
            }
        }
    }
}

fn jitter(rng: &mut ChaCha8Rng, base: [f64; 3], amount: f64) -> [f64; 3] {
    base.map(|v| (v + rng.gen_range(-amount..=amount)).clamp(0.0, 1.0))
}

fn draw_background(canvas: &mut Canvas, rng: &mut ChaCha8Rng) {
    let (h, w, _) = canvas.image.dim();
    let skies = [[0.55, 0.7, 0.9], [0.7, 0.75, 0.8], [0.45, 0.6, 0.85], [0.8, 0.82, 0.78]];
    let grounds = [[0.35, 0.5, 0.3], [0.45, 0.45, 0.45], [0.5, 0.45, 0.35], [0.3, 0.4, 0.35]];
    let sky_base = skies[rng.gen_range(0..skies.len())];
    let sky = jitter(rng, sky_base, 0.06);
    let ground_base = grounds[rng.gen_range(0..grounds.len())];
    let ground = jitter(rng, ground_base, 0.06);
    let horizon = rng.gen_range(0.45..0.75) * h as f64;
    for r in 0..h {
        let y = r as f64 + 0.5;
        for c in 0..w {
            for ch in 0..3 {
                canvas.image[[r, c, ch]] = if y < horizon {
                    sky[ch] * (0.85 + 0.15 * y / horizon)
                } else {
                    ground[ch]
                };
            }
        }
    }
    let buildings = rng.gen_range(0..=3);
    for _ in 0..buildings {
        let bw = rng.gen_range(0.1..0.35) * w as f64;
        let bh = rng.gen_range(0.15..0.5) * h as f64;
        let x0 = rng.gen_range(0.0..w as f64 - bw);
        let y1 = horizon + rng.gen_range(0.0..0.1) * h as f64;
        let bbox = BoundingBox {
            x_min: x0,
            y_min: (y1 - bh).max(0.0),
            x_max: x0 + bw,
            y_max: y1.min(h as f64),
        };
        let shade = rng.gen_range(0.35..0.7);
        let color = jitter(rng, [shade, shade, shade + 0.05], 0.05);
        canvas.fill(bbox, color, |x, y| {
            x >= bbox.x_min && x <= bbox.x_max && y >= bbox.y_min && y <= bbox.y_max
        });
    }
    for v in canvas.image.iter_mut() {
        *v = (*v + rng.gen_range(-0.02..0.02)).clamp(0.0, 1.0);
    }
}

fn draw_pole(canvas: &mut Canvas, geom: &ObjectGeometry, rng: &mut ChaCha8Rng) {
    let (h, _, _) = canvas.image.dim();
    let half = (0.05 * geom.size).max(0.75);
    let (cx, cy) = geom.center;
    let bbox = BoundingBox {
        x_min: (cx - half).max(0.0),
        y_min: cy,
        x_max: cx + half,
        y_max: h as f64,
    };
    let shade = rng.gen_range(0.45..0.65);
    canvas.fill(bbox, [shade, shade, shade], |x, y| {
        (x - cx).abs() <= half && y >= cy
    });
}

fn octagon_inside(center: (f64, f64), apothem: f64) -> impl Fn(f64, f64) -> bool {
    move |x, y| {
        let dx = x - center.0;
        let dy = y - center.1;
        let diag = std::f64::consts::FRAC_1_SQRT_2;
        dx.abs() <= apothem
            && dy.abs() <= apothem
            && (dx + dy).abs() * diag <= apothem
            && (dx - dy).abs() * diag <= apothem
    }
}

fn triangle_inside(center: (f64, f64), base: f64) -> impl Fn(f64, f64) -> bool {
    // inverted: flat edge on top, apex pointing down
    let height = base * 3f64.sqrt() / 2.0;
    move |x, y| {
        let t = (y - (center.1 - 0.5 * height)) / height;
        (0.0..=1.0).contains(&t) && (x - center.0).abs() <= 0.5 * base * (1.0 - t)
    }
}

fn draw_sign(canvas: &mut Canvas, geom: &ObjectGeometry, rng: &mut ChaCha8Rng) {
    let bbox = geom.bounding_box();
    let c = geom.center;
    let s = geom.size;
    let red = jitter(rng, [0.8, 0.1, 0.12], 0.06);
    let white = jitter(rng, [0.93, 0.93, 0.93], 0.04);
    match geom.class_id {
        0 => {
            canvas.fill(bbox, white, octagon_inside(c, 0.5 * s));
            canvas.fill(bbox, red, octagon_inside(c, 0.44 * s));
            let bar = (0.3 * s, 0.08 * s);
            canvas.fill(bbox, white, move |x, y| {
                (x - c.0).abs() <= bar.0 && (y - c.1).abs() <= bar.1
            });
        }
        1 => {
            let disk = |r: f64| move |x: f64, y: f64| (x - c.0).powi(2) + (y - c.1).powi(2) <= r * r;
            canvas.fill(bbox, red, disk(0.5 * s));
            canvas.fill(bbox, white, disk(0.36 * s));
        }
        2 => {
            canvas.fill(bbox, red, triangle_inside(c, s));
            // inner triangle shares the outer centroid
            let inner = 0.55 * s;
            let shift = (s - inner) * 3f64.sqrt() / 2.0 / 3.0;
            canvas.fill(bbox, white, triangle_inside((c.0, c.1 - shift * 0.5), inner));
        }
        _ => {
            let blue = jitter(rng, [0.1, 0.3, 0.75], 0.06);
            let half = 0.5 * s;
            canvas.fill(bbox, blue, move |x, y| (x - c.0).abs() <= half && (y - c.1).abs() <= half);
            let inner = 0.18 * s;
            canvas.fill(bbox, white, move |x, y| {
                (x - c.0).abs() <= inner && (y - c.1).abs() <= 2.0 * inner
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_request_gives_empty_dataset() {
        let ds = generate_synthetic_dataset(0, (64, 64), 7).unwrap();
        assert!(ds.is_empty());
        assert_eq!(ds.class_names.len(), 4);
    }

    #[test]
    fn generation_is_bitwise_deterministic() {
        let a = generate_synthetic_dataset(20, (64, 64), 7).unwrap();
        let b = generate_synthetic_dataset(20, (64, 64), 7).unwrap();
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x.id, y.id);
            assert!(x.image.iter().zip(y.image.iter()).all(|(p, q)| p.to_bits() == q.to_bits()));
            assert_eq!(x.annotations, y.annotations);
        }
        let c = generate_synthetic_dataset(20, (64, 64), 8).unwrap();
        assert_ne!(a.samples[0].image, c.samples[0].image);
    }

    #[test]
    fn rejects_tiny_images() {
        assert!(generate_synthetic_dataset(1, (16, 64), 0).is_err());
    }

    #[test]
    fn every_sample_has_exactly_one_target() {
        let ds = generate_synthetic_dataset(50, (64, 48), 3).unwrap();
        for s in &ds.samples {
            assert_eq!(s.boxes_of(0).count(), 1);
            assert!(s.image.iter().all(|v| (0.0..=1.0).contains(v)));
            let bbox = s.boxes_of(0).next().unwrap();
            // room under the sign for the default trigger placement
            assert!(bbox.y_max + 0.75 * bbox.height() <= 64.0);
        }
    }
}
