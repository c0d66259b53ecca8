use std::fs;
use std::path::Path;

use image::RgbImage;
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{validate_annotation, Annotation, BoundingBox, Dataset, Image, Sample};
use crate::error::{Error, Result};

/// File name used for the annotation document written next to the images.
pub const ANNOTATION_FILE: &str = "annotations.json";

/// On-disk annotation schema: image file name to its objects, in file order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationDocument {
    pub class_names: Vec<String>,
    #[serde(default)]
    pub target_class: usize,
    pub images: IndexMap<String, Vec<AnnotationEntry>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationEntry {
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub class_id: usize,
}

impl AnnotationDocument {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

pub fn read_png_image(path: &Path) -> Result<Image> {
    let rgb = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = rgb.dimensions();
    Ok(Image::from_shape_fn((h as usize, w as usize, 3), |(r, c, ch)| {
        rgb.get_pixel(c as u32, r as u32)[ch] as f64 / 255.0
    }))
}

pub fn write_png_image(image: &Image, path: &Path) -> Result<()> {
    let (h, w, _) = image.dim();
    let buffer = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |ch| quantize_channel(image[[y as usize, x as usize, ch]]);
        image::Rgb([px(0), px(1), px(2)])
    });
    buffer.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn quantize_channel(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Loads every image named by `annotation_file` from `root`, in document order.
pub fn load_dataset(root: &Path, annotation_file: &Path) -> Result<Dataset> {
    let doc = AnnotationDocument::read(annotation_file)?;
    let mut samples = Vec::with_capacity(doc.images.len());
    for (name, entries) in &doc.images {
        let path = root.join(name);
        if !path.is_file() {
            return Err(Error::Ingestion {
                id: name.clone(),
                message: format!("image file {} not found", path.display()),
            });
        }
        let image = read_png_image(&path).map_err(|e| Error::Ingestion {
            id: name.clone(),
            message: e.to_string(),
        })?;
        let (h, w, _) = image.dim();
        let annotations = entries
            .iter()
            .map(|entry| {
                let ann = Annotation {
                    bbox: BoundingBox::from_array(entry.bbox),
                    class_id: entry.class_id,
                };
                validate_annotation(name, &ann, doc.class_names.len(), h, w).map(|()| ann)
            })
            .collect::<Result<Vec<_>>>()?;
        samples.push(Sample {
            id: name.clone(),
            image,
            annotations,
        });
    }
    Dataset::new(samples, doc.class_names, doc.target_class)
}

/// Writes one PNG per sample plus [`ANNOTATION_FILE`] into `dir`.
///
/// Sample ids become file names; ids without a `.png` suffix get one.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<AnnotationDocument> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut images = IndexMap::new();
    for sample in &dataset.samples {
        let name = if sample.id.ends_with(".png") {
            sample.id.clone()
        } else {
            format!("{}.png", sample.id)
        };
        write_png_image(&sample.image, &dir.join(&name))?;
        let entries = sample
            .annotations
            .iter()
            .map(|a| AnnotationEntry {
                bbox: a.bbox.to_array(),
                class_id: a.class_id,
            })
            .collect();
        images.insert(name, entries);
    }
    let doc = AnnotationDocument {
        class_names: dataset.class_names.clone(),
        target_class: dataset.target_class,
        images,
    };
    doc.write(&dir.join(ANNOTATION_FILE))?;
    Ok(doc)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_fixture(dir: &Path, names: &[&str], boxes: &[[f64; 4]]) -> std::path::PathBuf {
        let mut images = IndexMap::new();
        for (i, (name, bbox)) in names.iter().zip(boxes).enumerate() {
            let img = Image::from_elem((12, 10, 3), i as f64 / 10.0);
            write_png_image(&img, &dir.join(name)).unwrap();
            images.insert(
                name.to_string(),
                vec![AnnotationEntry {
                    bbox: *bbox,
                    class_id: 0,
                }],
            );
        }
        let doc = AnnotationDocument {
            class_names: vec!["sign".into()],
            target_class: 0,
            images,
        };
        let path = dir.join(ANNOTATION_FILE);
        doc.write(&path).unwrap();
        path
    }

    #[test]
    fn empty_document_gives_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let ann = write_fixture(dir.path(), &[], &[]);
        let ds = load_dataset(dir.path(), &ann).unwrap();
        assert!(ds.is_empty());
    }

    #[test]
    fn loads_in_file_order() {
        let dir = tempfile::tempdir().unwrap();
        let names = ["zeta.png", "alpha.png", "mid.png"];
        let ann = write_fixture(dir.path(), &names, &[[1.0, 1.0, 4.0, 4.0]; 3]);
        let ds = load_dataset(dir.path(), &ann).unwrap();
        let ids: Vec<&str> = ds.samples.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, names);
        assert_eq!(ds.image_size(), Some((12, 10)));
        assert!((ds.samples[1].image[[0, 0, 0]] - 26.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_box_names_the_sample() {
        let dir = tempfile::tempdir().unwrap();
        let ann = write_fixture(dir.path(), &["bad.png"], &[[3.0, 1.0, 3.0, 4.0]]);
        match load_dataset(dir.path(), &ann) {
            Err(Error::Validation { id, .. }) => assert_eq!(id, "bad.png"),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn missing_image_names_the_sample() {
        let dir = tempfile::tempdir().unwrap();
        let ann = write_fixture(dir.path(), &["there.png"], &[[1.0, 1.0, 2.0, 2.0]]);
        fs::remove_file(dir.path().join("there.png")).unwrap();
        match load_dataset(dir.path(), &ann) {
            Err(Error::Ingestion { id, .. }) => assert_eq!(id, "there.png"),
            other => panic!("expected ingestion error, got {other:?}"),
        }
    }
}
