//! Converter from a COCO-style instances file to [`AnnotationDocument`].
//! Only `images`, `annotations[].bbox/category_id/image_id` and
//! `categories` are read.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use serde::Deserialize;

use super::io::{AnnotationDocument, AnnotationEntry};
use crate::error::{Error, Result};
use crate::rng::stream_rng;

#[derive(Debug, Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

#[derive(Debug, Deserialize)]
struct CocoImage {
    id: u64,
    file_name: String,
}

#[derive(Debug, Deserialize)]
struct CocoAnnotation {
    image_id: u64,
    category_id: u64,
    bbox: [f64; 4],
}

#[derive(Debug, Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CocoSplit {
    pub train: AnnotationDocument,
    pub test: AnnotationDocument,
}

/// Keeps images containing `target_category`, converts `[x, y, w, h]` boxes
/// to corner form, and splits the images by a seeded shuffle.
pub fn convert_coco(instances: &Path, target_category: &str, test_count: usize, seed: u64) -> Result<CocoSplit> {
    let text = fs::read_to_string(instances).map_err(|e| Error::io(instances, e))?;
    let coco: CocoFile = serde_json::from_str(&text)?;

    let class_names: Vec<String> = coco.categories.iter().map(|c| c.name.clone()).collect();
    let class_of: IndexMap<u64, usize> = coco.categories.iter().enumerate().map(|(i, c)| (c.id, i)).collect();
    let target_class = class_names
        .iter()
        .position(|n| n == target_category)
        .ok_or_else(|| Error::Config(format!("category `{target_category}` not in instances file")))?;

    let mut per_image: IndexMap<u64, Vec<AnnotationEntry>> = IndexMap::new();
    for ann in &coco.annotations {
        let [x, y, w, h] = ann.bbox;
        if w <= 0.0 || h <= 0.0 {
            continue;
        }
        let class_id = *class_of
            .get(&ann.category_id)
            .ok_or_else(|| Error::Config(format!("unknown category id {}", ann.category_id)))?;
        per_image.entry(ann.image_id).or_default().push(AnnotationEntry {
            bbox: [x, y, x + w, y + h],
            class_id,
        });
    }

    let mut selected: Vec<(String, Vec<AnnotationEntry>)> = coco
        .images
        .iter()
        .filter_map(|img| {
            let entries = per_image.get(&img.id)?;
            entries
                .iter()
                .any(|e| e.class_id == target_class)
                .then(|| (img.file_name.clone(), entries.clone()))
        })
        .collect();
    selected.shuffle(&mut stream_rng(seed, 0));
    let test_count = test_count.min(selected.len());
    let train_part = selected.split_off(test_count);

    let doc = |items: Vec<(String, Vec<AnnotationEntry>)>| AnnotationDocument {
        class_names: class_names.clone(),
        target_class,
        images: items.into_iter().collect(),
    };
    Ok(CocoSplit {
        test: doc(selected),
        train: doc(train_part),
    })
}
