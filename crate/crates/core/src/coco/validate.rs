use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::Serialize;

use super::{CocoDataset, SOIL_CATEGORY_ID, SOIL_CATEGORY_NAME};

const COORD_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub image_id: Option<u64>,
    pub annotation_id: Option<u64>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.annotation_id, self.image_id) {
            (Some(a), Some(i)) => write!(f, "annotation {a} (image {i}): {}", self.message),
            (Some(a), None) => write!(f, "annotation {a}: {}", self.message),
            (None, Some(i)) => write!(f, "image {i}: {}", self.message),
            (None, None) => write!(f, "dataset: {}", self.message),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn len(&self) -> usize {
        self.violations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, image_id: Option<u64>, annotation_id: Option<u64>, message: String) {
        self.violations.push(Violation {
            image_id,
            annotation_id,
            message,
        });
    }
}

/// Checks every content invariant of a loaded dataset. Violations are collected, never raised.
pub fn validate_dataset(ds: &CocoDataset) -> ValidationReport {
    let mut report = ValidationReport::default();

    match ds.categories.as_slice() {
        [c] if c.id == SOIL_CATEGORY_ID && c.name == SOIL_CATEGORY_NAME => {}
        cats => report.push(
            None,
            None,
            format!(
                "categories must be exactly [{{id: {SOIL_CATEGORY_ID}, name: \"{SOIL_CATEGORY_NAME}\"}}], found {}",
                cats.iter()
                    .map(|c| format!("{}:{}", c.id, c.name))
                    .collect::<Vec<_>>()
                    .join(", ")
            ),
        ),
    }

    let mut images = HashMap::new();
    for img in &ds.images {
        if img.id == 0 {
            report.push(Some(0), None, "image id must be positive".into());
        }
        if images.insert(img.id, img).is_some() {
            report.push(Some(img.id), None, "duplicate image id".into());
        }
        if img.width == 0 || img.height == 0 {
            report.push(
                Some(img.id),
                None,
                format!("invalid size {}x{}", img.width, img.height),
            );
        }
    }

    let category_ids: HashSet<u64> = ds.categories.iter().map(|c| c.id).collect();
    let mut ann_ids = HashSet::new();
    let mut annotated = HashSet::new();
    for ann in &ds.annotations {
        let (aid, iid) = (Some(ann.id), Some(ann.image_id));
        if ann.id == 0 {
            report.push(iid, aid, "annotation id must be positive".into());
        }
        if !ann_ids.insert(ann.id) {
            report.push(iid, aid, "duplicate annotation id".into());
        }
        if !category_ids.contains(&ann.category_id) {
            report.push(iid, aid, format!("unknown category {}", ann.category_id));
        }
        if ann.iscrowd != 0 {
            report.push(iid, aid, "crowd annotations are not supported".into());
        }
        let Some(img) = images.get(&ann.image_id) else {
            report.push(iid, aid, "references an unknown image".into());
            continue;
        };
        annotated.insert(ann.image_id);

        if ann.segmentation.is_empty() {
            report.push(iid, aid, "segmentation has no polygons".into());
        }
        let (w, h) = (img.width as f64, img.height as f64);
        for (pi, poly) in ann.segmentation.iter().enumerate() {
            if poly.len() % 2 != 0 {
                report.push(iid, aid, format!("polygon {pi} has an odd coordinate count"));
            } else if poly.len() < 6 {
                report.push(
                    iid,
                    aid,
                    format!("polygon {pi} has {} vertices (need >= 3)", poly.len() / 2),
                );
            }
            let outside = poly.chunks_exact(2).any(|p| {
                !(p[0].is_finite() && p[1].is_finite())
                    || p[0] < -COORD_TOLERANCE
                    || p[1] < -COORD_TOLERANCE
                    || p[0] > w + COORD_TOLERANCE
                    || p[1] > h + COORD_TOLERANCE
            });
            if outside {
                report.push(
                    iid,
                    aid,
                    format!("polygon {pi} has vertices outside [0, {w}] x [0, {h}]"),
                );
            }
        }

        if let Some((x0, y0, x1, y1)) = ann.vertex_extent() {
            let [bx0, by0, bx1, by1] = ann.bbox_xyxy();
            if bx0 > x0 + COORD_TOLERANCE
                || by0 > y0 + COORD_TOLERANCE
                || bx1 < x1 - COORD_TOLERANCE
                || by1 < y1 - COORD_TOLERANCE
            {
                report.push(
                    iid,
                    aid,
                    format!(
                        "bbox [{bx0}, {by0}, {bx1}, {by1}] does not contain vertex extent [{x0}, {y0}, {x1}, {y1}]"
                    ),
                );
            }
        }
        if !(ann.area > 0.0) {
            report.push(iid, aid, format!("area must be positive, got {}", ann.area));
        }
    }

    for img in &ds.images {
        if !annotated.contains(&img.id) {
            report.push(Some(img.id), None, "image has no annotations".into());
        }
    }

    report
}
