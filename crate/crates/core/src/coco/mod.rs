//! COCO2017-layout single-class datasets.
//!
//! A dataset root looks like
//!
//! ```text
//! root/
//!   annotations/instances_train2017.json
//!   annotations/instances_val2017.json
//!   train2017/*.png|jpg
//!   val2017/*.png|jpg
//! ```
//!
//! Only polygon segmentations are understood; RLE and crowd annotations are rejected at parse time.

mod raster;
mod split;
mod synth;
mod validate;

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::BinaryMask;

pub use raster::{point_in_polygon, polygon_area, polygon_to_mask, polygons_to_mask};
pub use split::{split_dataset, SplitSpec};
pub use synth::{generate_synthetic_dataset, SyntheticSpec};
pub use validate::{validate_dataset, ValidationReport, Violation};

/// The one category this pipeline trains on.
pub const SOIL_CATEGORY_ID: u64 = 1;
pub const SOIL_CATEGORY_NAME: &str = "soil";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("missing file or directory: {0}")]
    MissingFile(PathBuf),
    #[error("schema error in {path}: {message}")]
    SchemaError { path: PathBuf, message: String },
    #[error("annotation {annotation_id} references unknown {kind} {target_id}")]
    DanglingReference {
        annotation_id: u64,
        kind: &'static str,
        target_id: u64,
    },
    #[error("annotation {annotation_id}: polygon {polygon_index} has fewer than 3 vertices")]
    DegeneratePolygon {
        annotation_id: u64,
        polygon_index: usize,
    },
    #[error("empty input")]
    EmptyInput,
    #[error("invalid split ratio {0}; expected a value in (0, 1)")]
    InvalidRatio(f64),
    #[error("duplicate id {0} in input")]
    DuplicateId(u64),
    #[error("n_images must be at least 1")]
    NoImages,
    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl DatasetError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by a broken directory layout or unreadable files rather than content.
    pub fn is_layout_error(&self) -> bool {
        matches!(
            self,
            Self::MissingFile(_) | Self::Io { .. } | Self::Image { .. }
        )
    }
}

pub type Result<T, E = DatasetError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }

    /// `train2017` / `val2017`.
    pub fn image_dir_name(self) -> String {
        format!("{}2017", self.as_str())
    }

    /// `instances_train2017.json` / `instances_val2017.json`.
    pub fn annotation_file_name(self) -> String {
        format!("instances_{}2017.json", self.as_str())
    }

    pub fn annotation_path(self, root: &Path) -> PathBuf {
        root.join("annotations").join(self.annotation_file_name())
    }

    pub fn image_dir(self, root: &Path) -> PathBuf {
        root.join(self.image_dir_name())
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(format!("unknown split '{other}', expected train or val")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolygonAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    /// Each polygon is a flat `[x0, y0, x1, y1, ...]` list in pixel coordinates.
    pub segmentation: Vec<Vec<f64>>,
    /// `[x, y, w, h]`.
    pub bbox: [f64; 4],
    pub area: f64,
    #[serde(default)]
    pub iscrowd: u8,
}

impl PolygonAnnotation {
    /// Vertex extent over all polygons as `(min_x, min_y, max_x, max_y)`.
    pub fn vertex_extent(&self) -> Option<(f64, f64, f64, f64)> {
        let mut pts = self
            .segmentation
            .iter()
            .flat_map(|poly| poly.chunks_exact(2).map(|p| (p[0], p[1])))
            .peekable();
        pts.peek()?;
        Some(pts.fold(
            (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
            |(x0, y0, x1, y1), (x, y)| (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
        ))
    }

    /// Box as `(x1, y1, x2, y2)`.
    pub fn bbox_xyxy(&self) -> [f64; 4] {
        let [x, y, w, h] = self.bbox;
        [x, y, x + w, y + h]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryDef {
    pub id: u64,
    pub name: String,
}

impl CategoryDef {
    pub fn soil() -> Self {
        Self {
            id: SOIL_CATEGORY_ID,
            name: SOIL_CATEGORY_NAME.to_string(),
        }
    }
}

/// On-disk annotation file. Unknown keys (info, licenses, supercategory, ...) are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoFile {
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<PolygonAnnotation>,
    pub categories: Vec<CategoryDef>,
}

impl CocoFile {
    pub fn from_json_str(path: &Path, text: &str) -> Result<Self> {
        let file: CocoFile = serde_json::from_str(text).map_err(|e| DatasetError::SchemaError {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        if file.images.is_empty() {
            return Err(DatasetError::SchemaError {
                path: path.to_path_buf(),
                message: "\"images\" is empty".into(),
            });
        }
        Ok(file)
    }

    pub fn read(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(DatasetError::MissingFile(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| DatasetError::io(path, e))?;
        Self::from_json_str(path, &text)
    }

    /// Pretty JSON with sorted keys, so identical content always yields identical bytes.
    pub fn to_json_string(&self) -> String {
        crate::json::to_sorted_string(self).expect("COCO file serializes")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| DatasetError::io(parent, e))?;
        }
        fs::write(path, self.to_json_string()).map_err(|e| DatasetError::io(path, e))
    }

    fn check_references(&self) -> Result<()> {
        let image_ids: HashSet<u64> = self.images.iter().map(|i| i.id).collect();
        let category_ids: HashSet<u64> = self.categories.iter().map(|c| c.id).collect();
        for ann in &self.annotations {
            if !image_ids.contains(&ann.image_id) {
                return Err(DatasetError::DanglingReference {
                    annotation_id: ann.id,
                    kind: "image",
                    target_id: ann.image_id,
                });
            }
            if !category_ids.contains(&ann.category_id) {
                return Err(DatasetError::DanglingReference {
                    annotation_id: ann.id,
                    kind: "category",
                    target_id: ann.category_id,
                });
            }
        }
        Ok(())
    }
}

/// A cross-referenced dataset: annotation file plus the directory its images live in.
#[derive(Debug, Clone, PartialEq)]
pub struct CocoDataset {
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<PolygonAnnotation>,
    pub categories: Vec<CategoryDef>,
    pub root: PathBuf,
    pub image_dir: PathBuf,
}

/// Loads `root/annotations/instances_{split}2017.json` against `root/{split}2017/`.
pub fn load_coco_dataset(root: &Path, split: Split) -> Result<CocoDataset> {
    let image_dir = split.image_dir(root);
    let ann_path = split.annotation_path(root);
    if !ann_path.is_file() {
        return Err(DatasetError::MissingFile(ann_path));
    }
    if !image_dir.is_dir() {
        return Err(DatasetError::MissingFile(image_dir));
    }
    let mut ds = load_annotation_file(&ann_path, &image_dir)?;
    ds.root = root.to_path_buf();
    Ok(ds)
}

/// Loads any COCO annotation file whose `file_name`s are relative to `image_dir`.
pub fn load_annotation_file(ann_path: &Path, image_dir: &Path) -> Result<CocoDataset> {
    let file = CocoFile::read(ann_path)?;
    file.check_references()?;
    for img in &file.images {
        let p = image_dir.join(&img.file_name);
        if !p.is_file() {
            return Err(DatasetError::MissingFile(p));
        }
    }
    Ok(CocoDataset {
        images: file.images,
        annotations: file.annotations,
        categories: file.categories,
        root: image_dir.parent().unwrap_or(image_dir).to_path_buf(),
        image_dir: image_dir.to_path_buf(),
    })
}

impl CocoDataset {
    pub fn to_coco_file(&self) -> CocoFile {
        CocoFile {
            images: self.images.clone(),
            annotations: self.annotations.clone(),
            categories: self.categories.clone(),
        }
    }

    /// Writes the annotation JSON to `path` (images are not copied).
    pub fn write_annotations(&self, path: &Path) -> Result<()> {
        self.to_coco_file().write(path)
    }

    pub fn image_path(&self, image: &ImageRecord) -> PathBuf {
        self.image_dir.join(&image.file_name)
    }

    pub fn image(&self, id: u64) -> Option<&ImageRecord> {
        self.images.iter().find(|i| i.id == id)
    }

    pub fn annotations_for(&self, image_id: u64) -> impl Iterator<Item = &PolygonAnnotation> {
        self.annotations
            .iter()
            .filter(move |a| a.image_id == image_id)
    }

    /// One rasterized mask per annotation of `image`.
    pub fn instance_masks(&self, image: &ImageRecord) -> Result<Vec<BinaryMask>> {
        self.annotations_for(image.id)
            .map(|a| polygon_to_mask(a, image.width as usize, image.height as usize))
            .collect()
    }

    pub fn load_rgb(&self, image: &ImageRecord) -> Result<image::RgbImage> {
        let path = self.image_path(image);
        let img = image::open(&path).map_err(|source| DatasetError::Image { path, source })?;
        Ok(img.to_rgb8())
    }
}
