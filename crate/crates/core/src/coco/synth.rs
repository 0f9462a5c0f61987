//! Deterministic synthetic stand-in for the soil photographs: one irregular, textured,
//! purple-brown blob near the image center on a cluttered background.

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    polygon_area, polygons_to_mask, CategoryDef, CocoFile, DatasetError, ImageRecord,
    PolygonAnnotation, Result, Split,
};

const BLOB_VERTICES: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    /// Images in the train split.
    pub n_images: usize,
    /// Square side in pixels.
    pub image_size: u32,
    pub seed: u64,
    /// Images in the val split; `None` uses `round(n_images * 3 / 7)`, at least one.
    pub n_val: Option<usize>,
}

impl SyntheticSpec {
    pub fn new(n_images: usize, image_size: u32, seed: u64) -> Self {
        Self {
            n_images,
            image_size,
            seed,
            n_val: None,
        }
    }

    pub fn val_count(&self) -> usize {
        self.n_val
            .unwrap_or_else(|| ((self.n_images as f64 * 3.0 / 7.0).round() as usize).max(1))
    }
}

/// Writes `out_root/{annotations,train2017,val2017}` for `spec`.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec, out_root: &Path) -> Result<()> {
    if spec.n_images == 0 {
        return Err(DatasetError::NoImages);
    }
    if spec.image_size < 16 {
        return Err(DatasetError::SchemaError {
            path: out_root.to_path_buf(),
            message: format!("image_size {} is below the 16 px minimum", spec.image_size),
        });
    }
    write_split(spec, out_root, Split::Train, spec.n_images)?;
    write_split(spec, out_root, Split::Val, spec.val_count())
}

fn write_split(spec: &SyntheticSpec, root: &Path, split: Split, count: usize) -> Result<()> {
    let image_dir = split.image_dir(root);
    fs::create_dir_all(&image_dir).map_err(|e| DatasetError::io(&image_dir, e))?;
    let id_base: u64 = match split {
        Split::Train => 0,
        Split::Val => 100_000,
    };

    let mut file = CocoFile {
        images: Vec::with_capacity(count),
        annotations: Vec::with_capacity(count),
        categories: vec![CategoryDef::soil()],
    };
    for i in 0..count {
        let id = id_base + i as u64 + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(
            spec.seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(id),
        );
        let (img, polygon) = render_sample(&mut rng, spec.image_size);
        let file_name = format!("soil_{id:06}.png");
        let path = image_dir.join(&file_name);
        img.save(&path)
            .map_err(|source| DatasetError::Image { path, source })?;

        let (x0, y0, x1, y1) = polygon.chunks_exact(2).fold(
            (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
            |(a, b, c, d), p| (a.min(p[0]), b.min(p[1]), c.max(p[0]), d.max(p[1])),
        );
        file.images.push(ImageRecord {
            id,
            file_name,
            width: spec.image_size,
            height: spec.image_size,
        });
        file.annotations.push(PolygonAnnotation {
            id,
            image_id: id,
            category_id: 1,
            area: round2(polygon_area(&polygon)),
            segmentation: vec![polygon],
            bbox: [x0, y0, round2(x1 - x0), round2(y1 - y0)],
            iscrowd: 0,
        });
    }
    file.write(&split.annotation_path(root))
}

fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

/// Renders one image and returns it with the blob's outline polygon.
fn render_sample(rng: &mut ChaCha8Rng, size: u32) -> (RgbImage, Vec<f64>) {
    let s = size as f64;
    let polygon = blob_polygon(rng, s);
    let mask = polygons_to_mask(std::slice::from_ref(&polygon), size as usize, size as usize);

    // Background: a muted base color, two smooth waves, a few clutter patches, pixel noise.
    let base = [
        rng.random_range(90.0..200.0),
        rng.random_range(110.0..200.0),
        rng.random_range(60.0..150.0),
    ];
    let waves: Vec<(f64, f64, f64, f64)> = (0..2)
        .map(|_| {
            (
                rng.random_range(0.02..0.12),
                rng.random_range(0.02..0.12),
                rng.random_range(0.0..TAU),
                rng.random_range(10.0..30.0),
            )
        })
        .collect();
    let clutter: Vec<(f64, f64, f64, [f64; 3])> = (0..rng.random_range(2..6))
        .map(|_| {
            (
                rng.random_range(0.0..s),
                rng.random_range(0.0..s),
                rng.random_range(s * 0.04..s * 0.12),
                [
                    rng.random_range(40.0..230.0),
                    rng.random_range(90.0..230.0),
                    rng.random_range(40.0..160.0),
                ],
            )
        })
        .collect();

    // Soil: purple-brown with grain.
    let soil = [
        rng.random_range(85.0..125.0),
        rng.random_range(45.0..75.0),
        rng.random_range(65.0..100.0),
    ];

    let mut img = RgbImage::new(size, size);
    for row in 0..size {
        for col in 0..size {
            let (x, y) = (col as f64 + 0.5, row as f64 + 0.5);
            let px = if mask.get(row as usize, col as usize) {
                let grain = rng.random_range(-18.0..18.0);
                [soil[0] + grain, soil[1] + grain * 0.7, soil[2] + grain]
            } else {
                let shade: f64 = waves
                    .iter()
                    .map(|&(fx, fy, ph, amp)| amp * (fx * x + fy * y + ph).sin())
                    .sum();
                let mut c = [base[0] + shade, base[1] + shade, base[2] + shade * 0.5];
                for &(cx, cy, r, color) in &clutter {
                    if (x - cx).powi(2) + (y - cy).powi(2) <= r * r {
                        c = color;
                    }
                }
                let n = rng.random_range(-12.0..12.0);
                [c[0] + n, c[1] + n, c[2] + n]
            };
            img.put_pixel(col, row, Rgb(px.map(|v: f64| v.clamp(0.0, 255.0) as u8)));
        }
    }
    (img, polygon)
}

/// Star-shaped outline around a point near the center; coordinates rounded to 0.01 px.
fn blob_polygon(rng: &mut ChaCha8Rng, s: f64) -> Vec<f64> {
    let cx = s * rng.random_range(0.4..0.6);
    let cy = s * rng.random_range(0.4..0.6);
    let radius = s * rng.random_range(0.22..0.34);
    let harmonics: Vec<(f64, f64, f64)> = (2..6)
        .map(|k| {
            (
                k as f64,
                rng.random_range(0.0..0.12),
                rng.random_range(0.0..TAU),
            )
        })
        .collect();
    let mut poly = Vec::with_capacity(BLOB_VERTICES * 2);
    for v in 0..BLOB_VERTICES {
        let theta = TAU * v as f64 / BLOB_VERTICES as f64;
        let wobble: f64 = harmonics
            .iter()
            .map(|&(k, amp, ph)| amp * (k * theta + ph).sin())
            .sum();
        let r = radius * (1.0 + wobble) * rng.random_range(0.97..1.03);
        let x = (cx + r * theta.cos()).clamp(1.0, s - 1.0);
        let y = (cy + r * theta.sin()).clamp(1.0, s - 1.0);
        poly.push(round2(x));
        poly.push(round2(y));
    }
    poly
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coco::{load_coco_dataset, polygon_to_mask, validate_dataset};

    #[test]
    fn twenty_images_validate_clean() {
        let dir = tempfile::tempdir().unwrap();
        generate_synthetic_dataset(&SyntheticSpec::new(20, 64, 1), dir.path()).unwrap();
        let train = load_coco_dataset(dir.path(), Split::Train).unwrap();
        assert_eq!(train.images.len(), 20);
        assert_eq!(train.annotations.len(), 20);
        assert!(validate_dataset(&train).is_clean());
        let val = load_coco_dataset(dir.path(), Split::Val).unwrap();
        assert_eq!(val.images.len(), 9);
        assert!(validate_dataset(&val).is_clean());
    }

    #[test]
    fn same_seed_same_bytes() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let spec = SyntheticSpec::new(3, 48, 11);
        generate_synthetic_dataset(&spec, a.path()).unwrap();
        generate_synthetic_dataset(&spec, b.path()).unwrap();
        for split in [Split::Train, Split::Val] {
            assert_eq!(
                fs::read(split.annotation_path(a.path())).unwrap(),
                fs::read(split.annotation_path(b.path())).unwrap()
            );
        }
    }

    #[test]
    fn zero_images_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            generate_synthetic_dataset(&SyntheticSpec::new(0, 64, 1), dir.path()),
            Err(DatasetError::NoImages)
        ));
    }

    #[test]
    fn mask_area_tracks_polygon_area() {
        let dir = tempfile::tempdir().unwrap();
        generate_synthetic_dataset(&SyntheticSpec::new(10, 96, 5), dir.path()).unwrap();
        let ds = load_coco_dataset(dir.path(), Split::Train).unwrap();
        for ann in &ds.annotations {
            let poly = &ann.segmentation[0];
            let n = poly.len() / 2;
            let perimeter: f64 = (0..n)
                .map(|i| {
                    let j = (i + 1) % n;
                    (poly[2 * j] - poly[2 * i]).hypot(poly[2 * j + 1] - poly[2 * i + 1])
                })
                .sum();
            let area = polygon_to_mask(ann, 96, 96).unwrap().area() as f64;
            assert!((area - ann.area).abs() <= perimeter, "{area} vs {}", ann.area);
        }
    }
}
