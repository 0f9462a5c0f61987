//! Turning a detection into the deliverable images: the original with its background set to
//! white, and the tight crop around the soil region inside the predicted box.

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::coco::SOIL_CATEGORY_ID;
use crate::mask::{BinaryMask, ProbMap};
use crate::model::{DetectionResult, InstancePredictor, ModelError};

#[derive(Debug, thiserror::Error)]
pub enum PostprocessError {
    #[error("no soil detection with score >= {threshold}")]
    NoSoilDetected { threshold: f64 },
    #[error("no mask pixel inside the predicted box")]
    EmptyIntersection,
    #[error("shape mismatch: image is {image:?}, mask is {mask:?} (height, width)")]
    ShapeMismatch { image: (usize, usize), mask: (usize, usize) },
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, PostprocessError>;

/// A pixel is set iff its probability is at least `threshold`.
pub fn binarize_mask(prob: &ProbMap, threshold: f64) -> BinaryMask {
    let data = prob.as_slice().iter().map(|&p| p as f64 >= threshold).collect();
    BinaryMask::from_vec(prob.width(), prob.height(), data).expect("same dimensions")
}

/// Highest-scoring soil detection at or above `score_threshold`; the first one wins ties.
pub fn select_primary_detection(dets: &[DetectionResult], score_threshold: f64) -> Result<&DetectionResult> {
    let mut best: Option<&DetectionResult> = None;
    for d in dets {
        if d.label != SOIL_CATEGORY_ID || (d.score as f64) < score_threshold {
            continue;
        }
        if best.is_none_or(|b| d.score > b.score) {
            best = Some(d);
        }
    }
    best.ok_or(PostprocessError::NoSoilDetected {
        threshold: score_threshold,
    })
}

const WHITE: Rgb<u8> = Rgb([255, 255, 255]);

/// Keeps original pixels where the mask is set and paints every other pixel white.
pub fn apply_mask_whiten(original: &RgbImage, mask: &BinaryMask) -> Result<RgbImage> {
    let image_shape = (original.height() as usize, original.width() as usize);
    if image_shape != mask.shape() {
        return Err(PostprocessError::ShapeMismatch {
            image: image_shape,
            mask: mask.shape(),
        });
    }
    let mut out = original.clone();
    for (x, y, px) in out.enumerate_pixels_mut() {
        if !mask.get(y as usize, x as usize) {
            *px = WHITE;
        }
    }
    Ok(out)
}

/// Integer pixel rectangle, `[x1, x2) × [y1, y2)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRect {
    pub x1: u32,
    pub y1: u32,
    pub x2: u32,
    pub y2: u32,
}

impl CropRect {
    pub fn width(&self) -> u32 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> u32 {
        self.y2 - self.y1
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.x1 as usize..self.x2 as usize).contains(&col) && (self.y1 as usize..self.y2 as usize).contains(&row)
    }

    /// Smallest pixel rectangle covering a continuous box, clipped to the image.
    pub fn covering(bbox: &[f32; 4], width: u32, height: u32) -> Self {
        let clamp = |v: f32, hi: u32| (v.max(0.0) as u32).min(hi);
        Self {
            x1: clamp(bbox[0].floor(), width),
            y1: clamp(bbox[1].floor(), height),
            x2: clamp(bbox[2].ceil(), width),
            y2: clamp(bbox[3].ceil(), height),
        }
    }
}

/// Tight bounds of the set pixels of `mask` that fall inside `predicted_box`.
pub fn min_circumscribed_rect(mask: &BinaryMask, predicted_box: &CropRect) -> Result<CropRect> {
    let x_end = (predicted_box.x2 as usize).min(mask.width());
    let y_end = (predicted_box.y2 as usize).min(mask.height());
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    for row in predicted_box.y1 as usize..y_end {
        for col in predicted_box.x1 as usize..x_end {
            if mask.get(row, col) {
                bounds = Some(match bounds {
                    None => (col, row, col, row),
                    Some((x1, y1, x2, y2)) => (x1.min(col), y1.min(row), x2.max(col), y2.max(row)),
                });
            }
        }
    }
    let (x1, y1, x2, y2) = bounds.ok_or(PostprocessError::EmptyIntersection)?;
    Ok(CropRect {
        x1: x1 as u32,
        y1: y1 as u32,
        x2: x2 as u32 + 1,
        y2: y2 as u32 + 1,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentConfig {
    pub score_threshold: f64,
    pub mask_threshold: f64,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.5,
            mask_threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SegmentationArtifact {
    /// Original inside the mask, white elsewhere.
    pub composite: RgbImage,
    pub crop_rect: CropRect,
    /// `composite` restricted to `crop_rect`.
    pub cropped: RgbImage,
    pub score: f32,
    pub detection_box: CropRect,
    pub mask: BinaryMask,
}

/// The post-processing half of [`segment_image`], applied to detections already computed.
pub fn segment_detections(
    image: &RgbImage,
    dets: &[DetectionResult],
    cfg: &SegmentConfig,
) -> Result<SegmentationArtifact> {
    let det = select_primary_detection(dets, cfg.score_threshold)?;
    let mask = binarize_mask(&det.mask_prob, cfg.mask_threshold);
    let composite = apply_mask_whiten(image, &mask)?;
    let detection_box = CropRect::covering(&det.bbox, image.width(), image.height());
    let crop_rect = min_circumscribed_rect(&mask, &detection_box)?;
    let cropped = image::imageops::crop_imm(
        &composite,
        crop_rect.x1,
        crop_rect.y1,
        crop_rect.width(),
        crop_rect.height(),
    )
    .to_image();
    Ok(SegmentationArtifact {
        composite,
        crop_rect,
        cropped,
        score: det.score,
        detection_box,
        mask,
    })
}

/// Detect, keep the best soil instance, whiten its background and crop it.
pub fn segment_image<P: InstancePredictor + ?Sized>(
    model: &P,
    image: &RgbImage,
    cfg: &SegmentConfig,
) -> Result<SegmentationArtifact> {
    let dets = model.predict(image)?;
    segment_detections(image, &dets, cfg)
}
