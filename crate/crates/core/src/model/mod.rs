//! Mask R-CNN: FPN backbone, region proposal network, box and mask heads.

pub mod anchors;
mod backbone;
pub mod boxes;
pub mod config;
mod detector;
mod heads;
pub mod loss;
mod params;
pub mod roi_align;
mod transform;

use image::RgbImage;

use crate::mask::ProbMap;

pub use anchors::{rpn_head_channels, LevelShape};
pub use boxes::BoxXyxy;
pub use config::{AnchorConfig, Backbone, DetectorParams, ModelConfig};
pub use detector::{build_model, build_model_on, Model, TrainSample};
pub use loss::{mask_bce_loss, total_loss, LossBreakdown, LossTerms};
pub use roi_align::{roi_align, FeatureMap, RoiFeatures};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    ConfigError(String),
    #[error("pretrained weights unavailable: {0}")]
    WeightsUnavailable(String),
    #[error("anchors per location must be >= 1, got {0}")]
    InvalidK(usize),
    #[error("degenerate box {0:?}")]
    DegenerateBox([f64; 4]),
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch { expected: Vec<usize>, actual: Vec<usize> },
    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),
    #[error("model state mismatch: {0}")]
    StateMismatch(String),
    #[error(transparent)]
    Candle(#[from] candle_core::Error),
}

/// One detected instance in original image pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionResult {
    /// `(x1, y1, x2, y2)`, clipped to the image.
    pub bbox: BoxXyxy,
    pub score: f32,
    /// Category id (class index of the detector; 1 is soil).
    pub label: u64,
    /// Full-resolution probabilities, zero outside the box.
    pub mask_prob: ProbMap,
}

/// Anything that turns an RGB image into scored instance masks.
pub trait InstancePredictor {
    /// Detections sorted by descending score.
    fn predict(&self, image: &RgbImage) -> Result<Vec<DetectionResult>, ModelError>;
}

impl<T: InstancePredictor + ?Sized> InstancePredictor for &T {
    fn predict(&self, image: &RgbImage) -> Result<Vec<DetectionResult>, ModelError> {
        (**self).predict(image)
    }
}
