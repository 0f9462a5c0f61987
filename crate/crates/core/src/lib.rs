//! Soil instance segmentation pipeline.
//!
//! * [`coco`]: COCO2017-layout dataset loading, validation, splitting, rasterization and synthesis.
//! * [`model`]: a Mask R-CNN detector (FPN backbone, RPN, box and mask heads) on candle.
//! * [`training`]: SGD with momentum, step learning-rate decay, logs and checkpoints.
//! * [`evaluation`]: mask IoU, COCO-style AP and the inference timing harness.
//! * [`postprocess`]: background whitening and minimum bounding-rectangle crop.

pub mod coco;
pub mod evaluation;
pub mod json;
pub mod mask;
pub mod model;
pub mod postprocess;
pub mod training;
