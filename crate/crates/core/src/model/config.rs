use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ModelError;

/// Feature extractor feeding the FPN.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Backbone {
    /// ResNet-50 body with frozen batch norm; expects COCO-pretrained weights.
    #[serde(rename = "resnet50-fpn")]
    Resnet50Fpn,
    /// Five stride-2 conv stages with group norm, for CPU-scale experiments.
    #[serde(rename = "compact-fpn")]
    CompactFpn,
}

impl Backbone {
    pub fn as_str(self) -> &'static str {
        match self {
            Backbone::Resnet50Fpn => "resnet50-fpn",
            Backbone::CompactFpn => "compact-fpn",
        }
    }
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Backbone {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "resnet50-fpn" => Ok(Backbone::Resnet50Fpn),
            "compact-fpn" => Ok(Backbone::CompactFpn),
            other => Err(format!(
                "unknown backbone '{other}' (expected resnet50-fpn or compact-fpn)"
            )),
        }
    }
}

/// Anchor sizes (one per pyramid level) crossed with shared aspect ratios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorConfig {
    pub sizes: Vec<f64>,
    /// Height / width.
    pub aspect_ratios: Vec<f64>,
}

impl AnchorConfig {
    /// Anchors per spatial location on each level.
    pub fn k(&self) -> usize {
        self.aspect_ratios.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RpnParams {
    pub pre_nms_top_n_train: usize,
    pub pre_nms_top_n_test: usize,
    pub post_nms_top_n_train: usize,
    pub post_nms_top_n_test: usize,
    pub nms_thresh: f64,
    pub fg_iou_thresh: f64,
    pub bg_iou_thresh: f64,
    pub batch_size_per_image: usize,
    pub positive_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiParams {
    pub fg_iou_thresh: f64,
    pub bg_iou_thresh: f64,
    pub batch_size_per_image: usize,
    pub positive_fraction: f64,
    /// Upper bound on positive ROIs per image fed to the mask branch.
    pub mask_rois_per_image: usize,
    pub box_score_thresh: f64,
    pub box_nms_thresh: f64,
    pub detections_per_img: usize,
    pub box_head_dim: usize,
    /// 3×3 conv + group norm layers ahead of a single fc in the box head; 0 keeps the
    /// two-fc head.
    #[serde(default)]
    pub box_head_convs: usize,
    pub mask_head_channels: usize,
    pub mask_head_layers: usize,
    /// Group norm after each mask head conv.
    #[serde(default)]
    pub mask_head_norm: bool,
    /// Box side that maps to pyramid level 4 when assigning ROIs to levels.
    pub canonical_scale: f64,
}

/// Assembly internals. Standard Mask R-CNN values, scaled down for the compact backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorParams {
    pub min_size: usize,
    pub max_size: usize,
    pub size_divisible: usize,
    pub pixel_mean: [f32; 3],
    pub pixel_std: [f32; 3],
    pub fpn_channels: usize,
    pub anchors: AnchorConfig,
    pub rpn: RpnParams,
    pub roi: RoiParams,
    pub roi_sampling_ratio: usize,
}

impl DetectorParams {
    pub fn for_backbone(backbone: Backbone) -> Self {
        match backbone {
            Backbone::Resnet50Fpn => Self {
                min_size: 800,
                max_size: 1333,
                size_divisible: 32,
                pixel_mean: [0.485, 0.456, 0.406],
                pixel_std: [0.229, 0.224, 0.225],
                fpn_channels: 256,
                anchors: AnchorConfig {
                    sizes: vec![32.0, 64.0, 128.0, 256.0, 512.0],
                    aspect_ratios: vec![0.5, 1.0, 2.0],
                },
                rpn: RpnParams {
                    pre_nms_top_n_train: 2000,
                    pre_nms_top_n_test: 1000,
                    post_nms_top_n_train: 2000,
                    post_nms_top_n_test: 1000,
                    nms_thresh: 0.7,
                    fg_iou_thresh: 0.7,
                    bg_iou_thresh: 0.3,
                    batch_size_per_image: 256,
                    positive_fraction: 0.5,
                },
                roi: RoiParams {
                    fg_iou_thresh: 0.5,
                    bg_iou_thresh: 0.5,
                    batch_size_per_image: 512,
                    positive_fraction: 0.25,
                    mask_rois_per_image: 128,
                    box_score_thresh: 0.05,
                    box_nms_thresh: 0.5,
                    detections_per_img: 100,
                    box_head_dim: 1024,
                    box_head_convs: 0,
                    mask_head_channels: 256,
                    mask_head_layers: 4,
                    mask_head_norm: false,
                    canonical_scale: 224.0,
                },
                roi_sampling_ratio: 2,
            },
            Backbone::CompactFpn => Self {
                min_size: 128,
                max_size: 256,
                size_divisible: 32,
                pixel_mean: [0.485, 0.456, 0.406],
                pixel_std: [0.229, 0.224, 0.225],
                fpn_channels: 64,
                anchors: AnchorConfig {
                    sizes: vec![16.0, 32.0, 64.0, 128.0],
                    aspect_ratios: vec![0.5, 1.0, 2.0],
                },
                rpn: RpnParams {
                    pre_nms_top_n_train: 300,
                    pre_nms_top_n_test: 150,
                    post_nms_top_n_train: 150,
                    post_nms_top_n_test: 50,
                    nms_thresh: 0.7,
                    fg_iou_thresh: 0.7,
                    bg_iou_thresh: 0.3,
                    batch_size_per_image: 256,
                    positive_fraction: 0.5,
                },
                roi: RoiParams {
                    fg_iou_thresh: 0.5,
                    bg_iou_thresh: 0.5,
                    batch_size_per_image: 128,
                    positive_fraction: 0.25,
                    mask_rois_per_image: 16,
                    box_score_thresh: 0.05,
                    box_nms_thresh: 0.5,
                    detections_per_img: 20,
                    box_head_dim: 256,
                    box_head_convs: 4,
                    mask_head_channels: 64,
                    mask_head_layers: 2,
                    mask_head_norm: true,
                    canonical_scale: 112.0,
                },
                roi_sampling_ratio: 2,
            },
        }
    }

    /// Pyramid levels used by the RPN; `P2` has stride 4 and each level doubles it.
    pub fn num_levels(&self) -> usize {
        self.anchors.sizes.len()
    }

    pub fn strides(&self) -> Vec<usize> {
        (0..self.num_levels()).map(|l| 4 << l).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Background plus foreground classes.
    pub num_classes: usize,
    pub backbone: Backbone,
    pub pretrained_backbone: bool,
    /// Safetensors file with torchvision-named backbone weights (`conv1.weight`, `layer1.0...`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backbone_weights: Option<PathBuf>,
    pub mask_threshold: f64,
    pub score_threshold: f64,
    /// Seeds initialization of every freshly created parameter.
    pub init_seed: u64,
    pub detector: DetectorParams,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::with_backbone(Backbone::Resnet50Fpn)
    }
}

impl ModelConfig {
    pub fn with_backbone(backbone: Backbone) -> Self {
        Self {
            num_classes: 2,
            backbone,
            pretrained_backbone: backbone == Backbone::Resnet50Fpn,
            backbone_weights: None,
            mask_threshold: 0.5,
            score_threshold: 0.5,
            init_seed: 0,
            detector: DetectorParams::for_backbone(backbone),
        }
    }

    /// Compact backbone, no pretrained weights.
    pub fn compact() -> Self {
        Self::with_backbone(Backbone::CompactFpn)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::ConfigError(m));
        if self.num_classes < 2 {
            return err(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        for (name, v) in [
            ("mask_threshold", self.mask_threshold),
            ("score_threshold", self.score_threshold),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return err(format!("{name} must lie in (0, 1), got {v}"));
            }
        }
        let d = &self.detector;
        if d.anchors.sizes.is_empty() || d.anchors.aspect_ratios.is_empty() {
            return err("anchor sizes and aspect ratios must be non-empty".into());
        }
        let expected_levels = match self.backbone {
            Backbone::Resnet50Fpn => 5,
            Backbone::CompactFpn => 4,
        };
        if d.num_levels() != expected_levels {
            return err(format!(
                "{} expects {expected_levels} anchor sizes (one per level), got {}",
                self.backbone,
                d.num_levels()
            ));
        }
        if d.min_size == 0 || d.max_size < d.min_size || d.size_divisible == 0 {
            return err("invalid resize policy".into());
        }
        if d.roi_sampling_ratio == 0 {
            return err("roi_sampling_ratio must be >= 1".into());
        }
        if d.fpn_channels % 8 != 0 {
            return err("fpn_channels must be a multiple of 8".into());
        }
        Ok(())
    }
}
