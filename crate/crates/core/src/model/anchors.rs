use super::boxes::BoxXyxy;
use super::config::AnchorConfig;
use super::ModelError;

/// Channel counts of the RPN head for `k` anchors per location: two-way objectness
/// scores and four box deltas per anchor.
pub fn rpn_head_channels(k: usize) -> Result<(usize, usize), ModelError> {
    if k < 1 {
        return Err(ModelError::InvalidK(k));
    }
    Ok((2 * k, 4 * k))
}

/// Zero-centered anchors of one size, one per aspect ratio (height / width), area `size²`.
pub fn base_anchors(size: f64, aspect_ratios: &[f64]) -> Vec<BoxXyxy> {
    aspect_ratios
        .iter()
        .map(|&r| {
            let h = size * r.sqrt();
            let w = size / r.sqrt();
            [
                (-w / 2.0) as f32,
                (-h / 2.0) as f32,
                (w / 2.0) as f32,
                (h / 2.0) as f32,
            ]
        })
        .collect()
}

/// Shape of one pyramid level as seen by the anchor generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelShape {
    pub height: usize,
    pub width: usize,
    pub stride: usize,
}

/// All anchors in `(level, y, x, anchor)` order, which matches how RPN head outputs are flattened.
/// Anchors are centered on cell centers `((x + 0.5) * stride, (y + 0.5) * stride)`.
pub fn grid_anchors(cfg: &AnchorConfig, levels: &[LevelShape]) -> Vec<BoxXyxy> {
    let mut out = Vec::new();
    for (lvl, shape) in levels.iter().enumerate() {
        let base = base_anchors(cfg.sizes[lvl], &cfg.aspect_ratios);
        let s = shape.stride as f32;
        for y in 0..shape.height {
            for x in 0..shape.width {
                let (cx, cy) = ((x as f32 + 0.5) * s, (y as f32 + 0.5) * s);
                out.extend(
                    base.iter()
                        .map(|b| [b[0] + cx, b[1] + cy, b[2] + cx, b[3] + cy]),
                );
            }
        }
    }
    out
}
