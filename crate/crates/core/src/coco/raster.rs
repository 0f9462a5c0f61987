//! Polygon rasterization with the even-odd rule, sampling pixel centers at `(col + 0.5, row + 0.5)`.

use super::{DatasetError, PolygonAnnotation, Result};
use crate::mask::BinaryMask;

/// Even-odd point test against a flat `[x0, y0, x1, y1, ...]` polygon.
pub fn point_in_polygon(x: f64, y: f64, polygon: &[f64]) -> bool {
    let n = polygon.len() / 2;
    let mut inside = false;
    let mut j = n.wrapping_sub(1);
    for i in 0..n {
        let (xi, yi) = (polygon[2 * i], polygon[2 * i + 1]);
        let (xj, yj) = (polygon[2 * j], polygon[2 * j + 1]);
        if (yi > y) != (yj > y) && x < xi + (y - yi) * (xj - xi) / (yj - yi) {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Shoelace area of a flat polygon (absolute value).
pub fn polygon_area(polygon: &[f64]) -> f64 {
    let n = polygon.len() / 2;
    let mut acc = 0.0;
    for i in 0..n {
        let j = (i + 1) % n;
        acc += polygon[2 * i] * polygon[2 * j + 1] - polygon[2 * j] * polygon[2 * i + 1];
    }
    acc.abs() / 2.0
}

/// Rasterizes the union of an annotation's polygons onto a `height × width` mask.
pub fn polygon_to_mask(ann: &PolygonAnnotation, width: usize, height: usize) -> Result<BinaryMask> {
    for (idx, poly) in ann.segmentation.iter().enumerate() {
        if poly.len() < 6 {
            return Err(DatasetError::DegeneratePolygon {
                annotation_id: ann.id,
                polygon_index: idx,
            });
        }
    }
    Ok(polygons_to_mask(&ann.segmentation, width, height))
}

/// Same as [`polygon_to_mask`] for bare polygon lists; polygons with fewer than 3 vertices are skipped.
pub fn polygons_to_mask(polygons: &[Vec<f64>], width: usize, height: usize) -> BinaryMask {
    let mut mask = BinaryMask::new(width, height);
    let mut crossings = Vec::new();
    for poly in polygons.iter().filter(|p| p.len() >= 6) {
        fill_polygon(&mut mask, poly, &mut crossings);
    }
    mask
}

// Scanline fill: per row, collect edge crossings at the row's center line and toggle between them.
fn fill_polygon(mask: &mut BinaryMask, poly: &[f64], crossings: &mut Vec<f64>) {
    let n = poly.len() / 2;
    let (mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..n {
        ymin = ymin.min(poly[2 * i + 1]);
        ymax = ymax.max(poly[2 * i + 1]);
    }
    let height = mask.height();
    let width = mask.width();
    let row_lo = (ymin - 0.5).ceil().max(0.0) as usize;
    let row_hi = ((ymax - 0.5).floor() + 1.0).clamp(0.0, height as f64) as usize;

    for row in row_lo..row_hi {
        let y = row as f64 + 0.5;
        crossings.clear();
        let mut j = n - 1;
        for i in 0..n {
            let (xi, yi) = (poly[2 * i], poly[2 * i + 1]);
            let (xj, yj) = (poly[2 * j], poly[2 * j + 1]);
            if (yi > y) != (yj > y) {
                crossings.push(xi + (y - yi) * (xj - xi) / (yj - yi));
            }
            j = i;
        }
        if crossings.is_empty() {
            continue;
        }
        crossings.sort_by(f64::total_cmp);
        // A center x is inside iff an odd number of crossings lie strictly to its right.
        for col in 0..width {
            let x = col as f64 + 0.5;
            let right = crossings.len() - crossings.partition_point(|&c| c <= x);
            if right % 2 == 1 {
                mask.set(row, col, true);
            }
        }
    }
}
