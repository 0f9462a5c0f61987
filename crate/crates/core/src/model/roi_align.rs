//! ROI Align: fixed-size features for a continuous box via bilinear sampling.
//!
//! Coordinates are continuous throughout; feature cell `(y, x)` covers `[y, y + 1) × [x, x + 1)`
//! and its value sits at the cell center. Each of the `S × S` output bins averages an
//! `n × n` grid of bilinear samples placed at the centers of the bin's sub-cells. Samples that
//! fall past the outer cell centers are clamped to the border, so constant maps stay constant.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};
use serde::{Deserialize, Serialize};

use super::anchors::LevelShape;
use super::boxes::BoxXyxy;
use super::ModelError;

/// `channels × height × width` values plus the stride of one cell in input pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    stride: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        stride: usize,
        data: Vec<f32>,
    ) -> Result<Self, ModelError> {
        if stride < 1 || channels == 0 || height == 0 || width == 0 {
            return Err(ModelError::ConfigError(format!(
                "feature map needs positive dims and stride, got {channels}x{height}x{width} stride {stride}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(ModelError::ShapeMismatch {
                expected: vec![channels, height, width],
                actual: vec![data.len()],
            });
        }
        Ok(Self {
            channels,
            height,
            width,
            stride,
            data,
        })
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        stride: usize,
        f: impl Fn(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            channels,
            height,
            width,
            stride: stride.max(1),
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Bilinear value at continuous index-space coordinates already clamped to the grid.
    fn bilinear(&self, c: usize, y: f64, x: f64) -> f64 {
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let y1 = (y0 + 1).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let (ly, lx) = (y - y0 as f64, x - x0 as f64);
        let v = |yy, xx| self.get(c, yy, xx) as f64;
        // Lerp form: equal corners give back the corner value exactly.
        let top = v(y0, x0) + (v(y0, x1) - v(y0, x0)) * lx;
        let bottom = v(y1, x0) + (v(y1, x1) - v(y1, x0)) * lx;
        top + (bottom - top) * ly
    }
}

/// Pooled features laid out `channels × size × size`.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiFeatures {
    pub channels: usize,
    pub size: usize,
    pub data: Vec<f32>,
}

impl RoiFeatures {
    pub fn get(&self, c: usize, row: usize, col: usize) -> f32 {
        self.data[(c * self.size + row) * self.size + col]
    }
}

/// Sample coordinates along one axis for every bin, in grid-index space (cell centers at
/// integers), clamped to `[0, cells - 1]`. Returned as `bins × n` values.
pub(crate) fn axis_samples(lo: f64, hi: f64, bins: usize, n: usize, cells: usize) -> Vec<f64> {
    let bin = (hi - lo) / bins as f64;
    let max = (cells - 1) as f64;
    let mut out = Vec::with_capacity(bins * n);
    for i in 0..bins {
        for a in 0..n {
            let p = lo + (i as f64 + (a as f64 + 0.5) / n as f64) * bin - 0.5;
            out.push(p.clamp(0.0, max));
        }
    }
    out
}

fn check_box(roi: &[f64; 4]) -> Result<(), ModelError> {
    let ok = roi.iter().all(|v| v.is_finite()) && roi[2] > roi[0] && roi[3] > roi[1];
    if ok {
        Ok(())
    } else {
        Err(ModelError::DegenerateBox(*roi))
    }
}

/// Pools `roi = (x1, y1, x2, y2)`, given in feature-map coordinates, to `output_size²` bins
/// using `sampling_ratio²` samples per bin.
pub fn roi_align(
    fm: &FeatureMap,
    roi: [f64; 4],
    output_size: usize,
    sampling_ratio: usize,
) -> Result<RoiFeatures, ModelError> {
    check_box(&roi)?;
    if output_size == 0 || sampling_ratio == 0 {
        return Err(ModelError::ConfigError(
            "output_size and sampling_ratio must be >= 1".into(),
        ));
    }
    let (s, n) = (output_size, sampling_ratio);
    let ys = axis_samples(roi[1], roi[3], s, n, fm.height);
    let xs = axis_samples(roi[0], roi[2], s, n, fm.width);
    let mut data = Vec::with_capacity(fm.channels * s * s);
    for c in 0..fm.channels {
        for by in 0..s {
            for bx in 0..s {
                // Running mean: exact for constant inputs.
                let mut mean = 0.0f64;
                let mut count = 0.0f64;
                for &y in &ys[by * n..(by + 1) * n] {
                    for &x in &xs[bx * n..(bx + 1) * n] {
                        count += 1.0;
                        mean += (fm.bilinear(c, y, x) - mean) / count;
                    }
                }
                data.push(mean as f32);
            }
        }
    }
    Ok(RoiFeatures {
        channels: fm.channels,
        size: s,
        data,
    })
}

/// Gather-and-weight description of ROI Align over a stacked table of feature cells.
/// Row `r` of the output bin grid reads `taps` table rows `indices[r * taps..]` with `weights`.
#[derive(Debug, Clone)]
pub(crate) struct SamplingPlan {
    pub indices: Vec<u32>,
    pub weights: Vec<f32>,
    pub rois: usize,
    pub size: usize,
    pub taps: usize,
}

/// One ROI to pool: image-space box, the level it reads, and where that level starts in the table.
#[derive(Debug, Clone, Copy)]
pub(crate) struct RoiRequest {
    pub roi: BoxXyxy,
    pub level: LevelShape,
    pub table_offset: usize,
}

pub(crate) fn build_plan(requests: &[RoiRequest], size: usize, n: usize) -> SamplingPlan {
    let taps = n * n * 4;
    let mut indices = Vec::with_capacity(requests.len() * size * size * taps);
    let mut weights = Vec::with_capacity(indices.capacity());
    let inv = 1.0 / (n * n) as f64;
    for req in requests {
        let scale = 1.0 / req.level.stride as f64;
        let (h, w) = (req.level.height, req.level.width);
        // Degenerate boxes get a minimal extent so every request yields a well-defined bin grid.
        let x1 = req.roi[0] as f64 * scale;
        let y1 = req.roi[1] as f64 * scale;
        let x2 = (req.roi[2] as f64 * scale).max(x1 + 1e-3);
        let y2 = (req.roi[3] as f64 * scale).max(y1 + 1e-3);
        let ys = axis_samples(y1, y2, size, n, h);
        let xs = axis_samples(x1, x2, size, n, w);
        for by in 0..size {
            for bx in 0..size {
                for &y in &ys[by * n..(by + 1) * n] {
                    for &x in &xs[bx * n..(bx + 1) * n] {
                        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
                        let yy = (y0 + 1).min(h - 1);
                        let xx = (x0 + 1).min(w - 1);
                        let (ly, lx) = (y - y0 as f64, x - x0 as f64);
                        let corners = [
                            (y0, x0, (1.0 - ly) * (1.0 - lx)),
                            (y0, xx, (1.0 - ly) * lx),
                            (yy, x0, ly * (1.0 - lx)),
                            (yy, xx, ly * lx),
                        ];
                        for (cy, cx, wt) in corners {
                            indices.push((req.table_offset + cy * w + cx) as u32);
                            weights.push((wt * inv) as f32);
                        }
                    }
                }
            }
        }
    }
    SamplingPlan {
        indices,
        weights,
        rois: requests.len(),
        size,
        taps,
    }
}

/// Applies a [`SamplingPlan`] to a `(positions, C)` table, producing `(rois, C, S, S)`.
/// The backward pass scatters the output gradient back through the same taps.
pub(crate) struct RoiAlignOp {
    pub plan: SamplingPlan,
}

impl RoiAlignOp {
    fn bins(&self) -> usize {
        self.plan.rois * self.plan.size * self.plan.size
    }
}

impl CustomOp1 for RoiAlignOp {
    fn name(&self) -> &'static str {
        "roi-align"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (rows, c) = layout.shape().dims2()?;
        let (start, end) = layout
            .contiguous_offsets()
            .ok_or_else(|| candle_core::Error::Msg("roi-align table must be contiguous".into()))?;
        let table = &storage.as_slice::<f32>()?[start..end];
        let (ss, taps) = (self.plan.size * self.plan.size, self.plan.taps);
        let mut out = vec![0f32; self.bins() * c];
        let mut acc = vec![0f32; c];
        for bin in 0..self.bins() {
            acc.iter_mut().for_each(|v| *v = 0.0);
            for t in bin * taps..(bin + 1) * taps {
                let row = self.plan.indices[t] as usize;
                if row >= rows {
                    candle_core::bail!("roi-align index {row} out of range {rows}");
                }
                let w = self.plan.weights[t];
                for (a, &v) in acc.iter_mut().zip(&table[row * c..(row + 1) * c]) {
                    *a += w * v;
                }
            }
            let (r, pos) = (bin / ss, bin % ss);
            for (ch, &v) in acc.iter().enumerate() {
                out[(r * c + ch) * ss + pos] = v;
            }
        }
        let shape = Shape::from((self.plan.rois, c, self.plan.size, self.plan.size));
        Ok((CpuStorage::F32(out), shape))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (rows, c) = arg.dims2()?;
        let g = grad_res.flatten_all()?.to_vec1::<f32>()?;
        let (ss, taps) = (self.plan.size * self.plan.size, self.plan.taps);
        let mut grad = vec![0f32; rows * c];
        for bin in 0..self.bins() {
            let (r, pos) = (bin / ss, bin % ss);
            for t in bin * taps..(bin + 1) * taps {
                let row = self.plan.indices[t] as usize;
                let w = self.plan.weights[t];
                let dst = &mut grad[row * c..(row + 1) * c];
                for (ch, d) in dst.iter_mut().enumerate() {
                    *d += w * g[(r * c + ch) * ss + pos];
                }
            }
        }
        Ok(Some(Tensor::from_vec(grad, (rows, c), arg.device())?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_map_is_constant() {
        let fm = FeatureMap::from_fn(2, 5, 5, 1, |c, _, _| if c == 0 { 0.3 } else { -7.125 });
        let out = roi_align(&fm, [0.25, 1.5, 4.75, 3.0], 3, 2).unwrap();
        for c in 0..2 {
            for r in 0..3 {
                for col in 0..3 {
                    assert_eq!(out.get(c, r, col), fm.get(c, 0, 0));
                }
            }
        }
    }

    #[test]
    fn two_by_two_center_sample() {
        let fm = FeatureMap::new(1, 2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = roi_align(&fm, [0.0, 0.0, 2.0, 2.0], 1, 1).unwrap();
        assert!((out.data[0] - 2.5).abs() < 1e-6);
    }

    #[test]
    fn degenerate_box_rejected() {
        let fm = FeatureMap::from_fn(1, 4, 4, 1, |_, _, _| 1.0);
        assert!(matches!(
            roi_align(&fm, [2.0, 1.0, 2.0, 3.0], 2, 2),
            Err(ModelError::DegenerateBox(_))
        ));
    }

    #[test]
    fn plan_matches_direct_evaluation() {
        let fm = FeatureMap::from_fn(1, 6, 7, 2, |_, y, x| (y * 7 + x) as f32 * 0.5 - 3.0);
        let roi_img = [1.5f32, 2.0, 9.0, 10.5];
        let level = LevelShape { height: 6, width: 7, stride: 2 };
        let plan = build_plan(&[RoiRequest { roi: roi_img, level, table_offset: 0 }], 3, 2);
        let direct = roi_align(
            &fm,
            [0.75, 1.0, 4.5, 5.25],
            3,
            2,
        )
        .unwrap();
        for bin in 0..9 {
            let v: f32 = (0..plan.taps)
                .map(|t| {
                    let i = bin * plan.taps + t;
                    fm.data[plan.indices[i] as usize] * plan.weights[i]
                })
                .sum();
            assert!((v - direct.data[bin]).abs() < 1e-5, "bin {bin}: {v} vs {}", direct.data[bin]);
        }
    }

    #[test]
    fn custom_op_forward_and_gradient() {
        use candle_core::{Device, Var};
        // Table rows are positions, columns channels: channel 1 is channel 0 negated.
        let fm = FeatureMap::from_fn(2, 4, 5, 1, |c, y, x| {
            let v = (y * 5 + x) as f32 * 0.3 - 1.0;
            if c == 0 { v } else { -v }
        });
        let rows: Vec<f32> = (0..20).flat_map(|p| [fm.data[p], fm.data[20 + p]]).collect();
        let table = Var::from_vec(rows, (20, 2), &Device::Cpu).unwrap();
        let level = LevelShape { height: 4, width: 5, stride: 1 };
        let reqs = [
            RoiRequest { roi: [0.5, 0.25, 3.75, 3.0], level, table_offset: 0 },
            RoiRequest { roi: [1.0, 1.0, 2.0, 2.5], level, table_offset: 0 },
        ];
        let plan = build_plan(&reqs, 2, 2);
        let out = table.as_tensor().apply_op1(RoiAlignOp { plan: plan.clone() }).unwrap();
        assert_eq!(out.dims(), &[2, 2, 2, 2]);
        let got: Vec<f32> = out.flatten_all().unwrap().to_vec1().unwrap();
        for (r, req) in reqs.iter().enumerate() {
            let roi = req.roi.map(|v| v as f64);
            let direct = roi_align(&fm, roi, 2, 2).unwrap();
            for (i, want) in direct.data.iter().enumerate() {
                assert!((got[r * 8 + i] - want).abs() < 1e-5);
            }
        }
        // d(sum of outputs)/d(table row) is the total weight the plan puts on that row.
        let grads = out.sum_all().unwrap().backward().unwrap();
        let g: Vec<Vec<f32>> = grads.get(table.as_tensor()).unwrap().to_vec2().unwrap();
        let mut want = vec![0f32; 20];
        for (i, w) in plan.indices.iter().zip(&plan.weights) {
            want[*i as usize] += w;
        }
        for p in 0..20 {
            assert!((g[p][0] - want[p]).abs() < 1e-5 && (g[p][1] - want[p]).abs() < 1e-5);
        }
    }
}
