use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var, D};
use image::RgbImage;
use rand::seq::SliceRandom;
use rand::Rng;

use super::anchors::{grid_anchors, LevelShape};
use super::backbone::BackboneFpn;
use super::boxes::{self, batched_nms, BoxCoder, BoxXyxy, Match, Matcher};
use super::config::ModelConfig;
use super::heads::{BoxHead, MaskHead, RpnHead};
use super::loss::{bce_on_logits, smooth_l1_sum, LossTerms};
use super::params::ParamStore;
use super::roi_align::{build_plan, roi_align, FeatureMap, RoiAlignOp, RoiRequest};
use super::transform::{prepare_batch, ImageMeta};
use super::{DetectionResult, InstancePredictor, ModelError};
use crate::mask::{BinaryMask, ProbMap};

const BOX_POOL: usize = 7;
const MASK_POOL: usize = 14;
/// Levels used for ROI pooling (P2..P5); a P6 level, when present, only feeds the RPN.
const ROI_LEVELS: usize = 4;
const SMOOTH_L1_BETA: f64 = 1.0 / 9.0;
const MIN_BOX_SIDE: f32 = 1e-3;

/// One training image with its instances in original pixel coordinates.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub image: RgbImage,
    pub boxes: Vec<BoxXyxy>,
    /// Class index per instance (1 = soil).
    pub labels: Vec<u32>,
    /// Instance masks at image resolution.
    pub masks: Vec<BinaryMask>,
}

impl TrainSample {
    /// Mirrors image, boxes and masks left to right.
    pub fn flip_horizontal(&self) -> Self {
        let w = self.image.width() as f32;
        Self {
            image: image::imageops::flip_horizontal(&self.image),
            boxes: self.boxes.iter().map(|b| [w - b[2], b[1], w - b[0], b[3]]).collect(),
            labels: self.labels.clone(),
            masks: self.masks.iter().map(BinaryMask::flip_horizontal).collect(),
        }
    }
}

/// Trainable Mask R-CNN. Parameters are registered under torchvision's state-dict names.
pub struct Model {
    cfg: ModelConfig,
    ps: ParamStore,
    backbone: BackboneFpn,
    rpn: RpnHead,
    box_head: BoxHead,
    mask_head: MaskHead,
}

pub fn build_model(cfg: &ModelConfig) -> Result<Model, ModelError> {
    build_model_on(cfg, &Device::Cpu)
}

pub fn build_model_on(cfg: &ModelConfig, device: &Device) -> Result<Model, ModelError> {
    cfg.validate()?;
    let d = &cfg.detector;
    let mut ps = ParamStore::new(cfg.init_seed, device.clone());
    let backbone = BackboneFpn::new(&mut ps, cfg.backbone, d.fpn_channels)?;
    let rpn = RpnHead::new(&mut ps, d.fpn_channels, d.anchors.k())?;
    let box_head = BoxHead::new(
        &mut ps,
        d.fpn_channels,
        BOX_POOL,
        d.roi.box_head_dim,
        d.roi.box_head_convs,
        cfg.num_classes,
    )?;
    let mask_head = MaskHead::new(
        &mut ps,
        d.fpn_channels,
        d.roi.mask_head_channels,
        d.roi.mask_head_layers,
        d.roi.mask_head_norm,
        cfg.num_classes,
    )?;
    let model = Model {
        cfg: cfg.clone(),
        ps,
        backbone,
        rpn,
        box_head,
        mask_head,
    };
    if cfg.pretrained_backbone {
        match &cfg.backbone_weights {
            Some(path) => model.load_backbone_weights(path)?,
            None => {
                return Err(ModelError::WeightsUnavailable(format!(
                    "pretrained {} backbone requested but no weights file was given",
                    cfg.backbone
                )))
            }
        }
    }
    Ok(model)
}

/// Pyramid level index for an ROI: `floor(4 + log2(sqrt(area) / canonical))`, offset so P2 is 0.
pub(crate) fn roi_level(b: &BoxXyxy, canonical: f64, levels: usize) -> usize {
    let side = (boxes::area(b).max(0.0) as f64).sqrt();
    let k = (4.0 + (side / canonical + 1e-6).log2()).floor();
    (k - 2.0).clamp(0.0, (levels - 1) as f64) as usize
}

/// Samples a probability grid of `m × m` values inside `bbox` at every image pixel whose center
/// lies in the box.
fn paste_mask(grid: &[f32], m: usize, bbox: &BoxXyxy, width: usize, height: usize) -> ProbMap {
    let mut out = ProbMap::zeros(width, height);
    let (bw, bh) = (bbox[2] - bbox[0], bbox[3] - bbox[1]);
    if bw <= 0.0 || bh <= 0.0 {
        return out;
    }
    let max = (m - 1) as f32;
    let x_lo = (bbox[0] - 0.5).ceil().max(0.0) as usize;
    let y_lo = (bbox[1] - 0.5).ceil().max(0.0) as usize;
    let x_hi = ((bbox[2] - 0.5).floor() as isize).min(width as isize - 1);
    let y_hi = ((bbox[3] - 0.5).floor() as isize).min(height as isize - 1);
    if x_hi < 0 || y_hi < 0 {
        return out;
    }
    for py in y_lo..=y_hi as usize {
        let v = (((py as f32 + 0.5 - bbox[1]) / bh) * m as f32 - 0.5).clamp(0.0, max);
        let (v0, lv) = (v.floor() as usize, v - v.floor());
        let v1 = (v0 + 1).min(m - 1);
        for px in x_lo..=x_hi as usize {
            let u = (((px as f32 + 0.5 - bbox[0]) / bw) * m as f32 - 0.5).clamp(0.0, max);
            let (u0, lu) = (u.floor() as usize, u - u.floor());
            let u1 = (u0 + 1).min(m - 1);
            let g = |r: usize, c: usize| grid[r * m + c];
            let top = g(v0, u0) + (g(v0, u1) - g(v0, u0)) * lu;
            let bottom = g(v1, u0) + (g(v1, u1) - g(v1, u0)) * lu;
            out.set(py, px, (top + (bottom - top) * lv).clamp(0.0, 1.0));
        }
    }
    out
}

struct Forward {
    features: Vec<Tensor>,
    levels: Vec<LevelShape>,
    metas: Vec<ImageMeta>,
    objectness: Tensor,
    deltas: Tensor,
    anchors: Vec<BoxXyxy>,
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn device(&self) -> &Device {
        self.ps.device()
    }

    pub fn num_parameters(&self) -> usize {
        self.ps.vars().values().map(|v| v.elem_count()).sum()
    }

    /// Parameters updated by the optimizer, in name order.
    pub(crate) fn trainable_vars(&self) -> Vec<(String, Var)> {
        self.ps
            .vars()
            .iter()
            .filter(|(n, _)| !self.ps.is_frozen(n))
            .map(|(n, v)| (n.clone(), v.clone()))
            .collect()
    }

    /// Every parameter, trainable or frozen, in name order.
    pub fn state(&self) -> Vec<(String, Tensor)> {
        self.ps
            .vars()
            .iter()
            .map(|(n, v)| (n.clone(), v.as_tensor().detach()))
            .collect()
    }

    /// Overwrites every parameter. Names and shapes must match exactly.
    pub fn load_state(&self, tensors: &HashMap<String, Tensor>) -> Result<(), ModelError> {
        for (name, var) in self.ps.vars() {
            let t = tensors
                .get(name)
                .ok_or_else(|| ModelError::StateMismatch(format!("missing parameter {name}")))?;
            if t.dims() != var.dims() {
                return Err(ModelError::StateMismatch(format!(
                    "parameter {name}: model has {:?}, state has {:?}",
                    var.dims(),
                    t.dims()
                )));
            }
        }
        if let Some(extra) = tensors.keys().find(|k| !self.ps.vars().contains_key(*k)) {
            return Err(ModelError::StateMismatch(format!("unexpected parameter {extra}")));
        }
        for name in self.ps.vars().keys() {
            self.ps.assign(name, &tensors[name]).map_err(ModelError::StateMismatch)?;
        }
        Ok(())
    }

    /// Loads backbone tensors from a safetensors file with torchvision names, either bare
    /// (`layer1.0.conv1.weight`) or prefixed (`backbone.body.layer1.0.conv1.weight`). Any other
    /// tensor whose name and shape match a parameter is loaded too, except the class-specific
    /// predictors.
    pub fn load_backbone_weights(&self, path: &Path) -> Result<(), ModelError> {
        let unavailable = |m: String| ModelError::WeightsUnavailable(format!("{}: {m}", path.display()));
        let loaded = candle_core::safetensors::load(path, self.device()).map_err(|e| unavailable(e.to_string()))?;
        let mut covered = 0usize;
        for (raw, t) in &loaded {
            let name = normalize_weight_name(raw);
            if name.starts_with("roi_heads.box_predictor") || name.starts_with("roi_heads.mask_predictor.mask_fcn_logits") {
                continue;
            }
            if let Some(var) = self.ps.vars().get(&name) {
                if var.dims() == t.dims() {
                    self.ps.assign(&name, t).map_err(&unavailable)?;
                    if name.starts_with("backbone.body.") {
                        covered += 1;
                    }
                }
            }
        }
        let needed = self.ps.vars().keys().filter(|k| k.starts_with("backbone.body.")).count();
        if covered < needed {
            return Err(unavailable(format!(
                "only {covered} of {needed} backbone tensors found with matching shapes"
            )));
        }
        Ok(())
    }

    fn run_backbone(&self, images: &[&RgbImage]) -> Result<Forward, ModelError> {
        let d = &self.cfg.detector;
        let (x, metas) = prepare_batch(images, d, self.device())?;
        let features = self.backbone.forward(&x)?;
        let levels: Vec<LevelShape> = features
            .iter()
            .zip(d.strides())
            .map(|(f, stride)| {
                let (_, _, height, width) = f.dims4()?;
                Ok(LevelShape { height, width, stride })
            })
            .collect::<candle_core::Result<_>>()?;
        let (objectness, deltas) = self.rpn.forward(&features)?;
        let anchors = grid_anchors(&d.anchors, &levels);
        Ok(Forward {
            features,
            levels,
            metas,
            objectness,
            deltas,
            anchors,
        })
    }

    /// Top-scoring decoded anchors per level, clipped and suppressed, in descending score order.
    fn proposals(&self, fw: &Forward, obj: &[Vec<f32>], deltas: &[Vec<f32>], b: usize, training: bool) -> Vec<BoxXyxy> {
        let rp = &self.cfg.detector.rpn;
        let (pre, post) = if training {
            (rp.pre_nms_top_n_train, rp.post_nms_top_n_train)
        } else {
            (rp.pre_nms_top_n_test, rp.post_nms_top_n_test)
        };
        let coder = BoxCoder::new([1.0; 4]);
        let (w, h) = fw.metas[b].resized;
        let k = self.cfg.detector.anchors.k();
        let mut cand = Vec::new();
        let mut scores = Vec::new();
        let mut groups = Vec::new();
        let mut start = 0;
        for (l, lv) in fw.levels.iter().enumerate() {
            let n = lv.height * lv.width * k;
            let mut idx: Vec<usize> = (start..start + n).collect();
            let logit = |i: usize| obj[i][1] - obj[i][0];
            idx.sort_by(|&a, &c| logit(c).total_cmp(&logit(a)).then(a.cmp(&c)));
            idx.truncate(pre);
            for i in idx {
                let bx = boxes::clip(&coder.decode(&fw.anchors[i], &deltas[i]), w as f32, h as f32);
                if bx[2] - bx[0] >= MIN_BOX_SIDE && bx[3] - bx[1] >= MIN_BOX_SIDE {
                    cand.push(bx);
                    scores.push(1.0 / (1.0 + (-logit(i)).exp()));
                    groups.push(l);
                }
            }
            start += n;
        }
        let mut keep = batched_nms(&cand, &scores, &groups, rp.nms_thresh as f32);
        keep.truncate(post);
        keep.into_iter().map(|i| cand[i]).collect()
    }

    /// Multi-level ROI Align of `(image index, box in resized pixels)` pairs to `(R, C, S, S)`.
    fn pool(&self, fw: &Forward, rois: &[(usize, BoxXyxy)], size: usize) -> Result<Tensor, ModelError> {
        let levels = ROI_LEVELS.min(fw.features.len());
        let mut tables = Vec::with_capacity(levels);
        let mut offsets = Vec::with_capacity(levels);
        let mut offset = 0;
        for f in &fw.features[..levels] {
            let (b, c, h, w) = f.dims4()?;
            tables.push(f.permute((0, 2, 3, 1))?.reshape((b * h * w, c))?);
            offsets.push(offset);
            offset += b * h * w;
        }
        let table = Tensor::cat(&tables, 0)?.contiguous()?;
        let canonical = self.cfg.detector.roi.canonical_scale;
        let requests: Vec<RoiRequest> = rois
            .iter()
            .map(|&(b, roi)| {
                let l = roi_level(&roi, canonical, levels);
                let level = fw.levels[l];
                RoiRequest {
                    roi,
                    level,
                    table_offset: offsets[l] + b * level.height * level.width,
                }
            })
            .collect();
        let plan = build_plan(&requests, size, self.cfg.detector.roi_sampling_ratio);
        Ok(table.apply_op1(RoiAlignOp { plan })?)
    }

    /// Losses of one batch. The returned tensor is the differentiable total.
    pub(crate) fn forward_train<R: Rng>(
        &self,
        samples: &[TrainSample],
        rng: &mut R,
    ) -> Result<(Tensor, LossTerms), ModelError> {
        let d = &self.cfg.detector;
        let dev = self.device().clone();
        let images: Vec<&RgbImage> = samples.iter().map(|s| &s.image).collect();
        let fw = self.run_backbone(&images)?;
        let n_anchors = fw.anchors.len();
        let gts: Vec<Vec<BoxXyxy>> = samples
            .iter()
            .zip(&fw.metas)
            .map(|(s, m)| s.boxes.iter().map(|b| m.to_resized(b)).collect())
            .collect();

        // RPN: sampled anchors against ground truth.
        let rpn_matcher = Matcher {
            fg_thresh: d.rpn.fg_iou_thresh as f32,
            bg_thresh: d.rpn.bg_iou_thresh as f32,
            allow_low_quality: true,
        };
        let rpn_coder = BoxCoder::new([1.0; 4]);
        let (mut obj_idx, mut obj_lbl) = (Vec::new(), Vec::new());
        let (mut reg_idx, mut reg_tgt) = (Vec::new(), Vec::new());
        for (b, g) in gts.iter().enumerate() {
            let matches = rpn_matcher.assign(g, &fw.anchors);
            let (pos, neg) = boxes::sample_balanced(&matches, d.rpn.batch_size_per_image, d.rpn.positive_fraction, rng);
            for &i in &pos {
                let Match::Foreground(gi) = matches[i] else { unreachable!() };
                obj_idx.push((b * n_anchors + i) as u32);
                obj_lbl.push(1u32);
                reg_idx.push((b * n_anchors + i) as u32);
                reg_tgt.extend(rpn_coder.encode(&fw.anchors[i], &g[gi]));
            }
            for &i in &neg {
                obj_idx.push((b * n_anchors + i) as u32);
                obj_lbl.push(0u32);
            }
        }
        let b_count = samples.len();
        let obj_flat = fw.objectness.reshape((b_count * n_anchors, 2))?;
        let delta_flat = fw.deltas.reshape((b_count * n_anchors, 4))?;
        let n_sampled = obj_idx.len().max(1) as f64;
        let rpn_obj = candle_nn::loss::cross_entropy(
            &obj_flat.index_select(&Tensor::new(obj_idx.as_slice(), &dev)?, 0)?,
            &Tensor::new(obj_lbl.as_slice(), &dev)?,
        )?;
        let rpn_box = if reg_idx.is_empty() {
            Tensor::zeros((), DType::F32, &dev)?
        } else {
            let n = reg_idx.len();
            let pred = delta_flat.index_select(&Tensor::new(reg_idx.as_slice(), &dev)?, 0)?;
            (smooth_l1_sum(&pred, &Tensor::from_vec(reg_tgt, (n, 4), &dev)?, SMOOTH_L1_BETA)? / n_sampled)?
        };

        // Proposals, then ROI sampling with ground truth appended.
        let obj_v = fw.objectness.detach().to_vec3::<f32>()?;
        let delta_v = fw.deltas.detach().to_vec3::<f32>()?;
        let roi_matcher = Matcher {
            fg_thresh: d.roi.fg_iou_thresh as f32,
            bg_thresh: d.roi.bg_iou_thresh as f32,
            allow_low_quality: false,
        };
        let roi_coder = BoxCoder::new([10.0, 10.0, 5.0, 5.0]);
        let mut rois: Vec<(usize, BoxXyxy)> = Vec::new();
        let mut roi_labels: Vec<u32> = Vec::new();
        let mut reg_rows: Vec<u32> = Vec::new();
        let mut roi_tgt: Vec<f32> = Vec::new();
        // (roi row, image, gt index) for the mask branch
        let mut mask_rois: Vec<(usize, usize, usize)> = Vec::new();
        for (b, g) in gts.iter().enumerate() {
            let mut cands = self.proposals(&fw, &obj_v[b], &delta_v[b], b, true);
            cands.extend(g.iter().copied());
            let matches = roi_matcher.assign(g, &cands);
            let (pos, neg) = boxes::sample_balanced(&matches, d.roi.batch_size_per_image, d.roi.positive_fraction, rng);
            let mut for_mask = Vec::new();
            for &i in &pos {
                let Match::Foreground(gi) = matches[i] else { unreachable!() };
                let label = samples[b].labels[gi];
                let row = rois.len();
                reg_rows.push((row * self.cfg.num_classes + label as usize) as u32);
                roi_tgt.extend(roi_coder.encode(&cands[i], &g[gi]));
                rois.push((b, cands[i]));
                roi_labels.push(label);
                for_mask.push((row, b, gi));
            }
            for &i in &neg {
                rois.push((b, cands[i]));
                roi_labels.push(0);
            }
            for_mask.shuffle(rng);
            for_mask.truncate(d.roi.mask_rois_per_image);
            for_mask.sort_unstable();
            mask_rois.extend(for_mask);
        }

        let zero = || Tensor::zeros((), DType::F32, &dev);
        let (cls_loss, box_loss) = if rois.is_empty() {
            (zero()?, zero()?)
        } else {
            let pooled = self.pool(&fw, &rois, BOX_POOL)?;
            let (logits, reg) = self.box_head.forward(&pooled)?;
            let cls = candle_nn::loss::cross_entropy(&logits, &Tensor::new(roi_labels.as_slice(), &dev)?)?;
            let bl = if reg_rows.is_empty() {
                zero()?
            } else {
                let n = reg_rows.len();
                let reg = reg.reshape((rois.len() * self.cfg.num_classes, 4))?;
                let pred = reg.index_select(&Tensor::new(reg_rows.as_slice(), &dev)?, 0)?;
                let tgt = Tensor::from_vec(roi_tgt, (n, 4), &dev)?;
                (smooth_l1_sum(&pred, &tgt, SMOOTH_L1_BETA)? / rois.len() as f64)?
            };
            (cls, bl)
        };

        let mask_loss = if mask_rois.is_empty() {
            zero()?
        } else {
            let m = 2 * MASK_POOL;
            let gt_maps: Vec<Vec<FeatureMap>> = samples
                .iter()
                .map(|s| {
                    s.masks
                        .iter()
                        .map(|mk| FeatureMap::from_fn(1, mk.height(), mk.width(), 1, |_, y, x| mk.get(y, x) as u8 as f32))
                        .collect()
                })
                .collect();
            let mut targets = Vec::with_capacity(mask_rois.len() * m * m);
            let mut rows = Vec::with_capacity(mask_rois.len());
            let mut boxes_for_pool = Vec::with_capacity(mask_rois.len());
            for (k, &(row, b, gi)) in mask_rois.iter().enumerate() {
                let (_, roi) = rois[row];
                boxes_for_pool.push((b, roi));
                rows.push((k * self.cfg.num_classes + roi_labels[row] as usize) as u32);
                let o = fw.metas[b].to_original(&roi);
                let ob = [
                    o[0] as f64,
                    o[1] as f64,
                    (o[2] as f64).max(o[0] as f64 + 1e-3),
                    (o[3] as f64).max(o[1] as f64 + 1e-3),
                ];
                let sampled = roi_align(&gt_maps[b][gi], ob, m, 2)?;
                targets.extend(sampled.data.iter().map(|&v| if v >= 0.5 { 1f32 } else { 0.0 }));
            }
            let pooled = self.pool(&fw, &boxes_for_pool, MASK_POOL)?;
            let logits = self.mask_head.forward(&pooled)?;
            let logits = logits
                .reshape((mask_rois.len() * self.cfg.num_classes, m * m))?
                .index_select(&Tensor::new(rows.as_slice(), &dev)?, 0)?;
            bce_on_logits(&logits, &Tensor::from_vec(targets, (mask_rois.len(), m * m), &dev)?)?
        };

        let parts = [&rpn_obj, &rpn_box, &cls_loss, &box_loss, &mask_loss];
        let values: Vec<f64> = parts
            .iter()
            .map(|t| t.to_dtype(DType::F64)?.to_scalar::<f64>())
            .collect::<candle_core::Result<_>>()?;
        let terms = LossTerms {
            rpn_objectness: values[0],
            rpn_box: values[1],
            classifier: values[2],
            box_reg: values[3],
            mask: values[4],
        };
        let total = parts[1..].iter().try_fold(rpn_obj.clone(), |acc, t| acc.add(t))?;
        Ok((total, terms))
    }

    /// Loss terms of one batch without building an optimizer step.
    pub fn losses<R: Rng>(&self, samples: &[TrainSample], rng: &mut R) -> Result<LossTerms, ModelError> {
        Ok(self.forward_train(samples, rng)?.1)
    }

    /// Inference on several images at once; one detection list per image.
    pub fn predict_batch(&self, images: &[&RgbImage]) -> Result<Vec<Vec<DetectionResult>>, ModelError> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let d = &self.cfg.detector;
        let ncls = self.cfg.num_classes;
        let fw = self.run_backbone(images)?;
        let obj_v = fw.objectness.detach().to_vec3::<f32>()?;
        let delta_v = fw.deltas.detach().to_vec3::<f32>()?;
        let mut rois: Vec<(usize, BoxXyxy)> = Vec::new();
        for b in 0..images.len() {
            rois.extend(self.proposals(&fw, &obj_v[b], &delta_v[b], b, false).into_iter().map(|p| (b, p)));
        }
        let mut per_image: Vec<Vec<(BoxXyxy, f32, usize)>> = vec![Vec::new(); images.len()];
        if !rois.is_empty() {
            let pooled = self.pool(&fw, &rois, BOX_POOL)?;
            let (logits, reg) = self.box_head.forward(&pooled)?;
            let probs = candle_nn::ops::softmax(&logits.detach(), D::Minus1)?.to_vec2::<f32>()?;
            let reg = reg.detach().to_vec2::<f32>()?;
            let coder = BoxCoder::new([10.0, 10.0, 5.0, 5.0]);
            let mut cands: Vec<Vec<(BoxXyxy, f32, usize)>> = vec![Vec::new(); images.len()];
            for (r, &(b, prop)) in rois.iter().enumerate() {
                let (w, h) = fw.metas[b].resized;
                for class in 1..ncls {
                    let s = probs[r][class];
                    if s <= d.roi.box_score_thresh as f32 {
                        continue;
                    }
                    let bx = boxes::clip(&coder.decode(&prop, &reg[r][class * 4..class * 4 + 4]), w as f32, h as f32);
                    if bx[2] - bx[0] >= 1e-2 && bx[3] - bx[1] >= 1e-2 {
                        cands[b].push((bx, s, class));
                    }
                }
            }
            for (b, c) in cands.into_iter().enumerate() {
                let bxs: Vec<BoxXyxy> = c.iter().map(|x| x.0).collect();
                let scores: Vec<f32> = c.iter().map(|x| x.1).collect();
                let groups: Vec<usize> = c.iter().map(|x| x.2).collect();
                let mut keep = batched_nms(&bxs, &scores, &groups, d.roi.box_nms_thresh as f32);
                keep.truncate(d.roi.detections_per_img);
                per_image[b] = keep.into_iter().map(|i| c[i]).collect();
            }
        }

        let dets: Vec<(usize, BoxXyxy)> = per_image
            .iter()
            .enumerate()
            .flat_map(|(b, v)| v.iter().map(move |x| (b, x.0)))
            .collect();
        let m = 2 * MASK_POOL;
        let grids: Vec<Vec<f32>> = if dets.is_empty() {
            Vec::new()
        } else {
            let pooled = self.pool(&fw, &dets, MASK_POOL)?;
            let logits = self.mask_head.forward(&pooled)?.detach();
            let probs = candle_nn::ops::sigmoid(&logits)?.reshape((dets.len(), ncls, m * m))?;
            let probs = probs.to_vec3::<f32>()?;
            let classes = per_image.iter().flat_map(|v| v.iter().map(|x| x.2));
            probs.into_iter().zip(classes).map(|(p, c)| p[c].clone()).collect()
        };

        let mut out = Vec::with_capacity(images.len());
        let mut grid_iter = grids.into_iter();
        for (b, v) in per_image.into_iter().enumerate() {
            let meta = fw.metas[b];
            let (w, h) = meta.original;
            let mut list = Vec::with_capacity(v.len());
            for (bx, score, class) in v {
                let grid = grid_iter.next().expect("one mask per detection");
                let ob = boxes::clip(&meta.to_original(&bx), w as f32, h as f32);
                if !(ob[2] > ob[0] && ob[3] > ob[1]) {
                    continue;
                }
                list.push(DetectionResult {
                    bbox: ob,
                    score,
                    label: class as u64,
                    mask_prob: paste_mask(&grid, m, &ob, w, h),
                });
            }
            out.push(list);
        }
        Ok(out)
    }
}

impl InstancePredictor for Model {
    fn predict(&self, image: &RgbImage) -> Result<Vec<DetectionResult>, ModelError> {
        Ok(self.predict_batch(&[image])?.pop().unwrap_or_default())
    }
}

/// Maps torchvision naming variants onto the names used here.
fn normalize_weight_name(raw: &str) -> String {
    let mut name = if raw.starts_with("backbone.") || raw.starts_with("rpn.") || raw.starts_with("roi_heads.") {
        raw.to_string()
    } else {
        format!("backbone.body.{raw}")
    };
    // Newer torchvision wraps FPN convs in a sequential: `inner_blocks.0.0.weight`.
    for block in ["inner_blocks", "layer_blocks"] {
        let marker = format!("backbone.fpn.{block}.");
        if let Some(rest) = name.strip_prefix(&marker) {
            let parts: Vec<&str> = rest.split('.').collect();
            if parts.len() == 3 && parts[1] == "0" {
                name = format!("{marker}{}.{}", parts[0], parts[2]);
            }
        }
    }
    name
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn blob_sample() -> TrainSample {
        let (w, h) = (96usize, 80usize);
        let mask = BinaryMask::from_fn(w, h, |r, c| {
            let (dy, dx) = (r as f32 - 40.0, c as f32 - 50.0);
            dy * dy / 500.0 + dx * dx / 700.0 < 1.0
        });
        let image = RgbImage::from_fn(w as u32, h as u32, |x, y| {
            if mask.get(y as usize, x as usize) {
                image::Rgb([120, 70, 90])
            } else {
                image::Rgb([200, 210, 190])
            }
        });
        TrainSample {
            image,
            boxes: vec![[23.0, 18.0, 77.0, 63.0]],
            labels: vec![1],
            masks: vec![mask],
        }
    }

    #[test]
    fn level_mapping() {
        assert_eq!(roi_level(&[0.0, 0.0, 112.0, 112.0], 112.0, 4), 2);
        assert_eq!(roi_level(&[0.0, 0.0, 56.0, 56.0], 112.0, 4), 1);
        assert_eq!(roi_level(&[0.0, 0.0, 4.0, 4.0], 112.0, 4), 0);
        assert_eq!(roi_level(&[0.0, 0.0, 1000.0, 1000.0], 112.0, 4), 3);
    }

    #[test]
    fn paste_constant_grid_fills_box() {
        let grid = vec![0.75f32; 28 * 28];
        let p = paste_mask(&grid, 28, &[2.0, 3.0, 6.0, 5.0], 10, 8);
        for r in 0..8 {
            for c in 0..10 {
                let inside = (2..6).contains(&c) && (3..5).contains(&r);
                assert_eq!(p.get(r, c), if inside { 0.75 } else { 0.0 }, "({r},{c})");
            }
        }
    }

    #[test]
    fn weight_names() {
        assert_eq!(normalize_weight_name("layer1.0.conv1.weight"), "backbone.body.layer1.0.conv1.weight");
        assert_eq!(
            normalize_weight_name("backbone.fpn.inner_blocks.2.0.bias"),
            "backbone.fpn.inner_blocks.2.bias"
        );
        assert_eq!(normalize_weight_name("backbone.fpn.layer_blocks.1.weight"), "backbone.fpn.layer_blocks.1.weight");
    }

    #[test]
    fn pretrained_without_file_is_unavailable() {
        let mut cfg = ModelConfig::compact();
        cfg.pretrained_backbone = true;
        assert!(matches!(build_model(&cfg), Err(ModelError::WeightsUnavailable(_))));
        cfg.num_classes = 1;
        assert!(matches!(build_model(&cfg), Err(ModelError::ConfigError(_))));
    }

    #[test]
    fn train_forward_gives_finite_terms() {
        let model = build_model(&ModelConfig::compact()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (total, terms) = model.forward_train(&[blob_sample()], &mut rng).unwrap();
        let b = terms.breakdown();
        assert!(b.is_finite());
        assert!(b.l_rpn > 0.0 && b.l_faster_rcnn > 0.0 && b.l_mask > 0.0);
        let t = total.to_scalar::<f32>().unwrap() as f64;
        assert!((t - b.total).abs() <= 1e-5 * b.total.abs().max(1.0));
        let grads = total.backward().unwrap();
        let (_, v) = &model.trainable_vars()[0];
        assert!(grads.get(v.as_tensor()).is_some());
    }

    #[test]
    fn predict_is_deterministic_and_sorted() {
        let model = build_model(&ModelConfig::compact()).unwrap();
        let img = blob_sample().image;
        let a = model.predict(&img).unwrap();
        let b = model.predict(&img).unwrap();
        assert_eq!(a, b);
        assert!(a.windows(2).all(|w| w[0].score >= w[1].score));
        for d in &a {
            assert!(d.bbox[0] < d.bbox[2] && d.bbox[1] < d.bbox[3]);
            assert!(d.bbox[2] <= 96.0 && d.bbox[3] <= 80.0);
            assert!((0.0..=1.0).contains(&d.score));
            assert_eq!((d.mask_prob.width(), d.mask_prob.height()), (96, 80));
        }
    }

    #[test]
    fn state_round_trip() {
        let a = build_model(&ModelConfig::compact()).unwrap();
        let mut cfg = ModelConfig::compact();
        cfg.init_seed = 9;
        let b = build_model(&cfg).unwrap();
        let state: HashMap<String, Tensor> = a.state().into_iter().collect();
        b.load_state(&state).unwrap();
        for ((n1, t1), (n2, t2)) in a.state().iter().zip(b.state().iter()) {
            assert_eq!(n1, n2);
            let diff = (t1 - t2).unwrap().abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap();
            assert_eq!(diff, 0.0);
        }
        let mut cfg3 = ModelConfig::compact();
        cfg3.num_classes = 3;
        let c = build_model(&cfg3).unwrap();
        assert!(matches!(c.load_state(&state), Err(ModelError::StateMismatch(_))));
    }
}
