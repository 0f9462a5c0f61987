//! Mask IoU, COCO-style average precision and inference timing.

use std::collections::HashMap;
use std::time::Instant;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::coco::{CocoDataset, DatasetError};
use crate::mask::BinaryMask;
use crate::model::{InstancePredictor, ModelError};
use crate::postprocess::{binarize_mask, segment_detections, PostprocessError, SegmentConfig};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("mask shapes differ: {a:?} vs {b:?} (height, width)")]
    ShapeMismatch { a: (usize, usize), b: (usize, usize) },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Number of recall points of the interpolated precision curve.
pub const RECALL_POINTS: usize = 101;

/// `|a ∩ b| / |a ∪ b|`; 0 when both are empty.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(EvalError::ShapeMismatch {
            a: a.shape(),
            b: b.shape(),
        });
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.as_slice().iter().zip(b.as_slice()) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredMask {
    pub score: f64,
    pub mask: BinaryMask,
}

/// Predictions and ground truth of one image.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImageInstances {
    pub predictions: Vec<ScoredMask>,
    pub ground_truth: Vec<BinaryMask>,
}

/// Outcome of greedy matching on one image, in descending score order.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Indices into the image's predictions, sorted by descending score (input order on ties).
    pub order: Vec<usize>,
    pub scores: Vec<f64>,
    pub true_positive: Vec<bool>,
    /// IoU with the matched ground truth, 0 for false positives.
    pub matched_iou: Vec<f64>,
    pub unmatched_gts: usize,
}

/// Indices sorted by descending score, stable on ties.
fn score_order(scores: impl Iterator<Item = f64>) -> Vec<usize> {
    let s: Vec<f64> = scores.collect();
    let mut idx: Vec<usize> = (0..s.len()).collect();
    idx.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    idx
}

/// Each prediction, highest score first, takes the still unmatched ground truth with the
/// largest IoU, provided that IoU reaches `iou_threshold`.
pub fn match_image(inst: &ImageInstances, iou_threshold: f64) -> Result<MatchResult> {
    let order = score_order(inst.predictions.iter().map(|p| p.score));
    let mut taken = vec![false; inst.ground_truth.len()];
    let mut tp = Vec::with_capacity(order.len());
    let mut ious = Vec::with_capacity(order.len());
    for &p in &order {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in inst.ground_truth.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let iou = mask_iou(&inst.predictions[p].mask, gt)?;
            if iou >= iou_threshold && best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        match best {
            Some((g, iou)) => {
                taken[g] = true;
                tp.push(true);
                ious.push(iou);
            }
            None => {
                tp.push(false);
                ious.push(0.0);
            }
        }
    }
    Ok(MatchResult {
        scores: order.iter().map(|&i| inst.predictions[i].score).collect(),
        order,
        true_positive: tp,
        matched_iou: ious,
        unmatched_gts: taken.iter().filter(|t| !**t).count(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    pub recall: Vec<f64>,
    pub precision: Vec<f64>,
    /// Running maximum of precision taken from the right.
    pub interpolated: Vec<f64>,
}

impl PrCurve {
    /// Pools per-image matches (image order, then score order) and sorts them by score.
    pub fn from_matches(matches: &[MatchResult], num_gts: usize) -> Self {
        let pooled: Vec<(f64, bool)> = matches
            .iter()
            .flat_map(|m| m.scores.iter().copied().zip(m.true_positive.iter().copied()))
            .collect();
        let order = score_order(pooled.iter().map(|p| p.0));
        let (mut tp, mut fp) = (0usize, 0usize);
        let mut recall = Vec::with_capacity(order.len());
        let mut precision = Vec::with_capacity(order.len());
        for i in order {
            if pooled[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            recall.push(if num_gts == 0 { 0.0 } else { tp as f64 / num_gts as f64 });
            precision.push(tp as f64 / (tp + fp) as f64);
        }
        let mut interpolated = precision.clone();
        for i in (1..interpolated.len()).rev() {
            interpolated[i - 1] = interpolated[i - 1].max(interpolated[i]);
        }
        Self {
            recall,
            precision,
            interpolated,
        }
    }

    /// Mean interpolated precision at recall `i / 100`, `i = 0..=100`.
    pub fn average_precision(&self) -> f64 {
        let mut sum = 0.0;
        for i in 0..RECALL_POINTS {
            let r = i as f64 / (RECALL_POINTS - 1) as f64;
            let k = self.recall.partition_point(|&x| x < r);
            if k < self.interpolated.len() {
                sum += self.interpolated[k];
            }
        }
        sum / RECALL_POINTS as f64
    }
}

/// Single-category AP at `iou_threshold` over a set of images. `None` when there is no ground
/// truth and no prediction at all; 0 when there is ground truth but no prediction.
pub fn average_precision(images: &[ImageInstances], iou_threshold: f64) -> Result<Option<f64>> {
    let num_gts: usize = images.iter().map(|i| i.ground_truth.len()).sum();
    let num_preds: usize = images.iter().map(|i| i.predictions.len()).sum();
    if num_gts == 0 {
        return Ok(if num_preds == 0 { None } else { Some(0.0) });
    }
    let matches = images
        .iter()
        .map(|i| match_image(i, iou_threshold))
        .collect::<Result<Vec<_>>>()?;
    Ok(Some(PrCurve::from_matches(&matches, num_gts).average_precision()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEvalDetail {
    pub image_id: u64,
    pub file_name: String,
    pub num_predictions: usize,
    pub num_gts: usize,
    pub true_positives: usize,
    /// Score of the highest-ranked prediction, if any.
    pub top_score: Option<f64>,
    /// IoU of each matched prediction, descending score order.
    pub matched_ious: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub iou_threshold: f64,
    /// Absent only when the split has neither ground truth nor predictions.
    pub ap50: Option<f64>,
    pub num_images: usize,
    pub num_predictions: usize,
    pub num_gts: usize,
    pub per_image: Vec<ImageEvalDetail>,
}

impl EvalReport {
    /// Mean AP over categories; the dataset has one category, so this is the AP itself.
    pub fn map50(&self) -> Option<f64> {
        self.ap50
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub mask_threshold: f64,
    pub iou_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            mask_threshold: 0.5,
            iou_threshold: 0.5,
        }
    }
}

/// Scores precomputed predictions, keyed by image id, against a dataset's ground truth.
pub fn evaluate_predictions(
    ds: &CocoDataset,
    predictions: &HashMap<u64, Vec<ScoredMask>>,
    split: &str,
    iou_threshold: f64,
) -> Result<EvalReport> {
    let mut images = Vec::with_capacity(ds.images.len());
    for rec in &ds.images {
        images.push(ImageInstances {
            predictions: predictions.get(&rec.id).cloned().unwrap_or_default(),
            ground_truth: ds.instance_masks(rec)?,
        });
    }
    let mut per_image = Vec::with_capacity(images.len());
    for (rec, inst) in ds.images.iter().zip(&images) {
        let m = match_image(inst, iou_threshold)?;
        per_image.push(ImageEvalDetail {
            image_id: rec.id,
            file_name: rec.file_name.clone(),
            num_predictions: inst.predictions.len(),
            num_gts: inst.ground_truth.len(),
            true_positives: m.true_positive.iter().filter(|t| **t).count(),
            top_score: m.scores.first().copied(),
            matched_ious: m
                .matched_iou
                .iter()
                .zip(&m.true_positive)
                .filter(|(_, t)| **t)
                .map(|(v, _)| *v)
                .collect(),
        });
    }
    Ok(EvalReport {
        split: split.to_string(),
        iou_threshold,
        ap50: average_precision(&images, iou_threshold)?,
        num_images: images.len(),
        num_predictions: images.iter().map(|i| i.predictions.len()).sum(),
        num_gts: images.iter().map(|i| i.ground_truth.len()).sum(),
        per_image,
    })
}

/// Runs the model over every image of `ds`, binarizes masks at `cfg.mask_threshold` and
/// reports segmentation AP at `cfg.iou_threshold`.
pub fn eval_segm_map<P: InstancePredictor + ?Sized>(
    model: &P,
    ds: &CocoDataset,
    split: &str,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let mut predictions = HashMap::with_capacity(ds.images.len());
    for rec in &ds.images {
        let img = ds.load_rgb(rec)?;
        let dets = model.predict(&img)?;
        let scored = dets
            .iter()
            .map(|d| ScoredMask {
                score: d.score as f64,
                mask: binarize_mask(&d.mask_prob, cfg.mask_threshold),
            })
            .collect();
        predictions.insert(rec.id, scored);
    }
    evaluate_predictions(ds, &predictions, split, cfg.iou_threshold)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub warmup_runs: usize,
    pub measured_runs: usize,
    pub median_seconds: f64,
    pub mean_seconds: f64,
    pub min_seconds: f64,
    pub max_seconds: f64,
    pub per_run_seconds: Vec<f64>,
    pub device: String,
    /// Runs whose post-processing found no soil region; they are timed all the same.
    pub no_detection_runs: usize,
}

impl TimingReport {
    pub fn from_runs(warmup_runs: usize, per_run_seconds: Vec<f64>, device: &str, no_detection_runs: usize) -> Self {
        let n = per_run_seconds.len();
        let mut sorted = per_run_seconds.clone();
        sorted.sort_by(f64::total_cmp);
        let median = match n {
            0 => 0.0,
            _ if n % 2 == 1 => sorted[n / 2],
            _ => 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]),
        };
        Self {
            warmup_runs,
            measured_runs: n,
            median_seconds: median,
            mean_seconds: if n == 0 { 0.0 } else { sorted.iter().sum::<f64>() / n as f64 },
            min_seconds: sorted.first().copied().unwrap_or(0.0),
            max_seconds: sorted.last().copied().unwrap_or(0.0),
            per_run_seconds,
            device: device.to_string(),
            no_detection_runs,
        }
    }
}

/// Times prediction plus background whitening and cropping on one image. Only the
/// `runs` measured iterations enter the statistics.
pub fn benchmark_inference<P: InstancePredictor + ?Sized>(
    model: &P,
    image: &RgbImage,
    warmup: usize,
    runs: usize,
    device: &str,
    cfg: &SegmentConfig,
) -> Result<TimingReport> {
    let once = || -> Result<bool> {
        let dets = model.predict(image)?;
        match segment_detections(image, &dets, cfg) {
            Ok(_) => Ok(true),
            Err(PostprocessError::NoSoilDetected { .. } | PostprocessError::EmptyIntersection) => Ok(false),
            Err(PostprocessError::Model(e)) => Err(e.into()),
            Err(PostprocessError::ShapeMismatch { image, mask }) => Err(EvalError::ShapeMismatch { a: image, b: mask }),
        }
    };
    for _ in 0..warmup {
        once()?;
    }
    let mut times = Vec::with_capacity(runs);
    let mut misses = 0;
    for _ in 0..runs {
        // CPU execution is synchronous, so the timer covers all work of the run.
        let start = Instant::now();
        let found = once()?;
        times.push(start.elapsed().as_secs_f64());
        misses += (!found) as usize;
    }
    Ok(TimingReport::from_runs(warmup, times, device, misses))
}
