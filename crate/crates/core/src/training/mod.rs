//! SGD training with step learning-rate decay, per-epoch evaluation, logs and checkpoints.

pub mod checkpoint;
pub mod log;
mod sgd;

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coco::{CocoDataset, DatasetError};
use crate::evaluation::{eval_segm_map, EvalConfig, EvalError};
use crate::model::{LossBreakdown, Model, ModelError, TrainSample};

pub use checkpoint::{load_checkpoint, model_from_checkpoint, restore_weights, save_checkpoint, Checkpoint};
pub use log::{read_csv_log, CsvRow, EpochLog, LogWriter, CSV_COLUMNS};
pub use sgd::Sgd;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("epoch {epoch} outside [0, {epochs})")]
    EpochOutOfRange { epoch: usize, epochs: usize },
    #[error("data error: {0}")]
    DataError(String),
    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFiniteLoss { epoch: usize, step: usize, detail: String },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint version mismatch: {0}")]
    VersionMismatch(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

impl From<candle_core::Error> for TrainError {
    fn from(e: candle_core::Error) -> Self {
        TrainError::Model(ModelError::Candle(e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// 0-based epochs at which the learning rate is multiplied by `decay_factor`.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub batch_size: usize,
    /// Recorded for provenance; the CPU backend always trains in f32.
    pub mixed_precision: bool,
    /// Drives shuffling, flips and ROI sampling.
    pub seed: u64,
    pub hflip_prob: f64,
    pub eval_each_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 25,
            base_lr: 0.004,
            momentum: 0.9,
            weight_decay: 1e-4,
            decay_epochs: vec![10, 20],
            decay_factor: 0.1,
            batch_size: 3,
            mixed_precision: false,
            seed: 0,
            hflip_prob: 0.5,
            eval_each_epoch: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 {
            return err("epochs must be > 0".into());
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return err(format!("base_lr must be > 0, got {}", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return err(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return err(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.batch_size == 0 {
            return err("batch_size must be >= 1".into());
        }
        if let Some(e) = self.decay_epochs.iter().find(|&&e| e >= self.epochs) {
            return err(format!("decay epoch {e} is not below epochs = {}", self.epochs));
        }
        if !(self.decay_factor > 0.0) {
            return err(format!("decay_factor must be > 0, got {}", self.decay_factor));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return err(format!("hflip_prob must lie in [0, 1], got {}", self.hflip_prob));
        }
        Ok(())
    }
}

/// `base_lr` times `decay_factor` once for every decay epoch `<= epoch`.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> Result<f64, TrainError> {
    if epoch >= cfg.epochs {
        return Err(TrainError::EpochOutOfRange {
            epoch,
            epochs: cfg.epochs,
        });
    }
    let mut lr = cfg.base_lr;
    for _ in cfg.decay_epochs.iter().filter(|&&d| d <= epoch) {
        lr *= cfg.decay_factor;
    }
    Ok(lr)
}

/// Loads every image of a dataset with its boxes, labels and rasterized masks.
pub fn load_samples(ds: &CocoDataset) -> Result<Vec<TrainSample>, TrainError> {
    let mut out = Vec::with_capacity(ds.images.len());
    for rec in &ds.images {
        let anns: Vec<_> = ds.annotations_for(rec.id).collect();
        out.push(TrainSample {
            image: ds.load_rgb(rec)?,
            boxes: anns.iter().map(|a| a.bbox_xyxy().map(|v| v as f32)).collect(),
            labels: anns.iter().map(|a| a.category_id as u32).collect(),
            masks: ds.instance_masks(rec)?,
        });
    }
    Ok(out)
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Continue after the epoch stored in this checkpoint.
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub logs: Vec<EpochLog>,
}

pub fn checkpoint_path(out_dir: &Path, epoch: usize) -> PathBuf {
    out_dir.join("checkpoints").join(format!("ckpt_epoch{epoch}.bin"))
}

pub fn best_checkpoint_path(out_dir: &Path) -> PathBuf {
    out_dir.join("checkpoints").join("best.bin")
}

#[derive(Serialize)]
struct ConfigSnapshot<'a> {
    model: &'a crate::model::ModelConfig,
    train: &'a TrainConfig,
}

#[derive(Serialize)]
struct FailureRecord<'a> {
    epoch: usize,
    step: usize,
    global_step: usize,
    lr: f64,
    losses: &'a crate::model::LossTerms,
}

/// Trains `model` in place for `cfg.epochs` epochs, evaluating on `val_ds` after each one.
///
/// Writes `config.json`, `train_log.csv`, `train_log.jsonl` and `checkpoints/` under `out_dir`.
pub fn train(
    cfg: &TrainConfig,
    model: &Model,
    train_ds: &CocoDataset,
    val_ds: &CocoDataset,
    out_dir: &Path,
    opts: &TrainOptions,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train_ds.images.is_empty() {
        return Err(TrainError::DataError("training set has no images".into()));
    }
    if cfg.mixed_precision {
        ::log::warn!("mixed precision requested; the CPU backend trains in f32");
    }
    let ckpt_dir = out_dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir).map_err(|source| TrainError::Io {
        path: ckpt_dir.clone(),
        source,
    })?;
    let snapshot_path = out_dir.join("config.json");
    crate::json::write_sorted(
        &snapshot_path,
        &ConfigSnapshot {
            model: model.config(),
            train: cfg,
        },
    )
    .map_err(|source| TrainError::Io {
        path: snapshot_path,
        source,
    })?;

    let mut opt = Sgd::new(model.trainable_vars(), cfg.momentum, cfg.weight_decay);
    let mut start = 0;
    let mut best: Option<f64> = None;
    if let Some(path) = &opts.resume {
        let ck = load_checkpoint(path)?;
        restore_weights(&ck, model)?;
        opt.set_buffers(ck.optimizer);
        start = ck.epoch + 1;
        best = ck.best_map50;
    }
    let logs = LogWriter::open(out_dir, start)?;
    let samples = load_samples(train_ds)?;
    let eval_cfg = EvalConfig {
        mask_threshold: model.config().mask_threshold,
        iou_threshold: 0.5,
    };

    let mut rows = Vec::new();
    let mut last_ckpt = None;
    let mut global_step = 0;
    for epoch in start..cfg.epochs {
        let t0 = Instant::now();
        let lr = lr_at_epoch(cfg, epoch)?;
        let mut rng = epoch_rng(cfg.seed, epoch);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 3];
        let mut last = LossBreakdown::new(0.0, 0.0, 0.0);
        let mut steps = 0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<TrainSample> = chunk
                .iter()
                .map(|&i| {
                    if rng.random::<f64>() < cfg.hflip_prob {
                        samples[i].flip_horizontal()
                    } else {
                        samples[i].clone()
                    }
                })
                .collect();
            let (loss, terms) = model.forward_train(&batch, &mut rng)?;
            let parts = terms.breakdown();
            if !parts.is_finite() {
                let record = FailureRecord {
                    epoch,
                    step,
                    global_step,
                    lr,
                    losses: &terms,
                };
                let path = out_dir.join("failure.json");
                if let Err(e) = crate::json::write_sorted(&path, &record) {
                    ::log::error!("could not write {}: {e}", path.display());
                }
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    step,
                    detail: format!("{terms:?}"),
                });
            }
            let grads = loss.backward()?;
            opt.step(&grads, lr)?;
            sums[0] += parts.l_rpn;
            sums[1] += parts.l_faster_rcnn;
            sums[2] += parts.l_mask;
            last = parts;
            steps += 1;
            global_step += 1;
            ::log::debug!("epoch {epoch} step {step} loss {:.4}", parts.total);
        }
        let n = steps.max(1) as f64;
        let mean = LossBreakdown::new(sums[0] / n, sums[1] / n, sums[2] / n);
        let eval_map50 = if cfg.eval_each_epoch {
            eval_segm_map(model, val_ds, "val", &eval_cfg)?.ap50
        } else {
            None
        };
        let row = EpochLog {
            epoch,
            lr,
            loss_total: mean.total,
            loss_rpn: mean.l_rpn,
            loss_frcnn: mean.l_faster_rcnn,
            loss_mask: mean.l_mask,
            eval_map50,
            wall_seconds: t0.elapsed().as_secs_f64(),
            last_step: last,
            steps,
        };
        logs.append(&row)?;
        ::log::info!(
            "epoch {epoch}: lr {lr} loss {:.4} (rpn {:.4}, frcnn {:.4}, mask {:.4}) map50 {:?}",
            row.loss_total,
            row.loss_rpn,
            row.loss_frcnn,
            row.loss_mask,
            row.eval_map50
        );

        let improved = match (eval_map50, best) {
            (Some(m), Some(b)) => m > b,
            (Some(_), None) => true,
            // Without evaluation the latest epoch stands in for the best.
            (None, _) => best.is_none(),
        };
        if improved && eval_map50.is_some() {
            best = eval_map50;
        }
        let ck = Checkpoint::capture(model, opt.buffers(), epoch, cfg, best);
        let path = checkpoint_path(out_dir, epoch);
        save_checkpoint(&ck, &path)?;
        if improved {
            save_checkpoint(&ck, &best_checkpoint_path(out_dir))?;
        }
        last_ckpt = Some(path);
        rows.push(row);
    }
    let final_checkpoint = match last_ckpt {
        Some(p) => p,
        None => opts
            .resume
            .clone()
            .ok_or_else(|| TrainError::Config("no epochs left to train".into()))?,
    };
    Ok(TrainOutcome {
        final_checkpoint,
        best_checkpoint: best_checkpoint_path(out_dir),
        logs: rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn schedule_examples() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at_epoch(&cfg, 5).unwrap(), 0.004);
        assert_eq!(lr_at_epoch(&cfg, 12).unwrap(), 0.0004);
        assert_eq!(lr_at_epoch(&cfg, 22).unwrap(), 0.00004);
        assert!(matches!(
            lr_at_epoch(&cfg, 25),
            Err(TrainError::EpochOutOfRange { epoch: 25, epochs: 25 })
        ));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            decay_epochs: vec![30],
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            momentum: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn schedule_is_step_shaped(
            epochs in 1usize..40,
            decays in prop::collection::btree_set(0usize..40, 0..4),
            base in 1e-4f64..1.0,
        ) {
            let decay_epochs: Vec<usize> = decays.into_iter().filter(|&d| d < epochs).collect();
            let cfg = TrainConfig { epochs, base_lr: base, decay_epochs: decay_epochs.clone(), ..TrainConfig::default() };
            let lrs: Vec<f64> = (0..epochs).map(|e| lr_at_epoch(&cfg, e).unwrap()).collect();
            prop_assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
            let drops = lrs.windows(2).filter(|w| w[1] < w[0]).count();
            let interior = decay_epochs.iter().filter(|&&d| d > 0).count();
            prop_assert_eq!(drops, interior);
        }
    }
}
