//! Checkpoints are safetensors files: model parameters under `model.`, momentum buffers under
//! `optim.`, and run metadata as JSON strings in the header.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{Device, Tensor};
use safetensors::SafeTensors;

use super::{TrainConfig, TrainError};
use crate::model::{build_model_on, Model, ModelConfig, ModelError};

pub const CHECKPOINT_FORMAT: &str = "soilseg-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

const MODEL_PREFIX: &str = "model.";
const OPTIM_PREFIX: &str = "optim.";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    /// Last completed epoch (0-based).
    pub epoch: usize,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub best_map50: Option<f64>,
    pub weights: HashMap<String, Tensor>,
    pub optimizer: HashMap<String, Tensor>,
}

impl Checkpoint {
    pub fn capture(
        model: &Model,
        optimizer: &HashMap<String, Tensor>,
        epoch: usize,
        train_config: &TrainConfig,
        best_map50: Option<f64>,
    ) -> Self {
        Self {
            epoch,
            model_config: model.config().clone(),
            train_config: train_config.clone(),
            best_map50,
            weights: model.state().into_iter().collect(),
            optimizer: optimizer.clone(),
        }
    }
}

fn corrupt(path: &Path, msg: impl std::fmt::Display) -> TrainError {
    TrainError::CorruptCheckpoint(format!("{}: {msg}", path.display()))
}

fn json<T: serde::Serialize>(v: &T) -> String {
    crate::json::to_sorted_line(v).expect("config types serialize")
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<(), TrainError> {
    let mut meta = HashMap::new();
    meta.insert("format".to_string(), CHECKPOINT_FORMAT.to_string());
    meta.insert("version".to_string(), CHECKPOINT_VERSION.to_string());
    meta.insert("epoch".to_string(), ck.epoch.to_string());
    meta.insert("model_config".to_string(), json(&ck.model_config));
    meta.insert("train_config".to_string(), json(&ck.train_config));
    meta.insert("best_map50".to_string(), json(&ck.best_map50));
    let mut entries: Vec<(String, &Tensor)> = Vec::with_capacity(ck.weights.len() + ck.optimizer.len());
    entries.extend(ck.weights.iter().map(|(k, v)| (format!("{MODEL_PREFIX}{k}"), v)));
    entries.extend(ck.optimizer.iter().map(|(k, v)| (format!("{OPTIM_PREFIX}{k}"), v)));
    entries.sort_by(|a, b| a.0.cmp(&b.0));
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|source| TrainError::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    safetensors::serialize_to_file(entries, Some(meta), path).map_err(|e| TrainError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    let bytes = std::fs::read(path).map_err(|source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| corrupt(path, e))?;
    let meta = header
        .metadata()
        .clone()
        .ok_or_else(|| corrupt(path, "missing metadata"))?;
    let field = |k: &str| meta.get(k).ok_or_else(|| corrupt(path, format!("missing field {k}")));
    if field("format")? != CHECKPOINT_FORMAT {
        return Err(corrupt(path, "not a soilseg checkpoint"));
    }
    let version: u32 = field("version")?.parse().map_err(|e| corrupt(path, e))?;
    if version != CHECKPOINT_VERSION {
        return Err(TrainError::VersionMismatch(format!(
            "{}: checkpoint version {version}, expected {CHECKPOINT_VERSION}",
            path.display()
        )));
    }
    let epoch = field("epoch")?.parse().map_err(|e| corrupt(path, e))?;
    let model_config = serde_json::from_str(field("model_config")?).map_err(|e| corrupt(path, e))?;
    let train_config = serde_json::from_str(field("train_config")?).map_err(|e| corrupt(path, e))?;
    let best_map50 = serde_json::from_str(field("best_map50")?).map_err(|e| corrupt(path, e))?;
    let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu).map_err(|e| corrupt(path, e))?;
    let (mut weights, mut optimizer) = (HashMap::new(), HashMap::new());
    for (k, v) in tensors {
        if let Some(name) = k.strip_prefix(MODEL_PREFIX) {
            weights.insert(name.to_string(), v);
        } else if let Some(name) = k.strip_prefix(OPTIM_PREFIX) {
            optimizer.insert(name.to_string(), v);
        } else {
            return Err(corrupt(path, format!("unexpected tensor {k}")));
        }
    }
    Ok(Checkpoint {
        epoch,
        model_config,
        train_config,
        best_map50,
        weights,
        optimizer,
    })
}

/// Copies checkpoint weights into `model`; a different architecture is a version mismatch.
pub fn restore_weights(ck: &Checkpoint, model: &Model) -> Result<(), TrainError> {
    model.load_state(&ck.weights).map_err(|e| match e {
        ModelError::StateMismatch(m) => TrainError::VersionMismatch(format!(
            "checkpoint does not fit the model (num_classes {} vs {}): {m}",
            ck.model_config.num_classes,
            model.config().num_classes
        )),
        other => TrainError::Model(other),
    })
}

/// Rebuilds the model described by a checkpoint and loads its weights. Pretrained backbone
/// loading is skipped since the checkpoint already holds every weight.
pub fn model_from_checkpoint(path: &Path, device: &Device) -> Result<(Model, Checkpoint), TrainError> {
    let ck = load_checkpoint(path)?;
    let mut cfg = ck.model_config.clone();
    cfg.pretrained_backbone = false;
    let model = build_model_on(&cfg, device)?;
    restore_weights(&ck, &model)?;
    Ok((model, ck))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_model;

    fn small() -> (Model, TrainConfig) {
        (build_model(&ModelConfig::compact()).unwrap(), TrainConfig::default())
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (model, tc) = small();
        let mut opt = HashMap::new();
        opt.insert("rpn.head.conv.bias".to_string(), Tensor::ones(64, candle_core::DType::F32, &Device::Cpu).unwrap());
        let ck = Checkpoint::capture(&model, &opt, 3, &tc, Some(0.5));
        let path = dir.path().join("c.bin");
        save_checkpoint(&ck, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.epoch, 3);
        assert_eq!(back.train_config, tc);
        assert_eq!(back.model_config, *model.config());
        assert_eq!(back.best_map50, Some(0.5));
        assert_eq!(back.weights.len(), model.state().len());
        assert_eq!(back.optimizer.len(), 1);
        let (m2, _) = model_from_checkpoint(&path, &Device::Cpu).unwrap();
        for ((_, a), (_, b)) in model.state().iter().zip(m2.state().iter()) {
            let d = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
            assert_eq!(d, 0.0);
        }
    }

    #[test]
    fn truncated_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let (model, tc) = small();
        let path = dir.path().join("c.bin");
        save_checkpoint(&Checkpoint::capture(&model, &HashMap::new(), 0, &tc, None), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(TrainError::CorruptCheckpoint(_))));
        std::fs::write(&path, b"nope").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(TrainError::CorruptCheckpoint(_))));
    }

    #[test]
    fn other_class_count_is_version_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (model, tc) = small();
        let path = dir.path().join("c.bin");
        save_checkpoint(&Checkpoint::capture(&model, &HashMap::new(), 0, &tc, None), &path).unwrap();
        let mut cfg = ModelConfig::compact();
        cfg.num_classes = 3;
        let other = build_model(&cfg).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert!(matches!(restore_weights(&ck, &other), Err(TrainError::VersionMismatch(_))));
    }
}
