use std::path::Path;

use soilseg::coco::{generate_synthetic_dataset, load_coco_dataset, CocoDataset, Split, SyntheticSpec};
use soilseg::model::{build_model, ModelConfig};
use soilseg::training::{
    best_checkpoint_path, checkpoint_path, load_checkpoint, read_csv_log, train, TrainConfig, TrainOptions,
};

fn data(root: &Path) -> (CocoDataset, CocoDataset) {
    let mut spec = SyntheticSpec::new(3, 64, 5);
    spec.n_val = Some(1);
    generate_synthetic_dataset(&spec, root).unwrap();
    (load_coco_dataset(root, Split::Train).unwrap(), load_coco_dataset(root, Split::Val).unwrap())
}

fn cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        decay_epochs: if epochs > 1 { vec![1] } else { Vec::new() },
        seed: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn two_epochs_then_resume_reproduces() {
    let dir = tempfile::tempdir().unwrap();
    let (tr, va) = data(&dir.path().join("data"));

    let full = dir.path().join("full");
    let model = build_model(&ModelConfig::compact()).unwrap();
    let out = train(&cfg(2), &model, &tr, &va, &full, &TrainOptions::default()).unwrap();
    assert_eq!(out.logs.len(), 2);
    assert_eq!(out.final_checkpoint, checkpoint_path(&full, 1));
    assert!(full.join("config.json").is_file());
    assert!(best_checkpoint_path(&full).is_file());
    let rows = read_csv_log(&full.join("train_log.csv")).unwrap();
    assert_eq!(rows.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![0, 1]);
    assert_eq!(rows[0].lr, 0.004);
    assert_eq!(rows[1].lr, 0.004 * 0.1);
    for r in &out.logs {
        let sum = r.loss_rpn + r.loss_frcnn + r.loss_mask;
        assert!((r.loss_total - sum).abs() <= 1e-6 * sum.abs().max(1.0));
        assert!(r.eval_map50.is_some());
        assert_eq!(r.steps, 1);
    }
    let config: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(full.join("config.json")).unwrap()).unwrap();
    assert_eq!(config["train"]["base_lr"], 0.004);
    assert_eq!(config["train"]["batch_size"], 3);

    // one epoch, then resume for the second
    let part = dir.path().join("part");
    let model_b = build_model(&ModelConfig::compact()).unwrap();
    train(&cfg(1), &model_b, &tr, &va, &part, &TrainOptions::default()).unwrap();
    let resume = TrainOptions {
        resume: Some(checkpoint_path(&part, 0)),
    };
    let out_b = train(&cfg(2), &model_b, &tr, &va, &part, &resume).unwrap();
    assert_eq!(out_b.logs.len(), 1);
    assert_eq!(read_csv_log(&part.join("train_log.csv")).unwrap().len(), 2);

    let a = load_checkpoint(&checkpoint_path(&full, 1)).unwrap();
    let b = load_checkpoint(&checkpoint_path(&part, 1)).unwrap();
    assert_eq!(a.weights.len(), b.weights.len());
    for (name, t) in &a.weights {
        let d = (t - &b.weights[name]).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(d < 1e-5, "{name} differs by {d}");
    }
    assert!((out.logs[1].loss_total - out_b.logs[0].loss_total).abs() < 1e-5);
}

#[test]
fn resume_past_the_end_is_rejected_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let (tr, va) = data(&dir.path().join("data"));
    let run = dir.path().join("run");
    let model = build_model(&ModelConfig::compact()).unwrap();
    let mut c = cfg(1);
    c.eval_each_epoch = false;
    train(&c, &model, &tr, &va, &run, &TrainOptions::default()).unwrap();
    let resume = TrainOptions {
        resume: Some(checkpoint_path(&run, 0)),
    };
    // nothing left to do: the resumed checkpoint is the final one
    let out = train(&c, &model, &tr, &va, &run, &resume).unwrap();
    assert!(out.logs.is_empty());
    assert_eq!(out.final_checkpoint, checkpoint_path(&run, 0));

    std::fs::write(run.join("bad.bin"), b"garbage").unwrap();
    let bad = TrainOptions {
        resume: Some(run.join("bad.bin")),
    };
    assert!(matches!(
        train(&c, &model, &tr, &va, &run, &bad),
        Err(soilseg::training::TrainError::CorruptCheckpoint(_))
    ));
}
