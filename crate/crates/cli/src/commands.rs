use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use soilseg::coco::{
    generate_synthetic_dataset, load_annotation_file, load_coco_dataset, polygons_to_mask, split_dataset,
    validate_dataset, CocoDataset, CocoFile, DatasetError, Split, SplitSpec, SyntheticSpec,
};
use soilseg::evaluation::{
    benchmark_inference, eval_segm_map, evaluate_predictions, EvalConfig, EvalError, EvalReport, ScoredMask,
};
use soilseg::model::{build_model_on, Backbone, ModelConfig, ModelError};
use soilseg::postprocess::{segment_image, PostprocessError, SegmentConfig};
use soilseg::training::{self, model_from_checkpoint, TrainConfig, TrainError, TrainOptions};

use crate::manifest::RunManifest;
use crate::{
    select_device, BenchArgs, CliError, EvalArgs, SegmentArgs, SplitArgs, SynthArgs, TrainArgs, ValidateArgs,
    REFERENCE_LATENCY_SECONDS,
};

pub(crate) fn dataset_err(e: DatasetError) -> CliError {
    match e {
        DatasetError::InvalidRatio(_) => CliError::Usage(e.to_string()),
        e if e.is_layout_error() => CliError::Env(e.to_string()),
        e => CliError::Failure(e.to_string()),
    }
}

fn model_err(e: ModelError) -> CliError {
    match e {
        ModelError::ConfigError(_) => CliError::Usage(e.to_string()),
        ModelError::WeightsUnavailable(_) => CliError::Env(format!(
            "{e}; pass --backbone-weights, or --no-pretrained / --backbone compact-fpn to train from scratch"
        )),
        e => CliError::Failure(e.to_string()),
    }
}

fn eval_err(e: EvalError) -> CliError {
    match e {
        EvalError::Dataset(d) => dataset_err(d),
        EvalError::Model(m) => model_err(m),
        e => CliError::Failure(e.to_string()),
    }
}

fn train_err(e: TrainError) -> CliError {
    match e {
        TrainError::Config(_) | TrainError::EpochOutOfRange { .. } => CliError::Usage(e.to_string()),
        TrainError::CorruptCheckpoint(_) | TrainError::VersionMismatch(_) | TrainError::Io { .. } => {
            CliError::Env(e.to_string())
        }
        TrainError::Model(m) => model_err(m),
        TrainError::Eval(ev) => eval_err(ev),
        TrainError::Dataset(d) => dataset_err(d),
        TrainError::DataError(_) | TrainError::NonFiniteLoss { .. } => CliError::Failure(e.to_string()),
    }
}

/// Checkpoint loading failures are environment errors whatever their cause.
fn load_model(path: &Path, device: &candle_core::Device) -> Result<(soilseg::model::Model, ModelConfig), CliError> {
    let (model, ck) = model_from_checkpoint(path, device)
        .map_err(|e| CliError::Env(format!("cannot load checkpoint {}: {e}", path.display())))?;
    Ok((model, ck.model_config))
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("settings serialize")
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<(), CliError> {
    soilseg::json::write_sorted(path, v).map_err(|e| CliError::Env(format!("cannot write {}: {e}", path.display())))
}

pub(crate) fn validate(a: &ValidateArgs) -> Result<(), CliError> {
    let mut manifest = match &a.out {
        Some(out) => {
            let m = RunManifest::new("validate", json!({ "root": a.root }), out).input("root", &a.root);
            m.write()?;
            Some(m)
        }
        None => None,
    };
    let mut layout_errors = Vec::new();
    let mut violations = Vec::new();
    for split in [Split::Train, Split::Val] {
        match load_coco_dataset(&a.root, split) {
            Ok(ds) => {
                for v in validate_dataset(&ds).violations {
                    violations.push(format!("{split}: {v}"));
                }
            }
            Err(e) if e.is_layout_error() => layout_errors.push(format!("{split}: {e}")),
            Err(e) => violations.push(format!("{split}: {e}")),
        }
    }
    for line in layout_errors.iter().chain(&violations) {
        println!("{line}");
    }
    if let (Some(m), Some(out)) = (manifest.as_mut(), a.out.as_ref()) {
        let report = json!({ "layout_errors": layout_errors, "violations": violations });
        write_json(&out.join("validation.json"), &report)?;
        m.finish(report)?;
    }
    if !layout_errors.is_empty() {
        return Err(CliError::Env(format!("{} layout error(s)", layout_errors.len())));
    }
    if !violations.is_empty() {
        return Err(CliError::Failure(format!("{} violation(s)", violations.len())));
    }
    println!("ok: {} is a valid dataset root", a.root.display());
    Ok(())
}

fn find_annotation_file(dir: &Path) -> Result<PathBuf, CliError> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::Env(format!("cannot read {}: {e}", dir.display())))?;
    let mut found: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|x| x == "json")
                && p.file_name().is_some_and(|n| n != crate::manifest::MANIFEST_NAME)
        })
        .collect();
    found.sort();
    match found.len() {
        1 => Ok(found.remove(0)),
        0 => Err(CliError::Env(format!("no annotation .json file in {}", dir.display()))),
        n => Err(CliError::Usage(format!(
            "{n} .json files in {}; choose one with --annotations",
            dir.display()
        ))),
    }
}

fn subset(ds: &CocoDataset, ids: &[u64]) -> CocoFile {
    let keep: std::collections::HashSet<u64> = ids.iter().copied().collect();
    CocoFile {
        images: ds.images.iter().filter(|i| keep.contains(&i.id)).cloned().collect(),
        annotations: ds.annotations.iter().filter(|a| keep.contains(&a.image_id)).cloned().collect(),
        categories: ds.categories.clone(),
    }
}

pub(crate) fn split(a: &SplitArgs) -> Result<(), CliError> {
    let ann = match &a.annotations {
        Some(p) => p.clone(),
        None => find_annotation_file(&a.input)?,
    };
    let spec = SplitSpec {
        ratio: a.ratio,
        seed: a.seed,
    };
    let mut manifest = RunManifest::new("split", to_value(&spec), &a.out)
        .input("input", &a.input)
        .input("annotations", &ann);
    manifest.seed = Some(a.seed);
    manifest.write()?;

    let pool = load_annotation_file(&ann, &a.input).map_err(dataset_err)?;
    let ids: Vec<u64> = pool.images.iter().map(|i| i.id).collect();
    let (train_ids, val_ids) = split_dataset(&ids, spec).map_err(dataset_err)?;
    for (split, ids) in [(Split::Train, &train_ids), (Split::Val, &val_ids)] {
        let file = subset(&pool, ids);
        let dir = split.image_dir(&a.out);
        for img in &file.images {
            let dst = dir.join(&img.file_name);
            if let Some(parent) = dst.parent() {
                std::fs::create_dir_all(parent)
                    .map_err(|e| CliError::Env(format!("cannot create {}: {e}", parent.display())))?;
            }
            std::fs::copy(pool.image_path(img), &dst)
                .map_err(|e| CliError::Env(format!("cannot copy to {}: {e}", dst.display())))?;
        }
        std::fs::create_dir_all(&dir).map_err(|e| CliError::Env(format!("cannot create {}: {e}", dir.display())))?;
        file.write(&split.annotation_path(&a.out)).map_err(dataset_err)?;
    }
    println!("train {} images, val {} images -> {}", train_ids.len(), val_ids.len(), a.out.display());
    manifest.finish(json!({ "train_ids": train_ids, "val_ids": val_ids }))
}

fn resolve_train_config(a: &TrainArgs) -> TrainConfig {
    let mut c = TrainConfig::default();
    if let Some(v) = a.epochs {
        c.epochs = v;
    }
    if let Some(v) = a.lr {
        c.base_lr = v;
    }
    if let Some(v) = a.momentum {
        c.momentum = v;
    }
    if let Some(v) = a.weight_decay {
        c.weight_decay = v;
    }
    match &a.decay_epochs {
        Some(v) => c.decay_epochs = v.clone(),
        // default milestones past a shortened run would never fire
        None => {
            let epochs = c.epochs;
            c.decay_epochs.retain(|&e| e < epochs);
        }
    }
    if let Some(v) = a.decay_factor {
        c.decay_factor = v;
    }
    if let Some(v) = a.batch_size {
        c.batch_size = v;
    }
    if let Some(v) = a.seed {
        c.seed = v;
    }
    if let Some(v) = a.hflip_prob {
        c.hflip_prob = v;
    }
    c.mixed_precision = a.mixed_precision;
    c.eval_each_epoch = !a.no_eval;
    c
}

fn resolve_model_config(a: &TrainArgs) -> Result<ModelConfig, CliError> {
    let mut cfg = match &a.model_config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Env(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
        }
        None => {
            let backbone = match &a.backbone {
                Some(s) => s.parse::<Backbone>().map_err(CliError::Usage)?,
                None => Backbone::Resnet50Fpn,
            };
            ModelConfig::with_backbone(backbone)
        }
    };
    if a.model_config.is_some() {
        if let Some(s) = &a.backbone {
            let b = s.parse::<Backbone>().map_err(CliError::Usage)?;
            if b != cfg.backbone {
                return Err(CliError::Usage(format!(
                    "--backbone {b} contradicts the model config ({})",
                    cfg.backbone
                )));
            }
        }
    }
    if let Some(w) = &a.backbone_weights {
        cfg.backbone_weights = Some(w.clone());
        cfg.pretrained_backbone = true;
    }
    if a.no_pretrained {
        cfg.pretrained_backbone = false;
        cfg.backbone_weights = None;
    }
    cfg.validate().map_err(model_err)?;
    Ok(cfg)
}

pub(crate) fn train(a: &TrainArgs) -> Result<(), CliError> {
    let tc = resolve_train_config(a);
    tc.validate().map_err(train_err)?;
    let mc = resolve_model_config(a)?;
    let mut manifest = RunManifest::new("train", json!({ "model": mc, "train": tc }), &a.out).input("root", &a.root);
    if let Some(r) = &a.resume {
        manifest = manifest.input("resume", r);
    }
    manifest.seed = Some(tc.seed);
    manifest.device = Some(a.device.device.clone());
    manifest.write()?;

    let device = select_device(&a.device.device)?;
    let train_ds = load_coco_dataset(&a.root, Split::Train).map_err(dataset_err)?;
    let val_ds = load_coco_dataset(&a.root, Split::Val).map_err(dataset_err)?;
    let model = build_model_on(&mc, &device).map_err(model_err)?;
    log::info!(
        "training {} on {} images ({} val), {} parameters",
        mc.backbone,
        train_ds.images.len(),
        val_ds.images.len(),
        model.num_parameters()
    );
    let opts = TrainOptions {
        resume: a.resume.clone(),
    };
    let out = training::train(&tc, &model, &train_ds, &val_ds, &a.out, &opts).map_err(train_err)?;
    let last = out.logs.last();
    println!(
        "trained {} epoch(s); final checkpoint {}",
        out.logs.len(),
        out.final_checkpoint.display()
    );
    manifest.finish(json!({
        "final_checkpoint": out.final_checkpoint,
        "best_checkpoint": out.best_checkpoint,
        "epochs_run": out.logs.len(),
        "last_epoch": last,
    }))
}

/// One entry of a COCO-style results file. Only polygon segmentations are read.
#[derive(Debug, Deserialize)]
struct PredictionRecord {
    image_id: u64,
    score: f64,
    segmentation: Vec<Vec<f64>>,
    #[serde(default)]
    category_id: Option<u64>,
}

fn read_predictions(path: &Path, ds: &CocoDataset) -> Result<HashMap<u64, Vec<ScoredMask>>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Env(format!("cannot read {}: {e}", path.display())))?;
    let records: Vec<PredictionRecord> =
        serde_json::from_str(&text).map_err(|e| CliError::Env(format!("{}: {e}", path.display())))?;
    let mut out: HashMap<u64, Vec<ScoredMask>> = HashMap::new();
    for r in records {
        if r.category_id.is_some_and(|c| c != soilseg::coco::SOIL_CATEGORY_ID) {
            continue;
        }
        let img = ds
            .image(r.image_id)
            .ok_or_else(|| CliError::Failure(format!("prediction for unknown image {}", r.image_id)))?;
        let mask = polygons_to_mask(&r.segmentation, img.width as usize, img.height as usize);
        out.entry(r.image_id).or_default().push(ScoredMask { score: r.score, mask });
    }
    Ok(out)
}

/// `segm_mAP@0.5=0.8804`; `none` when the split has neither ground truth nor predictions.
pub fn format_map_line(report: &EvalReport) -> String {
    let value = report.ap50.map(|v| format!("{v:.4}")).unwrap_or_else(|| "none".into());
    format!("segm_mAP@{}={value}", report.iou_threshold)
}

pub(crate) fn eval(a: &EvalArgs) -> Result<(), CliError> {
    let split: Split = a.split.parse().map_err(|e: String| CliError::Usage(e))?;
    let mut manifest = RunManifest::new(
        "eval",
        json!({ "split": split, "iou_threshold": a.iou_threshold, "mask_threshold": a.mask_threshold }),
        &a.out,
    )
    .input("root", &a.root);
    if let Some(c) = &a.checkpoint {
        manifest = manifest.input("checkpoint", c);
        manifest.device = Some(a.device.device.clone());
    }
    if let Some(p) = &a.predictions {
        manifest = manifest.input("predictions", p);
    }
    manifest.write()?;

    let ds = load_coco_dataset(&a.root, split).map_err(dataset_err)?;
    let report = match (&a.checkpoint, &a.predictions) {
        (Some(ck), _) => {
            let device = select_device(&a.device.device)?;
            let (model, mc) = load_model(ck, &device)?;
            let cfg = EvalConfig {
                mask_threshold: a.mask_threshold.unwrap_or(mc.mask_threshold),
                iou_threshold: a.iou_threshold,
            };
            eval_segm_map(&model, &ds, split.as_str(), &cfg).map_err(eval_err)?
        }
        (None, Some(p)) => {
            let preds = read_predictions(p, &ds)?;
            evaluate_predictions(&ds, &preds, split.as_str(), a.iou_threshold).map_err(eval_err)?
        }
        (None, None) => return Err(CliError::Usage("one of --checkpoint or --predictions is required".into())),
    };
    let report_path = a.out.join("eval_report.json");
    write_json(&report_path, &report)?;
    println!("{}", format_map_line(&report));
    manifest.finish(json!({ "ap50": report.ap50, "report": report_path }))
}

fn list_images(input: &Path) -> Result<Vec<PathBuf>, CliError> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    if !input.is_dir() {
        return Err(CliError::Env(format!("no such file or directory: {}", input.display())));
    }
    let entries = std::fs::read_dir(input).map_err(|e| CliError::Env(format!("cannot read {}: {e}", input.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|x| x.to_str())
                    .is_some_and(|x| matches!(x.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Env(format!("no .png/.jpg images in {}", input.display())));
    }
    Ok(files)
}

/// Output stem for each input; repeated stems (`a.png`, `a.jpg`) fall back to the full file name.
fn output_stems(files: &[PathBuf]) -> Vec<String> {
    let stem = |p: &PathBuf| p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let mut counts: HashMap<String, usize> = HashMap::new();
    for f in files {
        *counts.entry(stem(f)).or_default() += 1;
    }
    files
        .iter()
        .map(|f| {
            let s = stem(f);
            if counts[&s] > 1 {
                f.file_name().map(|n| n.to_string_lossy().replace('.', "_")).unwrap_or(s)
            } else {
                s
            }
        })
        .collect()
}

#[derive(Serialize)]
struct SegmentMeta<'a> {
    source: &'a Path,
    image_size: [u32; 2],
    score: f32,
    detection_box: soilseg::postprocess::CropRect,
    crop_rect: soilseg::postprocess::CropRect,
    mask_area: usize,
    composite: String,
    crop: String,
}

pub(crate) fn segment(a: &SegmentArgs) -> Result<(), CliError> {
    let mut manifest = RunManifest::new(
        "segment",
        json!({ "score_threshold": a.score_threshold, "mask_threshold": a.mask_threshold }),
        &a.out,
    )
    .input("checkpoint", &a.checkpoint)
    .input("input", &a.input);
    manifest.device = Some(a.device.device.clone());
    manifest.write()?;

    let files = list_images(&a.input)?;
    let device = select_device(&a.device.device)?;
    let (model, mc) = load_model(&a.checkpoint, &device)?;
    let cfg = SegmentConfig {
        score_threshold: a.score_threshold,
        mask_threshold: a.mask_threshold.unwrap_or(mc.mask_threshold),
    };
    let mut written = Vec::new();
    let mut no_detection = Vec::new();
    let mut failures = Vec::new();
    for (file, stem) in files.iter().zip(output_stems(&files)) {
        let img = match image::open(file) {
            Ok(i) => i.to_rgb8(),
            Err(e) => {
                log::warn!("{}: {e}", file.display());
                failures.push(json!({ "source": file, "error": e.to_string() }));
                continue;
            }
        };
        match segment_image(&model, &img, &cfg) {
            Ok(art) => {
                let composite = format!("{stem}_composite.png");
                let crop = format!("{stem}_crop.png");
                let save = |name: &str, im: &image::RgbImage| {
                    im.save(a.out.join(name))
                        .map_err(|e| CliError::Env(format!("cannot write {name}: {e}")))
                };
                save(&composite, &art.composite)?;
                save(&crop, &art.cropped)?;
                let meta = SegmentMeta {
                    source: file,
                    image_size: [img.width(), img.height()],
                    score: art.score,
                    detection_box: art.detection_box,
                    crop_rect: art.crop_rect,
                    mask_area: art.mask.area(),
                    composite,
                    crop,
                };
                let meta_name = format!("{stem}_meta.json");
                write_json(&a.out.join(&meta_name), &meta)?;
                written.push(json!({ "source": file, "meta": meta_name }));
            }
            Err(e @ (PostprocessError::NoSoilDetected { .. } | PostprocessError::EmptyIntersection)) => {
                log::warn!("{}: {e}", file.display());
                no_detection.push(file.clone());
            }
            Err(e) => {
                log::warn!("{}: {e}", file.display());
                failures.push(json!({ "source": file, "error": e.to_string() }));
            }
        }
    }
    println!(
        "segmented {} of {} image(s); {} without detection, {} failed",
        written.len(),
        files.len(),
        no_detection.len(),
        failures.len()
    );
    manifest.finish(json!({ "written": written, "no_detection": no_detection, "failures": failures }))?;
    if written.is_empty() {
        return Err(CliError::Failure("no input image was segmented".into()));
    }
    Ok(())
}

pub(crate) fn bench(a: &BenchArgs) -> Result<(), CliError> {
    let mut manifest = RunManifest::new(
        "bench",
        json!({ "runs": a.runs, "warmup": a.warmup, "score_threshold": a.score_threshold }),
        &a.out,
    )
    .input("checkpoint", &a.checkpoint)
    .input("image", &a.image);
    manifest.device = Some(a.device.device.clone());
    manifest.write()?;

    let device = select_device(&a.device.device)?;
    let img = image::open(&a.image)
        .map_err(|e| CliError::Env(format!("cannot read {}: {e}", a.image.display())))?
        .to_rgb8();
    let (model, mc) = load_model(&a.checkpoint, &device)?;
    let cfg = SegmentConfig {
        score_threshold: a.score_threshold,
        mask_threshold: mc.mask_threshold,
    };
    let report = benchmark_inference(&model, &img, a.warmup as usize, a.runs as usize, &a.device.device, &cfg)
        .map_err(eval_err)?;
    let path = a.out.join("timing.json");
    write_json(&path, &report)?;
    println!(
        "median {:.4} s over {} runs (mean {:.4}, min {:.4}, max {:.4}; warmup {}; device {})",
        report.median_seconds,
        report.measured_runs,
        report.mean_seconds,
        report.min_seconds,
        report.max_seconds,
        report.warmup_runs,
        report.device
    );
    println!("reference: {REFERENCE_LATENCY_SECONDS:.2} s per image reported for the original GPU setup (not comparable)");
    manifest.finish(json!({ "median_seconds": report.median_seconds, "report": path }))
}

pub(crate) fn synth(a: &SynthArgs) -> Result<(), CliError> {
    let spec = SyntheticSpec {
        n_images: a.n,
        image_size: a.size,
        seed: a.seed,
        n_val: a.n_val,
    };
    let mut manifest = RunManifest::new("synth", to_value(&spec), &a.out);
    manifest.seed = Some(a.seed);
    manifest.write()?;
    generate_synthetic_dataset(&spec, &a.out).map_err(|e| match e {
        DatasetError::NoImages | DatasetError::SchemaError { .. } => CliError::Usage(e.to_string()),
        e => dataset_err(e),
    })?;
    println!("wrote {} train / {} val images to {}", spec.n_images, spec.val_count(), a.out.display());
    manifest.finish(json!({ "train_images": spec.n_images, "val_images": spec.val_count() }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stems_are_unique() {
        let files: Vec<PathBuf> = ["d/a.png", "d/a.jpg", "d/b.png"].iter().map(PathBuf::from).collect();
        assert_eq!(output_stems(&files), vec!["a_png", "a_jpg", "b"]);
    }

    #[test]
    fn map_line_format() {
        let mut r = EvalReport {
            split: "val".into(),
            iou_threshold: 0.5,
            ap50: Some(0.88041),
            num_images: 1,
            num_predictions: 1,
            num_gts: 1,
            per_image: vec![],
        };
        assert_eq!(format_map_line(&r), "segm_mAP@0.5=0.8804");
        r.ap50 = Some(1.0);
        assert_eq!(format_map_line(&r), "segm_mAP@0.5=1.0000");
        r.ap50 = None;
        assert_eq!(format_map_line(&r), "segm_mAP@0.5=none");
    }
}
