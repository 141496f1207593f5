//! Subcommand bodies. Each one is a thin binding to a library operation.

use std::collections::HashMap;
use std::fs;
use std::io::{self, Write};
use std::path::Path;
use std::sync::Arc;

use serde_json::json;
use vqa_core::backbone::Backbone;
use vqa_core::config::ExperimentConfig;
use vqa_core::data::{decode_frames, make_synthetic_dataset, Checkpoint, DatasetManifest, DecodeConfig, FrameCache, FrameSequence};
use vqa_core::evaluation::{compute_metrics, EvalReport, SplitRecord};
use vqa_core::model::QualityModel;
use vqa_core::sampler::{motion_profile_at, SamplingPlan, SamplingStrategy, DEFAULT_PROFILE_MAX_SIDE};
use vqa_core::training::{evaluate_protocol, prepare_videos, train_on_manifest, PreparedVideo, TrainConfig};
use vqa_core::{Error, Result};

fn print_json(v: &serde_json::Value) -> Result<()> {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, v)?;
    writeln!(out)?;
    Ok(())
}

fn load_experiment(path: &Path, overrides: &[String], seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path, overrides)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
        cfg.init_seed = s;
    }
    Ok(cfg)
}

fn manifest_of(cfg: &ExperimentConfig) -> Result<DatasetManifest> {
    let path = cfg
        .data
        .manifest
        .as_ref()
        .ok_or_else(|| Error::Config("data.manifest is required".into()))?;
    DatasetManifest::read(path)
}

fn cache_of(cfg: &ExperimentConfig) -> Result<FrameCache> {
    match &cfg.data.cache_dir {
        Some(d) => FrameCache::on_disk(d),
        None => Ok(FrameCache::in_memory()),
    }
}

/// Training settings stored in a checkpoint, defaults when absent.
fn train_config_of(ckpt: &Checkpoint) -> TrainConfig {
    serde_json::from_value(ckpt.train.clone()).unwrap_or_default()
}

fn report_skipped(skipped: &[vqa_core::training::SkippedVideo]) -> Result<()> {
    for s in skipped {
        eprintln!("{}", serde_json::to_string(s)?);
    }
    Ok(())
}

pub fn sample(input: &Path, strategy: &str, frames: usize, seed: u64, with_profile: bool) -> Result<()> {
    let strategy: SamplingStrategy = strategy.parse()?;
    let video = decode_frames(input, &DecodeConfig::default())?;
    let profile = if video.len() >= 2 {
        Some(motion_profile_at(&video, DEFAULT_PROFILE_MAX_SIDE)?)
    } else {
        None
    };
    let s = SamplingPlan::new(strategy, frames, seed).sample(video.len(), profile.as_ref())?;
    let mut out = json!({
        "video": input.display().to_string(),
        "num_frames": video.len(),
        "strategy": s.strategy.as_str(),
        "indices": s.indices,
        "repeated": s.repeated,
    });
    if with_profile {
        out["profile"] = json!(profile.as_ref().map(|p| p.values().to_vec()));
    }
    print_json(&out)
}

pub fn train(config: &Path, overrides: &[String], seed: Option<u64>, out_dir: &Path) -> Result<()> {
    let cfg = load_experiment(config, overrides, seed)?;
    let manifest = manifest_of(&cfg)?;
    let mut model = QualityModel::from_config(cfg.model())?;
    let report = train_on_manifest(&mut model, &manifest, &cfg.train, &cfg.data.decode, &cache_of(&cfg)?)?;
    model.check_frozen()?;
    fs::create_dir_all(out_dir)?;
    report.final_checkpoint.save(&out_dir.join("checkpoint.bin"))?;
    report.best_checkpoint.save(&out_dir.join("best.bin"))?;
    report.write_log(&out_dir.join("train_log.jsonl"))?;
    fs::write(out_dir.join("config.txt"), cfg.to_text()?)?;
    report_skipped(&report.skipped)?;
    print_json(&json!({
        "out_dir": out_dir.display().to_string(),
        "steps": report.steps,
        "epochs": report.epochs.len(),
        "final_loss": report.epochs.last().map(|e| e.loss),
        "best": report.best.map(|(epoch, srocc)| json!({ "epoch": epoch, "val_srocc": srocc })),
        "skipped": report.skipped.len(),
        "trainable_params": model.trainable_param_count(),
    }))
}

pub fn eval_protocol(config: &Path, overrides: &[String], seed: Option<u64>, table: bool) -> Result<()> {
    let cfg = load_experiment(config, overrides, seed)?;
    let manifest = manifest_of(&cfg)?;
    let (videos, skipped) = prepare_videos(&manifest, &cfg.data.decode, &cache_of(&cfg)?, cfg.train.profile_max_side);
    report_skipped(&skipped)?;
    let backbone: Arc<dyn Backbone> = Arc::new(cfg.backbone.load()?);
    let report = evaluate_protocol(backbone, &cfg.model(), &videos, &cfg.train, &cfg.eval)?;
    emit_report(&report, table)
}

fn emit_report(report: &EvalReport, table: bool) -> Result<()> {
    if table {
        print!("{}", report.table());
        Ok(())
    } else {
        print_json(&serde_json::to_value(report)?)
    }
}

/// Reads `(video_id, value)` pairs from the named column of a CSV.
fn read_column(path: &Path, column: &str) -> Result<Vec<(String, f64)>> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let headers = rdr.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::InputContract(format!("{} has no '{name}' column", path.display())))
    };
    let (id_col, val_col) = (find("video_id")?, find(column)?);
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let v: f64 = rec[val_col].parse().map_err(|_| {
            Error::InputContract(format!("{} row {}: '{}' is not a number", path.display(), i + 1, &rec[val_col]))
        })?;
        out.push((rec[id_col].to_string(), v));
    }
    Ok(out)
}

pub fn eval_files(predictions: &Path, labels: &Path, logistic: bool, table: bool) -> Result<()> {
    let preds = read_column(predictions, "q_pred")?;
    let mos: HashMap<String, f64> = read_column(labels, "mos")?.into_iter().collect();
    let mut y = Vec::with_capacity(preds.len());
    for (id, _) in &preds {
        let m = mos
            .get(id)
            .ok_or_else(|| Error::InputContract(format!("no label for video '{id}'")))?;
        y.push(*m);
    }
    let x: Vec<f64> = preds.iter().map(|p| p.1).collect();
    let m = compute_metrics(&x, &y, logistic)?;
    let report = EvalReport::from_splits(
        vec![SplitRecord {
            seed: 0,
            srocc: m.srocc,
            plcc: m.plcc,
            krocc: m.krocc,
            rmse: m.rmse,
            n: x.len(),
        }],
        Vec::new(),
    )?;
    if table {
        print!("{}", report.table());
        Ok(())
    } else {
        print_json(&json!({ "n": x.len(), "srocc": m.srocc, "plcc": m.plcc, "krocc": m.krocc, "rmse": m.rmse }))
    }
}

fn clips_for(model: &QualityModel, videos: &[PreparedVideo], plan: &SamplingPlan) -> Result<Vec<FrameSequence>> {
    let spec = model.backbone().spec();
    videos
        .iter()
        .map(|v| v.clip(plan, spec.frame_height, spec.frame_width))
        .collect()
}

pub fn score(
    checkpoint: &Path,
    manifest: &Path,
    out: Option<&Path>,
    frames: Option<usize>,
    sampling: Option<&str>,
    seed: Option<u64>,
) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let model = QualityModel::from_checkpoint(&ckpt, None)?;
    let tc = train_config_of(&ckpt);
    let strategy = match sampling {
        Some(s) => s.parse()?,
        None => tc.eval_sampling,
    };
    let plan = SamplingPlan::new(strategy, frames.unwrap_or(tc.frames_per_video), seed.unwrap_or(tc.seed));
    let manifest = DatasetManifest::read(manifest)?;
    let (videos, skipped) = prepare_videos(&manifest, &DecodeConfig::default(), &FrameCache::in_memory(), tc.profile_max_side);
    report_skipped(&skipped)?;

    let sink: Box<dyn Write> = match out {
        Some(p) => Box::new(fs::File::create(p)?),
        None => Box::new(io::stdout().lock()),
    };
    let mut w = csv::Writer::from_writer(sink);
    let mut header = vec!["video_id".to_string(), "q_pred".to_string()];
    header.extend(model.prompts().levels().iter().map(|l| format!("s_{}", l.as_str())));
    w.write_record(&header)?;
    for chunk in videos.chunks(tc.batch_size.max(1)) {
        let clips = clips_for(&model, chunk, &plan)?;
        let refs: Vec<&FrameSequence> = clips.iter().collect();
        for (v, p) in chunk.iter().zip(model.predict_batch(&refs)?) {
            let mut row = vec![v.video_id.clone(), p.q_pred.to_string()];
            row.extend(p.scores.iter().map(f64::to_string));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_embeddings(path: &Path, rows: &[(String, Vec<f64>)], key: &str) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let width = rows.first().map_or(0, |r| r.1.len());
    let mut header = vec![key.to_string()];
    header.extend((0..width).map(|i| format!("e{i}")));
    w.write_record(&header)?;
    for (id, v) in rows {
        let mut row = vec![id.clone()];
        row.extend(v.iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn export_embeddings(
    checkpoint: &Path,
    manifest: Option<&Path>,
    out_dir: &Path,
    frozen: bool,
    seed: Option<u64>,
) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let model = QualityModel::from_checkpoint(&ckpt, None)?;
    let tc = train_config_of(&ckpt);
    fs::create_dir_all(out_dir)?;

    let prompts: Vec<(String, Vec<f64>)> = model
        .prompts()
        .levels()
        .iter()
        .zip(model.prompt_embeddings(!frozen)?)
        .map(|(l, e)| (l.as_str().to_string(), e.into_vec()))
        .collect();
    write_embeddings(&out_dir.join("prompts.csv"), &prompts, "level")?;
    let mut summary = json!({ "prompts": prompts.len(), "width": prompts.first().map_or(0, |p| p.1.len()) });

    if let Some(m) = manifest {
        let manifest = DatasetManifest::read(m)?;
        let (videos, skipped) = prepare_videos(&manifest, &DecodeConfig::default(), &FrameCache::in_memory(), tc.profile_max_side);
        report_skipped(&skipped)?;
        let plan = SamplingPlan::new(tc.eval_sampling, tc.frames_per_video, seed.unwrap_or(tc.seed));
        let mut rows = Vec::with_capacity(videos.len());
        for (v, clip) in videos.iter().zip(clips_for(&model, &videos, &plan)?) {
            rows.push((v.video_id.clone(), model.video_embedding(&clip, !frozen)?.into_vec()));
        }
        write_embeddings(&out_dir.join("videos.csv"), &rows, "video_id")?;
        summary["videos"] = json!(rows.len());
    }
    print_json(&summary)
}

pub fn make_toy_data(out_dir: &Path, clips: usize, seed: u64) -> Result<()> {
    let manifest = make_synthetic_dataset(out_dir, clips, seed)?;
    let cfg = ExperimentConfig::toy("manifest.csv");
    fs::write(out_dir.join("toy.conf"), cfg.to_text()?)?;
    print_json(&json!({
        "out_dir": out_dir.display().to_string(),
        "clips": manifest.len(),
        "manifest": out_dir.join("manifest.csv").display().to_string(),
        "config": out_dir.join("toy.conf").display().to_string(),
    }))
}
