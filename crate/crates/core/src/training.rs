//! Fine-tuning loop over the trainable set, trainable-set audit, and the
//! split-protocol driver.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::backbone::Backbone;
use crate::data::{Checkpoint, DatasetManifest, DecodeConfig, FrameCache, FrameSequence};
use crate::error::{Error, Result};
use crate::evaluation::{compute_metrics, run_split_protocol, EvalReport, SplitProtocol};
use crate::loss::batch_loss_with_grad;
use crate::model::{ModelConfig, QualityModel, TrainableTensor};
use crate::optim::{cosine_lr, AdamW, AdamWConfig};
use crate::params::ParamStore;
use crate::sampler::{motion_profile_at, MotionProfile, SamplingPlan, SamplingStrategy, DEFAULT_PROFILE_MAX_SIDE};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Learning rate the cosine schedule ends at.
    pub lr_floor: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub frames_per_video: usize,
    pub sampling: SamplingStrategy,
    /// Deterministic strategy used for validation and test predictions.
    pub eval_sampling: SamplingStrategy,
    /// Weight of the rank hinge relative to the correlation term.
    pub loss_lambda: f64,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<usize>,
    /// Fraction of the training videos held out for per-epoch validation.
    pub validation_fraction: f64,
    pub profile_max_side: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            lr_floor: 1e-6,
            epochs: 8,
            batch_size: 12,
            frames_per_video: 8,
            sampling: SamplingStrategy::Mixed,
            eval_sampling: SamplingStrategy::SegMSEMean,
            loss_lambda: 1.0,
            optimizer: AdamWConfig::default(),
            seed: 0,
            max_steps: None,
            validation_fraction: 0.2,
            profile_max_side: DEFAULT_PROFILE_MAX_SIDE,
        }
    }
}

impl TrainConfig {
    /// Settings for the 32-clip synthetic set: few labels and a small
    /// model favour a larger step and no validation hold-out.
    pub fn toy() -> Self {
        Self {
            learning_rate: 3e-2,
            epochs: 30,
            batch_size: 8,
            validation_fraction: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.lr_floor >= 0.0 && self.lr_floor <= self.learning_rate) {
            return bad("lr_floor must lie in [0, learning_rate]");
        }
        if self.epochs == 0 || self.batch_size == 0 || self.frames_per_video == 0 {
            return bad("epochs, batch_size and frames_per_video must be positive");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("validation_fraction must lie in [0, 1)");
        }
        if self.profile_max_side == 0 {
            return bad("profile_max_side must be positive");
        }
        if self.eval_sampling.is_stochastic() {
            log::warn!("eval_sampling {} is stochastic; evaluation depends on the seed", self.eval_sampling);
        }
        Ok(())
    }
}

/// A decoded video with its label and motion profile.
#[derive(Debug, Clone)]
pub struct PreparedVideo {
    pub video_id: String,
    pub mos: f64,
    pub frames: Arc<FrameSequence>,
    /// Absent for single-frame videos.
    pub profile: Option<MotionProfile>,
}

impl PreparedVideo {
    pub fn new(video_id: impl Into<String>, mos: f64, frames: Arc<FrameSequence>, profile_max_side: usize) -> Result<Self> {
        let profile = if frames.len() >= 2 {
            Some(motion_profile_at(&frames, profile_max_side)?)
        } else {
            None
        };
        Ok(Self {
            video_id: video_id.into(),
            mos,
            frames,
            profile,
        })
    }

    /// Selects frames with `plan` and resizes them to `height × width`.
    pub fn clip(&self, plan: &SamplingPlan, height: usize, width: usize) -> Result<FrameSequence> {
        let sample = plan.sample(self.frames.len(), self.profile.as_ref())?;
        Ok(self.frames.select(&sample.indices)?.resized(height, width))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedVideo {
    pub skipped: String,
    pub reason: String,
}

/// Decodes every manifest row. Unreadable videos are skipped and reported.
pub fn prepare_videos(
    manifest: &DatasetManifest,
    decode: &DecodeConfig,
    cache: &FrameCache,
    profile_max_side: usize,
) -> (Vec<PreparedVideo>, Vec<SkippedVideo>) {
    let mut videos = Vec::with_capacity(manifest.len());
    let mut skipped = Vec::new();
    for row in &manifest.rows {
        let path = manifest.resolve(row);
        let prepared = cache
            .load(&path, decode)
            .and_then(|f| PreparedVideo::new(&row.video_id, row.mos, f, profile_max_side));
        match prepared {
            Ok(v) => videos.push(v),
            Err(e) => {
                log::warn!("skipping {}: {e}", row.video_id);
                skipped.push(SkippedVideo {
                    skipped: row.video_id.clone(),
                    reason: e.to_string(),
                });
            }
        }
    }
    (videos, skipped)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub val_srocc: Option<f64>,
    pub val_plcc: Option<f64>,
    pub lr: f64,
    pub steps: usize,
}

/// Mutable training state: step counter, optimizer moments, best snapshot
/// and the sampling RNG.
pub struct TrainState {
    pub step: usize,
    optimizer: AdamW,
    best: Option<(f64, ParamStore)>,
    rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(model: &QualityModel, config: &TrainConfig) -> Self {
        Self {
            step: 0,
            optimizer: AdamW::new(config.optimizer, model.trainable_ids(), model.store()),
            best: None,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        }
    }

    /// Names of the tensors with optimizer moments.
    pub fn optimizer_tensor_names(&self, model: &QualityModel) -> Vec<String> {
        self.optimizer
            .tracked()
            .map(|id| model.store().name(id).to_string())
            .collect()
    }
}

/// One optimizer step on prepared clips. Returns the batch loss.
pub fn train_step(
    model: &mut QualityModel,
    state: &mut TrainState,
    clips: &[&FrameSequence],
    mos: &[f64],
    lambda: f64,
    lr: f64,
) -> Result<f64> {
    let (loss, grads) = {
        let mut g = Graph::with_params(model.store());
        let out = model.forward(&mut g, clips, true)?;
        let preds: Vec<f64> = out.predictions.iter().map(|&q| g.value(q).get(0, 0)).collect();
        let l = batch_loss_with_grad(&preds, mos, lambda)?;
        let seeds: Vec<_> = out
            .predictions
            .iter()
            .zip(&l.grad)
            .map(|(&q, &d)| (q, Matrix::scalar(d)))
            .collect();
        (l.value, g.backward(&seeds))
    };
    state.optimizer.step(model.store_mut(), &grads, lr);
    state.step += 1;
    Ok(loss)
}

/// Batch boundaries over `n` items; a trailing singleton joins the batch
/// before it so every batch has a defined correlation.
fn batch_ranges(n: usize, batch: usize) -> Vec<std::ops::Range<usize>> {
    let mut out: Vec<std::ops::Range<usize>> = (0..n).step_by(batch).map(|s| s..(s + batch).min(n)).collect();
    if out.len() > 1 && out.last().is_some_and(|r| r.len() == 1) {
        let last = out.pop().expect("nonempty");
        out.last_mut().expect("nonempty").end = last.end;
    }
    out
}

/// Predictions for `videos` under the deterministic evaluation plan.
pub fn predict_videos(model: &QualityModel, videos: &[PreparedVideo], config: &TrainConfig) -> Result<Vec<f64>> {
    let spec = model.backbone().spec();
    let plan = SamplingPlan::new(config.eval_sampling, config.frames_per_video, config.seed);
    let mut preds = Vec::with_capacity(videos.len());
    for chunk in videos.chunks(config.batch_size.max(1)) {
        let clips = chunk
            .iter()
            .map(|v| v.clip(&plan, spec.frame_height, spec.frame_width))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&FrameSequence> = clips.iter().collect();
        preds.extend(model.predict_batch(&refs)?.into_iter().map(|p| p.q_pred));
    }
    Ok(preds)
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub skipped: Vec<SkippedVideo>,
    pub steps: usize,
    /// Epoch and validation SROCC of the best snapshot, when validating.
    pub best: Option<(usize, f64)>,
    pub final_checkpoint: Checkpoint,
    pub best_checkpoint: Checkpoint,
}

impl TrainReport {
    /// JSON-lines log: skipped videos, then one record per epoch.
    pub fn write_log(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for s in &self.skipped {
            serde_json::to_writer(&mut w, s)?;
            w.write_all(b"\n")?;
        }
        for e in &self.epochs {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }
}

fn split_validation(videos: &[PreparedVideo], fraction: f64, seed: u64) -> (Vec<PreparedVideo>, Vec<PreparedVideo>) {
    let n_val = (videos.len() as f64 * fraction).round() as usize;
    if n_val < 2 || videos.len() - n_val < 2 {
        return (videos.to_vec(), Vec::new());
    }
    let mut idx: Vec<usize> = (0..videos.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0fa1));
    let (val, train) = idx.split_at(n_val);
    let pick = |ix: &[usize]| {
        let mut ix = ix.to_vec();
        ix.sort_unstable();
        ix.into_iter().map(|i| videos[i].clone()).collect()
    };
    (pick(train), pick(val))
}

/// Trains `model` on `videos`. A `validation_fraction` share is held out for
/// per-epoch validation and best-snapshot selection.
pub fn train(model: &mut QualityModel, videos: &[PreparedVideo], config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    if videos.len() < 2 {
        return Err(Error::Manifest(format!(
            "training needs at least 2 readable videos, got {}",
            videos.len()
        )));
    }
    let (train_set, val_set) = split_validation(videos, config.validation_fraction, config.seed);
    let spec = model.backbone().spec().clone();
    let batches = batch_ranges(train_set.len(), config.batch_size);
    let mut total = config.epochs * batches.len();
    if let Some(m) = config.max_steps {
        total = total.min(m);
    }
    let mut state = TrainState::new(model, config);
    let mut epochs = Vec::new();
    let mut best_epoch = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    'outer: for epoch in 0..config.epochs {
        order.shuffle(&mut state.rng);
        let mut losses = Vec::new();
        let mut lr = cosine_lr(config.learning_rate, config.lr_floor, state.step, total);
        for range in &batches {
            if state.step >= total {
                break;
            }
            lr = cosine_lr(config.learning_rate, config.lr_floor, state.step, total);
            let members = &order[range.clone()];
            let mut clips = Vec::with_capacity(members.len());
            let mut mos = Vec::with_capacity(members.len());
            for &i in members {
                let plan = SamplingPlan::new(config.sampling, config.frames_per_video, state.rng.random());
                clips.push(train_set[i].clip(&plan, spec.frame_height, spec.frame_width)?);
                mos.push(train_set[i].mos);
            }
            let refs: Vec<&FrameSequence> = clips.iter().collect();
            losses.push(train_step(model, &mut state, &refs, &mos, config.loss_lambda, lr)?);
        }
        if losses.is_empty() {
            break 'outer;
        }
        let loss = losses.iter().sum::<f64>() / losses.len() as f64;
        let (val_srocc, val_plcc) = if val_set.is_empty() {
            (None, None)
        } else {
            let preds = predict_videos(model, &val_set, config)?;
            let mos: Vec<f64> = val_set.iter().map(|v| v.mos).collect();
            match compute_metrics(&preds, &mos, false) {
                Ok(m) => (Some(m.srocc), Some(m.plcc)),
                Err(e) => {
                    log::warn!("validation metrics undefined at epoch {epoch}: {e}");
                    (None, None)
                }
            }
        };
        if let Some(s) = val_srocc {
            if state.best.as_ref().is_none_or(|(b, _)| s > *b) {
                state.best = Some((s, model.store().clone()));
                best_epoch = Some((epoch, s));
            }
        }
        let record = EpochRecord {
            epoch,
            loss,
            val_srocc,
            val_plcc,
            lr,
            steps: state.step,
        };
        log::info!("{}", serde_json::to_string(&record)?);
        epochs.push(record);
    }

    let train_json = serde_json::to_value(config)?;
    let last_metrics = epochs.last().map(serde_json::to_value).transpose()?.unwrap_or_default();
    let mut final_checkpoint = model.checkpoint();
    final_checkpoint.train = train_json.clone();
    final_checkpoint.metrics = last_metrics.clone();
    let best_checkpoint = match &state.best {
        Some((s, store)) => {
            let mut c = Checkpoint::from_store(model.config().clone(), store);
            c.train = train_json;
            c.metrics = serde_json::json!({ "epoch": best_epoch.map(|b| b.0), "val_srocc": s });
            c
        }
        None => final_checkpoint.clone(),
    };
    Ok(TrainReport {
        epochs,
        skipped: Vec::new(),
        steps: state.step,
        best: best_epoch,
        final_checkpoint,
        best_checkpoint,
    })
}

/// Decodes the manifest and trains; unreadable videos are skipped and
/// listed in the report.
pub fn train_on_manifest(
    model: &mut QualityModel,
    manifest: &DatasetManifest,
    config: &TrainConfig,
    decode: &DecodeConfig,
    cache: &FrameCache,
) -> Result<TrainReport> {
    if manifest.is_empty() {
        return Err(Error::Manifest("manifest is empty".into()));
    }
    let (videos, skipped) = prepare_videos(manifest, decode, cache, config.profile_max_side);
    let mut report = train(model, &videos, config)?;
    report.skipped = skipped;
    Ok(report)
}

/// Trainable-set audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub tensors: Vec<TrainableTensor>,
    pub total_scalars: usize,
}

/// Lists the trainable tensors; fails if any backbone tensor is trainable.
pub fn assert_only_adapter_trainable(model: &QualityModel) -> Result<AuditReport> {
    model.check_frozen()?;
    let tensors = model.trainable_tensors();
    let total_scalars = tensors.iter().map(|t| t.shape.0 * t.shape.1).sum();
    Ok(AuditReport { tensors, total_scalars })
}

/// Repeated train/test protocol: a fresh model per split, trained on the
/// split's training part and scored on its test part.
pub fn evaluate_protocol(
    backbone: Arc<dyn Backbone>,
    model_config: &ModelConfig,
    videos: &[PreparedVideo],
    train_config: &TrainConfig,
    protocol: &SplitProtocol,
) -> Result<EvalReport> {
    run_split_protocol(videos.len(), protocol, |split| {
        let train_videos: Vec<PreparedVideo> = split.train.iter().map(|&i| videos[i].clone()).collect();
        let test_videos: Vec<PreparedVideo> = split.test.iter().map(|&i| videos[i].clone()).collect();
        let mut model = QualityModel::new(Arc::clone(&backbone), model_config.clone())?;
        let cfg = TrainConfig {
            seed: train_config.seed ^ split.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15),
            ..train_config.clone()
        };
        let report = train(&mut model, &train_videos, &cfg)?;
        if report.best.is_some() {
            model.load_checkpoint(&report.best_checkpoint)?;
        }
        let preds = predict_videos(&model, &test_videos, &cfg)?;
        Ok((preds, test_videos.iter().map(|v| v.mos).collect()))
    })
}
