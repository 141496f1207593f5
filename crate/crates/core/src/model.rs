//! The assembled quality model: frozen backbone, adapters, prompts, head.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backbone::{encode_video, AdapterHooks, Backbone, BackboneConfig};
use crate::data::{Checkpoint, FrameSequence};
use crate::error::{Error, Result};
use crate::head::{HeadConfig, QualityHead};
use crate::params::{ParamId, ParamRole, ParamStore};
use crate::prompt::{build_prompt_bank, PromptBank, PromptConfig};
use crate::scma::{self, AdapterState, ScmaConfig};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub scma: ScmaConfig,
    pub prompt: PromptConfig,
    pub head: HeadConfig,
    /// Seed for adapter, prefix and head initialization.
    pub init_seed: u64,
}

/// Quality score and per-level similarities for one video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub q_pred: f64,
    pub scores: Vec<f64>,
}

/// Graph handles produced by [`QualityModel::forward`].
#[derive(Debug, Clone)]
pub struct BatchForward {
    pub predictions: Vec<Var>,
    pub scores: Vec<Vec<Var>>,
    pub videos: Vec<Var>,
    pub prompts: Vec<Var>,
}

/// One trainable tensor as reported by [`QualityModel::trainable_tensors`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainableTensor {
    pub name: String,
    pub role: ParamRole,
    pub shape: (usize, usize),
}

pub struct QualityModel {
    backbone: Arc<dyn Backbone>,
    config: ModelConfig,
    store: ParamStore,
    adapters: AdapterState,
    prompts: PromptBank,
    head: QualityHead,
}

impl QualityModel {
    /// Assembles a model around `backbone`. The backbone's own spec
    /// overrides the one in `config`.
    pub fn new(backbone: Arc<dyn Backbone>, mut config: ModelConfig) -> Result<Self> {
        let spec = backbone.spec().clone();
        spec.validate()?;
        config.backbone.spec = spec.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let adapters = AdapterState::build(&config.scma, &spec, &mut store, &mut rng)?;
        let prompts = build_prompt_bank(&config.prompt, backbone.as_ref(), &mut store, &mut rng)?;
        let head = QualityHead::build(&config.head, prompts.levels(), &mut store)?;
        Ok(Self {
            backbone,
            config,
            store,
            adapters,
            prompts,
            head,
        })
    }

    /// Loads the backbone named in `config` and assembles a model on it.
    pub fn from_config(config: ModelConfig) -> Result<Self> {
        let backbone: Arc<dyn Backbone> = Arc::new(config.backbone.load()?);
        Self::new(backbone, config)
    }

    /// Rebuilds a model from a checkpoint, loading its backbone unless one
    /// is supplied.
    pub fn from_checkpoint(ckpt: &Checkpoint, backbone: Option<Arc<dyn Backbone>>) -> Result<Self> {
        let mut model = match backbone {
            Some(b) => Self::new(b, ckpt.model.clone())?,
            None => Self::from_config(ckpt.model.clone())?,
        };
        model.load_checkpoint(ckpt)?;
        Ok(model)
    }

    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        ckpt.apply_to(&mut self.store)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(self.config.clone(), &self.store)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn backbone(&self) -> &dyn Backbone {
        self.backbone.as_ref()
    }

    pub fn backbone_arc(&self) -> Arc<dyn Backbone> {
        Arc::clone(&self.backbone)
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn adapters(&self) -> &AdapterState {
        &self.adapters
    }

    pub fn prompts(&self) -> &PromptBank {
        &self.prompts
    }

    pub fn head(&self) -> &QualityHead {
        &self.head
    }

    /// Ids of every tensor the optimizer may update.
    pub fn trainable_ids(&self) -> Vec<ParamId> {
        let mut ids = self.adapters.param_ids();
        ids.extend(self.prompts.param_ids());
        ids.insert(self.head.weights_id());
        ids.into_iter().collect()
    }

    pub fn trainable_tensors(&self) -> Vec<TrainableTensor> {
        self.trainable_ids()
            .into_iter()
            .map(|id| {
                let p = self.store.param(id);
                TrainableTensor {
                    name: p.name.clone(),
                    role: p.role,
                    shape: p.value.shape(),
                }
            })
            .collect()
    }

    pub fn trainable_param_count(&self) -> usize {
        scma::trainable_param_count(&self.store, &self.adapters, &self.prompts, &self.head)
    }

    pub fn backbone_checksum(&self) -> String {
        self.backbone.checksum()
    }

    fn hooks(&self, adapted: bool) -> Option<&dyn AdapterHooks> {
        adapted.then_some(&self.adapters as &dyn AdapterHooks)
    }

    /// Builds predictions for a batch of prepared clips on `g`. With
    /// `adapted = false` no adapter is applied in either tower.
    pub fn forward<'a>(&'a self, g: &mut Graph<'a>, clips: &[&FrameSequence], adapted: bool) -> Result<BatchForward> {
        let hooks = self.hooks(adapted);
        let prompts = self.prompts.embed_on_graph(g, self.backbone.as_ref(), hooks)?;
        let mut predictions = Vec::with_capacity(clips.len());
        let mut scores = Vec::with_capacity(clips.len());
        let mut videos = Vec::with_capacity(clips.len());
        for clip in clips {
            let v = encode_video(self.backbone.as_ref(), g, clip, hooks)?;
            let (q, s) = self.head.forward(g, v, &prompts)?;
            predictions.push(q);
            scores.push(s);
            videos.push(v);
        }
        Ok(BatchForward {
            predictions,
            scores,
            videos,
            prompts,
        })
    }

    fn run(&self, clips: &[&FrameSequence], adapted: bool) -> Result<Vec<Prediction>> {
        let mut g = Graph::with_params(&self.store);
        let out = self.forward(&mut g, clips, adapted)?;
        Ok(out
            .predictions
            .iter()
            .zip(&out.scores)
            .map(|(q, s)| Prediction {
                q_pred: g.value(*q).get(0, 0),
                scores: s.iter().map(|v| g.value(*v).get(0, 0)).collect(),
            })
            .collect())
    }

    pub fn predict_batch(&self, clips: &[&FrameSequence]) -> Result<Vec<Prediction>> {
        self.run(clips, true)
    }

    pub fn predict(&self, clip: &FrameSequence) -> Result<Prediction> {
        Ok(self.run(&[clip], true)?.remove(0))
    }

    /// Prediction with every adapter bypassed, i.e. the frozen backbone
    /// under the same prompts and head.
    pub fn predict_frozen(&self, clip: &FrameSequence) -> Result<Prediction> {
        Ok(self.run(&[clip], false)?.remove(0))
    }

    /// Joint-space embedding of one clip (`1 × d_e`).
    pub fn video_embedding(&self, clip: &FrameSequence, adapted: bool) -> Result<Matrix> {
        let mut g = Graph::with_params(&self.store);
        let v = encode_video(self.backbone.as_ref(), &mut g, clip, self.hooks(adapted))?;
        Ok(g.value(v).clone())
    }

    /// Joint-space prompt embeddings in level order.
    pub fn prompt_embeddings(&self, adapted: bool) -> Result<Vec<Matrix>> {
        self.prompts.embed(self.backbone.as_ref(), &self.store, self.hooks(adapted))
    }

    /// Fails unless the backbone reports no trainable tensor and every
    /// stored parameter is adapter, prompt or head state.
    pub fn check_frozen(&self) -> Result<()> {
        let unfrozen = self.backbone.trainable_tensor_names();
        if !unfrozen.is_empty() {
            return Err(Error::Audit(format!(
                "backbone tensors are trainable: {}",
                unfrozen.join(", ")
            )));
        }
        let trainable = self.trainable_ids();
        if let Some((_, p)) = self.store.iter().find(|(id, _)| !trainable.contains(id)) {
            return Err(Error::Audit(format!("parameter '{}' is not accounted for", p.name)));
        }
        let backbone_names: std::collections::HashSet<String> =
            self.backbone.named_tensors().into_iter().map(|(n, _)| n).collect();
        if let Some((_, p)) = self.store.iter().find(|(_, p)| backbone_names.contains(&p.name)) {
            return Err(Error::Audit(format!(
                "backbone tensor '{}' is in the trainable set",
                p.name
            )));
        }
        Ok(())
    }
}
