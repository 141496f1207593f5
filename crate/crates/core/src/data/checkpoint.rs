//! Checkpoints of the trainable tensor set.
//!
//! Only adapter, prompt-prefix and head tensors are stored, together with
//! the model configuration needed to rebuild the same parameter layout.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::container::Container;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::params::ParamStore;
use crate::tensor::Matrix;

const KIND: &str = "vqa-checkpoint";
pub const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Meta {
    format_version: u32,
    model: ModelConfig,
    #[serde(default)]
    train: serde_json::Value,
    #[serde(default)]
    metrics: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ModelConfig,
    /// Training configuration snapshot, if the checkpoint came from training.
    pub train: serde_json::Value,
    pub metrics: serde_json::Value,
    pub tensors: Vec<(String, Matrix)>,
}

impl Checkpoint {
    pub fn from_store(model: ModelConfig, store: &ParamStore) -> Self {
        Self {
            model,
            train: serde_json::Value::Null,
            metrics: serde_json::Value::Null,
            tensors: store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect(),
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|(_, m)| m.len()).sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = Meta {
            format_version: CHECKPOINT_FORMAT,
            model: self.model.clone(),
            train: self.train.clone(),
            metrics: self.metrics.clone(),
        };
        Container {
            kind: KIND.into(),
            metadata: serde_json::to_value(meta)?,
            tensors: self.tensors.clone(),
        }
        .write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::read(path)?;
        if c.kind != KIND {
            return Err(Error::Checkpoint(format!(
                "{} holds '{}', not a checkpoint",
                path.display(),
                c.kind
            )));
        }
        let meta: Meta = serde_json::from_value(c.metadata)
            .map_err(|e| Error::Checkpoint(format!("{}: bad metadata: {e}", path.display())))?;
        if meta.format_version != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!(
                "{}: checkpoint format {}, this build reads {CHECKPOINT_FORMAT}",
                path.display(),
                meta.format_version
            )));
        }
        Ok(Self {
            model: meta.model,
            train: meta.train,
            metrics: meta.metrics,
            tensors: c.tensors,
        })
    }

    /// Copies every tensor into `store`. The name and shape sets must match
    /// exactly; otherwise nothing is written and the error lists the diff.
    pub fn apply_to(&self, store: &mut ParamStore) -> Result<()> {
        let mut diff = Vec::new();
        let mut targets = Vec::with_capacity(self.tensors.len());
        for (name, m) in &self.tensors {
            match store.find(name) {
                Some(id) if store.get(id).shape() == m.shape() => targets.push((id, m)),
                Some(id) => diff.push(format!(
                    "{name}: expected {:?}, found {:?}",
                    store.get(id).shape(),
                    m.shape()
                )),
                None => diff.push(format!("{name}: unexpected tensor {:?}", m.shape())),
            }
        }
        for (_, p) in store.iter() {
            if !self.tensors.iter().any(|(n, _)| *n == p.name) {
                diff.push(format!("{}: expected {:?}, missing", p.name, p.value.shape()));
            }
        }
        if !diff.is_empty() {
            return Err(Error::Checkpoint(format!(
                "checkpoint does not fit the model:\n  {}",
                diff.join("\n  ")
            )));
        }
        for (id, m) in targets {
            *store.get_mut(id) = m.clone();
        }
        Ok(())
    }
}
