//! Quality-level text prompts with an optional learnable prefix.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backbone::{encode_text, AdapterHooks, Backbone, ByteTokenizer, TokenSequence};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamRole, ParamStore};
use crate::tensor::Matrix;

const PREFIX_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QualityLevel {
    Excellent,
    Good,
    Fair,
    Poor,
    Bad,
}

impl QualityLevel {
    /// Best to worst.
    pub const ALL: [QualityLevel; 5] = [
        QualityLevel::Excellent,
        QualityLevel::Good,
        QualityLevel::Fair,
        QualityLevel::Poor,
        QualityLevel::Bad,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            QualityLevel::Excellent => "excellent",
            QualityLevel::Good => "good",
            QualityLevel::Fair => "fair",
            QualityLevel::Poor => "poor",
            QualityLevel::Bad => "bad",
        }
    }

    /// Position on a unit scale, 1 for excellent down to 0 for bad.
    pub fn anchor(self) -> f64 {
        match self {
            QualityLevel::Excellent => 1.0,
            QualityLevel::Good => 0.75,
            QualityLevel::Fair => 0.5,
            QualityLevel::Poor => 0.25,
            QualityLevel::Bad => 0.0,
        }
    }

    pub fn template(self) -> String {
        format!("a video of {} quality", self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    Antonym,
    AntonymLearnable,
    FiveLevel,
    #[default]
    FiveLevelLearnable,
}

impl PromptMode {
    pub const ALL: [PromptMode; 4] = [
        PromptMode::Antonym,
        PromptMode::AntonymLearnable,
        PromptMode::FiveLevel,
        PromptMode::FiveLevelLearnable,
    ];

    pub fn is_learnable(self) -> bool {
        matches!(self, PromptMode::AntonymLearnable | PromptMode::FiveLevelLearnable)
    }

    pub fn levels(self) -> Vec<QualityLevel> {
        match self {
            PromptMode::Antonym | PromptMode::AntonymLearnable => {
                vec![QualityLevel::Good, QualityLevel::Bad]
            }
            PromptMode::FiveLevel | PromptMode::FiveLevelLearnable => QualityLevel::ALL.to_vec(),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PromptMode::Antonym => "antonym",
            PromptMode::AntonymLearnable => "antonym_learnable",
            PromptMode::FiveLevel => "five_level",
            PromptMode::FiveLevelLearnable => "five_level_learnable",
        }
    }
}

impl fmt::Display for PromptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        PromptMode::ALL
            .into_iter()
            .find(|m| m.as_str() == norm)
            .ok_or_else(|| Error::Config(format!("unknown prompt mode '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptConfig {
    pub mode: PromptMode,
    pub prefix_length: usize,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            mode: PromptMode::default(),
            prefix_length: 3,
        }
    }
}

/// Frozen level templates plus, in learnable modes, one prefix shared by all
/// of them.
#[derive(Debug, Clone)]
pub struct PromptBank {
    mode: PromptMode,
    levels: Vec<QualityLevel>,
    tokens: Vec<TokenSequence>,
    prefix: Option<ParamId>,
}

impl PromptBank {
    pub fn mode(&self) -> PromptMode {
        self.mode
    }

    /// Levels in best-to-worst order.
    pub fn levels(&self) -> &[QualityLevel] {
        &self.levels
    }

    pub fn templates(&self) -> Vec<String> {
        self.levels.iter().map(|l| l.template()).collect()
    }

    pub fn tokens(&self) -> &[TokenSequence] {
        &self.tokens
    }

    pub fn prefix(&self) -> Option<ParamId> {
        self.prefix
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.prefix.into_iter().collect()
    }

    /// Joint-space prompt embeddings on `g`, in level order.
    pub fn embed_on_graph<'a>(
        &self,
        g: &mut Graph<'a>,
        backbone: &'a dyn Backbone,
        hooks: Option<&dyn AdapterHooks>,
    ) -> Result<Vec<Var>> {
        let prefix = self.prefix.map(|id| g.param(id));
        self.tokens
            .iter()
            .map(|t| encode_text(backbone, g, t, prefix, hooks))
            .collect()
    }

    /// Joint-space prompt embeddings, one `1 × d_e` row per level.
    pub fn embed(
        &self,
        backbone: &dyn Backbone,
        store: &ParamStore,
        hooks: Option<&dyn AdapterHooks>,
    ) -> Result<Vec<Matrix>> {
        let mut g = Graph::with_params(store);
        let vars = self.embed_on_graph(&mut g, backbone, hooks)?;
        Ok(vars.into_iter().map(|v| g.value(v).clone()).collect())
    }
}

/// Builds the prompt set for `config.mode`. Learnable modes allocate a
/// `prefix_length × d_t` prefix in `store`, initialized from the backbone's
/// embedding of `X` plus small noise.
pub fn build_prompt_bank<R: Rng>(
    config: &PromptConfig,
    backbone: &dyn Backbone,
    store: &mut ParamStore,
    rng: &mut R,
) -> Result<PromptBank> {
    let mode = config.mode;
    let prefix_len = if mode.is_learnable() {
        if config.prefix_length == 0 {
            return Err(Error::Config(
                "learnable prompt modes need prefix_length >= 1".into(),
            ));
        }
        config.prefix_length
    } else {
        0
    };
    let levels = mode.levels();
    let tok = backbone.tokenizer();
    let ctx = backbone.spec().context_length;
    let tokens = levels
        .iter()
        .map(|l| {
            let t = tok.encode_with_prefix(&l.template(), prefix_len);
            tok.check_fits(&t, ctx).map(|_| t)
        })
        .collect::<Result<Vec<_>>>()?;

    let prefix = (prefix_len > 0).then(|| {
        let x = backbone.token_embedding(ByteTokenizer::PLACEHOLDER);
        let noise = Matrix::randn(prefix_len, x.cols(), PREFIX_INIT_STD, rng);
        let mut init = noise;
        for r in 0..prefix_len {
            for (v, base) in init.row_mut(r).iter_mut().zip(x.row(0)) {
                *v += base;
            }
        }
        store.add("prompt.prefix", ParamRole::PromptPrefix, init)
    });

    Ok(PromptBank {
        mode,
        levels,
        tokens,
        prefix,
    })
}
