//! Frozen two-tower encoder interface.
//!
//! A backbone exposes a visual tower (frames to a pooled feature) and a
//! textual tower (tokens to a pooled feature), each followed by a linear
//! projection into a shared embedding space. Every encoder layer and both
//! projections call back into [`AdapterHooks`], which is where trainable
//! adapters attach. Backbone weights are never part of the trainable set.

mod tokenizer;
mod transformer;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use tokenizer::{ByteTokenizer, TokenSequence};
pub use transformer::TransformerBackbone;

use crate::autograd::{Graph, Var};
use crate::data::FrameSequence;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Visual,
    Textual,
}

impl Modality {
    pub const BOTH: [Modality; 2] = [Modality::Visual, Modality::Textual];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Visual => "visual",
            Modality::Textual => "text",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneSpec {
    pub num_visual_layers: usize,
    pub num_text_layers: usize,
    pub visual_width: usize,
    pub text_width: usize,
    /// Width of the joint space both projections map into.
    pub embed_dim: usize,
    pub frame_height: usize,
    pub frame_width: usize,
    pub context_length: usize,
    pub patch_size: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self::tiny()
    }
}

impl BackboneSpec {
    /// Desk-scale stand-in used by tests and the toy experiment.
    pub fn tiny() -> Self {
        Self {
            num_visual_layers: 4,
            num_text_layers: 4,
            visual_width: 32,
            text_width: 32,
            embed_dim: 32,
            frame_height: 32,
            frame_width: 32,
            context_length: 40,
            patch_size: 8,
            num_heads: 2,
            mlp_ratio: 2,
        }
    }

    /// Dimensions of a ViT-L/14 two-tower encoder at 336 px (24 + 24 layers,
    /// width 1024, joint space 1024). Used for parameter budgeting.
    pub fn large() -> Self {
        Self {
            num_visual_layers: 24,
            num_text_layers: 24,
            visual_width: 1024,
            text_width: 1024,
            embed_dim: 1024,
            frame_height: 336,
            frame_width: 336,
            context_length: 77,
            patch_size: 14,
            num_heads: 16,
            mlp_ratio: 4,
        }
    }

    pub fn width(&self, modality: Modality) -> usize {
        match modality {
            Modality::Visual => self.visual_width,
            Modality::Textual => self.text_width,
        }
    }

    pub fn num_layers(&self, modality: Modality) -> usize {
        match modality {
            Modality::Visual => self.num_visual_layers,
            Modality::Textual => self.num_text_layers,
        }
    }

    pub fn num_patches(&self) -> usize {
        (self.frame_height / self.patch_size) * (self.frame_width / self.patch_size)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("num_visual_layers", self.num_visual_layers),
            ("num_text_layers", self.num_text_layers),
            ("visual_width", self.visual_width),
            ("text_width", self.text_width),
            ("embed_dim", self.embed_dim),
            ("frame_height", self.frame_height),
            ("frame_width", self.frame_width),
            ("context_length", self.context_length),
            ("patch_size", self.patch_size),
            ("num_heads", self.num_heads),
            ("mlp_ratio", self.mlp_ratio),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("backbone {name} must be positive")));
        }
        if self.frame_height % self.patch_size != 0 || self.frame_width % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "frame {}x{} is not divisible into {}-pixel patches",
                self.frame_height, self.frame_width, self.patch_size
            )));
        }
        if self.visual_width % self.num_heads != 0 || self.text_width % self.num_heads != 0 {
            return Err(Error::Config(
                "branch widths must be divisible by num_heads".into(),
            ));
        }
        Ok(())
    }
}

/// Token representations leaving one encoder layer.
#[derive(Debug, Clone)]
pub struct LayerActivations {
    pub modality: Modality,
    pub layer: usize,
    pub tokens: Matrix,
}

/// Callbacks through which adapters modify a forward pass.
pub trait AdapterHooks {
    /// Called after encoder layer `layer` with its input and frozen output;
    /// returns the representation fed to the next layer.
    fn layer<'a>(
        &self,
        g: &mut Graph<'a>,
        modality: Modality,
        layer: usize,
        input: Var,
        output: Var,
    ) -> Result<Var>;

    /// Called with the pooled pre-projection feature and the frozen
    /// projection output; returns the joint-space embedding.
    fn projection<'a>(
        &self,
        g: &mut Graph<'a>,
        modality: Modality,
        pooled: Var,
        projected: Var,
    ) -> Result<Var>;
}

pub trait Backbone: Send + Sync {
    fn spec(&self) -> &BackboneSpec;

    fn tokenizer(&self) -> ByteTokenizer {
        ByteTokenizer
    }

    /// Encodes one `H × W × 3` frame to its pooled pre-projection feature (`1 × d_v`).
    fn encode_frame<'a>(
        &'a self,
        g: &mut Graph<'a>,
        frame: &[f32],
        hooks: Option<&dyn AdapterHooks>,
    ) -> Result<Var>;

    /// Encodes tokens to the pooled pre-projection feature (`1 × d_t`).
    /// `prefix`, when given, replaces the embeddings at `tokens.prefix_slots`.
    fn encode_tokens<'a>(
        &'a self,
        g: &mut Graph<'a>,
        tokens: &TokenSequence,
        prefix: Option<Var>,
        hooks: Option<&dyn AdapterHooks>,
    ) -> Result<Var>;

    /// Frozen projection of a pooled feature into the joint space.
    fn project<'a>(&'a self, g: &mut Graph<'a>, modality: Modality, pooled: Var) -> Var;

    /// Frozen token embedding row (`1 × d_t`).
    fn token_embedding(&self, token: u32) -> Matrix;

    /// Per-layer activations of an unhooked visual forward pass on one frame.
    fn visual_activations(&self, frame: &[f32]) -> Result<Vec<LayerActivations>>;

    fn named_tensors(&self) -> Vec<(String, &Matrix)>;

    /// Backbone tensors marked trainable. Empty for a correctly frozen model.
    fn trainable_tensor_names(&self) -> Vec<String>;

    /// SHA-256 over every backbone tensor name and value.
    fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, m) in self.named_tensors() {
            h.update(name.as_bytes());
            for v in m.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Encodes every frame independently, mean-pools the pooled features, then
/// projects into the joint space with the projection hook applied.
pub fn encode_video<'a>(
    backbone: &'a dyn Backbone,
    g: &mut Graph<'a>,
    frames: &FrameSequence,
    hooks: Option<&dyn AdapterHooks>,
) -> Result<Var> {
    let spec = backbone.spec();
    if frames.is_empty() {
        return Err(Error::InputContract("video has no frames".into()));
    }
    if frames.height() != spec.frame_height || frames.width() != spec.frame_width {
        return Err(Error::InputContract(format!(
            "frames are {}x{}, backbone expects {}x{}",
            frames.height(),
            frames.width(),
            spec.frame_height,
            spec.frame_width
        )));
    }
    let pooled: Vec<Var> = frames
        .frames()
        .iter()
        .map(|f| backbone.encode_frame(g, f, hooks))
        .collect::<Result<_>>()?;
    let stacked = g.concat_rows(&pooled);
    let video = g.mean_rows(stacked);
    let projected = backbone.project(g, Modality::Visual, video);
    match hooks {
        Some(h) => h.projection(g, Modality::Visual, video, projected),
        None => Ok(projected),
    }
}

/// Textual counterpart of [`encode_video`].
pub fn encode_text<'a>(
    backbone: &'a dyn Backbone,
    g: &mut Graph<'a>,
    tokens: &TokenSequence,
    prefix: Option<Var>,
    hooks: Option<&dyn AdapterHooks>,
) -> Result<Var> {
    let pooled = backbone.encode_tokens(g, tokens, prefix, hooks)?;
    let projected = backbone.project(g, Modality::Textual, pooled);
    match hooks {
        Some(h) => h.projection(g, Modality::Textual, pooled, projected),
        None => Ok(projected),
    }
}

/// Builds a deterministic tiny backbone from `seed`.
pub fn make_tiny_backbone(seed: u64, spec: BackboneSpec) -> Result<TransformerBackbone> {
    TransformerBackbone::random(seed, spec)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    Tiny,
    Pretrained,
}

/// Backbone binding descriptor as it appears in configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub seed: u64,
    pub checkpoint_path: Option<std::path::PathBuf>,
    #[serde(flatten)]
    pub spec: BackboneSpec,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            kind: BackboneKind::Tiny,
            seed: 0,
            checkpoint_path: None,
            spec: BackboneSpec::tiny(),
        }
    }
}

impl BackboneConfig {
    pub fn load(&self) -> Result<TransformerBackbone> {
        match self.kind {
            BackboneKind::Tiny => make_tiny_backbone(self.seed, self.spec.clone()),
            BackboneKind::Pretrained => {
                let path = self.checkpoint_path.as_ref().ok_or_else(|| {
                    Error::Config("backbone.kind = pretrained requires backbone.checkpoint_path".into())
                })?;
                TransformerBackbone::load(path, self.spec.clone())
            }
        }
    }
}
