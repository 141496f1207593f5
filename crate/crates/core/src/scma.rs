//! Shared cross-modal bottleneck adapters.
//!
//! Encoder-layer adapters compute, for a layer input `x`,
//!
//! ```text
//! delta = LayerNorm(Up_k(FFN(Down_k(x))))
//! next  = frozen_layer(x) + gate_k * delta
//! ```
//!
//! where `FFN` is `linear → GELU → linear` in the bottleneck width `r`.
//! Projection-stage adapters use the same pipeline with a single linear map
//! in place of the FFN, applied to the pooled feature in parallel with the
//! frozen projection.
//!
//! Sharing is expressed through parameter identity: with
//! `share_across_branches` both towers use the same bottleneck transform
//! (and the same down/up maps when their widths agree); with
//! `share_across_layers` every adapted layer uses one FFN.
//!
//! Trainable scalar count, with `L` adapted layers, branch set `M`, bottleneck
//! `r`, widths `d_m` and joint width `d_e`:
//!
//! ```text
//! maps(w_out)  = Σ_{groups} (d·r + r) + (r·w_out + w_out)   one group per distinct down/up pair
//! E-SCMA       = L·[maps(d_m) + Σ_m (2·d_m + 1)] + F·2·(r² + r)
//! P-SCMA       = maps(d_e) + Σ_m (2·d_e + 1) + G·(r² + r)
//! ```
//!
//! `G` is 1 when branches share and `|M|` otherwise; `F = G` with layer
//! sharing and `F = G·L` without. See [`closed_form_adapter_count`].

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backbone::{AdapterHooks, BackboneSpec, Modality};
use crate::error::{Error, Result};
use crate::head::QualityHead;
use crate::params::{ParamId, ParamRole, ParamStore};
use crate::prompt::{PromptBank, PromptConfig};
use crate::tensor::Matrix;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScmaConfig {
    /// Explicit layer indices; when absent the last `num_adapted_layers`
    /// layers are adapted.
    pub adapted_layers: Option<Vec<usize>>,
    pub num_adapted_layers: usize,
    pub bottleneck_dim: usize,
    pub adapt_visual: bool,
    pub adapt_text: bool,
    pub share_across_branches: bool,
    pub share_across_layers: bool,
    pub enable_pscma: bool,
}

impl Default for ScmaConfig {
    fn default() -> Self {
        Self {
            adapted_layers: None,
            num_adapted_layers: 6,
            bottleneck_dim: 8,
            adapt_visual: true,
            adapt_text: true,
            share_across_branches: true,
            share_across_layers: true,
            enable_pscma: true,
        }
    }
}

/// Adapter placements compared in the structure ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StructureVariant {
    VisualOnly,
    TextOnly,
    BothUnshared,
    Shared,
    LayerShared,
}

impl StructureVariant {
    pub const ALL: [StructureVariant; 5] = [
        StructureVariant::VisualOnly,
        StructureVariant::TextOnly,
        StructureVariant::BothUnshared,
        StructureVariant::Shared,
        StructureVariant::LayerShared,
    ];

    pub fn apply(self, base: &ScmaConfig) -> ScmaConfig {
        let (v, t, share, layers) = match self {
            StructureVariant::VisualOnly => (true, false, false, false),
            StructureVariant::TextOnly => (false, true, false, false),
            StructureVariant::BothUnshared => (true, true, false, false),
            StructureVariant::Shared => (true, true, true, false),
            StructureVariant::LayerShared => (true, true, true, true),
        };
        ScmaConfig {
            adapt_visual: v,
            adapt_text: t,
            share_across_branches: share,
            share_across_layers: layers,
            ..base.clone()
        }
    }
}

impl ScmaConfig {
    pub fn modalities(&self) -> Vec<Modality> {
        let mut m = Vec::with_capacity(2);
        if self.adapt_visual {
            m.push(Modality::Visual);
        }
        if self.adapt_text {
            m.push(Modality::Textual);
        }
        m
    }

    /// Branch sharing only has meaning when both branches are adapted.
    pub fn branches_shared(&self) -> bool {
        self.share_across_branches && self.adapt_visual && self.adapt_text
    }

    pub fn resolved_layers(&self, spec: &BackboneSpec) -> Vec<usize> {
        match &self.adapted_layers {
            Some(layers) => {
                let set: BTreeSet<usize> = layers.iter().copied().collect();
                set.into_iter().collect()
            }
            None => {
                let depth = spec.num_visual_layers.min(spec.num_text_layers);
                let n = self.num_adapted_layers.min(depth);
                (depth - n..depth).collect()
            }
        }
    }

    pub fn validate(&self, spec: &BackboneSpec) -> Result<()> {
        let r = self.bottleneck_dim;
        let max_r = spec.visual_width.min(spec.text_width);
        if r == 0 || r > max_r {
            return Err(Error::Config(format!(
                "bottleneck_dim {r} must lie in [1, {max_r}]"
            )));
        }
        if !self.adapt_visual && !self.adapt_text {
            return Err(Error::Config(
                "at least one branch must carry adapters".into(),
            ));
        }
        let depth = spec.num_visual_layers.min(spec.num_text_layers);
        if let Some(bad) = self
            .resolved_layers(spec)
            .into_iter()
            .find(|&k| k >= depth)
        {
            return Err(Error::Config(format!(
                "adapted layer {bad} does not exist in both branches (depth {depth})"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

/// Transform applied inside the bottleneck width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bottleneck {
    /// `linear → GELU → linear`, used by encoder-layer adapters.
    Ffn { first: Linear, second: Linear },
    /// One linear map, used by projection-stage adapters.
    Single(Linear),
}

/// Parameters one branch uses at one adaptation site. Ids may coincide with
/// those of other sites; that is how sharing is represented.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BranchAdapter {
    pub down: Linear,
    pub bottleneck: Bottleneck,
    pub up: Linear,
    pub norm: NormParams,
    pub gate: ParamId,
}

impl BranchAdapter {
    fn ids(&self) -> Vec<ParamId> {
        let mut ids = vec![
            self.down.weight,
            self.down.bias,
            self.up.weight,
            self.up.bias,
            self.norm.gamma,
            self.norm.beta,
            self.gate,
        ];
        match self.bottleneck {
            Bottleneck::Ffn { first, second } => {
                ids.extend([first.weight, first.bias, second.weight, second.bias])
            }
            Bottleneck::Single(l) => ids.extend([l.weight, l.bias]),
        }
        ids
    }
}

fn slot(m: Modality) -> usize {
    match m {
        Modality::Visual => 0,
        Modality::Textual => 1,
    }
}

/// All adapter parameters, by adaptation site.
#[derive(Debug, Clone)]
pub struct AdapterState {
    config: ScmaConfig,
    layers: BTreeMap<usize, [Option<BranchAdapter>; 2]>,
    projection: [Option<BranchAdapter>; 2],
}

struct Builder<'s, R: Rng> {
    store: &'s mut ParamStore,
    rng: &'s mut R,
}

impl<R: Rng> Builder<'_, R> {
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        let std = 1.0 / (fan_in as f64).sqrt();
        let weight = self.store.add(
            format!("{name}.weight"),
            ParamRole::AdapterWeight,
            Matrix::randn(fan_in, fan_out, std, self.rng),
        );
        let bias = self.store.add(
            format!("{name}.bias"),
            ParamRole::AdapterBias,
            Matrix::zeros(1, fan_out),
        );
        Linear { weight, bias }
    }

    fn norm(&mut self, name: &str, width: usize) -> NormParams {
        NormParams {
            gamma: self.store.add(
                format!("{name}.gamma"),
                ParamRole::Norm,
                Matrix::filled(1, width, 1.0),
            ),
            beta: self
                .store
                .add(format!("{name}.beta"), ParamRole::Norm, Matrix::zeros(1, width)),
        }
    }

    fn gate(&mut self, name: &str) -> ParamId {
        self.store
            .add(format!("{name}.gate"), ParamRole::Gate, Matrix::scalar(0.0))
    }

    fn ffn(&mut self, name: &str, r: usize) -> Bottleneck {
        Bottleneck::Ffn {
            first: self.linear(&format!("{name}.ffn.fc1"), r, r),
            second: self.linear(&format!("{name}.ffn.fc2"), r, r),
        }
    }

    /// Down/up maps per modality, unified when branches share and widths agree.
    fn maps(
        &mut self,
        prefix: &str,
        cfg: &ScmaConfig,
        widths: impl Fn(Modality) -> (usize, usize),
    ) -> [Option<(Linear, Linear)>; 2] {
        let r = cfg.bottleneck_dim;
        let mods = cfg.modalities();
        let mut out = [None, None];
        let unified = cfg.branches_shared() && widths(Modality::Visual) == widths(Modality::Textual);
        if unified {
            let (w_in, w_out) = widths(Modality::Visual);
            let down = self.linear(&format!("{prefix}.shared.down"), w_in, r);
            let up = self.linear(&format!("{prefix}.shared.up"), r, w_out);
            for m in mods {
                out[slot(m)] = Some((down, up));
            }
        } else {
            for m in mods {
                let (w_in, w_out) = widths(m);
                let down = self.linear(&format!("{prefix}.{}.down", m.as_str()), w_in, r);
                let up = self.linear(&format!("{prefix}.{}.up", m.as_str()), r, w_out);
                out[slot(m)] = Some((down, up));
            }
        }
        out
    }
}

impl AdapterState {
    /// Allocates adapter parameters in `store`. Gates start at zero so the
    /// adapted model initially reproduces the frozen backbone exactly.
    pub fn build<R: Rng>(
        config: &ScmaConfig,
        spec: &BackboneSpec,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate(spec)?;
        let r = config.bottleneck_dim;
        let mods = config.modalities();
        let shared = config.branches_shared();
        let mut b = Builder { store, rng };

        let scope = |m: Modality| if shared { "shared" } else { m.as_str() };
        let mut layer_ffn: BTreeMap<&str, Bottleneck> = BTreeMap::new();
        if config.share_across_layers {
            for &m in &mods {
                let s = scope(m);
                if !layer_ffn.contains_key(s) {
                    let ffn = b.ffn(&format!("escma.{s}"), r);
                    layer_ffn.insert(s, ffn);
                }
            }
        }

        let mut layers = BTreeMap::new();
        for k in config.resolved_layers(spec) {
            let prefix = format!("escma.layer{k}");
            let maps = b.maps(&prefix, config, |m| (spec.width(m), spec.width(m)));
            let mut ffns: BTreeMap<&str, Bottleneck> = BTreeMap::new();
            let mut site = [None, None];
            for &m in &mods {
                let s = scope(m);
                let ffn = match layer_ffn.get(s) {
                    Some(f) => *f,
                    None => *ffns
                        .entry(s)
                        .or_insert_with(|| b.ffn(&format!("{prefix}.{s}"), r)),
                };
                let (down, up) = maps[slot(m)].expect("maps allocated for every modality");
                let norm = b.norm(&format!("{prefix}.{}.norm", m.as_str()), spec.width(m));
                let gate = b.gate(&format!("{prefix}.{}", m.as_str()));
                site[slot(m)] = Some(BranchAdapter {
                    down,
                    bottleneck: ffn,
                    up,
                    norm,
                    gate,
                });
            }
            layers.insert(k, site);
        }

        let mut projection = [None, None];
        if config.enable_pscma {
            let maps = b.maps("pscma", config, |m| (spec.width(m), spec.embed_dim));
            let mut singles: BTreeMap<&str, Bottleneck> = BTreeMap::new();
            for &m in &mods {
                let s = scope(m);
                let map = *singles.entry(s).or_insert_with(|| {
                    Bottleneck::Single(b.linear(&format!("pscma.{s}.map"), r, r))
                });
                let (down, up) = maps[slot(m)].expect("maps allocated for every modality");
                let norm = b.norm(&format!("pscma.{}.norm", m.as_str()), spec.embed_dim);
                let gate = b.gate(&format!("pscma.{}", m.as_str()));
                projection[slot(m)] = Some(BranchAdapter {
                    down,
                    bottleneck: map,
                    up,
                    norm,
                    gate,
                });
            }
        }

        Ok(Self {
            config: config.clone(),
            layers,
            projection,
        })
    }

    pub fn config(&self) -> &ScmaConfig {
        &self.config
    }

    pub fn adapted_layers(&self) -> Vec<usize> {
        self.layers.keys().copied().collect()
    }

    pub fn layer_adapter(&self, k: usize, modality: Modality) -> Option<&BranchAdapter> {
        self.layers.get(&k).and_then(|s| s[slot(modality)].as_ref())
    }

    pub fn projection_adapter(&self, modality: Modality) -> Option<&BranchAdapter> {
        self.projection[slot(modality)].as_ref()
    }

    /// Every parameter id referenced by any site, deduplicated.
    pub fn param_ids(&self) -> BTreeSet<ParamId> {
        self.layers
            .values()
            .flat_map(|s| s.iter().flatten())
            .chain(self.projection.iter().flatten())
            .flat_map(BranchAdapter::ids)
            .collect()
    }

    fn layer_site(&self, k: usize, modality: Modality) -> Result<&BranchAdapter> {
        self.layer_adapter(k, modality).ok_or_else(|| {
            Error::Contract(format!(
                "layer {k} of the {} branch carries no adapter",
                modality.as_str()
            ))
        })
    }

    fn projection_site(&self, modality: Modality) -> Result<&BranchAdapter> {
        if !self.config.enable_pscma {
            return Err(Error::Contract("projection adapters are disabled".into()));
        }
        self.projection_adapter(modality).ok_or_else(|| {
            Error::Contract(format!(
                "the {} branch carries no projection adapter",
                modality.as_str()
            ))
        })
    }

    /// `LayerNorm(Up(T(Down(x))))` on the graph.
    pub fn delta_on_graph<'a>(&self, g: &mut Graph<'a>, a: &BranchAdapter, x: Var) -> Var {
        let linear = |g: &mut Graph<'a>, l: Linear, x: Var| {
            let w = g.param(l.weight);
            let b = g.param(l.bias);
            let h = g.matmul(x, w);
            g.add_row(h, b)
        };
        let h = linear(g, a.down, x);
        let h = match a.bottleneck {
            Bottleneck::Ffn { first, second } => {
                let h = linear(g, first, h);
                let h = g.gelu(h);
                linear(g, second, h)
            }
            Bottleneck::Single(l) => linear(g, l, h),
        };
        let h = linear(g, a.up, h);
        let gamma = g.param(a.norm.gamma);
        let beta = g.param(a.norm.beta);
        g.layer_norm(h, gamma, beta, LN_EPS)
    }

    fn gated_sum<'a>(g: &mut Graph<'a>, a: &BranchAdapter, base: Var, delta: Var) -> Var {
        let gate = g.param(a.gate);
        let scaled = g.mul_scalar(delta, gate);
        g.add(base, scaled)
    }

    /// Encoder-layer adapter output for layer input `x` (`tokens × width`).
    pub fn escma_delta(
        &self,
        store: &ParamStore,
        x: &Matrix,
        k: usize,
        modality: Modality,
    ) -> Result<Matrix> {
        let a = self.layer_site(k, modality)?;
        let width = store.get(a.down.weight).rows();
        if x.cols() != width {
            return Err(Error::InputContract(format!(
                "layer input width {} does not match branch width {width}",
                x.cols()
            )));
        }
        let mut g = Graph::with_params(store);
        let xv = g.constant(x);
        let d = self.delta_on_graph(&mut g, a, xv);
        Ok(g.value(d).clone())
    }

    /// `encoder_out + gate_k · delta` with the branch's gate.
    pub fn apply_escma(
        &self,
        store: &ParamStore,
        encoder_out: &Matrix,
        delta: &Matrix,
        k: usize,
        modality: Modality,
    ) -> Result<Matrix> {
        let a = self.layer_site(k, modality)?;
        gated(store, a, encoder_out, delta)
    }

    /// Projection-stage adapter output for a pooled feature (`1 × width`).
    pub fn pscma_delta(&self, store: &ParamStore, x: &Matrix, modality: Modality) -> Result<Matrix> {
        let a = self.projection_site(modality)?;
        let width = store.get(a.down.weight).rows();
        if x.cols() != width {
            return Err(Error::InputContract(format!(
                "pooled feature width {} does not match branch width {width}",
                x.cols()
            )));
        }
        let mut g = Graph::with_params(store);
        let xv = g.constant(x);
        let d = self.delta_on_graph(&mut g, a, xv);
        Ok(g.value(d).clone())
    }

    /// `projected + gate · delta` with the branch's projection gate.
    pub fn apply_pscma(
        &self,
        store: &ParamStore,
        projected: &Matrix,
        delta: &Matrix,
        modality: Modality,
    ) -> Result<Matrix> {
        let a = self.projection_site(modality)?;
        gated(store, a, projected, delta)
    }
}

fn gated(store: &ParamStore, a: &BranchAdapter, base: &Matrix, delta: &Matrix) -> Result<Matrix> {
    if base.shape() != delta.shape() {
        return Err(Error::InputContract(format!(
            "adapter delta {:?} does not match encoder output {:?}",
            delta.shape(),
            base.shape()
        )));
    }
    let gate = store.get(a.gate).get(0, 0);
    let mut out = base.clone();
    for (o, d) in out.data_mut().iter_mut().zip(delta.data()) {
        *o += gate * d;
    }
    Ok(out)
}

impl AdapterHooks for AdapterState {
    fn layer<'a>(
        &self,
        g: &mut Graph<'a>,
        modality: Modality,
        layer: usize,
        input: Var,
        output: Var,
    ) -> Result<Var> {
        match self.layer_adapter(layer, modality) {
            Some(a) => {
                let delta = self.delta_on_graph(g, a, input);
                Ok(Self::gated_sum(g, a, output, delta))
            }
            None => Ok(output),
        }
    }

    fn projection<'a>(
        &self,
        g: &mut Graph<'a>,
        modality: Modality,
        pooled: Var,
        projected: Var,
    ) -> Result<Var> {
        match self.projection_adapter(modality) {
            Some(a) => {
                let delta = self.delta_on_graph(g, a, pooled);
                Ok(Self::gated_sum(g, a, projected, delta))
            }
            None => Ok(projected),
        }
    }
}

/// Closed-form number of trainable adapter scalars (maps, bottleneck
/// transforms, norms, gates) for a configuration.
pub fn closed_form_adapter_count(spec: &BackboneSpec, cfg: &ScmaConfig) -> usize {
    let r = cfg.bottleneck_dim;
    let mods = cfg.modalities();
    let shared = cfg.branches_shared();
    let layers = cfg.resolved_layers(spec).len();
    let groups = if shared { 1 } else { mods.len() };

    let maps = |out_width: &dyn Fn(Modality) -> usize| -> usize {
        let pair = |m: Modality| (spec.width(m) * r + r) + (r * out_width(m) + out_width(m));
        let unified = shared
            && spec.visual_width == spec.text_width
            && out_width(Modality::Visual) == out_width(Modality::Textual);
        if unified {
            pair(Modality::Visual)
        } else {
            mods.iter().map(|&m| pair(m)).sum()
        }
    };

    let ffn = 2 * (r * r + r);
    let per_layer = maps(&|m| spec.width(m)) + mods.iter().map(|&m| 2 * spec.width(m) + 1).sum::<usize>();
    let ffn_sets = if cfg.share_across_layers {
        groups
    } else {
        groups * layers
    };
    let escma = layers * per_layer + ffn_sets * ffn;

    let pscma = if cfg.enable_pscma {
        maps(&|_| spec.embed_dim) + mods.len() * (2 * spec.embed_dim + 1) + groups * (r * r + r)
    } else {
        0
    };
    escma + pscma
}

/// Exact number of trainable scalars across adapters, prompt prefix and
/// head, counting shared tensors once.
pub fn trainable_param_count(
    store: &ParamStore,
    state: &AdapterState,
    prompts: &PromptBank,
    head: &QualityHead,
) -> usize {
    let mut ids = state.param_ids();
    ids.extend(prompts.param_ids());
    ids.insert(head.weights_id());
    ids.into_iter().map(|id| store.get(id).len()).sum()
}

/// Closed form of [`trainable_param_count`]: adapters, plus
/// `prefix_length · d_t` for a learnable prefix, plus one head weight per
/// prompt level.
pub fn closed_form_param_count(spec: &BackboneSpec, scma: &ScmaConfig, prompt: &PromptConfig) -> usize {
    let prefix = if prompt.mode.is_learnable() {
        prompt.prefix_length * spec.text_width
    } else {
        0
    };
    closed_form_adapter_count(spec, scma) + prefix + prompt.mode.levels().len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_spec(dv: usize, dt: usize) -> BackboneSpec {
        BackboneSpec {
            num_visual_layers: 2,
            num_text_layers: 2,
            visual_width: dv,
            text_width: dt,
            embed_dim: 8,
            ..BackboneSpec::tiny()
        }
    }

    fn build(cfg: &ScmaConfig, spec: &BackboneSpec) -> (AdapterState, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = AdapterState::build(cfg, spec, &mut store, &mut rng).unwrap();
        (s, store)
    }

    #[test]
    fn zero_up_map_with_zero_norm_bias_gives_zero_delta() {
        let spec = small_spec(8, 8);
        let cfg = ScmaConfig {
            bottleneck_dim: 2,
            ..ScmaConfig::default()
        };
        let (state, mut store) = build(&cfg, &spec);
        let a = *state.layer_adapter(1, Modality::Visual).unwrap();
        *store.get_mut(a.up.weight) = Matrix::zeros(2, 8);
        *store.get_mut(a.up.bias) = Matrix::zeros(1, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Matrix::randn(5, 8, 1.0, &mut rng);
        let d = state.escma_delta(&store, &x, 1, Modality::Visual).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.0));

        let p = *state.projection_adapter(Modality::Textual).unwrap();
        *store.get_mut(p.up.weight) = Matrix::zeros(2, 8);
        *store.get_mut(p.up.bias) = Matrix::zeros(1, 8);
        let pooled = Matrix::randn(1, 8, 1.0, &mut rng);
        let d = state.pscma_delta(&store, &pooled, Modality::Textual).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shared_branches_give_identical_deltas() {
        let spec = small_spec(8, 8);
        let cfg = ScmaConfig {
            bottleneck_dim: 2,
            ..ScmaConfig::default()
        };
        let (state, store) = build(&cfg, &spec);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Matrix::randn(3, 8, 1.0, &mut rng);
        let dv = state.escma_delta(&store, &x, 0, Modality::Visual).unwrap();
        let dt = state.escma_delta(&store, &x, 0, Modality::Textual).unwrap();
        assert_eq!(dv, dt);
    }

    #[test]
    fn apply_escma_is_gated_residual() {
        let spec = small_spec(3, 3);
        let cfg = ScmaConfig {
            bottleneck_dim: 1,
            ..ScmaConfig::default()
        };
        let (state, mut store) = build(&cfg, &spec);
        let a = *state.layer_adapter(0, Modality::Visual).unwrap();
        let out = Matrix::row_vector(vec![1.0, 2.0, 3.0]);
        let delta = Matrix::row_vector(vec![2.0, 0.0, -2.0]);

        let r = state.apply_escma(&store, &out, &delta, 0, Modality::Visual).unwrap();
        assert_eq!(r, out);

        *store.get_mut(a.gate) = Matrix::scalar(1.0);
        let r = state.apply_escma(&store, &out, &out, 0, Modality::Visual).unwrap();
        assert_eq!(r, out.scaled(2.0));

        *store.get_mut(a.gate) = Matrix::scalar(0.5);
        let r = state.apply_escma(&store, &out, &delta, 0, Modality::Visual).unwrap();
        assert_eq!(r.data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn contract_errors() {
        let spec = small_spec(8, 8);
        let cfg = ScmaConfig {
            bottleneck_dim: 2,
            adapted_layers: Some(vec![1]),
            enable_pscma: false,
            ..ScmaConfig::default()
        };
        let (state, store) = build(&cfg, &spec);
        let x = Matrix::zeros(2, 8);
        assert!(matches!(
            state.escma_delta(&store, &x, 0, Modality::Visual),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            state.pscma_delta(&store, &Matrix::zeros(1, 8), Modality::Visual),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            state.escma_delta(&store, &Matrix::zeros(2, 4), 1, Modality::Visual),
            Err(Error::InputContract(_))
        ));
    }

    #[test]
    fn config_validation() {
        let spec = small_spec(8, 6);
        let bad_r = ScmaConfig {
            bottleneck_dim: 7,
            ..ScmaConfig::default()
        };
        assert!(bad_r.validate(&spec).is_err());
        let bad_layer = ScmaConfig {
            bottleneck_dim: 2,
            adapted_layers: Some(vec![2]),
            ..ScmaConfig::default()
        };
        assert!(bad_layer.validate(&spec).is_err());
        let none = ScmaConfig {
            bottleneck_dim: 2,
            adapt_visual: false,
            adapt_text: false,
            ..ScmaConfig::default()
        };
        assert!(none.validate(&spec).is_err());
    }

    #[test]
    fn default_layers_are_the_last_six() {
        let spec = BackboneSpec::large();
        assert_eq!(ScmaConfig::default().resolved_layers(&spec), (18..24).collect::<Vec<_>>());
        let tiny = BackboneSpec::tiny();
        assert_eq!(ScmaConfig::default().resolved_layers(&tiny), vec![0, 1, 2, 3]);
    }

    #[test]
    fn layer_sharing_uses_one_bottleneck_parameter_set() {
        let spec = small_spec(8, 8);
        let cfg = ScmaConfig {
            bottleneck_dim: 2,
            ..ScmaConfig::default()
        };
        let (state, _) = build(&cfg, &spec);
        let a0 = state.layer_adapter(0, Modality::Visual).unwrap();
        let a1 = state.layer_adapter(1, Modality::Textual).unwrap();
        assert_eq!(a0.bottleneck, a1.bottleneck);
        assert_ne!(a0.down, a1.down);
        assert_ne!(a0.gate, a1.gate);
    }

    #[test]
    fn unequal_widths_keep_maps_per_branch_and_share_bottleneck() {
        let spec = small_spec(8, 6);
        let cfg = ScmaConfig {
            bottleneck_dim: 2,
            ..ScmaConfig::default()
        };
        let (state, store) = build(&cfg, &spec);
        let v = state.layer_adapter(0, Modality::Visual).unwrap();
        let t = state.layer_adapter(0, Modality::Textual).unwrap();
        assert_ne!(v.down, t.down);
        assert_eq!(v.bottleneck, t.bottleneck);
        assert_eq!(store.get(v.down.weight).shape(), (8, 2));
        assert_eq!(store.get(t.down.weight).shape(), (6, 2));
        let pv = state.projection_adapter(Modality::Visual).unwrap();
        let pt = state.projection_adapter(Modality::Textual).unwrap();
        assert_eq!(pv.bottleneck, pt.bottleneck);
        assert_ne!(pv.up, pt.up);
    }

    #[test]
    fn closed_form_matches_allocation_for_every_variant() {
        for (dv, dt) in [(8, 8), (8, 6)] {
            let spec = small_spec(dv, dt);
            for variant in StructureVariant::ALL {
                for pscma in [false, true] {
                    let base = ScmaConfig {
                        bottleneck_dim: 2,
                        enable_pscma: pscma,
                        ..ScmaConfig::default()
                    };
                    let cfg = variant.apply(&base);
                    let (state, store) = build(&cfg, &spec);
                    let counted: usize = state
                        .param_ids()
                        .into_iter()
                        .map(|id| store.get(id).len())
                        .sum();
                    assert_eq!(counted, store.num_scalars());
                    assert_eq!(
                        counted,
                        closed_form_adapter_count(&spec, &cfg),
                        "{variant:?} pscma={pscma} widths=({dv},{dt})"
                    );
                }
            }
        }
    }

    #[test]
    fn single_branch_variants_allocate_only_that_branch() {
        let spec = small_spec(8, 8);
        let base = ScmaConfig {
            bottleneck_dim: 2,
            ..ScmaConfig::default()
        };
        let (state, store) = build(&StructureVariant::VisualOnly.apply(&base), &spec);
        assert!(state.layer_adapter(0, Modality::Textual).is_none());
        assert!(state.projection_adapter(Modality::Textual).is_none());
        assert!(store.iter().all(|(_, p)| !p.name.contains("text")));
    }
}
