//! Independent scalar-loop oracles and fixtures shared by the integration
//! tests. Nothing here calls the library code it is used to check.
#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tempfile::TempDir;
use vqa_core::backbone::{make_tiny_backbone, Backbone, BackboneSpec, Modality};
use vqa_core::data::{make_synthetic_dataset, DecodeConfig, FrameCache, FrameSequence};
use vqa_core::params::ParamStore;
use vqa_core::scma::{AdapterState, Bottleneck, BranchAdapter, ScmaConfig};
use vqa_core::tensor::Matrix;
use vqa_core::training::{prepare_videos, PreparedVideo};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

// ---------------------------------------------------------------- adapters

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

/// `x · W + b` over rows with `W` stored `in × out`.
fn affine(x: &[Vec<f64>], w: &Matrix, b: &Matrix) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            (0..w.cols())
                .map(|j| {
                    let mut s = b.get(0, j);
                    for (i, xi) in row.iter().enumerate() {
                        s += xi * w.get(i, j);
                    }
                    s
                })
                .collect()
        })
        .collect()
}

fn layer_norm(x: &[Vec<f64>], gamma: &Matrix, beta: &Matrix) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + 1e-5).sqrt();
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) * inv * gamma.get(0, j) + beta.get(0, j))
                .collect()
        })
        .collect()
}

/// `LN(Up(T(Down(x))))` with scalar loops.
pub fn adapter_delta_oracle(store: &ParamStore, a: &BranchAdapter, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let lin = |x: &[Vec<f64>], l: vqa_core::scma::Linear| affine(x, store.get(l.weight), store.get(l.bias));
    let h = lin(x, a.down);
    let h = match a.bottleneck {
        Bottleneck::Ffn { first, second } => {
            let h: Vec<Vec<f64>> = lin(&h, first).into_iter().map(|r| r.into_iter().map(gelu).collect()).collect();
            lin(&h, second)
        }
        Bottleneck::Single(l) => lin(&h, l),
    };
    let h = lin(&h, a.up);
    layer_norm(&h, store.get(a.norm.gamma), store.get(a.norm.beta))
}

pub fn small_spec(rng: &mut impl Rng) -> BackboneSpec {
    let widths = [4, 6, 8, 12, 16];
    BackboneSpec {
        num_visual_layers: rng.random_range(1..=4),
        num_text_layers: rng.random_range(1..=4),
        visual_width: widths[rng.random_range(0..widths.len())],
        text_width: widths[rng.random_range(0..widths.len())],
        embed_dim: 8,
        frame_height: 8,
        frame_width: 8,
        context_length: 16,
        patch_size: 4,
        num_heads: 2,
        mlp_ratio: 2,
    }
}

/// Random adapter configuration with every adapter parameter overwritten by
/// Gaussian noise, so zero-initialized tensors are exercised too.
pub fn random_adapter_case(seed: u64) -> (BackboneSpec, ScmaConfig, ParamStore, AdapterState) {
    let mut r = rng(seed);
    let spec = small_spec(&mut r);
    let depth = spec.num_visual_layers.min(spec.num_text_layers);
    let (adapt_visual, adapt_text) = match r.random_range(0..3) {
        0 => (true, false),
        1 => (false, true),
        _ => (true, true),
    };
    let cfg = ScmaConfig {
        adapted_layers: None,
        num_adapted_layers: r.random_range(1..=depth),
        bottleneck_dim: r.random_range(1..=spec.visual_width.min(spec.text_width)),
        adapt_visual,
        adapt_text,
        share_across_branches: r.random(),
        share_across_layers: r.random(),
        enable_pscma: true,
    };
    let mut store = ParamStore::new();
    let state = AdapterState::build(&cfg, &spec, &mut store, &mut r).expect("valid adapter case");
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v = randn(&mut r);
        }
    }
    (spec, cfg, store, state)
}

pub fn random_rows(rng: &mut impl Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows).map(|_| (0..cols).map(|_| randn(rng)).collect()).collect()
}

pub fn to_matrix(rows: &[Vec<f64>]) -> Matrix {
    Matrix::from_vec(rows.len(), rows[0].len(), rows.concat())
}

pub fn width_of(spec: &BackboneSpec, m: Modality) -> usize {
    match m {
        Modality::Visual => spec.visual_width,
        Modality::Textual => spec.text_width,
    }
}

// ------------------------------------------------------------------ motion

/// Neighbour-averaged per-pixel MSE, one value per frame.
pub fn motion_profile_oracle(frames: &[Vec<f32>], h: usize, w: usize) -> Vec<f64> {
    let mse = |a: &[f32], b: &[f32]| {
        let mut s = 0.0;
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let i = (y * w + x) * 3 + c;
                    let d = a[i] as f64 - b[i] as f64;
                    s += d * d;
                }
            }
        }
        s / (h * w * 3) as f64
    };
    let n = frames.len();
    (0..n)
        .map(|t| {
            if t == 0 {
                mse(&frames[0], &frames[1])
            } else if t == n - 1 {
                mse(&frames[n - 2], &frames[n - 1])
            } else {
                0.5 * (mse(&frames[t], &frames[t + 1]) + mse(&frames[t], &frames[t - 1]))
            }
        })
        .collect()
}

pub fn random_video(rng: &mut impl Rng, n: usize, h: usize, w: usize) -> FrameSequence {
    let frames = (0..n)
        .map(|_| (0..h * w * 3).map(|_| rng.random::<f32>()).collect())
        .collect();
    FrameSequence::new("random", h, w, frames).unwrap()
}

// ----------------------------------------------------------------- metrics

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for i in 0..x.len() {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    sxy / (sxx * syy).sqrt()
}

/// Kendall tau-b by counting all pairs.
pub fn krocc_brute(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len();
    let (mut conc, mut disc, mut tx, mut ty) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for i in 0..n {
        for j in i + 1..n {
            let dx = x[i] - x[j];
            let dy = y[i] - y[j];
            if dx == 0.0 && dy == 0.0 {
                continue;
            } else if dx == 0.0 {
                tx += 1.0;
            } else if dy == 0.0 {
                ty += 1.0;
            } else if dx * dy > 0.0 {
                conc += 1.0;
            } else {
                disc += 1.0;
            }
        }
    }
    (conc - disc) / ((conc + disc + tx) * (conc + disc + ty)).sqrt()
}

// -------------------------------------------------------------------- loss

/// `(1 − r)/2 + λ · mean hinge` written directly from the definition.
pub fn loss_oracle(p: &[f64], y: &[f64], lambda: f64) -> f64 {
    if p.len() == 1 {
        return (p[0] - y[0]).abs();
    }
    let r = pearson(p, y);
    let r = if r.is_finite() { r } else { 0.0 };
    let mut total = 0.0;
    let mut pairs = 0;
    for i in 0..p.len() {
        for j in 0..p.len() {
            if y[i] > y[j] {
                pairs += 1;
                total += (p[j] - p[i]).max(0.0);
            }
        }
    }
    let hinge = if pairs == 0 { 0.0 } else { total / pairs as f64 };
    (1.0 - r) / 2.0 + lambda * hinge
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    d / (na * nb)
}

// ---------------------------------------------------------------- fixtures

pub fn tiny_backbone() -> Arc<dyn Backbone> {
    Arc::new(make_tiny_backbone(0, BackboneSpec::tiny()).unwrap())
}

/// The 32-clip synthetic set, decoded.
pub fn toy_videos(n_clips: usize, seed: u64) -> (TempDir, Vec<PreparedVideo>) {
    let dir = tempfile::tempdir().unwrap();
    let manifest = make_synthetic_dataset(dir.path(), n_clips, seed).unwrap();
    let (videos, skipped) = prepare_videos(&manifest, &DecodeConfig::default(), &FrameCache::in_memory(), 224);
    assert!(skipped.is_empty(), "{skipped:?}");
    (dir, videos)
}

/// Random frames sized for `spec`.
pub fn random_clip(rng: &mut impl Rng, spec: &BackboneSpec, frames: usize) -> FrameSequence {
    random_video(rng, frames, spec.frame_height, spec.frame_width)
}

/// Variance of the 4-neighbour Laplacian over the luminance of one frame.
pub fn laplacian_variance(frame: &[f32], h: usize, w: usize) -> f64 {
    let lum = |y: usize, x: usize| {
        let i = (y * w + x) * 3;
        (frame[i] as f64 + frame[i + 1] as f64 + frame[i + 2] as f64) / 3.0
    };
    let mut vals = Vec::new();
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            vals.push(4.0 * lum(y, x) - lum(y - 1, x) - lum(y + 1, x) - lum(y, x - 1) - lum(y, x + 1));
        }
    }
    let m = vals.iter().sum::<f64>() / vals.len() as f64;
    vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64
}

pub fn file_bytes(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap()
}

// ------------------------------------------------------------ trainable set

/// Names of every tensor the configuration should make trainable, written
/// out from the naming scheme for equal branch widths.
pub fn expected_trainable_names(cfg: &vqa_core::model::ModelConfig, layers: &[usize]) -> std::collections::BTreeSet<String> {
    let s = &cfg.scma;
    let mods: Vec<&str> = [(s.adapt_visual, "visual"), (s.adapt_text, "text")]
        .into_iter()
        .filter_map(|(on, m)| on.then_some(m))
        .collect();
    let shared = s.share_across_branches && mods.len() == 2;
    let scopes: Vec<&str> = if shared { vec!["shared"] } else { mods.clone() };
    let mut out = std::collections::BTreeSet::new();
    let mut add = |n: String| {
        out.insert(n);
    };
    let lin = |prefix: String, add: &mut dyn FnMut(String)| {
        add(format!("{prefix}.weight"));
        add(format!("{prefix}.bias"));
    };
    for &k in layers {
        for sc in &scopes {
            lin(format!("escma.layer{k}.{sc}.down"), &mut add);
            lin(format!("escma.layer{k}.{sc}.up"), &mut add);
            let ffn = if s.share_across_layers {
                format!("escma.{sc}.ffn")
            } else {
                format!("escma.layer{k}.{sc}.ffn")
            };
            lin(format!("{ffn}.fc1"), &mut add);
            lin(format!("{ffn}.fc2"), &mut add);
        }
        for m in &mods {
            add(format!("escma.layer{k}.{m}.norm.gamma"));
            add(format!("escma.layer{k}.{m}.norm.beta"));
            add(format!("escma.layer{k}.{m}.gate"));
        }
    }
    if s.enable_pscma {
        for sc in &scopes {
            for part in ["down", "up", "map"] {
                lin(format!("pscma.{sc}.{part}"), &mut add);
            }
        }
        for m in &mods {
            add(format!("pscma.{m}.norm.gamma"));
            add(format!("pscma.{m}.norm.beta"));
            add(format!("pscma.{m}.gate"));
        }
    }
    if cfg.prompt.mode.is_learnable() {
        add("prompt.prefix".into());
    }
    add("head.weights".into());
    out
}
