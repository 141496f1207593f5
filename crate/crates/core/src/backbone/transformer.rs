//! Pre-norm transformer towers with patch-embedded frames and byte tokens.

use std::collections::BTreeSet;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    AdapterHooks, Backbone, BackboneSpec, ByteTokenizer, LayerActivations, Modality,
    TokenSequence,
};
use crate::autograd::{Graph, Var};
use crate::data::container::Container;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Per-channel pixel statistics applied before patch embedding.
const PIXEL_MEAN: [f64; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
const PIXEL_STD: [f64; 3] = [0.268_629_54, 0.261_302_58, 0.275_777_11];

const LN_EPS: f64 = 1e-5;
const MASKED: f64 = -1e9;

#[derive(Debug, Clone)]
struct Block {
    ln1_g: Matrix,
    ln1_b: Matrix,
    wq: Vec<Matrix>,
    wk: Vec<Matrix>,
    wv: Vec<Matrix>,
    wo: Matrix,
    bo: Matrix,
    ln2_g: Matrix,
    ln2_b: Matrix,
    w1: Matrix,
    b1: Matrix,
    w2: Matrix,
    b2: Matrix,
}

#[derive(Debug, Clone)]
struct Tower {
    blocks: Vec<Block>,
    ln_post_g: Matrix,
    ln_post_b: Matrix,
    proj: Matrix,
}

/// Two-tower encoder: a ViT-style visual tower (class token pooled) and a
/// causal text tower (end token pooled).
#[derive(Debug, Clone)]
pub struct TransformerBackbone {
    spec: BackboneSpec,
    patch_w: Matrix,
    patch_b: Matrix,
    cls: Matrix,
    visual_pos: Matrix,
    token_embedding: Matrix,
    text_pos: Matrix,
    visual: Tower,
    text: Tower,
    unfrozen: BTreeSet<String>,
}

/// Supplies each named tensor during construction.
type Init<'f> = dyn FnMut(&str, usize, usize) -> Result<Matrix> + 'f;

fn build_block(prefix: &str, width: usize, spec: &BackboneSpec, init: &mut Init) -> Result<Block> {
    let heads = spec.num_heads;
    let dh = width / heads;
    let hidden = width * spec.mlp_ratio;
    let per_head = |init: &mut Init, what: &str| -> Result<Vec<Matrix>> {
        (0..heads)
            .map(|h| init(&format!("{prefix}.attn.{what}.head{h}"), width, dh))
            .collect()
    };
    Ok(Block {
        ln1_g: init(&format!("{prefix}.ln1.gamma"), 1, width)?,
        ln1_b: init(&format!("{prefix}.ln1.beta"), 1, width)?,
        wq: per_head(init, "q")?,
        wk: per_head(init, "k")?,
        wv: per_head(init, "v")?,
        wo: init(&format!("{prefix}.attn.out.weight"), width, width)?,
        bo: init(&format!("{prefix}.attn.out.bias"), 1, width)?,
        ln2_g: init(&format!("{prefix}.ln2.gamma"), 1, width)?,
        ln2_b: init(&format!("{prefix}.ln2.beta"), 1, width)?,
        w1: init(&format!("{prefix}.mlp.fc1.weight"), width, hidden)?,
        b1: init(&format!("{prefix}.mlp.fc1.bias"), 1, hidden)?,
        w2: init(&format!("{prefix}.mlp.fc2.weight"), hidden, width)?,
        b2: init(&format!("{prefix}.mlp.fc2.bias"), 1, width)?,
    })
}

fn build_tower(
    name: &str,
    layers: usize,
    width: usize,
    spec: &BackboneSpec,
    init: &mut Init,
) -> Result<Tower> {
    let blocks = (0..layers)
        .map(|k| build_block(&format!("{name}.layer{k}"), width, spec, init))
        .collect::<Result<_>>()?;
    Ok(Tower {
        blocks,
        ln_post_g: init(&format!("{name}.ln_post.gamma"), 1, width)?,
        ln_post_b: init(&format!("{name}.ln_post.beta"), 1, width)?,
        proj: init(&format!("{name}.proj"), width, spec.embed_dim)?,
    })
}

/// Replaces every patch-embedding filter with its in-patch discrete
/// Laplacian, so the random encoder responds to local detail rather than
/// flat colour.
fn high_pass(w: &mut Matrix, p: usize) {
    for col in 0..w.cols() {
        let k: Vec<f64> = (0..w.rows()).map(|r| w.get(r, col)).collect();
        let at = |y: isize, x: isize, c: usize| -> f64 {
            if y < 0 || x < 0 || y >= p as isize || x >= p as isize {
                0.0
            } else {
                k[(y as usize * p + x as usize) * 3 + c]
            }
        };
        for y in 0..p as isize {
            for x in 0..p as isize {
                for c in 0..3 {
                    let l = 4.0 * at(y, x, c) - at(y - 1, x, c) - at(y + 1, x, c) - at(y, x - 1, c) - at(y, x + 1, c);
                    w.set((y as usize * p + x as usize) * 3 + c, col, l);
                }
            }
        }
    }
}

impl TransformerBackbone {
    fn build(spec: BackboneSpec, init: &mut Init) -> Result<Self> {
        spec.validate()?;
        let patch_dim = 3 * spec.patch_size * spec.patch_size;
        let d_v = spec.visual_width;
        let d_t = spec.text_width;
        Ok(Self {
            patch_w: init("visual.patch.weight", patch_dim, d_v)?,
            patch_b: init("visual.patch.bias", 1, d_v)?,
            cls: init("visual.cls", 1, d_v)?,
            visual_pos: init("visual.pos", spec.num_patches() + 1, d_v)?,
            token_embedding: init("text.token_embedding", ByteTokenizer::VOCAB_SIZE, d_t)?,
            text_pos: init("text.pos", spec.context_length, d_t)?,
            visual: build_tower("visual", spec.num_visual_layers, d_v, &spec, init)?,
            text: build_tower("text", spec.num_text_layers, d_t, &spec, init)?,
            unfrozen: BTreeSet::new(),
            spec,
        })
    }

    /// Random weights with high-pass patch filters, fully determined by
    /// `seed` and `spec`.
    pub fn random(seed: u64, spec: BackboneSpec) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = |name: &str, rows: usize, cols: usize| -> Result<Matrix> {
            let m = if name.ends_with("gamma") {
                Matrix::filled(rows, cols, 1.0)
            } else if name.ends_with("beta") {
                Matrix::zeros(rows, cols)
            } else if name.ends_with("bias") {
                Matrix::randn(rows, cols, 0.02, &mut rng)
            } else if name.ends_with(".pos") || name.ends_with(".cls") {
                Matrix::randn(rows, cols, 0.1, &mut rng)
            } else if name.ends_with("token_embedding") {
                Matrix::randn(rows, cols, 0.5, &mut rng)
            } else {
                Matrix::randn(rows, cols, 1.0 / (rows as f64).sqrt(), &mut rng)
            };
            Ok(m)
        };
        let mut bb = Self::build(spec, &mut init)?;
        high_pass(&mut bb.patch_w, bb.spec.patch_size);
        Ok(bb)
    }

    /// Loads frozen weights for `spec` from a tensor container written by [`Self::save`].
    pub fn load(path: &Path, spec: BackboneSpec) -> Result<Self> {
        let container = Container::read(path)?;
        if container.kind != "backbone" {
            return Err(Error::Checkpoint(format!(
                "{} holds a {:?} container, not backbone weights",
                path.display(),
                container.kind
            )));
        }
        let mut init = |name: &str, rows: usize, cols: usize| -> Result<Matrix> {
            let m = container.get(name).ok_or_else(|| {
                Error::Checkpoint(format!("backbone weights lack tensor {name}"))
            })?;
            if m.shape() != (rows, cols) {
                return Err(Error::Checkpoint(format!(
                    "backbone tensor {name}: expected {rows}x{cols}, found {}x{}",
                    m.rows(),
                    m.cols()
                )));
            }
            Ok(m.clone())
        };
        Self::build(spec, &mut init)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Container {
            kind: "backbone".into(),
            metadata: serde_json::to_value(&self.spec)?,
            tensors: self
                .named_tensors()
                .into_iter()
                .map(|(n, m)| (n, m.clone()))
                .collect(),
        }
        .write(path)
    }

    /// Marks a backbone tensor as trainable. No code path trains backbone
    /// tensors; this exists so the trainable-set audit can be exercised.
    pub fn unfreeze(&mut self, name: &str) -> Result<()> {
        if !self.named_tensors().iter().any(|(n, _)| n == name) {
            return Err(Error::Contract(format!("no backbone tensor named {name}")));
        }
        self.unfrozen.insert(name.to_string());
        Ok(())
    }

    fn tower(&self, modality: Modality) -> &Tower {
        match modality {
            Modality::Visual => &self.visual,
            Modality::Textual => &self.text,
        }
    }

    /// Normalized `num_patches × 3p²` patch matrix.
    fn patchify(&self, frame: &[f32]) -> Result<Matrix> {
        let (h, w, p) = (self.spec.frame_height, self.spec.frame_width, self.spec.patch_size);
        if frame.len() != h * w * 3 {
            return Err(Error::InputContract(format!(
                "frame has {} values, backbone expects {h}x{w}x3",
                frame.len()
            )));
        }
        let mut out = Matrix::zeros(self.spec.num_patches(), 3 * p * p);
        let per_row = w / p;
        for py in 0..h / p {
            for px in 0..per_row {
                let row = out.row_mut(py * per_row + px);
                let mut j = 0;
                for y in 0..p {
                    for x in 0..p {
                        let base = ((py * p + y) * w + px * p + x) * 3;
                        for c in 0..3 {
                            row[j] = (frame[base + c] as f64 - PIXEL_MEAN[c]) / PIXEL_STD[c];
                            j += 1;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    fn block<'a>(&'a self, g: &mut Graph<'a>, b: &'a Block, x: Var, causal: bool) -> Var {
        let n = g.value(x).rows();
        let (g1, b1) = (g.constant(&b.ln1_g), g.constant(&b.ln1_b));
        let h = g.layer_norm(x, g1, b1, LN_EPS);
        let dh = b.wq[0].cols();
        let scale = 1.0 / (dh as f64).sqrt();
        let mask = causal.then(|| {
            let mut m = Matrix::zeros(n, n);
            for i in 0..n {
                for j in i + 1..n {
                    m.set(i, j, MASKED);
                }
            }
            m
        });
        let mut heads = Vec::with_capacity(b.wq.len());
        for ((wq, wk), wv) in b.wq.iter().zip(&b.wk).zip(&b.wv) {
            let (wq, wk, wv) = (g.constant(wq), g.constant(wk), g.constant(wv));
            let q = g.matmul(h, wq);
            let k = g.matmul(h, wk);
            let v = g.matmul(h, wv);
            let kt = g.transpose(k);
            let s = g.matmul(q, kt);
            let mut s = g.scale(s, scale);
            if let Some(m) = &mask {
                let mv = g.input(m.clone());
                s = g.add(s, mv);
            }
            let a = g.softmax_rows(s);
            heads.push(g.matmul(a, v));
        }
        let att = g.concat_cols(&heads);
        let (wo, bo) = (g.constant(&b.wo), g.constant(&b.bo));
        let att = g.matmul(att, wo);
        let att = g.add_row(att, bo);
        let x = g.add(x, att);

        let (g2, b2) = (g.constant(&b.ln2_g), g.constant(&b.ln2_b));
        let h = g.layer_norm(x, g2, b2, LN_EPS);
        let (w1, bb1, w2, bb2) = (
            g.constant(&b.w1),
            g.constant(&b.b1),
            g.constant(&b.w2),
            g.constant(&b.b2),
        );
        let m = g.matmul(h, w1);
        let m = g.add_row(m, bb1);
        let m = g.gelu(m);
        let m = g.matmul(m, w2);
        let m = g.add_row(m, bb2);
        g.add(x, m)
    }

    /// Runs a tower's layers, returning the final tokens.
    fn run_tower<'a>(
        &'a self,
        g: &mut Graph<'a>,
        modality: Modality,
        mut x: Var,
        hooks: Option<&dyn AdapterHooks>,
        mut trace: Option<&mut Vec<LayerActivations>>,
    ) -> Result<Var> {
        let tower = self.tower(modality);
        let causal = modality == Modality::Textual;
        for (k, b) in tower.blocks.iter().enumerate() {
            let out = self.block(g, b, x, causal);
            x = match hooks {
                Some(h) => h.layer(g, modality, k, x, out)?,
                None => out,
            };
            if let Some(t) = trace.as_deref_mut() {
                t.push(LayerActivations {
                    modality,
                    layer: k,
                    tokens: g.value(x).clone(),
                });
            }
        }
        Ok(x)
    }

    fn pool<'a>(&'a self, g: &mut Graph<'a>, modality: Modality, tokens: Var, row: usize) -> Var {
        let tower = self.tower(modality);
        let r = g.row(tokens, row);
        let (lg, lb) = (g.constant(&tower.ln_post_g), g.constant(&tower.ln_post_b));
        g.layer_norm(r, lg, lb, LN_EPS)
    }

    fn visual_stem<'a>(&'a self, g: &mut Graph<'a>, frame: &[f32]) -> Result<Var> {
        let patches = g.input(self.patchify(frame)?);
        let (pw, pb) = (g.constant(&self.patch_w), g.constant(&self.patch_b));
        let t = g.matmul(patches, pw);
        let t = g.add_row(t, pb);
        let cls = g.constant(&self.cls);
        let t = g.concat_rows(&[cls, t]);
        let pos = g.constant(&self.visual_pos);
        Ok(g.add(t, pos))
    }
}

impl Backbone for TransformerBackbone {
    fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    fn encode_frame<'a>(
        &'a self,
        g: &mut Graph<'a>,
        frame: &[f32],
        hooks: Option<&dyn AdapterHooks>,
    ) -> Result<Var> {
        let x = self.visual_stem(g, frame)?;
        let x = self.run_tower(g, Modality::Visual, x, hooks, None)?;
        Ok(self.pool(g, Modality::Visual, x, 0))
    }

    fn encode_tokens<'a>(
        &'a self,
        g: &mut Graph<'a>,
        tokens: &TokenSequence,
        prefix: Option<Var>,
        hooks: Option<&dyn AdapterHooks>,
    ) -> Result<Var> {
        ByteTokenizer.check_fits(tokens, self.spec.context_length)?;
        if tokens.is_empty() {
            return Err(Error::InputContract("empty token sequence".into()));
        }
        if let Some(&bad) = tokens
            .ids
            .iter()
            .find(|&&t| t as usize >= ByteTokenizer::VOCAB_SIZE)
        {
            return Err(Error::InputContract(format!("token id {bad} outside vocabulary")));
        }
        let d_t = self.spec.text_width;
        let rows_for = |ids: &[u32]| {
            let mut m = Matrix::zeros(ids.len(), d_t);
            for (i, &t) in ids.iter().enumerate() {
                m.row_mut(i)
                    .copy_from_slice(self.token_embedding.row(t as usize));
            }
            m
        };
        let embedded = match (prefix, &tokens.prefix_slots) {
            (Some(p), Some(slots)) => {
                let pv = g.value(p);
                if pv.shape() != (slots.len(), d_t) {
                    return Err(Error::InputContract(format!(
                        "prefix embeddings are {:?}, slots need {}x{d_t}",
                        pv.shape(),
                        slots.len()
                    )));
                }
                let mut parts = Vec::with_capacity(3);
                if slots.start > 0 {
                    parts.push(g.input(rows_for(&tokens.ids[..slots.start])));
                }
                parts.push(p);
                if slots.end < tokens.len() {
                    parts.push(g.input(rows_for(&tokens.ids[slots.end..])));
                }
                g.concat_rows(&parts)
            }
            (Some(_), None) => {
                return Err(Error::InputContract(
                    "prefix embeddings given for a sequence without prefix slots".into(),
                ))
            }
            (None, _) => g.input(rows_for(&tokens.ids)),
        };
        let n = tokens.len();
        let pos = g.input(Matrix::from_vec(
            n,
            d_t,
            self.text_pos.data()[..n * d_t].to_vec(),
        ));
        let x = g.add(embedded, pos);
        let x = self.run_tower(g, Modality::Textual, x, hooks, None)?;
        Ok(self.pool(g, Modality::Textual, x, n - 1))
    }

    fn project<'a>(&'a self, g: &mut Graph<'a>, modality: Modality, pooled: Var) -> Var {
        let proj = g.constant(&self.tower(modality).proj);
        g.matmul(pooled, proj)
    }

    fn token_embedding(&self, token: u32) -> Matrix {
        Matrix::row_vector(self.token_embedding.row(token as usize).to_vec())
    }

    fn visual_activations(&self, frame: &[f32]) -> Result<Vec<LayerActivations>> {
        let mut g = Graph::new();
        let x = self.visual_stem(&mut g, frame)?;
        let mut trace = Vec::new();
        self.run_tower(&mut g, Modality::Visual, x, None, Some(&mut trace))?;
        Ok(trace)
    }

    fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out: Vec<(String, &Matrix)> = vec![
            ("visual.patch.weight".into(), &self.patch_w),
            ("visual.patch.bias".into(), &self.patch_b),
            ("visual.cls".into(), &self.cls),
            ("visual.pos".into(), &self.visual_pos),
            ("text.token_embedding".into(), &self.token_embedding),
            ("text.pos".into(), &self.text_pos),
        ];
        for (name, tower) in [("visual", &self.visual), ("text", &self.text)] {
            for (k, b) in tower.blocks.iter().enumerate() {
                let p = format!("{name}.layer{k}");
                out.push((format!("{p}.ln1.gamma"), &b.ln1_g));
                out.push((format!("{p}.ln1.beta"), &b.ln1_b));
                for (what, ws) in [("q", &b.wq), ("k", &b.wk), ("v", &b.wv)] {
                    for (h, w) in ws.iter().enumerate() {
                        out.push((format!("{p}.attn.{what}.head{h}"), w));
                    }
                }
                out.push((format!("{p}.attn.out.weight"), &b.wo));
                out.push((format!("{p}.attn.out.bias"), &b.bo));
                out.push((format!("{p}.ln2.gamma"), &b.ln2_g));
                out.push((format!("{p}.ln2.beta"), &b.ln2_b));
                out.push((format!("{p}.mlp.fc1.weight"), &b.w1));
                out.push((format!("{p}.mlp.fc1.bias"), &b.b1));
                out.push((format!("{p}.mlp.fc2.weight"), &b.w2));
                out.push((format!("{p}.mlp.fc2.bias"), &b.b2));
            }
            out.push((format!("{name}.ln_post.gamma"), &tower.ln_post_g));
            out.push((format!("{name}.ln_post.beta"), &tower.ln_post_b));
            out.push((format!("{name}.proj"), &tower.proj));
        }
        out
    }

    fn trainable_tensor_names(&self) -> Vec<String> {
        self.unfrozen.iter().cloned().collect()
    }
}
