//! Similarity-weighted quality regression.
//!
//! `s_k = cos(V, t_k)` for every prompt embedding, then `Q = Σ_k w_k s_k`.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamRole, ParamStore};
use crate::prompt::QualityLevel;
use crate::tensor::{dot, norm, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    /// Apply a softmax over the level scores before weighting.
    pub softmax: bool,
    /// Score range the initial weights are spread over, best level at `hi`.
    pub mos_range: Option<(f64, f64)>,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            softmax: false,
            mos_range: None,
        }
    }
}

pub const DEFAULT_MOS_RANGE: (f64, f64) = (1.0, 5.0);

/// Cosine similarity between the video embedding and each prompt embedding.
pub fn level_scores(video: &[f64], prompts: &[&[f64]]) -> Result<Vec<f64>> {
    let nv = norm(video);
    if nv == 0.0 {
        return Err(Error::Numeric("zero-norm video embedding".into()));
    }
    prompts
        .iter()
        .map(|t| {
            if t.len() != video.len() {
                return Err(Error::InputContract(format!(
                    "prompt width {} does not match video width {}",
                    t.len(),
                    video.len()
                )));
            }
            let nt = norm(t);
            if nt == 0.0 {
                return Err(Error::Numeric("zero-norm prompt embedding".into()));
            }
            Ok((dot(t, video) / (nt * nv)).clamp(-1.0, 1.0))
        })
        .collect()
}

/// `Σ_k w_k s_k`.
pub fn predict_quality(scores: &[f64], weights: &[f64]) -> f64 {
    dot(scores, weights)
}

#[derive(Debug, Clone)]
pub struct QualityHead {
    weights: ParamId,
    softmax: bool,
}

impl QualityHead {
    /// One weight per level, initialized to `lo + anchor · (hi − lo)`.
    pub fn build(config: &HeadConfig, levels: &[QualityLevel], store: &mut ParamStore) -> Result<Self> {
        let (lo, hi) = config.mos_range.unwrap_or(DEFAULT_MOS_RANGE);
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::Config(format!("invalid MOS range [{lo}, {hi}]")));
        }
        // With only two levels the anchors span the whole range.
        let anchors: Vec<f64> = if levels.len() == 2 {
            vec![1.0, 0.0]
        } else {
            levels.iter().map(|l| l.anchor()).collect()
        };
        let w = anchors.iter().map(|a| lo + a * (hi - lo)).collect();
        let weights = store.add("head.weights", ParamRole::HeadWeight, Matrix::row_vector(w));
        Ok(Self {
            weights,
            softmax: config.softmax,
        })
    }

    pub fn weights_id(&self) -> ParamId {
        self.weights
    }

    pub fn weights<'s>(&self, store: &'s ParamStore) -> &'s [f64] {
        store.get(self.weights).data()
    }

    pub fn num_levels(&self, store: &ParamStore) -> usize {
        store.get(self.weights).len()
    }

    /// Returns `(Q, [s_k])` on the graph.
    pub fn forward<'a>(&self, g: &mut Graph<'a>, video: Var, prompts: &[Var]) -> Result<(Var, Vec<Var>)> {
        let w = g.param(self.weights);
        if g.value(w).len() != prompts.len() {
            return Err(Error::Contract(format!(
                "head has {} weights for {} prompts",
                g.value(w).len(),
                prompts.len()
            )));
        }
        let scores = prompts
            .iter()
            .map(|&t| g.cosine(video, t))
            .collect::<Result<Vec<_>>>()?;
        let mut s = g.concat_cols(&scores);
        if self.softmax {
            s = g.softmax_rows(s);
        }
        Ok((g.dot(s, w), scores))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_cases() {
        let v = [1.0, 0.0];
        let s = level_scores(&v, &[&[1.0, 0.0], &[0.0, 2.0], &[1.0, 1.0]]).unwrap();
        assert_eq!(s[0], 1.0);
        assert_eq!(s[1], 0.0);
        assert!((s[2] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!(matches!(level_scores(&[0.0, 0.0], &[&[1.0, 0.0]]), Err(Error::Numeric(_))));
        assert!(matches!(level_scores(&v, &[&[0.0, 0.0]]), Err(Error::Numeric(_))));
    }

    #[test]
    fn weighted_sum_cases() {
        let s = [0.9, 0.8, 0.5, 0.2, 0.1];
        assert!((predict_quality(&s, &[5.0, 4.0, 3.0, 2.0, 1.0]) - 9.7).abs() < 1e-12);
        assert_eq!(predict_quality(&s, &[0.0; 5]), 0.0);
        assert_eq!(predict_quality(&s, &[0.0, 1.0, 0.0, 0.0, 0.0]), 0.8);
    }

    #[test]
    fn weights_start_at_scaled_anchors() {
        let mut store = ParamStore::new();
        let cfg = HeadConfig {
            mos_range: Some((0.0, 100.0)),
            ..HeadConfig::default()
        };
        let h = QualityHead::build(&cfg, &QualityLevel::ALL, &mut store).unwrap();
        assert_eq!(h.weights(&store), &[100.0, 75.0, 50.0, 25.0, 0.0]);
        let h2 = QualityHead::build(
            &HeadConfig::default(),
            &[QualityLevel::Good, QualityLevel::Bad],
            &mut ParamStore::new(),
        );
        assert!(h2.is_ok());
    }

    #[test]
    fn graph_forward_matches_plain_functions() {
        let mut store = ParamStore::new();
        let h = QualityHead::build(&HeadConfig::default(), &QualityLevel::ALL, &mut store).unwrap();
        let v = Matrix::row_vector(vec![0.3, -1.0, 2.0]);
        let ts: Vec<Matrix> = (0..5)
            .map(|k| Matrix::row_vector(vec![k as f64 - 2.0, 1.0, 0.5 * k as f64]))
            .collect();
        let mut g = Graph::with_params(&store);
        let vv = g.constant(&v);
        let tv: Vec<Var> = ts.iter().map(|t| g.constant(t)).collect();
        let (q, _) = h.forward(&mut g, vv, &tv).unwrap();
        let rows: Vec<&[f64]> = ts.iter().map(|t| t.data()).collect();
        let s = level_scores(v.data(), &rows).unwrap();
        let expect = predict_quality(&s, h.weights(&store));
        assert!((g.value(q).get(0, 0) - expect).abs() < 1e-12);
    }
}
