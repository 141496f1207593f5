//! Batch objective: correlation term plus a pairwise rank hinge.
//!
//! ```text
//! loss = (1 − pearson(p, y)) / 2 + λ · mean_{i<j, y_i≠y_j} relu(−sign(y_i − y_j)·(p_i − p_j))
//! ```
//!
//! A batch of one has no correlation; it falls back to `|p − y|`.

use crate::error::{Error, Result};

/// Loss value and its gradient with respect to each prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad: Vec<f64>,
}

fn check(preds: &[f64], mos: &[f64]) -> Result<()> {
    if preds.is_empty() || preds.len() != mos.len() {
        return Err(Error::InputContract(format!(
            "loss needs equal nonempty batches, got {} predictions and {} labels",
            preds.len(),
            mos.len()
        )));
    }
    if preds.iter().chain(mos).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite prediction or label in batch".into()));
    }
    Ok(())
}

/// `(1 − r)/2` and its gradient. Zero-variance batches count as `r = 0`
/// and contribute no gradient.
fn correlation_term(p: &[f64], y: &[f64]) -> (f64, Vec<f64>) {
    let n = p.len() as f64;
    let mp = p.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let pc: Vec<f64> = p.iter().map(|v| v - mp).collect();
    let yc: Vec<f64> = y.iter().map(|v| v - my).collect();
    let spp: f64 = pc.iter().map(|v| v * v).sum();
    let syy: f64 = yc.iter().map(|v| v * v).sum();
    if spp <= 0.0 || syy <= 0.0 {
        return (0.5, vec![0.0; p.len()]);
    }
    let (a, b) = (spp.sqrt(), syy.sqrt());
    let r = pc.iter().zip(&yc).map(|(x, z)| x * z).sum::<f64>() / (a * b);
    let grad = pc
        .iter()
        .zip(&yc)
        .map(|(x, z)| -0.5 * (z / (a * b) - r * x / spp))
        .collect();
    ((1.0 - r) / 2.0, grad)
}

fn hinge_term(p: &[f64], y: &[f64]) -> (f64, Vec<f64>) {
    let n = p.len();
    let mut grad = vec![0.0; n];
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            if y[i] == y[j] {
                continue;
            }
            pairs += 1;
            let s = if y[i] > y[j] { 1.0 } else { -1.0 };
            let v = -s * (p[i] - p[j]);
            if v > 0.0 {
                total += v;
                grad[i] -= s;
                grad[j] += s;
            }
        }
    }
    if pairs == 0 {
        return (0.0, grad);
    }
    let k = pairs as f64;
    grad.iter_mut().for_each(|g| *g /= k);
    (total / k, grad)
}

pub fn batch_loss_with_grad(preds: &[f64], mos: &[f64], lambda: f64) -> Result<LossOutput> {
    check(preds, mos)?;
    if preds.len() == 1 {
        let d = preds[0] - mos[0];
        return Ok(LossOutput {
            value: d.abs(),
            grad: vec![d.signum() * f64::from(u8::from(d != 0.0))],
        });
    }
    let (c, gc) = correlation_term(preds, mos);
    let (h, gh) = if lambda != 0.0 {
        hinge_term(preds, mos)
    } else {
        (0.0, vec![0.0; preds.len()])
    };
    let value = c + lambda * h;
    if !value.is_finite() {
        return Err(Error::Numeric("loss is not finite".into()));
    }
    Ok(LossOutput {
        value,
        grad: gc.iter().zip(&gh).map(|(a, b)| a + lambda * b).collect(),
    })
}

pub fn batch_loss(preds: &[f64], mos: &[f64], lambda: f64) -> Result<f64> {
    batch_loss_with_grad(preds, mos, lambda).map(|o| o.value)
}
