//! Correlation metrics and the repeated train/test split protocol.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_pair(x: &[f64], y: &[f64], min: usize) -> Result<()> {
    if x.len() != y.len() || x.len() < min {
        return Err(Error::InputContract(format!(
            "metric needs two equal-length inputs of at least {min} values, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("metric input is not finite".into()));
    }
    Ok(())
}

/// 1-based ranks with ties given the average of the ranks they span.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn plcc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y, 2)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Numeric("correlation undefined for a constant input".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

pub fn srocc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y, 2)?;
    plcc(&average_ranks(x), &average_ranks(y))
}

/// Kendall tau-b.
pub fn krocc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y, 2)?;
    let n = x.len();
    let (mut conc, mut disc, mut tx, mut ty) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let dx = x[i] - x[j];
            let dy = y[i] - y[j];
            match (dx == 0.0, dy == 0.0) {
                (true, true) => {}
                (true, false) => tx += 1,
                (false, true) => ty += 1,
                (false, false) => {
                    if (dx > 0.0) == (dy > 0.0) {
                        conc += 1;
                    } else {
                        disc += 1;
                    }
                }
            }
        }
    }
    let denom = (((conc + disc + tx) as f64) * ((conc + disc + ty) as f64)).sqrt();
    if denom == 0.0 {
        return Err(Error::Numeric("Kendall tau undefined for all-tied input".into()));
    }
    Ok((conc - disc) as f64 / denom)
}

pub fn rmse(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y, 1)?;
    let mse = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64;
    Ok(mse.sqrt())
}

/// Parameters of `f(x) = (b1 − b2) / (1 + exp(−(x − b3)/|b4|)) + b2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Logistic4 {
    pub b1: f64,
    pub b2: f64,
    pub b3: f64,
    pub b4: f64,
}

impl Logistic4 {
    pub fn eval(&self, x: f64) -> f64 {
        (self.b1 - self.b2) / (1.0 + (-(x - self.b3) / self.b4.abs().max(1e-12)).exp()) + self.b2
    }

    fn to_vec(self) -> [f64; 4] {
        [self.b1, self.b2, self.b3, self.b4]
    }

    fn from_slice(p: &[f64; 4]) -> Self {
        Self {
            b1: p[0],
            b2: p[1],
            b3: p[2],
            b4: p[3],
        }
    }

    /// Least-squares fit of `y ≈ f(x)` by Levenberg–Marquardt.
    pub fn fit(x: &[f64], y: &[f64]) -> Result<Self> {
        check_pair(x, y, 4)?;
        let (ymin, ymax) = min_max(y);
        let (xmin, xmax) = min_max(x);
        let mean_x = x.iter().sum::<f64>() / x.len() as f64;
        let spread = ((xmax - xmin) / 4.0).max(1e-6);
        let mut p = [ymax, ymin, mean_x, spread];
        let sse = |p: &[f64; 4]| -> f64 {
            let f = Logistic4::from_slice(p);
            x.iter().zip(y).map(|(a, b)| (f.eval(*a) - b).powi(2)).sum()
        };
        let mut cost = sse(&p);
        let mut mu = 1e-3;
        for _ in 0..200 {
            let f = Logistic4::from_slice(&p);
            let mut jtj = [[0.0; 4]; 4];
            let mut jtr = [0.0; 4];
            for (&a, &b) in x.iter().zip(y) {
                let r = f.eval(a) - b;
                let mut jrow = [0.0; 4];
                for k in 0..4 {
                    let h = 1e-7 * p[k].abs().max(1e-3);
                    let mut q = p;
                    q[k] += h;
                    jrow[k] = (Logistic4::from_slice(&q).eval(a) - f.eval(a)) / h;
                }
                for i in 0..4 {
                    jtr[i] += jrow[i] * r;
                    for j in 0..4 {
                        jtj[i][j] += jrow[i] * jrow[j];
                    }
                }
            }
            let mut improved = false;
            for _ in 0..20 {
                let mut a = jtj;
                for (i, row) in a.iter_mut().enumerate() {
                    row[i] += mu * (1.0 + row[i]);
                }
                let Some(step) = solve4(a, jtr) else {
                    mu *= 10.0;
                    continue;
                };
                let mut q = p;
                for k in 0..4 {
                    q[k] -= step[k];
                }
                let c = sse(&q);
                if c.is_finite() && c < cost {
                    let rel = (cost - c) / cost.max(1e-300);
                    p = q;
                    cost = c;
                    mu = (mu / 10.0).max(1e-12);
                    improved = rel > 1e-12;
                    break;
                }
                mu *= 10.0;
            }
            if !improved {
                break;
            }
        }
        let fit = Logistic4::from_slice(&p);
        if fit.to_vec().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("logistic fit diverged".into()));
        }
        Ok(fit)
    }
}

fn min_max(v: &[f64]) -> (f64, f64) {
    v.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

fn solve4(mut a: [[f64; 4]; 4], mut b: [f64; 4]) -> Option<[f64; 4]> {
    for col in 0..4 {
        let piv = (col..4).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..4 {
            let f = a[r][col] / a[col][col];
            for c in col..4 {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = [0.0; 4];
    for r in (0..4).rev() {
        let s: f64 = (r + 1..4).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    Some(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub srocc: f64,
    pub plcc: f64,
    pub krocc: f64,
    pub rmse: f64,
}

/// All four metrics of `pred` against `mos`. With `logistic`, PLCC and RMSE
/// are computed after a four-parameter logistic mapping of `pred`.
pub fn compute_metrics(pred: &[f64], mos: &[f64], logistic: bool) -> Result<Metrics> {
    let mapped;
    let fitted = if logistic {
        let f = Logistic4::fit(pred, mos)?;
        mapped = pred.iter().map(|&p| f.eval(p)).collect::<Vec<_>>();
        &mapped[..]
    } else {
        pred
    };
    Ok(Metrics {
        srocc: srocc(pred, mos)?,
        plcc: plcc(fitted, mos)?,
        krocc: krocc(pred, mos)?,
        rmse: rmse(fitted, mos)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub seed: u64,
    pub srocc: f64,
    pub plcc: f64,
    pub krocc: f64,
    pub rmse: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitFailure {
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub srocc: f64,
    pub plcc: f64,
    pub krocc: f64,
    pub rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub splits: Vec<SplitRecord>,
    pub failures: Vec<SplitFailure>,
    pub mean: MetricSummary,
    /// Sample standard deviation (zero for a single split).
    pub std: MetricSummary,
}

impl EvalReport {
    pub fn from_splits(splits: Vec<SplitRecord>, failures: Vec<SplitFailure>) -> Result<Self> {
        if splits.is_empty() {
            return Err(Error::Numeric(format!(
                "no split completed ({} failed)",
                failures.len()
            )));
        }
        let pick: [fn(&SplitRecord) -> f64; 4] = [|r| r.srocc, |r| r.plcc, |r| r.krocc, |r| r.rmse];
        let n = splits.len() as f64;
        let mut mean = [0.0; 4];
        let mut std = [0.0; 4];
        for (k, f) in pick.iter().enumerate() {
            let vals: Vec<f64> = splits.iter().map(f).collect();
            let m = vals.iter().sum::<f64>() / n;
            mean[k] = m;
            std[k] = if splits.len() > 1 {
                (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
        }
        let summary = |a: [f64; 4]| MetricSummary {
            srocc: a[0],
            plcc: a[1],
            krocc: a[2],
            rmse: a[3],
        };
        Ok(Self {
            splits,
            failures,
            mean: summary(mean),
            std: summary(std),
        })
    }

    /// Plain-text table, one line per split plus mean and std.
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:>20} {:>8} {:>8} {:>8} {:>8} {:>5}\n",
            "seed", "SROCC", "PLCC", "KROCC", "RMSE", "n"
        );
        for r in &self.splits {
            s += &format!(
                "{:>20} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>5}\n",
                r.seed, r.srocc, r.plcc, r.krocc, r.rmse, r.n
            );
        }
        for (label, m) in [("mean", &self.mean), ("std", &self.std)] {
            s += &format!(
                "{:>20} {:>8.4} {:>8.4} {:>8.4} {:>8.4}\n",
                label, m.srocc, m.plcc, m.krocc, m.rmse
            );
        }
        for f in &self.failures {
            s += &format!("split {} failed: {}\n", f.seed, f.error);
        }
        s
    }
}

/// Disjoint train/test indices over `0..n` with `|train| = round(n·f)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub seed: u64,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn make_split(n: usize, train_fraction: f64, seed: u64) -> Result<Split> {
    if n == 0 {
        return Err(Error::InputContract("cannot split an empty dataset".into()));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train_fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let k = ((n as f64 * train_fraction).round() as usize).min(n);
    let mut train = idx[..k].to_vec();
    let mut test = idx[k..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok(Split { seed, train, test })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitProtocol {
    pub num_splits: usize,
    pub train_fraction: f64,
    /// Explicit split seeds; `0..num_splits` when absent.
    pub seeds: Option<Vec<u64>>,
    pub logistic_fit: bool,
}

impl Default for SplitProtocol {
    fn default() -> Self {
        Self {
            num_splits: 10,
            train_fraction: 0.8,
            seeds: None,
            logistic_fit: false,
        }
    }
}

impl SplitProtocol {
    pub fn split_seeds(&self) -> Vec<u64> {
        match &self.seeds {
            Some(s) => s.clone(),
            None => (0..self.num_splits as u64).collect(),
        }
    }
}

/// Runs `train_and_predict` on each split and aggregates test metrics.
/// The closure returns `(predictions, labels)` for the test items. Failed
/// splits are recorded and excluded from the aggregate.
pub fn run_split_protocol<F>(n: usize, protocol: &SplitProtocol, mut train_and_predict: F) -> Result<EvalReport>
where
    F: FnMut(&Split) -> Result<(Vec<f64>, Vec<f64>)>,
{
    if n == 0 {
        return Err(Error::InputContract("split protocol on an empty dataset".into()));
    }
    let mut splits = Vec::new();
    let mut failures = Vec::new();
    for seed in protocol.split_seeds() {
        let split = make_split(n, protocol.train_fraction, seed)?;
        let outcome = train_and_predict(&split).and_then(|(pred, mos)| {
            let m = compute_metrics(&pred, &mos, protocol.logistic_fit)?;
            Ok(SplitRecord {
                seed,
                srocc: m.srocc,
                plcc: m.plcc,
                krocc: m.krocc,
                rmse: m.rmse,
                n: pred.len(),
            })
        });
        match outcome {
            Ok(r) => splits.push(r),
            Err(e) => {
                log::warn!("split {seed} failed: {e}");
                failures.push(SplitFailure {
                    seed,
                    error: e.to_string(),
                });
            }
        }
    }
    if !failures.is_empty() {
        log::warn!(
            "aggregate computed over {} of {} splits",
            splits.len(),
            splits.len() + failures.len()
        );
    }
    EvalReport::from_splits(splits, failures)
}
