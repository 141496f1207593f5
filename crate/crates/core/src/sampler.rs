//! Frame-difference motion profiles and frame-selection strategies.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::FrameSequence;
use crate::error::{Error, Result};

/// Longest side frames are reduced to before differencing.
pub const DEFAULT_PROFILE_MAX_SIDE: usize = 224;

/// Per-frame mean squared difference against adjacent frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionProfile {
    values: Vec<f64>,
}

impl MotionProfile {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::InputContract(format!(
                "motion values must be finite and nonnegative, found {v}"
            )));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

fn frame_mse(a: &[f32], b: &[f32]) -> f64 {
    let sum: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| {
            let d = f64::from(*x) - f64::from(*y);
            d * d
        })
        .sum();
    sum / a.len() as f64
}

/// `m_t = ½(MSE(v_t, v_{t+1}) + MSE(v_t, v_{t−1}))`; the first and last
/// frames use their single neighbour.
pub fn motion_profile(frames: &FrameSequence) -> Result<MotionProfile> {
    let n = frames.len();
    if n < 2 {
        return Err(Error::Contract(format!(
            "motion profile needs at least 2 frames, got {n}"
        )));
    }
    let diffs: Vec<f64> = (0..n - 1)
        .map(|i| frame_mse(frames.frame(i), frames.frame(i + 1)))
        .collect();
    let values = (0..n)
        .map(|t| match t {
            0 => diffs[0],
            t if t == n - 1 => diffs[n - 2],
            t => 0.5 * (diffs[t] + diffs[t - 1]),
        })
        .collect();
    Ok(MotionProfile { values })
}

/// [`motion_profile`] after downscaling to a longest side of `max_side`.
pub fn motion_profile_at(frames: &FrameSequence, max_side: usize) -> Result<MotionProfile> {
    motion_profile(&frames.with_max_side(max_side))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SamplingStrategy {
    RandSampl,
    UNISampl,
    UNIRandStart,
    MSESortedUNI,
    SegMSEMean,
    SegMSEMedian,
    Mixed,
}

impl SamplingStrategy {
    pub const ALL: [SamplingStrategy; 7] = [
        SamplingStrategy::RandSampl,
        SamplingStrategy::UNISampl,
        SamplingStrategy::UNIRandStart,
        SamplingStrategy::MSESortedUNI,
        SamplingStrategy::SegMSEMean,
        SamplingStrategy::SegMSEMedian,
        SamplingStrategy::Mixed,
    ];

    /// The strategies `Mixed` draws from.
    pub const BASE: [SamplingStrategy; 6] = [
        SamplingStrategy::RandSampl,
        SamplingStrategy::UNISampl,
        SamplingStrategy::UNIRandStart,
        SamplingStrategy::MSESortedUNI,
        SamplingStrategy::SegMSEMean,
        SamplingStrategy::SegMSEMedian,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SamplingStrategy::RandSampl => "RandSampl",
            SamplingStrategy::UNISampl => "UNISampl",
            SamplingStrategy::UNIRandStart => "UNIRandStart",
            SamplingStrategy::MSESortedUNI => "MSESortedUNI",
            SamplingStrategy::SegMSEMean => "SegMSEMean",
            SamplingStrategy::SegMSEMedian => "SegMSEMedian",
            SamplingStrategy::Mixed => "Mixed",
        }
    }

    pub fn needs_profile(self) -> bool {
        matches!(
            self,
            SamplingStrategy::MSESortedUNI
                | SamplingStrategy::SegMSEMean
                | SamplingStrategy::SegMSEMedian
                | SamplingStrategy::Mixed
        )
    }

    pub fn is_stochastic(self) -> bool {
        matches!(
            self,
            SamplingStrategy::RandSampl | SamplingStrategy::UNIRandStart | SamplingStrategy::Mixed
        )
    }
}

impl fmt::Display for SamplingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SamplingStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SamplingStrategy::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| {
                let names: Vec<_> = SamplingStrategy::ALL.iter().map(|k| k.as_str()).collect();
                Error::Config(format!(
                    "unknown sampling strategy '{s}' (expected one of {})",
                    names.join(", ")
                ))
            })
    }
}

fn check_count(n: usize, t: usize) -> Result<()> {
    if t == 0 || t > n {
        return Err(Error::InputContract(format!(
            "cannot sample {t} frames from {n}"
        )));
    }
    Ok(())
}

fn check_profile(profile: &MotionProfile, t: usize) -> Result<()> {
    check_count(profile.len(), t)
}

/// Position `floor((i + ½)·n / t)` for `i = 0…t−1`.
fn uniform_positions(n: usize, t: usize) -> Vec<usize> {
    (0..t).map(|i| (2 * i + 1) * n / (2 * t)).collect()
}

pub fn sample_uniform(n: usize, t: usize) -> Result<Vec<usize>> {
    check_count(n, t)?;
    Ok(uniform_positions(n, t))
}

/// `t` distinct indices drawn uniformly without replacement, sorted.
pub fn sample_random(n: usize, t: usize, seed: u64) -> Result<Vec<usize>> {
    check_count(n, t)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = index::sample(&mut rng, n, t).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Equal spans of length `n/t`, one shared offset `u ∈ [0, n/t)`:
/// index `i` is `floor(i·n/t + u)`.
pub fn sample_uniform_random_start(n: usize, t: usize, seed: u64) -> Result<Vec<usize>> {
    check_count(n, t)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let span = n as f64 / t as f64;
    let u = rng.random::<f64>() * span;
    Ok((0..t)
        .map(|i| {
            let x = (i as f64 * span + u).floor() as usize;
            // Guard against rounding at the span boundary.
            x.clamp(i * n / t, ((i + 1) * n).div_ceil(t) - 1).min(n - 1)
        })
        .collect())
}

/// Orders frames by descending motion (ties by index), takes the uniform
/// positions of that ordering, and returns them in index order.
pub fn sample_mse_sorted_uniform(profile: &MotionProfile, t: usize) -> Result<Vec<usize>> {
    check_profile(profile, t)?;
    let m = profile.values();
    let mut order: Vec<usize> = (0..m.len()).collect();
    order.sort_by(|&a, &b| m[b].total_cmp(&m[a]).then(a.cmp(&b)));
    let mut idx: Vec<usize> = uniform_positions(m.len(), t)
        .into_iter()
        .map(|p| order[p])
        .collect();
    idx.sort_unstable();
    Ok(idx)
}

/// Contiguous segments; the first `n mod t` get one extra frame.
fn segments(n: usize, t: usize) -> Vec<std::ops::Range<usize>> {
    let base = n / t;
    let extra = n % t;
    let mut start = 0;
    (0..t)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

fn closest_in_segment(m: &[f64], seg: std::ops::Range<usize>, target: f64) -> usize {
    let mut best = seg.start;
    for i in seg {
        if (m[i] - target).abs() < (m[best] - target).abs() {
            best = i;
        }
    }
    best
}

fn segment_select(profile: &MotionProfile, t: usize, stat: fn(&[f64]) -> f64) -> Result<Vec<usize>> {
    check_profile(profile, t)?;
    let m = profile.values();
    Ok(segments(m.len(), t)
        .into_iter()
        .map(|seg| {
            let target = stat(&m[seg.clone()]);
            closest_in_segment(m, seg, target)
        })
        .collect())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Per segment, the frame whose motion is closest to the segment mean.
pub fn sample_seg_mse_mean(profile: &MotionProfile, t: usize) -> Result<Vec<usize>> {
    segment_select(profile, t, mean)
}

/// Per segment, the frame whose motion is closest to the segment median.
pub fn sample_seg_mse_median(profile: &MotionProfile, t: usize) -> Result<Vec<usize>> {
    segment_select(profile, t, median)
}

/// Draws one base strategy uniformly and delegates to it.
pub fn sample_mixed(
    n: usize,
    t: usize,
    profile: &MotionProfile,
    seed: u64,
) -> Result<(SamplingStrategy, Vec<usize>)> {
    check_count(n, t)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen = SamplingStrategy::BASE[rng.random_range(0..SamplingStrategy::BASE.len())];
    let sub_seed = rng.random::<u64>();
    let idx = sample_base(chosen, n, t, Some(profile), sub_seed)?;
    Ok((chosen, idx))
}

fn sample_base(
    strategy: SamplingStrategy,
    n: usize,
    t: usize,
    profile: Option<&MotionProfile>,
    seed: u64,
) -> Result<Vec<usize>> {
    let need = || {
        let p = profile.ok_or_else(|| {
            Error::Contract(format!("{strategy} needs a motion profile"))
        })?;
        if p.len() != n {
            return Err(Error::InputContract(format!(
                "motion profile has {} values for {n} frames",
                p.len()
            )));
        }
        Ok(p)
    };
    match strategy {
        SamplingStrategy::RandSampl => sample_random(n, t, seed),
        SamplingStrategy::UNISampl => sample_uniform(n, t),
        SamplingStrategy::UNIRandStart => sample_uniform_random_start(n, t, seed),
        SamplingStrategy::MSESortedUNI => sample_mse_sorted_uniform(need()?, t),
        SamplingStrategy::SegMSEMean => sample_seg_mse_mean(need()?, t),
        SamplingStrategy::SegMSEMedian => sample_seg_mse_median(need()?, t),
        SamplingStrategy::Mixed => sample_mixed(n, t, need()?, seed).map(|(_, i)| i),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingPlan {
    pub strategy: SamplingStrategy,
    pub target_count: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    /// Strategy that produced the indices (the drawn one for `Mixed`).
    pub strategy: SamplingStrategy,
    pub indices: Vec<usize>,
    /// Set when the video had fewer frames than requested and indices wrap.
    pub repeated: bool,
}

impl SamplingPlan {
    pub fn new(strategy: SamplingStrategy, target_count: usize, seed: u64) -> Self {
        Self {
            strategy,
            target_count,
            seed,
        }
    }

    /// Selects `target_count` frames out of `n`. Videos shorter than the
    /// target repeat their frames cyclically and are flagged.
    pub fn sample(&self, n: usize, profile: Option<&MotionProfile>) -> Result<Sample> {
        let t = self.target_count;
        if t == 0 {
            return Err(Error::Config("frames per video must be positive".into()));
        }
        if n == 0 {
            return Err(Error::InputContract("video has no frames".into()));
        }
        if n < t {
            return Ok(Sample {
                strategy: self.strategy,
                indices: (0..t).map(|i| i % n).collect(),
                repeated: true,
            });
        }
        let (strategy, indices) = match self.strategy {
            SamplingStrategy::Mixed => {
                let p = profile.ok_or_else(|| Error::Contract("Mixed needs a motion profile".into()))?;
                if p.len() != n {
                    return Err(Error::InputContract(format!(
                        "motion profile has {} values for {n} frames",
                        p.len()
                    )));
                }
                sample_mixed(n, t, p, self.seed)?
            }
            s => (s, sample_base(s, n, t, profile, self.seed)?),
        };
        Ok(Sample {
            strategy,
            indices,
            repeated: false,
        })
    }
}
