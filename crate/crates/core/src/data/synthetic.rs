//! Procedural toy dataset: moving patterns with graded blur and noise.
//!
//! Scenes share one palette (small per-clip jitter) and a narrow grating
//! frequency band, so degradation dominates the variation between clips.
//!
//! Clip `i` gets degradation level `i mod L` of `L = 8` levels, with
//! `d = level / (L − 1)`. Each frame receives Gaussian noise of standard
//! deviation `NOISE · d` and then a Gaussian blur of sigma `BLUR · d`. The
//! label is `MOS = 1 + 4(1 − d)`.

use std::fs;
use std::path::{Path, PathBuf};

use image::{imageops, ImageBuffer, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::manifest::{DatasetManifest, ManifestRow};
use crate::error::{Error, Result};

pub const LEVELS: usize = 8;
pub const FRAMES_PER_CLIP: usize = 16;
pub const CLIP_SIZE: u32 = 32;
const NOISE: f64 = 0.12;
const BLUR: f64 = 2.0;
const COLOR_JITTER: f64 = 0.05;
const BACKGROUND: [f64; 3] = [0.15, 0.2, 0.25];
const ACCENT: [f64; 3] = [0.85, 0.8, 0.7];
const SQUARE: [f64; 3] = [0.9, 0.3, 0.2];

pub fn degradation(level: usize) -> f64 {
    level as f64 / (LEVELS - 1) as f64
}

pub fn mos_for_level(level: usize) -> f64 {
    1.0 + 4.0 * (1.0 - degradation(level))
}

struct Scene {
    background: [f64; 3],
    accent: [f64; 3],
    freq: f64,
    angle: f64,
    phase_speed: f64,
    square: usize,
    pos: (f64, f64),
    vel: (f64, f64),
    square_color: [f64; 3],
}

impl Scene {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let mut color = |base: [f64; 3]| base.map(|b| b + rng.random_range(-COLOR_JITTER..COLOR_JITTER));
        let background = color(BACKGROUND);
        let accent = color(ACCENT);
        let square_color = color(SQUARE);
        Self {
            background,
            accent,
            square_color,
            freq: rng.random_range(1.4..1.8),
            angle: rng.random_range(0.0..std::f64::consts::PI),
            phase_speed: rng.random_range(0.2..0.6),
            square: rng.random_range(6..12),
            pos: (rng.random_range(0.0..20.0), rng.random_range(0.0..20.0)),
            vel: (rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)),
        }
    }

    fn render(&self, t: usize) -> Vec<f64> {
        let n = CLIP_SIZE as usize;
        let (ca, sa) = (self.angle.cos(), self.angle.sin());
        let phase = self.phase_speed * t as f64;
        let span = (n - self.square) as f64;
        let wrap = |p: f64| {
            let m = p.rem_euclid(2.0 * span);
            if m > span {
                2.0 * span - m
            } else {
                m
            }
        };
        let sx = wrap(self.pos.0 + self.vel.0 * t as f64) as usize;
        let sy = wrap(self.pos.1 + self.vel.1 * t as f64) as usize;
        let mut out = vec![0.0; n * n * 3];
        for y in 0..n {
            for x in 0..n {
                let u = (x as f64 * ca + y as f64 * sa) * self.freq + phase;
                let a = 0.5 + 0.5 * u.sin();
                let inside = (sx..sx + self.square).contains(&x) && (sy..sy + self.square).contains(&y);
                for c in 0..3 {
                    out[(y * n + x) * 3 + c] = if inside {
                        self.square_color[c]
                    } else {
                        self.background[c] * (1.0 - a) + self.accent[c] * a
                    };
                }
            }
        }
        out
    }
}

fn degrade(frame: &[f64], d: f64, rng: &mut ChaCha8Rng) -> RgbImage {
    let n = CLIP_SIZE;
    let noisy: Vec<f32> = if d > 0.0 {
        let normal = Normal::new(0.0, NOISE * d).expect("valid noise std");
        frame
            .iter()
            .map(|&v| (v + normal.sample(rng)).clamp(0.0, 1.0) as f32)
            .collect()
    } else {
        frame.iter().map(|&v| v as f32).collect()
    };
    let img: ImageBuffer<Rgb<f32>, Vec<f32>> = ImageBuffer::from_raw(n, n, noisy).expect("frame buffer size");
    let blurred = if d > 0.0 {
        imageops::blur(&img, (BLUR * d) as f32)
    } else {
        img
    };
    let bytes = blurred
        .into_raw()
        .into_iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    RgbImage::from_raw(n, n, bytes).expect("frame buffer size")
}

/// Writes `n_clips` PNG-directory clips and `manifest.csv` under `out_dir`.
pub fn make_synthetic_dataset(out_dir: &Path, n_clips: usize, seed: u64) -> Result<DatasetManifest> {
    if n_clips == 0 {
        return Err(Error::Config("n_clips must be positive".into()));
    }
    fs::create_dir_all(out_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(n_clips);
    for i in 0..n_clips {
        let level = i % LEVELS;
        let d = degradation(level);
        let scene = Scene::random(&mut rng);
        let id = format!("clip_{i:03}");
        let dir = out_dir.join(&id);
        fs::create_dir_all(&dir)?;
        for t in 0..FRAMES_PER_CLIP {
            let img = degrade(&scene.render(t), d, &mut rng);
            let path = dir.join(format!("frame_{t:03}.png"));
            img.save(&path)
                .map_err(|e| Error::ingestion(&path, format!("cannot write frame: {e}")))?;
        }
        rows.push(ManifestRow {
            video_id: id.clone(),
            path: PathBuf::from(&id),
            mos: mos_for_level(level),
            duration: None,
            fps: None,
        });
    }
    let manifest = DatasetManifest::new("toy", (1.0, 5.0), rows, out_dir)?;
    manifest.write(&out_dir.join("manifest.csv"))?;
    Ok(manifest)
}
