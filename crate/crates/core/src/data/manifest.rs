//! Dataset manifests: a CSV of `video_id,path,mos[,duration,fps]`.
//!
//! Optional leading comment lines declare dataset metadata:
//!
//! ```text
//! # dataset: toy
//! # mos_range: 1, 5
//! video_id,path,mos
//! clip_000,clip_000,5.0
//! ```
//!
//! Relative paths resolve against the manifest's directory.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub video_id: String,
    pub path: PathBuf,
    pub mos: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fps: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    pub mos_range: (f64, f64),
    pub rows: Vec<ManifestRow>,
    /// Directory relative paths resolve against.
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    /// Builds and validates a manifest.
    pub fn new(
        name: impl Into<String>,
        mos_range: (f64, f64),
        rows: Vec<ManifestRow>,
        base_dir: impl Into<PathBuf>,
    ) -> Result<Self> {
        let m = Self {
            name: name.into(),
            mos_range,
            rows,
            base_dir: base_dir.into(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn resolve(&self, row: &ManifestRow) -> PathBuf {
        if row.path.is_absolute() {
            row.path.clone()
        } else {
            self.base_dir.join(&row.path)
        }
    }

    pub fn mos(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.mos).collect()
    }

    /// Sub-manifest of the rows at `indices`.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            name: self.name.clone(),
            mos_range: self.mos_range,
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
            base_dir: self.base_dir.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Error::Manifest(format!("{}: {msg}", self.name));
        let (lo, hi) = self.mos_range;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(bad(format!("invalid MOS range [{lo}, {hi}]")));
        }
        let mut seen = HashSet::new();
        for r in &self.rows {
            if r.video_id.is_empty() {
                return Err(bad("empty video_id".into()));
            }
            if !seen.insert(r.video_id.as_str()) {
                return Err(bad(format!("duplicate video_id '{}'", r.video_id)));
            }
            if !(r.mos.is_finite() && r.mos >= lo && r.mos <= hi) {
                return Err(bad(format!(
                    "MOS {} of '{}' lies outside [{lo}, {hi}]",
                    r.mos, r.video_id
                )));
            }
        }
        Ok(())
    }

    /// Rows whose resolved path does not exist.
    pub fn missing_paths(&self) -> Vec<&ManifestRow> {
        self.rows.iter().filter(|r| !self.resolve(r).exists()).collect()
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Manifest(format!("cannot read {}: {e}", path.display())))?;
        let mut name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into());
        let mut range = None;
        let mut body_start = 0;
        for line in text.split_inclusive('\n') {
            let trimmed = line.trim();
            if let Some(meta) = trimmed.strip_prefix('#') {
                if let Some((k, v)) = meta.split_once(':') {
                    match k.trim() {
                        "dataset" => name = v.trim().to_string(),
                        "mos_range" => range = Some(parse_range(v)?),
                        _ => {}
                    }
                }
            } else if !trimmed.is_empty() {
                break;
            }
            body_start += line.len();
        }
        let body = &text[body_start..];
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(body.as_bytes());
        let headers = reader.headers()?.clone();
        for required in ["video_id", "path", "mos"] {
            if !headers.iter().any(|h| h == required) {
                return Err(Error::Manifest(format!(
                    "{}: header lacks column '{required}'",
                    path.display()
                )));
            }
        }
        let rows = reader
            .deserialize()
            .collect::<std::result::Result<Vec<ManifestRow>, _>>()
            .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        let mos_range = match range {
            Some(r) => r,
            None => {
                let lo = rows.iter().map(|r| r.mos).fold(f64::INFINITY, f64::min);
                let hi = rows.iter().map(|r| r.mos).fold(f64::NEG_INFINITY, f64::max);
                if lo < hi {
                    (lo, hi)
                } else {
                    (lo - 1.0, lo + 1.0)
                }
            }
        };
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::new(name, mos_range, rows, base_dir)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = format!(
            "# dataset: {}\n# mos_range: {}, {}\n",
            self.name, self.mos_range.0, self.mos_range.1
        );
        let mut w = csv::Writer::from_writer(Vec::new());
        let extended = self.rows.iter().any(|r| r.duration.is_some() || r.fps.is_some());
        if extended {
            w.write_record(["video_id", "path", "mos", "duration", "fps"])?;
        } else {
            w.write_record(["video_id", "path", "mos"])?;
        }
        for r in &self.rows {
            let mut rec = vec![r.video_id.clone(), r.path.to_string_lossy().into_owned(), r.mos.to_string()];
            if extended {
                rec.push(r.duration.map(|v| v.to_string()).unwrap_or_default());
                rec.push(r.fps.map(|v| v.to_string()).unwrap_or_default());
            }
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        out.push_str(&String::from_utf8_lossy(&bytes));
        fs::write(path, out)?;
        Ok(())
    }
}

fn parse_range(v: &str) -> Result<(f64, f64)> {
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    let parse = |s: &str| {
        s.parse::<f64>()
            .map_err(|_| Error::Manifest(format!("invalid mos_range '{}'", v.trim())))
    };
    match parts.as_slice() {
        [a, b] => Ok((parse(a)?, parse(b)?)),
        _ => Err(Error::Manifest(format!("invalid mos_range '{}'", v.trim()))),
    }
}
