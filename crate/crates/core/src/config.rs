//! Flat `key = value` configuration files.
//!
//! ```text
//! # comment
//! backbone.kind = tiny
//! scma.bottleneck_dim = 8
//! scma.adapted_layers = [2, 3]
//! train.sampling = Mixed
//! data.manifest = "toy/manifest.csv"
//! ```
//!
//! Dotted keys build nested sections. Values are booleans, numbers, `[a, b]`
//! lists, `null`, or strings (quotes optional). Unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::backbone::BackboneConfig;
use crate::data::DecodeConfig;
use crate::error::{Error, Result};
use crate::evaluation::SplitProtocol;
use crate::head::HeadConfig;
use crate::model::ModelConfig;
use crate::prompt::PromptConfig;
use crate::scma::ScmaConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub manifest: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub decode: DecodeConfig,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub backbone: BackboneConfig,
    pub scma: ScmaConfig,
    pub prompt: PromptConfig,
    pub head: HeadConfig,
    pub init_seed: u64,
    pub train: TrainConfig,
    pub eval: SplitProtocol,
    pub data: DataConfig,
}

impl ExperimentConfig {
    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.clone(),
            scma: self.scma.clone(),
            prompt: self.prompt.clone(),
            head: self.head.clone(),
            init_seed: self.init_seed,
        }
    }

    /// Tiny backbone, toy training settings and a 3-split protocol over
    /// the manifest at `manifest`.
    pub fn toy(manifest: impl Into<PathBuf>) -> Self {
        Self {
            train: TrainConfig::toy(),
            eval: SplitProtocol {
                num_splits: 3,
                ..SplitProtocol::default()
            },
            data: DataConfig {
                manifest: Some(manifest.into()),
                ..DataConfig::default()
            },
            ..Self::default()
        }
    }

    /// Flat `key = value` text that [`Self::parse`] reads back unchanged.
    pub fn to_text(&self) -> Result<String> {
        let mut lines = Vec::new();
        flatten(&serde_json::to_value(self)?, "", &mut lines);
        Ok(lines.join("\n") + "\n")
    }

    /// Parses config text with `overrides` (`key=value`) applied on top.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut tree = Value::Object(Map::new());
        let mut seen = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = strip_comment(line).trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            let key = k.trim();
            if seen.iter().any(|s| s == key) {
                return Err(Error::Config(format!("line {}: duplicate key '{key}'", lineno + 1)));
            }
            seen.push(key.to_string());
            insert(&mut tree, key, parse_value(v.trim()))?;
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{o}' is not key=value")))?;
            let key = k.trim();
            remove(&mut tree, key);
            insert(&mut tree, key, parse_value(v.trim()))?;
        }
        let cfg: Self = serde_json::from_value(tree.clone())
            .map_err(|e| Error::Config(format!("invalid configuration: {e}")))?;
        let known = serde_json::to_value(&cfg)?;
        check_known(&tree, &known, "")?;
        cfg.scma.validate(&cfg.backbone.spec)?;
        cfg.backbone.spec.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    /// Reads a config file. Relative data and backbone paths resolve
    /// against the file's directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text, overrides)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(x) = p.as_mut() {
                if x.is_relative() {
                    *x = base.join(&*x);
                }
            }
        };
        fix(&mut cfg.data.manifest);
        fix(&mut cfg.data.cache_dir);
        fix(&mut cfg.backbone.checkpoint_path);
        Ok(cfg)
    }
}

fn strip_comment(line: &str) -> &str {
    let mut quote = None;
    for (i, c) in line.char_indices() {
        match (c, quote) {
            ('"' | '\'', None) => quote = Some(c),
            (q, Some(open)) if q == open => quote = None,
            ('#', None) => return &line[..i],
            _ => {}
        }
    }
    line
}

fn parse_scalar(s: &str) -> Value {
    let s = s.trim();
    if s.len() >= 2 && ((s.starts_with('"') && s.ends_with('"')) || (s.starts_with('\'') && s.ends_with('\''))) {
        return Value::String(s[1..s.len() - 1].to_string());
    }
    match s {
        "true" => return Value::Bool(true),
        "false" => return Value::Bool(false),
        "null" | "none" => return Value::Null,
        _ => {}
    }
    if let Ok(i) = s.parse::<i64>() {
        return Value::from(i);
    }
    if s.chars().any(|c| c.is_ascii_digit()) {
        if let Ok(f) = s.parse::<f64>() {
            if f.is_finite() {
                return Value::from(f);
            }
        }
    }
    Value::String(s.to_string())
}

fn parse_value(s: &str) -> Value {
    if let Some(inner) = s.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
        let inner = inner.trim();
        if inner.is_empty() {
            return Value::Array(Vec::new());
        }
        return Value::Array(inner.split(',').map(parse_scalar).collect());
    }
    parse_scalar(s)
}

fn insert(tree: &mut Value, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').map(str::trim).collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed key '{key}'")));
    }
    let mut node = tree;
    for p in &parts[..parts.len() - 1] {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("key '{key}' nests under a value")))?;
        node = obj.entry(p.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    let obj = node
        .as_object_mut()
        .ok_or_else(|| Error::Config(format!("key '{key}' nests under a value")))?;
    let last = parts[parts.len() - 1];
    if obj.get(last).is_some_and(Value::is_object) {
        return Err(Error::Config(format!("key '{key}' names a section")));
    }
    obj.insert(last.to_string(), value);
    Ok(())
}

fn remove(tree: &mut Value, key: &str) {
    let parts: Vec<&str> = key.split('.').map(str::trim).collect();
    let mut node = tree;
    for p in &parts[..parts.len() - 1] {
        match node.get_mut(*p) {
            Some(n) => node = n,
            None => return,
        }
    }
    if let Some(obj) = node.as_object_mut() {
        obj.remove(parts[parts.len() - 1]);
    }
}

fn render_scalar(v: &Value) -> String {
    match v {
        Value::String(s) => format!("\"{s}\""),
        Value::Array(items) => format!("[{}]", items.iter().map(render_scalar).collect::<Vec<_>>().join(", ")),
        other => other.to_string(),
    }
}

fn flatten(v: &Value, prefix: &str, out: &mut Vec<String>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(child, &key, out);
            }
        }
        other => out.push(format!("{prefix} = {}", render_scalar(other))),
    }
}

fn check_known(given: &Value, known: &Value, prefix: &str) -> Result<()> {
    let (Some(g), Some(k)) = (given.as_object(), known.as_object()) else {
        return Ok(());
    };
    for (key, v) in g {
        let path = if prefix.is_empty() {
            key.clone()
        } else {
            format!("{prefix}.{key}")
        };
        match k.get(key) {
            Some(kv) => check_known(v, kv, &path)?,
            None => return Err(Error::Config(format!("unknown configuration key '{path}'"))),
        }
    }
    Ok(())
}
