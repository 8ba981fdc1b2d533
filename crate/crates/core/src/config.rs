//! Run configuration as flat `key = <JSON value>` lines.
//!
//! ```text
//! # comments and blank lines are ignored
//! model.preset = "desk"
//! decoder.schedule = "GMP,GMP,GAP,GAP,GAP"
//! train.epochs = 50
//! data.attacks = ["none", "jpeg:90"]
//! ```
//!
//! Keys left out take the defaults of the selected preset. The effective
//! configuration is echoed in the same format and parses back to itself.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde_json::Value;

use crate::backbone::BackbonePreset;
use crate::data::{AttackSpec, KindCounts, SplitRatios};
use crate::error::{Error, Result};
use crate::model::TriPINetConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without validation improvement before the learning rate halves.
    pub patience: usize,
    pub augment: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    /// Existing dataset directory; a synthetic set is generated when absent.
    pub dir: Option<PathBuf>,
    pub size: usize,
    pub counts: KindCounts,
    pub attacks: Vec<AttackSpec>,
    pub split: SplitRatios,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: TriPINetConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    /// Desk preset: 64×64 images, batch 8, 200 epochs. Other presets follow
    /// the full-scale recipe: 256×256, batch 16, 100 epochs.
    pub fn defaults_for(preset: BackbonePreset) -> Self {
        let desk = preset == BackbonePreset::Desk;
        Self {
            model: TriPINetConfig { preset, ..Default::default() },
            train: TrainConfig {
                lr: 1e-3,
                weight_decay: 5e-4,
                batch_size: if desk { 8 } else { 16 },
                epochs: if desk { 200 } else { 100 },
                patience: 5,
                augment: true,
            },
            data: DataConfig {
                dir: None,
                size: if desk { 64 } else { 256 },
                counts: KindCounts { splice: 70, copy_move: 20, authentic: 10 },
                attacks: Vec::new(),
                split: SplitRatios::default(),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let t = &self.train;
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return Err(Error::Config("`train.lr` must be positive".into()));
        }
        if !(t.weight_decay >= 0.0 && t.weight_decay.is_finite()) {
            return Err(Error::Config("`train.weight_decay` must be non-negative".into()));
        }
        if t.batch_size == 0 || t.patience == 0 {
            return Err(Error::Config("`train.batch_size` and `train.patience` must be positive".into()));
        }
        if self.data.size == 0 || self.data.size % 16 != 0 {
            return Err(Error::Config(format!("`data.size` {} is not a positive multiple of 16", self.data.size)));
        }
        for a in &self.data.attacks {
            a.validate()?;
        }
        self.data.split.sizes(0)?;
        Ok(())
    }

    /// Every key with its effective value, in key order.
    pub fn entries(&self) -> BTreeMap<String, Value> {
        let mut m: BTreeMap<String, Value> =
            self.model.to_map().into_iter().map(|(k, v)| (k, model_value(&v))).collect();
        let t = &self.train;
        m.insert("train.lr".into(), t.lr.into());
        m.insert("train.weight_decay".into(), t.weight_decay.into());
        m.insert("train.batch_size".into(), t.batch_size.into());
        m.insert("train.epochs".into(), t.epochs.into());
        m.insert("train.patience".into(), t.patience.into());
        m.insert("train.augment".into(), t.augment.into());
        let d = &self.data;
        m.insert("data.dir".into(), d.dir.as_ref().map_or(Value::Null, |p| p.display().to_string().into()));
        m.insert("data.size".into(), d.size.into());
        m.insert("data.splice".into(), d.counts.splice.into());
        m.insert("data.copy_move".into(), d.counts.copy_move.into());
        m.insert("data.authentic".into(), d.counts.authentic.into());
        m.insert("data.attacks".into(), d.attacks.iter().map(|a| Value::from(a.to_string())).collect());
        let s = d.split;
        m.insert("data.split".into(), format!("{}:{}:{}", s.train, s.val, s.test).into());
        m
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            writeln!(s, "{k} = {v}").unwrap();
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_entries(parse_entries(text)?)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Builds a config from explicit entries on top of the preset defaults.
    pub fn from_entries(entries: BTreeMap<String, Value>) -> Result<Self> {
        let preset = match entries.get("model.preset") {
            Some(v) => as_str("model.preset", v)?.parse()?,
            None => BackbonePreset::Desk,
        };
        let mut cfg = Self::defaults_for(preset);
        let mut model = cfg.model.to_map();
        for (key, v) in &entries {
            let k = key.as_str();
            match k {
                _ if model.contains_key(k) => {
                    let text = match v {
                        Value::String(s) => s.clone(),
                        Value::Number(_) | Value::Bool(_) => v.to_string(),
                        _ => return Err(type_err(k, "a string, number or boolean")),
                    };
                    model.insert(key.clone(), text);
                }
                "train.lr" => cfg.train.lr = as_f64(k, v)?,
                "train.weight_decay" => cfg.train.weight_decay = as_f64(k, v)?,
                "train.batch_size" => cfg.train.batch_size = as_usize(k, v)?,
                "train.epochs" => cfg.train.epochs = as_usize(k, v)?,
                "train.patience" => cfg.train.patience = as_usize(k, v)?,
                "train.augment" => cfg.train.augment = v.as_bool().ok_or_else(|| type_err(k, "a boolean"))?,
                "data.dir" => {
                    cfg.data.dir = match v {
                        Value::Null => None,
                        _ => Some(PathBuf::from(as_str(k, v)?)),
                    }
                }
                "data.size" => cfg.data.size = as_usize(k, v)?,
                "data.splice" => cfg.data.counts.splice = as_usize(k, v)?,
                "data.copy_move" => cfg.data.counts.copy_move = as_usize(k, v)?,
                "data.authentic" => cfg.data.counts.authentic = as_usize(k, v)?,
                "data.attacks" => cfg.data.attacks = parse_attacks(k, v)?,
                "data.split" => cfg.data.split = parse_split(k, v)?,
                _ => return Err(Error::Config(format!("unknown config key `{k}`"))),
            }
        }
        cfg.model = TriPINetConfig::from_map(&model)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies command-line overrides, re-deriving preset defaults for keys the
    /// config file did not set.
    pub fn with_overrides(
        mut entries: BTreeMap<String, Value>,
        seed: Option<u64>,
        preset: Option<BackbonePreset>,
    ) -> Result<Self> {
        if let Some(s) = seed {
            entries.insert("seed".into(), s.into());
        }
        if let Some(p) = preset {
            entries.insert("model.preset".into(), p.to_string().into());
        }
        Self::from_entries(entries)
    }
}

fn model_value(s: &str) -> Value {
    if let Ok(b) = s.parse::<bool>() {
        return b.into();
    }
    if let Ok(n) = s.parse::<u64>() {
        return n.into();
    }
    s.into()
}

fn type_err(key: &str, want: &str) -> Error {
    Error::Config(format!("`{key}` must be {want}"))
}

fn as_str<'a>(key: &str, v: &'a Value) -> Result<&'a str> {
    v.as_str().ok_or_else(|| type_err(key, "a string"))
}

fn as_f64(key: &str, v: &Value) -> Result<f64> {
    v.as_f64().ok_or_else(|| type_err(key, "a number"))
}

fn as_usize(key: &str, v: &Value) -> Result<usize> {
    v.as_u64().map(|n| n as usize).ok_or_else(|| type_err(key, "a non-negative integer"))
}

/// A list of attack strings, or one comma-separated string.
fn parse_attacks(key: &str, v: &Value) -> Result<Vec<AttackSpec>> {
    match v {
        Value::Array(items) => items.iter().map(|i| as_str(key, i)?.parse()).collect(),
        Value::String(s) if s.trim().is_empty() => Ok(Vec::new()),
        Value::String(s) => s.split(',').map(str::parse).collect(),
        _ => Err(type_err(key, "a list of attack strings")),
    }
}

fn parse_split(key: &str, v: &Value) -> Result<SplitRatios> {
    let s = as_str(key, v)?;
    let parts: Vec<usize> = s.split(':').map(|p| p.trim().parse().ok()).collect::<Option<_>>().unwrap_or_default();
    match parts[..] {
        [train, val, test] => Ok(SplitRatios { train, val, test }),
        _ => Err(type_err(key, "a `train:val:test` ratio string")),
    }
}

/// Parses `key = <JSON value>` lines.
pub fn parse_entries(text: &str) -> Result<BTreeMap<String, Value>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
        let key = k.trim().to_string();
        let value: Value = serde_json::from_str(v.trim())
            .map_err(|e| Error::Config(format!("line {}: value of `{key}` is not valid JSON: {e}", i + 1)))?;
        if out.insert(key.clone(), value).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key `{key}`", i + 1)));
        }
    }
    Ok(out)
}
