use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::corpus::GenConfig;
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::numerics::AdamWConfig;
use crate::sortformer::Proxy;

/// Everything a pre-training run depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Corpus directory; when absent the corpus is generated in memory
    /// from `gen` and `data_seed`.
    pub corpus: Option<String>,
    pub gen: GenConfig,
    pub data_seed: u64,
    /// Every `holdout_every`-th video is held out from training.
    pub holdout_every: usize,
    /// Transcripts per window.
    pub k: usize,
    /// Transcript length in seconds.
    pub l: f64,
    /// When set, `l` is drawn uniformly from `[l, l_max]` per window.
    pub l_max: Option<f64>,
    pub batch_size: usize,
    pub steps: u64,
    pub lr: f64,
    pub warmup: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_grad: Option<f64>,
    pub lambda: f64,
    pub tau: f64,
    pub mask_ratio: f64,
    /// RandomCrop scale; frames are cropped to `1/crop_scale` and resized.
    pub crop_scale: f64,
    /// Replace every frame by zeros (video-necessity control).
    pub zero_frames: bool,
    pub seed: u64,
    pub proxy: Proxy,
    pub encoder: EncoderConfig,
    /// Checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: u64,
    /// `f32` or `f64`.
    pub dtype: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            corpus: None,
            gen: GenConfig {
                count: 2000,
                ..GenConfig::default()
            },
            data_seed: 0,
            holdout_every: 10,
            k: 4,
            l: 3.0,
            l_max: None,
            batch_size: 32,
            steps: 5000,
            lr: 1e-3,
            warmup: 100,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_grad: Some(1.0),
            lambda: 2.0,
            tau: 0.05,
            mask_ratio: 0.75,
            crop_scale: 1.15,
            zero_frames: false,
            seed: 0,
            proxy: Proxy::Kway,
            encoder: EncoderConfig::default(),
            checkpoint_every: 0,
            dtype: "f32".into(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        self.encoder.validate()?;
        if self.corpus.is_none() {
            self.gen.validate()?;
            if self.gen.height != self.encoder.height || self.gen.width != self.encoder.width {
                return fail("gen resolution must match encoder resolution".into());
            }
        }
        if self.k < 2 {
            return fail(format!("k must be >= 2, got {}", self.k));
        }
        if !(self.l > 0.0) || self.l_max.is_some_and(|m| m < self.l) {
            return fail("l must be > 0 and l_max >= l".into());
        }
        if self.batch_size < 2 {
            return fail("batch_size must be >= 2 for the contrastive loss".into());
        }
        if !(self.lr > 0.0 && self.tau > 0.0 && self.lambda >= 0.0) {
            return fail("lr and tau must be > 0, lambda >= 0".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return fail("betas must lie in [0, 1) and adam_eps > 0".into());
        }
        if self.clip_grad.is_some_and(|c| !(c > 0.0)) {
            return fail("clip_grad must be > 0".into());
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return fail(format!("mask_ratio must lie in [0, 1), got {}", self.mask_ratio));
        }
        if self.crop_scale < 1.0 {
            return fail("crop_scale must be >= 1".into());
        }
        if self.dtype != "f32" && self.dtype != "f64" {
            return fail(format!("dtype must be f32 or f64, got {}", self.dtype));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    /// Learning rate at `step` (0-based) under linear warmup.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup == 0 {
            self.lr
        } else {
            self.lr * ((step + 1) as f64 / self.warmup as f64).min(1.0)
        }
    }

    /// Applies `key=value` overrides with dotted keys for nested fields,
    /// e.g. `encoder.d_h=32`. Values are read as JSON when they parse,
    /// otherwise as strings.
    pub fn with_overrides<'a>(&self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut root = serde_json::to_value(self).expect("config serializes");
        for (key, raw) in pairs {
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut root, key, value)?;
        }
        let cfg: TrainConfig = serde_json::from_value(root).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Parses a flat `key = value` document (`#` starts a comment) on top
    /// of `self`.
    pub fn with_kv_text(&self, text: &str) -> Result<Self> {
        let pairs = parse_kv(text)?;
        self.with_overrides(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))
    }

    /// Flat `key = value` rendering, one line per leaf, sorted by key.
    pub fn to_kv_text(&self) -> String {
        kv_text(self)
    }
}

/// Flat sorted `key = value` rendering of any serializable value.
pub fn kv_text<S: Serialize>(value: &S) -> String {
    let root = serde_json::to_value(value).expect("value serializes");
    let mut lines = Vec::new();
    flatten("", &root, &mut lines);
    lines.sort();
    lines.join("\n") + "\n"
}

pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = root;
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("{key}: {part} is not a section")))?;
        if i + 1 == parts.len() {
            if !obj.contains_key(*part) {
                return Err(Error::Config(format!("unknown config key {key}")));
            }
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Map::new()));
    }
    Ok(())
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<String>) {
    match v {
        Value::Object(m) => {
            for (k, x) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, x, out);
            }
        }
        Value::String(s) => out.push(format!("{prefix} = {s}")),
        other => out.push(format!("{prefix} = {other}")),
    }
}
