//! Flat `key = value` configuration text and the model settings read from it.
//!
//! Lines are `key = value`; `#` starts a comment. A `[section]` line
//! prefixes following keys with `section.`, so `[model]` then `fpn_dim = 8`
//! is the same as `model.fpn_dim = 8`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("key `{0}` appears twice")]
    Duplicate(String),
    #[error("key `{key}`: cannot parse `{value}`")]
    Value { key: String, value: String },
    #[error("unknown key `{0}`")]
    Unknown(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| ConfigError::Syntax { line: i + 1, reason: "unterminated section".into() })?;
                section = name.trim().to_owned();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::Syntax { line: i + 1, reason: "expected `key = value`".into() })?;
            let k = k.trim();
            if k.is_empty() {
                return Err(ConfigError::Syntax { line: i + 1, reason: "empty key".into() });
            }
            let key = if section.is_empty() { k.to_owned() } else { format!("{section}.{k}") };
            if entries.insert(key.clone(), v.trim().to_owned()).is_some() {
                return Err(ConfigError::Duplicate(key));
            }
        }
        Ok(Self { entries })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_owned(), value.to_string());
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Parses `key` when present.
    pub fn value<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.get(key)
            .map(|v| v.parse().map_err(|_| ConfigError::Value { key: key.to_owned(), value: v.to_owned() }))
            .transpose()
    }

    pub fn value_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.value(key)?.unwrap_or(default))
    }

    /// Comma-separated list.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        self.get(key)
            .map(|v| {
                v.split(',')
                    .map(|p| p.trim().parse().map_err(|_| ConfigError::Value { key: key.to_owned(), value: v.to_owned() }))
                    .collect()
            })
            .transpose()
    }

    /// Boolean accepting `true/false`, `on/off`, `1/0`.
    pub fn flag(&self, key: &str, default: bool) -> Result<bool> {
        match self.get(key) {
            None => Ok(default),
            Some("true" | "on" | "1" | "yes") => Ok(true),
            Some("false" | "off" | "0" | "no") => Ok(false),
            Some(v) => Err(ConfigError::Value { key: key.to_owned(), value: v.to_owned() }),
        }
    }

    /// Fails on any key under `prefix.` that is not in `known`.
    pub fn check_known(&self, prefix: &str, known: &[&str]) -> Result<()> {
        let p = format!("{prefix}.");
        for k in self.entries.keys() {
            if let Some(rest) = k.strip_prefix(&p) {
                if !known.contains(&rest) {
                    return Err(ConfigError::Unknown(k.clone()));
                }
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            writeln!(s, "{k} = {v}").unwrap();
        }
        s
    }
}

/// Which optional context modules are built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Switches {
    pub attention: bool,
    pub gcnet: bool,
    pub plcnet: bool,
}

impl Switches {
    pub const FULL: Self = Self { attention: true, gcnet: true, plcnet: true };
    pub const BASELINE: Self = Self { attention: false, gcnet: false, plcnet: false };

    /// All eight combinations, baseline first and full model last.
    pub fn all() -> [Self; 8] {
        let mut out = [Self::BASELINE; 8];
        let order = [0u8, 0b001, 0b010, 0b100, 0b011, 0b101, 0b110, 0b111];
        for (slot, bits) in out.iter_mut().zip(order) {
            *slot = Self { gcnet: bits & 1 != 0, plcnet: bits & 2 != 0, attention: bits & 4 != 0 };
        }
        out
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.gcnet {
            parts.push("gcnet");
        }
        if self.plcnet {
            parts.push("plcnet");
        }
        if self.attention {
            parts.push("attention");
        }
        if parts.is_empty() {
            "baseline".to_owned()
        } else {
            parts.join("+")
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Stem then C2..C5 output channels.
    pub backbone_widths: [usize; 5],
    pub fpn_dim: usize,
    pub gcnet_dim: usize,
    pub attention_hidden: usize,
    pub head_hidden: usize,
    pub num_classes: usize,
    pub switches: Switches,
    /// Zero-initialize the last attention layer so every map starts at 0.5.
    pub attention_zero_init: bool,
    /// Feed the region proposal stage with attended features instead of the
    /// plain pyramid.
    pub rpn_on_attention: bool,
    pub anchor_sizes: Vec<f64>,
    pub anchor_ratios: Vec<f64>,
    pub rpn_pre_nms_train: usize,
    pub rpn_post_nms_train: usize,
    pub rpn_pre_nms_test: usize,
    pub rpn_post_nms_test: usize,
    pub rpn_nms: f64,
    pub rpn_batch: usize,
    pub rpn_positive_fraction: f64,
    pub head_batch: usize,
    pub head_positive_fraction: f64,
    pub pool_size: usize,
    pub sampling_ratio: usize,
    pub canonical_size: f64,
    pub canonical_level: f64,
    pub hbb_weight: f64,
    pub obb_weight: f64,
    pub beta: f64,
    pub rpn_beta: f64,
    /// Scale applied to head regression targets (and undone when decoding).
    pub hbb_delta_weights: [f64; 4],
    pub obb_delta_weights: [f64; 5],
    pub score_threshold: f64,
    pub nms_threshold: f64,
    pub max_detections: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone_widths: [16, 32, 48, 64, 96],
            fpn_dim: 32,
            gcnet_dim: 32,
            attention_hidden: 16,
            head_hidden: 128,
            num_classes: 3,
            switches: Switches::FULL,
            attention_zero_init: false,
            rpn_on_attention: true,
            anchor_sizes: vec![16.0, 32.0, 64.0, 128.0],
            anchor_ratios: vec![0.5, 1.0, 2.0],
            rpn_pre_nms_train: 600,
            rpn_post_nms_train: 128,
            rpn_pre_nms_test: 300,
            rpn_post_nms_test: 64,
            rpn_nms: 0.7,
            rpn_batch: 64,
            rpn_positive_fraction: 0.5,
            head_batch: 64,
            head_positive_fraction: 0.25,
            pool_size: 7,
            sampling_ratio: 2,
            canonical_size: 224.0,
            canonical_level: 4.0,
            hbb_weight: 1.0,
            obb_weight: 1.0,
            beta: 1.0,
            rpn_beta: 1.0 / 9.0,
            hbb_delta_weights: [10.0, 10.0, 5.0, 5.0],
            obb_delta_weights: [10.0, 10.0, 5.0, 5.0, 5.0],
            score_threshold: 0.05,
            nms_threshold: 0.5,
            max_detections: 100,
        }
    }
}

const MODEL_KEYS: &[&str] = &[
    "backbone_widths",
    "fpn_dim",
    "gcnet_dim",
    "attention_hidden",
    "head_hidden",
    "num_classes",
    "attention",
    "gcnet",
    "plcnet",
    "attention_zero_init",
    "rpn_on_attention",
    "anchor_sizes",
    "anchor_ratios",
    "rpn_pre_nms_train",
    "rpn_post_nms_train",
    "rpn_pre_nms_test",
    "rpn_post_nms_test",
    "rpn_nms",
    "rpn_batch",
    "rpn_positive_fraction",
    "head_batch",
    "head_positive_fraction",
    "pool_size",
    "sampling_ratio",
    "canonical_size",
    "canonical_level",
    "hbb_weight",
    "obb_weight",
    "beta",
    "rpn_beta",
    "hbb_delta_weights",
    "obb_delta_weights",
    "score_threshold",
    "nms_threshold",
    "max_detections",
];

fn fixed<const N: usize>(key: &str, v: Vec<f64>) -> Result<[f64; N]> {
    v.try_into().map_err(|v: Vec<f64>| ConfigError::Invalid(format!("{key} needs {N} values, got {}", v.len())))
}

impl ModelConfig {
    /// Reads keys under `prefix.`; missing keys keep their defaults.
    pub fn from_kv(kv: &KvConfig, prefix: &str) -> Result<Self> {
        kv.check_known(prefix, MODEL_KEYS)?;
        let d = Self::default();
        let k = |name: &str| format!("{prefix}.{name}");
        let widths: Vec<usize> = kv.list(&k("backbone_widths"))?.unwrap_or(d.backbone_widths.to_vec());
        let backbone_widths: [usize; 5] = widths
            .try_into()
            .map_err(|_| ConfigError::Invalid("backbone_widths needs 5 values".into()))?;
        let fpn_dim = kv.value_or(&k("fpn_dim"), d.fpn_dim)?;
        let cfg = Self {
            backbone_widths,
            fpn_dim,
            gcnet_dim: kv.value_or(&k("gcnet_dim"), d.gcnet_dim)?,
            attention_hidden: kv.value_or(&k("attention_hidden"), (fpn_dim / 2).max(1))?,
            head_hidden: kv.value_or(&k("head_hidden"), d.head_hidden)?,
            num_classes: kv.value_or(&k("num_classes"), d.num_classes)?,
            switches: Switches {
                attention: kv.flag(&k("attention"), true)?,
                gcnet: kv.flag(&k("gcnet"), true)?,
                plcnet: kv.flag(&k("plcnet"), true)?,
            },
            attention_zero_init: kv.flag(&k("attention_zero_init"), d.attention_zero_init)?,
            rpn_on_attention: kv.flag(&k("rpn_on_attention"), d.rpn_on_attention)?,
            anchor_sizes: kv.list(&k("anchor_sizes"))?.unwrap_or(d.anchor_sizes),
            anchor_ratios: kv.list(&k("anchor_ratios"))?.unwrap_or(d.anchor_ratios),
            rpn_pre_nms_train: kv.value_or(&k("rpn_pre_nms_train"), d.rpn_pre_nms_train)?,
            rpn_post_nms_train: kv.value_or(&k("rpn_post_nms_train"), d.rpn_post_nms_train)?,
            rpn_pre_nms_test: kv.value_or(&k("rpn_pre_nms_test"), d.rpn_pre_nms_test)?,
            rpn_post_nms_test: kv.value_or(&k("rpn_post_nms_test"), d.rpn_post_nms_test)?,
            rpn_nms: kv.value_or(&k("rpn_nms"), d.rpn_nms)?,
            rpn_batch: kv.value_or(&k("rpn_batch"), d.rpn_batch)?,
            rpn_positive_fraction: kv.value_or(&k("rpn_positive_fraction"), d.rpn_positive_fraction)?,
            head_batch: kv.value_or(&k("head_batch"), d.head_batch)?,
            head_positive_fraction: kv.value_or(&k("head_positive_fraction"), d.head_positive_fraction)?,
            pool_size: kv.value_or(&k("pool_size"), d.pool_size)?,
            sampling_ratio: kv.value_or(&k("sampling_ratio"), d.sampling_ratio)?,
            canonical_size: kv.value_or(&k("canonical_size"), d.canonical_size)?,
            canonical_level: kv.value_or(&k("canonical_level"), d.canonical_level)?,
            hbb_weight: kv.value_or(&k("hbb_weight"), d.hbb_weight)?,
            obb_weight: kv.value_or(&k("obb_weight"), d.obb_weight)?,
            beta: kv.value_or(&k("beta"), d.beta)?,
            rpn_beta: kv.value_or(&k("rpn_beta"), d.rpn_beta)?,
            hbb_delta_weights: match kv.list(&k("hbb_delta_weights"))? {
                Some(v) => fixed(&k("hbb_delta_weights"), v)?,
                None => d.hbb_delta_weights,
            },
            obb_delta_weights: match kv.list(&k("obb_delta_weights"))? {
                Some(v) => fixed(&k("obb_delta_weights"), v)?,
                None => d.obb_delta_weights,
            },
            score_threshold: kv.value_or(&k("score_threshold"), d.score_threshold)?,
            nms_threshold: kv.value_or(&k("nms_threshold"), d.nms_threshold)?,
            max_detections: kv.value_or(&k("max_detections"), d.max_detections)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Writes every setting under `prefix.`.
    pub fn write_kv(&self, kv: &mut KvConfig, prefix: &str) {
        let join = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        let k = |name: &str| format!("{prefix}.{name}");
        kv.set(&k("backbone_widths"), self.backbone_widths.map(|w| w.to_string()).join(","));
        kv.set(&k("fpn_dim"), self.fpn_dim);
        kv.set(&k("gcnet_dim"), self.gcnet_dim);
        kv.set(&k("attention_hidden"), self.attention_hidden);
        kv.set(&k("head_hidden"), self.head_hidden);
        kv.set(&k("num_classes"), self.num_classes);
        kv.set(&k("attention"), self.switches.attention);
        kv.set(&k("gcnet"), self.switches.gcnet);
        kv.set(&k("plcnet"), self.switches.plcnet);
        kv.set(&k("attention_zero_init"), self.attention_zero_init);
        kv.set(&k("rpn_on_attention"), self.rpn_on_attention);
        kv.set(&k("anchor_sizes"), join(&self.anchor_sizes));
        kv.set(&k("anchor_ratios"), join(&self.anchor_ratios));
        kv.set(&k("rpn_pre_nms_train"), self.rpn_pre_nms_train);
        kv.set(&k("rpn_post_nms_train"), self.rpn_post_nms_train);
        kv.set(&k("rpn_pre_nms_test"), self.rpn_pre_nms_test);
        kv.set(&k("rpn_post_nms_test"), self.rpn_post_nms_test);
        kv.set(&k("rpn_nms"), self.rpn_nms);
        kv.set(&k("rpn_batch"), self.rpn_batch);
        kv.set(&k("rpn_positive_fraction"), self.rpn_positive_fraction);
        kv.set(&k("head_batch"), self.head_batch);
        kv.set(&k("head_positive_fraction"), self.head_positive_fraction);
        kv.set(&k("pool_size"), self.pool_size);
        kv.set(&k("sampling_ratio"), self.sampling_ratio);
        kv.set(&k("canonical_size"), self.canonical_size);
        kv.set(&k("canonical_level"), self.canonical_level);
        kv.set(&k("hbb_weight"), self.hbb_weight);
        kv.set(&k("obb_weight"), self.obb_weight);
        kv.set(&k("beta"), self.beta);
        kv.set(&k("rpn_beta"), self.rpn_beta);
        kv.set(&k("hbb_delta_weights"), join(&self.hbb_delta_weights));
        kv.set(&k("obb_delta_weights"), join(&self.obb_delta_weights));
        kv.set(&k("score_threshold"), self.score_threshold);
        kv.set(&k("nms_threshold"), self.nms_threshold);
        kv.set(&k("max_detections"), self.max_detections);
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_owned()));
        if self.backbone_widths.contains(&0) || self.fpn_dim == 0 || self.gcnet_dim == 0 || self.head_hidden == 0 {
            return bad("channel widths must be positive");
        }
        if self.attention_hidden == 0 {
            return bad("attention_hidden must be positive");
        }
        if self.num_classes == 0 {
            return bad("num_classes must be positive");
        }
        if self.anchor_sizes.len() != 4 {
            return bad("anchor_sizes needs one size per pyramid level (4)");
        }
        if self.anchor_ratios.is_empty() || self.anchor_ratios.iter().any(|r| !(*r > 0.0)) {
            return bad("anchor_ratios must be positive");
        }
        if self.pool_size == 0 || self.sampling_ratio == 0 {
            return bad("pool_size and sampling_ratio must be positive");
        }
        if !(0.0..=1.0).contains(&self.rpn_positive_fraction) || !(0.0..=1.0).contains(&self.head_positive_fraction) {
            return bad("positive fractions must lie in [0, 1]");
        }
        if !(self.beta > 0.0 && self.rpn_beta > 0.0) {
            return bad("smooth-L1 beta must be positive");
        }
        if self.hbb_delta_weights.iter().chain(&self.obb_delta_weights).any(|w| !(*w > 0.0)) {
            return bad("delta weights must be positive");
        }
        Ok(())
    }
}
