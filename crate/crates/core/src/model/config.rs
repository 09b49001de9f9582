use std::fmt;
use std::str::FromStr;

use crate::error::{BarError, Result};

/// Widest token the linear head will materialize a `2^k` vocabulary for.
pub const LINEAR_HEAD_MAX_BITS: usize = 18;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HeadKind {
    /// Masked bit modeling: iterative bit unmasking conditioned on `z`.
    Mbm,
    /// One affine map to `2^k` vocabulary logits.
    Linear,
    /// One affine map to `k` independent bit logits.
    Bit,
}

impl HeadKind {
    pub const ALL: [HeadKind; 3] = [HeadKind::Linear, HeadKind::Bit, HeadKind::Mbm];

    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Mbm => "mbm",
            HeadKind::Linear => "linear",
            HeadKind::Bit => "bit",
        }
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HeadKind {
    type Err = BarError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mbm" => Ok(HeadKind::Mbm),
            "linear" => Ok(HeadKind::Linear),
            "bit" => Ok(HeadKind::Bit),
            _ => Err(BarError::config("head_kind", format!("unknown head `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub depth: usize,
    pub width: usize,
    pub ffn_width: usize,
    pub heads: usize,
    /// Bits per token.
    pub bits: usize,
    pub head_kind: HeadKind,
    pub head_layers: usize,
    pub head_width: usize,
    pub class_count: usize,
    /// Maximum number of tokens per sequence.
    pub context_len: usize,
    /// Copies of the class embedding prepended to the sequence.
    pub class_repeat: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            depth: 4,
            width: 256,
            ffn_width: 1024,
            heads: 4,
            bits: 16,
            head_kind: HeadKind::Mbm,
            head_layers: 3,
            head_width: 256,
            class_count: 10,
            context_len: 64,
            class_repeat: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("depth", self.depth),
            ("width", self.width),
            ("ffn_width", self.ffn_width),
            ("heads", self.heads),
            ("k", self.bits),
            ("head_width", self.head_width),
            ("class_count", self.class_count),
            ("context_len", self.context_len),
            ("class_repeat", self.class_repeat),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(BarError::config(field, "must be positive"));
            }
        }
        if !self.width.is_multiple_of(self.heads) || !(self.width / self.heads).is_multiple_of(2) {
            return Err(BarError::config("heads", "width must split into heads of even size"));
        }
        if self.bits > crate::bitcodec::MAX_BITS {
            return Err(BarError::config("k", format!("at most {} bits", crate::bitcodec::MAX_BITS)));
        }
        if self.head_kind == HeadKind::Linear && self.bits > LINEAR_HEAD_MAX_BITS {
            return Err(BarError::Capability(format!(
                "linear head needs a 2^{} vocabulary; limit is 2^{LINEAR_HEAD_MAX_BITS}",
                self.bits
            )));
        }
        Ok(())
    }

    /// Closed-form scalar count of the prediction head.
    pub fn head_param_count(&self) -> usize {
        let (w, k, hw) = (self.width, self.bits, self.head_width);
        match self.head_kind {
            HeadKind::Linear => w * (1usize << k) + (1usize << k),
            HeadKind::Bit => w * k + k,
            HeadKind::Mbm => {
                let modulation = w * hw + hw;
                let inputs = 3 * k * hw + hw;
                let block = 3 * modulation + 3 * hw * hw;
                let last = 2 * modulation + hw * k + k;
                inputs + self.head_layers * block + last
            }
        }
    }

    /// Closed-form scalar count of the backbone.
    pub fn backbone_param_count(&self) -> usize {
        let (w, f) = (self.width, self.ffn_width);
        let embed = (self.class_count + 1) * w + 2 * self.bits * w;
        let block = 2 * w + 4 * w * w + 3 * w * f;
        embed + self.depth * block + w
    }
}

pub(crate) fn parse_field<T: FromStr>(field: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| BarError::config(field, format!("cannot parse `{value}`")))
}

impl ModelConfig {
    pub const KEYS: [&'static str; 11] = [
        "depth",
        "width",
        "ffn_width",
        "heads",
        "k",
        "head_kind",
        "head_layers",
        "head_width",
        "class_count",
        "context_len",
        "class_repeat",
    ];

    /// Sets one field by its config key. Returns `Ok(false)` for keys that
    /// do not belong to the model.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "depth" => self.depth = parse_field(key, value)?,
            "width" => self.width = parse_field(key, value)?,
            "ffn_width" => self.ffn_width = parse_field(key, value)?,
            "heads" => self.heads = parse_field(key, value)?,
            "k" => self.bits = parse_field(key, value)?,
            "head_kind" => self.head_kind = value.trim().parse()?,
            "head_layers" => self.head_layers = parse_field(key, value)?,
            "head_width" => self.head_width = parse_field(key, value)?,
            "class_count" => self.class_count = parse_field(key, value)?,
            "context_len" => self.context_len = parse_field(key, value)?,
            "class_repeat" => self.class_repeat = parse_field(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let values = [
            self.depth.to_string(),
            self.width.to_string(),
            self.ffn_width.to_string(),
            self.heads.to_string(),
            self.bits.to_string(),
            self.head_kind.to_string(),
            self.head_layers.to_string(),
            self.head_width.to_string(),
            self.class_count.to_string(),
            self.context_len.to_string(),
            self.class_repeat.to_string(),
        ];
        Self::KEYS.iter().zip(values).map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// Reads every model key from `pairs`, ignoring the others.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        let mut seen = Vec::new();
        for (k, v) in pairs {
            if cfg.set(k, v)? {
                seen.push(k);
            }
        }
        if let Some(missing) = Self::KEYS.iter().find(|k| !seen.contains(k)) {
            return Err(BarError::config(*missing, "missing from the stored configuration"));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Feeds each `key=value` line of a flat config file to `set`. `#` starts a
/// comment. Repeated keys are errors, and config errors are prefixed with
/// `line N.`.
pub(crate) fn for_each_entry(text: &str, mut set: impl FnMut(&str, &str) -> Result<()>) -> Result<()> {
    let mut seen: Vec<&str> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| BarError::config(format!("line {}", n + 1), "expected key=value"))?;
        let key = key.trim();
        if seen.contains(&key) {
            return Err(BarError::config(format!("line {}.{key}", n + 1), "repeated key"));
        }
        seen.push(key);
        set(key, value.trim()).map_err(|e| match e {
            BarError::Config { field, message } => BarError::config(format!("line {}.{field}", n + 1), message),
            other => other,
        })?;
    }
    Ok(())
}
