//! Bit-budget arithmetic: total latent bits allocated per image.

use std::fmt;
use std::str::FromStr;

use crate::error::{BarError, Result};

/// Bits per latent channel charged to a continuous tokenizer (16-bit storage).
pub const CONTINUOUS_BITS_PER_CHANNEL: u64 = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BudgetQuery {
    pub height: u64,
    pub width: u64,
    pub downsample: u64,
    /// Bits per token `k` for discrete tokenizers, channels `D` for continuous ones.
    pub size: u64,
}

impl BudgetQuery {
    fn tokens(&self) -> Result<u64> {
        if self.downsample == 0 || self.height == 0 || self.width == 0 {
            return Err(BarError::Domain("image size and downsample factor must be positive".into()));
        }
        if !self.height.is_multiple_of(self.downsample) || !self.width.is_multiple_of(self.downsample) {
            return Err(BarError::Shape(format!(
                "downsample factor {} does not divide {}x{}",
                self.downsample, self.height, self.width
            )));
        }
        Ok((self.height / self.downsample) * (self.width / self.downsample))
    }
}

/// `(H/f)·(W/f)·k`
pub fn bit_budget_discrete(q: &BudgetQuery) -> Result<u64> {
    if q.size == 0 {
        return Err(BarError::Domain("bits per token must be at least 1".into()));
    }
    Ok(q.tokens()? * q.size)
}

/// `(H/f)·(W/f)·16·D`
pub fn bit_budget_continuous(q: &BudgetQuery) -> Result<u64> {
    if q.size == 0 {
        return Err(BarError::Domain("channel dimension must be at least 1".into()));
    }
    Ok(q.tokens()? * CONTINUOUS_BITS_PER_CHANNEL * q.size)
}

/// `⌈log₂ C⌉` for a codebook of `C` entries.
pub fn bits_for_codebook(codebook_size: u64) -> Result<u64> {
    if codebook_size < 2 {
        return Err(BarError::Domain("codebook needs at least two entries".into()));
    }
    Ok(u64::from(64 - (codebook_size - 1).leading_zeros()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenizerKind {
    Discrete,
    Continuous,
}

impl fmt::Display for TokenizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TokenizerKind::Discrete => "discrete",
            TokenizerKind::Continuous => "continuous",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizerDescription {
    pub name: String,
    pub kind: TokenizerKind,
    pub query: BudgetQuery,
}

impl TokenizerDescription {
    pub fn bits(&self) -> Result<u64> {
        match self.kind {
            TokenizerKind::Discrete => bit_budget_discrete(&self.query),
            TokenizerKind::Continuous => bit_budget_continuous(&self.query),
        }
    }
}

impl FromStr for TokenizerDescription {
    type Err = BarError;

    /// Parses `name=<s> kind=<discrete|continuous> H=<n> W=<n> f=<n> k=<n>`
    /// (or `D=<n>` for continuous tokenizers; `C=<n>` gives a codebook size).
    fn from_str(line: &str) -> Result<Self> {
        let mut name = None;
        let mut kind = None;
        let (mut h, mut w, mut f, mut size) = (None, None, None, None);
        for field in line.split_whitespace() {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| BarError::config(field, "expected key=value"))?;
            let num = || {
                value
                    .parse::<u64>()
                    .map_err(|_| BarError::config(key, format!("`{value}` is not a non-negative integer")))
            };
            match key {
                "name" => name = Some(value.to_string()),
                "kind" => {
                    kind = Some(match value {
                        "discrete" => TokenizerKind::Discrete,
                        "continuous" => TokenizerKind::Continuous,
                        _ => return Err(BarError::config("kind", format!("unknown kind `{value}`"))),
                    })
                }
                "H" => h = Some(num()?),
                "W" => w = Some(num()?),
                "f" => f = Some(num()?),
                "k" | "D" => size = Some(num()?),
                "C" => size = Some(bits_for_codebook(num()?)?),
                _ => return Err(BarError::config(key, "unknown key")),
            }
        }
        let need = |v: Option<u64>, k: &str| v.ok_or_else(|| BarError::config(k, "missing"));
        Ok(TokenizerDescription {
            name: name.ok_or_else(|| BarError::config("name", "missing"))?,
            kind: kind.unwrap_or(TokenizerKind::Discrete),
            query: BudgetQuery {
                height: need(h, "H")?,
                width: need(w, "W")?,
                downsample: need(f, "f")?,
                size: need(size, "k")?,
            },
        })
    }
}

/// Parses a file of tokenizer descriptions, one per line; `#` starts a comment.
pub fn parse_descriptions(text: &str) -> Result<Vec<TokenizerDescription>> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            l.parse().map_err(|e| match e {
                BarError::Config { field, message } => {
                    BarError::config(format!("line {}.{field}", i + 1), message)
                }
                other => other,
            })
        })
        .collect()
}

/// Reference configurations: 256×256 images at f=16 with growing codebooks,
/// and two continuous latents of matching capacity.
pub fn reference_descriptions() -> Vec<TokenizerDescription> {
    let discrete = [10u64, 12, 16, 32, 64, 128, 256].map(|k| TokenizerDescription {
        name: format!("fsq-k{k}"),
        kind: TokenizerKind::Discrete,
        query: BudgetQuery { height: 256, width: 256, downsample: 16, size: k },
    });
    let continuous = [(8u64, 4u64), (16, 16)].map(|(f, d)| TokenizerDescription {
        name: format!("vae-f{f}-d{d}"),
        kind: TokenizerKind::Continuous,
        query: BudgetQuery { height: 256, width: 256, downsample: f, size: d },
    });
    discrete.into_iter().chain(continuous).collect()
}

/// Tab-separated budget table with a header row.
pub fn budget_table(descriptions: &[TokenizerDescription]) -> Result<String> {
    let mut out = String::from("name\tkind\tH\tW\tf\tk_or_D\tbits\n");
    for d in descriptions {
        let q = &d.query;
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            d.name,
            d.kind,
            q.height,
            q.width,
            q.downsample,
            q.size,
            d.bits()?
        ));
    }
    Ok(out)
}
