//! Progressive bit unmasking, classifier-free guidance and autoregressive
//! generation.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, Gumbel};
use serde::Serialize;

use crate::bitcodec::{bits_to_index, index_to_bits, patch_unshuffle, BitVector, TokenGrid};
use crate::error::{BarError, Result};
use crate::exec::Exec;
use crate::masking::{make_schedule, MaskedToken, ScheduleMode, UnmaskSchedule};
use crate::model::{BarModel, ClassLabel, HeadKind};
use crate::nn::kernels::sigmoid;
use crate::rng::{derive_seed, stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GuidanceSchedule {
    Constant,
    /// Strength ramps linearly over token positions up to the base scale.
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Selection {
    /// Keep the sampled bits with the largest combined |logit|.
    Confidence,
    /// Keep a uniformly random subset of the masked positions.
    RandomOrder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TemperatureMode {
    /// Bits are drawn from `sigmoid(logit / temperature)`.
    Logit,
    /// Bits are drawn at temperature 1; temperature scales Gumbel noise on
    /// the confidence used for selection.
    ConfidenceNoise,
}

macro_rules! named_enum {
    ($ty:ident, $field:literal, $($variant:ident => $name:literal),+) => {
        impl FromStr for $ty {
            type Err = BarError;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($ty::$variant),)+
                    _ => Err(BarError::config($field, format!("unknown value `{s}`"))),
                }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($ty::$variant => $name,)+ })
            }
        }
    };
}

named_enum!(GuidanceSchedule, "guidance_schedule", Constant => "constant", Linear => "linear");
named_enum!(Selection, "selection", Confidence => "confidence", RandomOrder => "random_order");
named_enum!(TemperatureMode, "temperature_mode", Logit => "logit", ConfidenceNoise => "confidence_noise");

#[derive(Clone, Debug, PartialEq)]
pub struct SampleConfig {
    pub schedule: UnmaskSchedule,
    pub temperature: f64,
    pub temperature_mode: TemperatureMode,
    /// Extra weight on the conditional prediction; 0 disables the null pass.
    pub guidance_scale: f64,
    pub guidance_schedule: GuidanceSchedule,
    pub selection: Selection,
    pub seed: u64,
    /// Side of the token patches merged into one sequence token.
    pub patch_size: usize,
    /// Rows of the sequence grid before unshuffling; `None` picks a square
    /// grid when the token count allows it and a single row otherwise.
    pub grid_rows: Option<usize>,
}

impl SampleConfig {
    /// Guided defaults: schedule `2,2,5,7` at 16 bits (near-equal steps
    /// otherwise), temperature 2.5, scale 5.0 with a linear ramp.
    pub fn guided(k: usize) -> Result<Self> {
        let schedule = if k == 16 {
            make_schedule(k, ScheduleMode::Explicit(vec![2, 2, 5, 7]))?
        } else {
            make_schedule(k, ScheduleMode::UniformSteps(k.min(4)))?
        };
        Ok(SampleConfig { schedule, temperature: 2.5, guidance_scale: 5.0, ..Self::unguided(k)? })
    }

    /// Unguided defaults: four near-equal steps, temperature 2.0.
    pub fn unguided(k: usize) -> Result<Self> {
        Ok(SampleConfig {
            schedule: make_schedule(k, ScheduleMode::UniformSteps(k.min(4)))?,
            temperature: 2.0,
            temperature_mode: TemperatureMode::Logit,
            guidance_scale: 0.0,
            guidance_schedule: GuidanceSchedule::Linear,
            selection: Selection::Confidence,
            seed: 0,
            patch_size: 1,
            grid_rows: None,
        })
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(BarError::config("temperature", format!("must be positive, got {}", self.temperature)));
        }
        if !(self.guidance_scale >= 0.0) || !self.guidance_scale.is_finite() {
            return Err(BarError::config("guidance_scale", format!("must be non-negative, got {}", self.guidance_scale)));
        }
        if self.patch_size == 0 {
            return Err(BarError::config("patch_size", "must be positive"));
        }
        if self.schedule.bit_width() != k {
            return Err(BarError::Schedule(format!(
                "schedule {} covers {} bits, tokens have {k}",
                self.schedule,
                self.schedule.bit_width()
            )));
        }
        Ok(())
    }
}

/// `uncond + scale·(cond − uncond)`; scales 0 and 1 return an input exactly.
pub fn cfg_combine(cond: &[f64], uncond: &[f64], scale: f64) -> Result<Vec<f64>> {
    if cond.len() != uncond.len() {
        return Err(BarError::Shape(format!("{} vs {} logits", cond.len(), uncond.len())));
    }
    Ok(if scale == 1.0 {
        cond.to_vec()
    } else if scale == 0.0 {
        uncond.to_vec()
    } else {
        cond.iter().zip(uncond).map(|(c, u)| u + scale * (c - u)).collect()
    })
}

/// Linear ramp `base·(i+1)/n` over token positions.
pub fn guidance_at(base: f64, i: usize, n: usize) -> f64 {
    base * (i + 1) as f64 / n.max(1) as f64
}

fn guidance_strength(cfg: &SampleConfig, i: usize, n: usize) -> f64 {
    match cfg.guidance_schedule {
        GuidanceSchedule::Constant => cfg.guidance_scale,
        GuidanceSchedule::Linear => guidance_at(cfg.guidance_scale, i, n),
    }
}

/// The unconditional condition and the guidance strength `g`; logits are
/// combined as `cond + g·(cond − uncond)`.
#[derive(Clone, Copy, Debug)]
pub struct Guidance<'a> {
    pub z_null: &'a [f64],
    pub strength: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepTrace {
    pub step: usize,
    pub revealed: Vec<usize>,
    pub bits: Vec<u8>,
    pub confidences: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TokenTrace {
    pub steps: Vec<StepTrace>,
    pub head_calls: usize,
}

impl TokenTrace {
    /// Whether the revealed positions partition `0..k`.
    pub fn is_partition(&self, k: usize) -> bool {
        let mut seen = vec![false; k];
        for p in self.steps.iter().flat_map(|s| &s.revealed) {
            if *p >= k || seen[*p] {
                return false;
            }
            seen[*p] = true;
        }
        seen.into_iter().all(|s| s)
    }
}

fn guided_logits(
    logits: impl Fn(&[f64]) -> Result<Vec<f64>>,
    z: &[f64],
    guidance: Option<Guidance<'_>>,
    calls: &mut usize,
) -> Result<Vec<f64>> {
    let cond = logits(z)?;
    *calls += 1;
    match guidance {
        None => Ok(cond),
        Some(g) => {
            let uncond = logits(g.z_null)?;
            *calls += 1;
            cfg_combine(&cond, &uncond, 1.0 + g.strength)
        }
    }
}

fn draw_bit<R: Rng + ?Sized>(logit: f64, temperature: f64, rng: &mut R) -> u8 {
    u8::from(rng.random::<f64>() < sigmoid(logit / temperature))
}

/// Generates one token from the masked-bit head by progressive unmasking.
pub fn sample_token<R: Rng + ?Sized>(
    model: &BarModel,
    z: &[f64],
    guidance: Option<Guidance<'_>>,
    cfg: &SampleConfig,
    rng: &mut R,
) -> Result<(BitVector, TokenTrace)> {
    let k = model.bits();
    cfg.validate(k)?;
    let mut token = MaskedToken::fully_masked(k)?;
    let mut trace = TokenTrace::default();
    for (step, &count) in cfg.schedule.steps().iter().enumerate() {
        let logits = guided_logits(|z| model.mbm_logits(&token, z), z, guidance, &mut trace.head_calls)?;
        let masked: Vec<usize> = (0..k).filter(|&j| token.is_masked(j)).collect();
        let (temp, noise) = match cfg.temperature_mode {
            TemperatureMode::Logit => (cfg.temperature, 0.0),
            TemperatureMode::ConfidenceNoise => (1.0, cfg.temperature),
        };
        let drawn: Vec<u8> = masked.iter().map(|&j| draw_bit(logits[j], temp, rng)).collect();
        let confidence: Vec<f64> = match cfg.temperature_mode {
            TemperatureMode::Logit => masked.iter().map(|&j| logits[j].abs() / temp).collect(),
            TemperatureMode::ConfidenceNoise => {
                let gumbel = Gumbel::new(0.0, 1.0).expect("unit Gumbel");
                masked
                    .iter()
                    .zip(&drawn)
                    .map(|(&j, &b)| {
                        let signed = if b == 1 { logits[j] } else { -logits[j] };
                        -crate::nn::kernels::softplus(-signed) + noise * gumbel.sample(rng)
                    })
                    .collect()
            }
        };
        let mut chosen: Vec<usize> = match cfg.selection {
            Selection::Confidence => {
                let mut order: Vec<usize> = (0..masked.len()).collect();
                // stable sort keeps lower positions first among ties
                order.sort_by(|&a, &b| confidence[b].total_cmp(&confidence[a]));
                order.truncate(count);
                order
            }
            Selection::RandomOrder => rand::seq::index::sample(rng, masked.len(), count).into_vec(),
        };
        chosen.sort_unstable();
        let mut st = StepTrace { step, revealed: Vec::new(), bits: Vec::new(), confidences: Vec::new() };
        for c in chosen {
            token.reveal(masked[c], drawn[c]);
            st.revealed.push(masked[c]);
            st.bits.push(drawn[c]);
            st.confidences.push(confidence[c]);
        }
        trace.steps.push(st);
    }
    Ok((token.bits().clone(), trace))
}

/// One-shot sampling for the bit and linear heads.
fn sample_direct<R: Rng + ?Sized>(
    model: &BarModel,
    z: &[f64],
    guidance: Option<Guidance<'_>>,
    cfg: &SampleConfig,
    rng: &mut R,
) -> Result<(BitVector, TokenTrace)> {
    let k = model.bits();
    let mut trace = TokenTrace::default();
    let bits = match model.head_kind() {
        HeadKind::Bit => {
            let logits = guided_logits(|z| model.bit_logits(z), z, guidance, &mut trace.head_calls)?;
            let bits: Vec<u8> = logits.iter().map(|&l| draw_bit(l, cfg.temperature, rng)).collect();
            trace.steps.push(StepTrace {
                step: 0,
                revealed: (0..k).collect(),
                confidences: logits.iter().map(|l| l.abs() / cfg.temperature).collect(),
                bits: bits.clone(),
            });
            BitVector::new(bits)?
        }
        HeadKind::Linear => {
            let logits = guided_logits(|z| model.linear_logits(z), z, guidance, &mut trace.head_calls)?;
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = logits.iter().map(|l| ((l - max) / cfg.temperature).exp()).collect();
            let total: f64 = weights.iter().sum();
            let mut u = rng.random::<f64>() * total;
            let mut index = weights.len() - 1;
            for (i, w) in weights.iter().enumerate() {
                if u < *w {
                    index = i;
                    break;
                }
                u -= w;
            }
            let bits = index_to_bits(index as u64, k)?;
            trace.steps.push(StepTrace {
                step: 0,
                revealed: (0..k).collect(),
                bits: bits.bits().to_vec(),
                confidences: vec![(weights[index] / total).ln(); k],
            });
            bits
        }
        HeadKind::Mbm => unreachable!("masked-bit head samples progressively"),
    };
    Ok((bits, trace))
}

/// Samples one token with whichever head the model carries.
pub fn sample_next<R: Rng + ?Sized>(
    model: &BarModel,
    z: &[f64],
    guidance: Option<Guidance<'_>>,
    cfg: &SampleConfig,
    rng: &mut R,
) -> Result<(BitVector, TokenTrace)> {
    match model.head_kind() {
        HeadKind::Mbm => sample_token(model, z, guidance, cfg, rng),
        _ => sample_direct(model, z, guidance, cfg, rng),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DecodeMode {
    /// Keys and values of the prefix are cached and extended per token.
    #[default]
    Cached,
    /// The whole prefix is re-encoded for every token.
    Recompute,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct GenerationStats {
    /// Tokens in the generated sequence.
    pub tokens: usize,
    /// Tokens in the output grid after splitting patches.
    pub grid_tokens: usize,
    pub head_calls: usize,
    pub head_calls_per_token: f64,
    pub wall_seconds: f64,
    pub tokens_per_sec: f64,
    pub grid_tokens_per_sec: f64,
}

#[derive(Clone, Debug)]
pub struct Generation {
    pub grid: TokenGrid,
    pub sequence: Vec<BitVector>,
    pub traces: Vec<TokenTrace>,
    pub stats: GenerationStats,
}

fn grid_shape(n: usize, rows: Option<usize>) -> Result<(usize, usize)> {
    let rows = rows.unwrap_or_else(|| {
        let s = (n as f64).sqrt().round() as usize;
        if s * s == n {
            s
        } else {
            1
        }
    });
    if rows == 0 || !n.is_multiple_of(rows) {
        return Err(BarError::Shape(format!("{n} tokens do not fill {rows} grid rows")));
    }
    Ok((rows, n / rows))
}

/// Generates `n_tokens` tokens for `class` and reshapes them into a grid.
/// Token `i` draws from the random stream `(seed, i)`, so both decode modes
/// consume identical randomness.
pub fn generate_sequence(
    model: &BarModel,
    class: usize,
    n_tokens: usize,
    cfg: &SampleConfig,
    mode: DecodeMode,
) -> Result<Generation> {
    cfg.validate(model.bits())?;
    let ctx = model.config().context_len;
    if n_tokens == 0 || n_tokens > ctx {
        return Err(BarError::Domain(format!("cannot generate {n_tokens} tokens with a context of {ctx}")));
    }
    let (rows, cols) = grid_shape(n_tokens, cfg.grid_rows)?;
    let label = ClassLabel::Class(class);
    let guided = cfg.guidance_scale > 0.0;
    let params = model.params();
    let backbone = model.backbone();
    let started = Instant::now();

    let mut sequence: Vec<BitVector> = Vec::with_capacity(n_tokens);
    let mut traces = Vec::with_capacity(n_tokens);
    let mut head_calls = 0;
    let mut caches = match mode {
        DecodeMode::Cached => {
            let (c, z) = backbone.start(params, label)?;
            let null = if guided { Some(backbone.start(params, ClassLabel::Null)?) } else { None };
            Some(((c, z), null))
        }
        DecodeMode::Recompute => {
            backbone.validate_class(label)?;
            None
        }
    };
    for i in 0..n_tokens {
        let (z, z_null) = match &caches {
            Some(((_, z), null)) => (z.row(0).to_vec(), null.as_ref().map(|(_, z)| z.row(0).to_vec())),
            None => {
                let last = |label| -> Result<Vec<f64>> {
                    let z = model.backbone_forward(&sequence, label)?;
                    Ok(z.row(z.rows() - 1).to_vec())
                };
                (last(label)?, if guided { Some(last(ClassLabel::Null)?) } else { None })
            }
        };
        let guidance = z_null.as_deref().map(|z_null| Guidance {
            z_null,
            strength: guidance_strength(cfg, i, n_tokens),
        });
        let mut rng = stream(cfg.seed, &[i as u64]);
        let (token, trace) = sample_next(model, &z, guidance, cfg, &mut rng)?;
        head_calls += trace.head_calls;
        if i + 1 < n_tokens {
            if let Some(((cache, z), null)) = &mut caches {
                *z = backbone.advance(params, cache, &token)?;
                if let Some((cache, z)) = null {
                    *z = backbone.advance(params, cache, &token)?;
                }
            }
        }
        sequence.push(token);
        traces.push(trace);
    }
    let wall = started.elapsed().as_secs_f64();
    let grid = TokenGrid::new(rows, cols, sequence.clone())?;
    let grid = if cfg.patch_size > 1 { patch_unshuffle(&grid, cfg.patch_size)? } else { grid };
    let grid_tokens = grid.height() * grid.width();
    let per_sec = |n: usize| if wall > 0.0 { n as f64 / wall } else { f64::INFINITY };
    let stats = GenerationStats {
        tokens: n_tokens,
        grid_tokens,
        head_calls,
        head_calls_per_token: head_calls as f64 / n_tokens as f64,
        wall_seconds: wall,
        tokens_per_sec: per_sec(n_tokens),
        grid_tokens_per_sec: per_sec(grid_tokens),
    };
    Ok(Generation { grid, sequence, traces, stats })
}

/// Generates one sequence per class label, each with its own seed derived
/// from `cfg.seed` and its index.
pub fn generate_many(
    model: &BarModel,
    classes: &[usize],
    n_tokens: usize,
    cfg: &SampleConfig,
    exec: Exec,
) -> Result<Vec<Generation>> {
    exec.map_range(classes.len(), |i| {
        let cfg = SampleConfig { seed: derive_seed(cfg.seed, &[i as u64]), ..cfg.clone() };
        generate_sequence(model, classes[i], n_tokens, &cfg, DecodeMode::Cached)
    })
    .into_iter()
    .collect()
}

/// Largest bit width the exact enumeration accepts.
pub const EXACT_MAX_BITS: usize = 10;

/// Exact probability of each of the `2^k` tokens (indexed LSB-first) under
/// the unguided sampler at condition `z`, by enumerating every selection
/// and every outcome of the selected bits at every step.
pub fn exact_token_distribution(model: &BarModel, z: &[f64], cfg: &SampleConfig) -> Result<Vec<f64>> {
    let k = model.bits();
    cfg.validate(k)?;
    if k > EXACT_MAX_BITS {
        return Err(BarError::Capability(format!("exact enumeration is limited to {EXACT_MAX_BITS} bits")));
    }
    if cfg.temperature_mode != TemperatureMode::Logit {
        return Err(BarError::Capability("exact enumeration needs temperature_mode=logit".into()));
    }
    let mut out = vec![0.0; 1 << k];
    match model.head_kind() {
        HeadKind::Mbm => {
            let start = MaskedToken::fully_masked(k)?;
            enumerate_steps(model, z, cfg, start, 0, 1.0, &mut out)?;
        }
        HeadKind::Bit => {
            let p: Vec<f64> = model.bit_logits(z)?.iter().map(|l| sigmoid(l / cfg.temperature)).collect();
            for (i, o) in out.iter_mut().enumerate() {
                *o = (0..k).map(|j| if i >> j & 1 == 1 { p[j] } else { 1.0 - p[j] }).product();
            }
        }
        HeadKind::Linear => {
            let logits = model.linear_logits(z)?;
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logits.iter().map(|l| ((l - max) / cfg.temperature).exp()).collect();
            let total: f64 = w.iter().sum();
            out.iter_mut().zip(&w).for_each(|(o, w)| *o = w / total);
        }
    }
    Ok(out)
}

fn subsets(n: usize, size: usize) -> Vec<Vec<usize>> {
    (0u32..1 << n)
        .filter(|m| m.count_ones() as usize == size)
        .map(|m| (0..n).filter(|&i| m >> i & 1 == 1).collect())
        .collect()
}

fn enumerate_steps(
    model: &BarModel,
    z: &[f64],
    cfg: &SampleConfig,
    token: MaskedToken,
    step: usize,
    weight: f64,
    out: &mut [f64],
) -> Result<()> {
    let Some(&count) = cfg.schedule.steps().get(step) else {
        out[bits_to_index(token.bits())? as usize] += weight;
        return Ok(());
    };
    let logits = model.mbm_logits(&token, z)?;
    let masked: Vec<usize> = (0..token.len()).filter(|&j| token.is_masked(j)).collect();
    let choices: Vec<(Vec<usize>, f64)> = match cfg.selection {
        Selection::RandomOrder => {
            let all = subsets(masked.len(), count);
            let w = 1.0 / all.len() as f64;
            all.into_iter().map(|s| (s, w)).collect()
        }
        Selection::Confidence => {
            let mut order: Vec<usize> = (0..masked.len()).collect();
            order.sort_by(|&a, &b| logits[masked[b]].abs().total_cmp(&logits[masked[a]].abs()));
            order.truncate(count);
            vec![(order, 1.0)]
        }
    };
    for (subset, w) in choices {
        for outcome in 0u32..1 << count {
            let mut next = token.clone();
            let mut p = weight * w;
            for (bit_idx, &c) in subset.iter().enumerate() {
                let j = masked[c];
                let b = (outcome >> bit_idx & 1) as u8;
                let p1 = sigmoid(logits[j] / cfg.temperature);
                p *= if b == 1 { p1 } else { 1.0 - p1 };
                next.reveal(j, b);
            }
            enumerate_steps(model, z, cfg, next, step + 1, p, out)?;
        }
    }
    Ok(())
}

/// Total-variation distance between two distributions on the same support.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

#[cfg(test)]
mod tests;
