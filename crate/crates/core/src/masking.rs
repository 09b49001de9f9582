//! Masking-ratio samplers, per-bit masking of a token, and unmasking schedules.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::bitcodec::BitVector;
use crate::error::{BarError, Result};
use crate::nn::kernels::sigmoid;

/// Distribution of the fraction of a token's bits hidden during training.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RatioStrategy {
    Uniform,
    /// `(2/π)·arccos(u)`, which puts more mass on high ratios.
    Arccos,
    /// `sigmoid(n)` with `n ~ Normal(mu, sigma)`.
    LogitNormal { mu: f64, sigma: f64 },
}

impl Default for RatioStrategy {
    fn default() -> Self {
        RatioStrategy::LogitNormal { mu: 0.0, sigma: 1.0 }
    }
}

impl RatioStrategy {
    pub fn logit_normal(mu: f64, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !mu.is_finite() || !sigma.is_finite() {
            return Err(BarError::Domain(format!("logit-normal needs finite mu and sigma > 0, got ({mu}, {sigma})")));
        }
        Ok(RatioStrategy::LogitNormal { mu, sigma })
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            RatioStrategy::LogitNormal { mu, sigma } => Self::logit_normal(mu, sigma).map(|_| ()),
            _ => Ok(()),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            RatioStrategy::Uniform => rng.random::<f64>(),
            RatioStrategy::Arccos => {
                let u: f64 = rng.random();
                std::f64::consts::FRAC_2_PI * u.acos()
            }
            RatioStrategy::LogitNormal { mu, sigma } => {
                let n: f64 = StandardNormal.sample(rng);
                sigmoid(mu + sigma * n)
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            RatioStrategy::Uniform => "uniform",
            RatioStrategy::Arccos => "arccos",
            RatioStrategy::LogitNormal { .. } => "logit_normal",
        }
    }
}

pub fn sample_mask_ratio<R: Rng + ?Sized>(strategy: &RatioStrategy, rng: &mut R) -> Result<f64> {
    strategy.validate()?;
    Ok(strategy.sample(rng))
}

impl FromStr for RatioStrategy {
    type Err = BarError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(RatioStrategy::Uniform),
            "arccos" => Ok(RatioStrategy::Arccos),
            "logit_normal" => Ok(RatioStrategy::default()),
            _ => Err(BarError::config("mask_strategy", format!("unknown strategy `{s}`"))),
        }
    }
}

/// A token whose masked positions are hidden from the prediction head.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedToken {
    bits: BitVector,
    mask: Vec<bool>,
}

impl MaskedToken {
    pub fn new(bits: BitVector, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != bits.len() {
            return Err(BarError::Shape(format!("mask of length {} for a {}-bit token", mask.len(), bits.len())));
        }
        Ok(MaskedToken { bits, mask })
    }

    pub fn fully_masked(k: usize) -> Result<Self> {
        Self::new(BitVector::zeros(k)?, vec![true; k])
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn bits(&self) -> &BitVector {
        &self.bits
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn is_masked(&self, j: usize) -> bool {
        self.mask[j]
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// The visible value at `j`, or `None` when masked.
    pub fn visible(&self, j: usize) -> Option<u8> {
        (!self.mask[j]).then(|| self.bits.get(j))
    }

    /// Reveals position `j` with value `bit`.
    pub fn reveal(&mut self, j: usize, bit: u8) {
        let mut bits = self.bits.bits().to_vec();
        bits[j] = bit;
        self.bits = BitVector::new(bits).expect("bit value is 0 or 1");
        self.mask[j] = false;
    }
}

/// Bits masked for a ratio: `round(ratio·k)` with halves rounded up.
pub fn masked_count(ratio: f64, k: usize) -> usize {
    ((ratio.clamp(0.0, 1.0) * k as f64 + 0.5).floor() as usize).min(k)
}

/// Masks `round(ratio·k)` positions chosen uniformly without replacement.
pub fn apply_bit_mask<R: Rng + ?Sized>(token: &BitVector, ratio: f64, rng: &mut R) -> MaskedToken {
    let k = token.len();
    let m = masked_count(ratio, k);
    let mut mask = vec![false; k];
    for j in rand::seq::index::sample(rng, k, m) {
        mask[j] = true;
    }
    MaskedToken { bits: token.clone(), mask }
}

/// Per-step counts of bits to finalize while generating one token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UnmaskSchedule {
    steps: Vec<usize>,
    bit_width: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ScheduleMode {
    /// `s` near-equal steps, smaller ones first.
    UniformSteps(usize),
    Explicit(Vec<usize>),
}

pub fn make_schedule(k: usize, mode: ScheduleMode) -> Result<UnmaskSchedule> {
    if k == 0 {
        return Err(BarError::Domain("bit width must be at least 1".into()));
    }
    let steps = match mode {
        ScheduleMode::UniformSteps(s) => {
            if s == 0 || s > k {
                return Err(BarError::Domain(format!("{s} steps cannot cover {k} bits")));
            }
            let (base, extra) = (k / s, k % s);
            (0..s).map(|i| base + usize::from(i >= s - extra)).collect()
        }
        ScheduleMode::Explicit(steps) => {
            if steps.is_empty() || steps.contains(&0) {
                return Err(BarError::Schedule("schedule entries must be positive".into()));
            }
            let total: usize = steps.iter().sum();
            if total != k {
                return Err(BarError::Schedule(format!("schedule {steps:?} sums to {total}, token has {k} bits")));
            }
            steps
        }
    };
    Ok(UnmaskSchedule { steps, bit_width: k })
}

impl UnmaskSchedule {
    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn bit_width(&self) -> usize {
        self.bit_width
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Parses `2,2,5,7` and validates it against `k`.
    pub fn parse(text: &str, k: usize) -> Result<Self> {
        let steps = parse_steps(text)?;
        make_schedule(k, ScheduleMode::Explicit(steps))
    }
}

pub fn parse_steps(text: &str) -> Result<Vec<usize>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| BarError::config("unmask_schedule", format!("`{text}` is not a comma-separated list of counts")))
        })
        .collect()
}

impl fmt::Display for UnmaskSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.steps.iter().map(|s| s.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn schedules() {
        assert_eq!(make_schedule(16, ScheduleMode::UniformSteps(4)).unwrap().steps(), &[4, 4, 4, 4]);
        assert_eq!(make_schedule(16, ScheduleMode::UniformSteps(5)).unwrap().steps(), &[3, 3, 3, 3, 4]);
        assert_eq!(make_schedule(16, ScheduleMode::UniformSteps(6)).unwrap().steps(), &[2, 2, 3, 3, 3, 3]);
        assert!(make_schedule(16, ScheduleMode::Explicit(vec![2, 2, 5, 7])).is_ok());
        assert!(matches!(
            make_schedule(16, ScheduleMode::Explicit(vec![8, 8, 8])),
            Err(BarError::Schedule(_))
        ));
        assert!(matches!(make_schedule(4, ScheduleMode::UniformSteps(5)), Err(BarError::Domain(_))));
        assert!(make_schedule(4, ScheduleMode::Explicit(vec![4, 0])).is_err());
        assert_eq!(UnmaskSchedule::parse("2,2,5,7", 16).unwrap().to_string(), "2,2,5,7");
        assert!(UnmaskSchedule::parse("2,x", 16).is_err());
    }

    #[test]
    fn mask_counts() {
        let mut rng = stream(0, &[]);
        let t = BitVector::new(vec![1; 16]).unwrap();
        assert_eq!(apply_bit_mask(&t, 0.0, &mut rng).masked_count(), 0);
        assert_eq!(apply_bit_mask(&t, 1.0, &mut rng).masked_count(), 16);
        assert_eq!(apply_bit_mask(&t, 0.5, &mut rng).masked_count(), 8);
        assert_eq!(masked_count(0.5 / 16.0, 16), 1);
        assert_eq!(masked_count(0.49 / 16.0, 16), 0);
    }

    #[test]
    fn mask_positions_are_uniform() {
        let mut rng = stream(1, &[]);
        let t = BitVector::zeros(16).unwrap();
        let n = 100_000;
        let mut counts = [0usize; 16];
        for _ in 0..n {
            for (j, &m) in apply_bit_mask(&t, 0.5, &mut rng).mask().iter().enumerate() {
                counts[j] += usize::from(m);
            }
        }
        // each position is masked with probability 1/2
        let sd = (n as f64 * 0.25).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 / 2.0).abs() < 3.0 * sd, "count {c}");
        }
    }

    #[test]
    fn logit_normal_rejects_bad_sigma() {
        assert!(RatioStrategy::logit_normal(0.0, 0.0).is_err());
        assert!(RatioStrategy::logit_normal(0.0, -1.0).is_err());
        let bad = RatioStrategy::LogitNormal { mu: 0.0, sigma: 0.0 };
        assert!(sample_mask_ratio(&bad, &mut stream(0, &[])).is_err());
    }

    #[test]
    fn ratio_summary_statistics() {
        let mut rng = stream(2, &[]);
        let n = 100_000;
        let mean = (0..n).map(|_| RatioStrategy::Uniform.sample(&mut rng)).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.01);
        let mut ln: Vec<f64> = (0..n).map(|_| RatioStrategy::default().sample(&mut rng)).collect();
        ln.sort_by(f64::total_cmp);
        assert!((ln[n / 2] - 0.5).abs() < 0.01);
        assert!(ln.iter().all(|r| (0.0..=1.0).contains(r)));
    }

    #[test]
    fn reveal_updates_value_and_mask() {
        let mut t = MaskedToken::fully_masked(3).unwrap();
        t.reveal(1, 1);
        assert_eq!(t.visible(1), Some(1));
        assert_eq!(t.visible(0), None);
        assert_eq!(t.masked_count(), 2);
    }
}
