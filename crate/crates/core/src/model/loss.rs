use crate::bitcodec::BitVector;
use crate::error::{BarError, Result};
use crate::nn::kernels::bce_with_logit;

/// Which bits of a target token contribute to the bit-wise loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LossSupport {
    #[default]
    Masked,
    AllBits,
}

impl std::str::FromStr for LossSupport {
    type Err = BarError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "masked" => Ok(LossSupport::Masked),
            "all_bits" => Ok(LossSupport::AllBits),
            _ => Err(BarError::config("loss_support", format!("unknown support `{s}`"))),
        }
    }
}

impl LossSupport {
    pub fn name(self) -> &'static str {
        match self {
            LossSupport::Masked => "masked",
            LossSupport::AllBits => "all_bits",
        }
    }
}

/// Mean binary cross-entropy over the counted positions, together with the
/// number of counted positions. Zero counted positions give `(0, 0)`.
pub fn loss_bitwise(logits: &[f64], target: &BitVector, counted: &[bool]) -> Result<(f64, usize)> {
    if logits.len() != target.len() || counted.len() != target.len() {
        return Err(BarError::Shape(format!(
            "{} logits, {}-bit target, {} count flags",
            logits.len(),
            target.len(),
            counted.len()
        )));
    }
    let mut sum = 0.0;
    let mut n = 0;
    for j in (0..logits.len()).filter(|&j| counted[j]) {
        sum += bce_with_logit(logits[j], f64::from(target.get(j)));
        n += 1;
    }
    Ok((if n == 0 { 0.0 } else { sum / n as f64 }, n))
}

/// Categorical cross-entropy of `logits` at `index`.
pub fn loss_linear(logits: &[f64], index: usize) -> Result<f64> {
    if index >= logits.len() {
        return Err(BarError::Domain(format!("index {index} outside a vocabulary of {}", logits.len())));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    Ok(lse - logits[index])
}
