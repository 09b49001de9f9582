//! Held-out metrics for trained models.

use rand::seq::SliceRandom;

use crate::error::{BarError, Result};
use crate::exec::Exec;
use crate::harness::tasks::Sequence;
use crate::masking::{apply_bit_mask, make_schedule, MaskedToken, RatioStrategy, ScheduleMode};
use crate::model::{loss_bitwise, loss_linear, BarModel, ClassLabel, HeadKind, LossSupport};
use crate::nn::kernels::bce_with_logit;
use crate::nn::Eager;
use crate::rng::stream;
use crate::sampler::{sample_next, SampleConfig, Selection};

/// How masking ratios are chosen during evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RatioSource {
    Strategy(RatioStrategy),
    Fixed(f64),
}

fn require_mbm(model: &BarModel) -> Result<()> {
    if model.head_kind() != HeadKind::Mbm {
        return Err(BarError::Capability(format!("masked-bit metrics need an mbm head, not {}", model.head_kind())));
    }
    Ok(())
}

fn masked_views(seq: &Sequence, ratio: RatioSource, seed: u64, index: usize) -> Vec<MaskedToken> {
    let mut rng = stream(seed, &[0x6576616c, index as u64]);
    seq.tokens
        .iter()
        .map(|t| {
            let r = match ratio {
                RatioSource::Strategy(s) => s.sample(&mut rng),
                RatioSource::Fixed(r) => r,
            };
            apply_bit_mask(t, r, &mut rng)
        })
        .collect()
}

/// Per-sequence training loss (masked positions only) under the given
/// masking ratios.
pub fn masked_sequence_losses(
    model: &BarModel,
    data: &[Sequence],
    ratio: RatioSource,
    seed: u64,
    exec: Exec,
) -> Result<Vec<f64>> {
    require_mbm(model)?;
    exec.map_range(data.len(), |i| {
        let masked = masked_views(&data[i], ratio, seed, i);
        let mut o = Eager::new(model.params());
        let label = ClassLabel::Class(data[i].class);
        Ok(model.sequence_loss(&mut o, &data[i].tokens, label, &masked, LossSupport::Masked)?.item())
    })
    .into_iter()
    .collect()
}

/// Mean binary cross-entropy per masked bit, in nats.
pub fn masked_bit_nll(model: &BarModel, data: &[Sequence], ratio: RatioSource, seed: u64, exec: Exec) -> Result<f64> {
    require_mbm(model)?;
    let parts = exec.map_range(data.len(), |i| -> Result<(f64, usize)> {
        let seq = &data[i];
        let masked = masked_views(seq, ratio, seed, i);
        let z = model.backbone_forward(&seq.tokens[..seq.tokens.len() - 1], ClassLabel::Class(seq.class))?;
        let refs: Vec<&MaskedToken> = masked.iter().collect();
        let logits = model.mbm_logits_rows(&refs, &z)?;
        let mut total = (0.0, 0);
        for (r, m) in masked.iter().enumerate() {
            let (l, n) = loss_bitwise(logits.row(r), m.bits(), m.mask())?;
            total.0 += l * n as f64;
            total.1 += n;
        }
        Ok(total)
    });
    let (mut sum, mut count) = (0.0, 0);
    for p in parts {
        let (s, n) = p?;
        sum += s;
        count += n;
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Negative log-likelihood of one sequence's tokens, in nats per token.
/// The masked-bit head is scored by the chain rule along a random bit order
/// per token.
fn sequence_nll(model: &BarModel, seq: &Sequence, seed: u64, index: usize) -> Result<f64> {
    let n = seq.tokens.len();
    let k = model.bits();
    let z = model.backbone_forward(&seq.tokens[..n - 1], ClassLabel::Class(seq.class))?;
    let mut total = 0.0;
    match model.head_kind() {
        HeadKind::Mbm => {
            let mut rng = stream(seed, &[0x6e6c6c, index as u64]);
            let orders: Vec<Vec<usize>> = (0..n)
                .map(|_| {
                    let mut o: Vec<usize> = (0..k).collect();
                    o.shuffle(&mut rng);
                    o
                })
                .collect();
            let mut states: Vec<MaskedToken> =
                seq.tokens.iter().map(|t| MaskedToken::new(t.clone(), vec![true; k])).collect::<Result<_>>()?;
            for t in 0..k {
                let refs: Vec<&MaskedToken> = states.iter().collect();
                let logits = model.mbm_logits_rows(&refs, &z)?;
                for (i, state) in states.iter_mut().enumerate() {
                    let j = orders[i][t];
                    let bit = seq.tokens[i].get(j);
                    total += bce_with_logit(logits.row(i)[j], f64::from(bit));
                    state.reveal(j, bit);
                }
            }
        }
        HeadKind::Bit => {
            for (i, t) in seq.tokens.iter().enumerate() {
                let logits = model.bit_logits(z.row(i))?;
                total += loss_bitwise(&logits, t, &vec![true; k])?.0 * k as f64;
            }
        }
        HeadKind::Linear => {
            for (i, t) in seq.tokens.iter().enumerate() {
                let logits = model.linear_logits(z.row(i))?;
                total += loss_linear(&logits, crate::bitcodec::bits_to_index(t)? as usize)?;
            }
        }
    }
    Ok(total / n as f64)
}

/// Mean held-out negative log-likelihood in nats per token.
pub fn token_nll(model: &BarModel, data: &[Sequence], seed: u64, exec: Exec) -> Result<f64> {
    if data.is_empty() {
        return Err(BarError::Domain("empty evaluation set".into()));
    }
    let per = exec.map_range(data.len(), |i| sequence_nll(model, &data[i], seed, i));
    let mut sum = 0.0;
    for p in per {
        sum += p?;
    }
    Ok(sum / data.len() as f64)
}

/// Near-zero-temperature sampling with confidence selection.
pub fn greedy_config(k: usize) -> Result<SampleConfig> {
    Ok(SampleConfig {
        schedule: make_schedule(k, ScheduleMode::UniformSteps(k.min(4)))?,
        temperature: 1e-6,
        selection: Selection::Confidence,
        ..SampleConfig::unguided(k)?
    })
}

/// Fraction of tokens after the first that greedy decoding reproduces
/// exactly when given the true prefix.
pub fn token_accuracy(model: &BarModel, data: &[Sequence], cfg: &SampleConfig, exec: Exec) -> Result<f64> {
    let per = exec.map_range(data.len(), |i| -> Result<(usize, usize)> {
        let seq = &data[i];
        let n = seq.tokens.len();
        let z = model.backbone_forward(&seq.tokens[..n - 1], ClassLabel::Class(seq.class))?;
        let mut rng = stream(cfg.seed, &[0x616363, i as u64]);
        let mut hits = 0;
        for t in 1..n {
            let (token, _) = sample_next(model, z.row(t), None, cfg, &mut rng)?;
            hits += usize::from(token == seq.tokens[t]);
        }
        Ok((hits, n - 1))
    });
    let (mut hits, mut total) = (0, 0);
    for p in per {
        let (h, n) = p?;
        hits += h;
        total += n;
    }
    if total == 0 {
        return Err(BarError::Domain("sequences need at least two tokens".into()));
    }
    Ok(hits as f64 / total as f64)
}
