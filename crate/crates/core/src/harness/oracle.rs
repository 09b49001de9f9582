//! Exact sequence distributions of small models by enumeration.

use crate::bitcodec::{index_to_bits, BitVector};
use crate::error::{BarError, Result};
use crate::model::{BarModel, ClassLabel, HeadKind};
use crate::sampler::{exact_token_distribution, SampleConfig, Selection};

pub const ORACLE_MAX_BITS: usize = 4;
pub const ORACLE_MAX_LEN: usize = 3;

/// Probability of every `len`-token sequence the sampler can produce for
/// `class`, indexed like [`sequence_index`](super::tasks::sequence_index).
/// Every prefix is expanded through the head with every unmask order
/// weighted uniformly.
pub fn exact_model_distribution(model: &BarModel, class: usize, len: usize, cfg: &SampleConfig) -> Result<Vec<f64>> {
    let k = model.bits();
    if k > ORACLE_MAX_BITS || len == 0 || len > ORACLE_MAX_LEN {
        return Err(BarError::Capability(format!(
            "exact sequence table needs k <= {ORACLE_MAX_BITS} and 1 <= len <= {ORACLE_MAX_LEN}, got k={k}, len={len}"
        )));
    }
    if model.head_kind() != HeadKind::Mbm || cfg.selection != Selection::RandomOrder || cfg.guidance_scale != 0.0 {
        return Err(BarError::Capability(
            "exact sequence table needs an mbm head, random_order selection and no guidance".into(),
        ));
    }
    if len > model.config().context_len {
        return Err(BarError::Domain(format!("{len} tokens exceed the context")));
    }
    let mut out = vec![0.0; 1 << (k * len)];
    let mut prefix = Vec::with_capacity(len);
    expand(model, class, len, cfg, &mut prefix, 1.0, &mut out)?;
    Ok(out)
}

fn expand(
    model: &BarModel,
    class: usize,
    len: usize,
    cfg: &SampleConfig,
    prefix: &mut Vec<BitVector>,
    weight: f64,
    out: &mut [f64],
) -> Result<()> {
    let k = model.bits();
    if prefix.len() == len {
        let idx = super::tasks::sequence_index(prefix)?;
        out[idx] += weight;
        return Ok(());
    }
    let z = model.backbone_forward(prefix, ClassLabel::Class(class))?;
    let table = exact_token_distribution(model, z.row(z.rows() - 1), cfg)?;
    for (token, p) in table.into_iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        prefix.push(index_to_bits(token as u64, k)?);
        expand(model, class, len, cfg, prefix, weight * p, out)?;
        prefix.pop();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::{make_schedule, ScheduleMode};
    use crate::model::ModelConfig;
    use crate::nn::kernels::sigmoid;

    fn model(k: usize, seed: u64) -> BarModel {
        let cfg = ModelConfig {
            depth: 1,
            width: 8,
            ffn_width: 16,
            heads: 2,
            bits: k,
            head_layers: 1,
            head_width: 8,
            class_count: 2,
            context_len: 4,
            ..ModelConfig::default()
        };
        BarModel::new(cfg, seed).unwrap()
    }

    fn random_order(k: usize, steps: usize) -> SampleConfig {
        SampleConfig {
            schedule: make_schedule(k, ScheduleMode::UniformSteps(steps)).unwrap(),
            temperature: 1.3,
            selection: Selection::RandomOrder,
            guidance_scale: 0.0,
            ..SampleConfig::unguided(k).unwrap()
        }
    }

    #[test]
    fn tables_normalize() {
        for (k, len, seed) in [(1, 3, 0), (2, 2, 1), (3, 2, 2), (4, 3, 3), (4, 1, 4)] {
            let m = model(k, seed);
            let p = exact_model_distribution(&m, 1, len, &random_order(k, k.min(2))).unwrap();
            assert_eq!(p.len(), 1 << (k * len));
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(p.iter().all(|&q| q >= 0.0));
        }
    }

    #[test]
    fn single_step_is_a_bernoulli_product() {
        let m = model(3, 5);
        let cfg = random_order(3, 1);
        let table = exact_model_distribution(&m, 0, 1, &cfg).unwrap();
        let z = m.backbone_forward(&[], ClassLabel::Class(0)).unwrap();
        let logits = m.mbm_logits(&crate::masking::MaskedToken::fully_masked(3).unwrap(), z.row(0)).unwrap();
        for (idx, &p) in table.iter().enumerate() {
            let direct: f64 = (0..3)
                .map(|j| {
                    let p1 = sigmoid(logits[j] / cfg.temperature);
                    if idx >> j & 1 == 1 {
                        p1
                    } else {
                        1.0 - p1
                    }
                })
                .product();
            assert!((p - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn limits_are_capability_errors() {
        let m = model(5, 0);
        assert!(matches!(exact_model_distribution(&m, 0, 1, &random_order(5, 2)), Err(BarError::Capability(_))));
        let m = model(2, 0);
        assert!(matches!(exact_model_distribution(&m, 0, 4, &random_order(2, 2)), Err(BarError::Capability(_))));
        let confident = SampleConfig { selection: Selection::Confidence, ..random_order(2, 2) };
        assert!(matches!(exact_model_distribution(&m, 0, 2, &confident), Err(BarError::Capability(_))));
        let guided = SampleConfig { guidance_scale: 1.0, ..random_order(2, 2) };
        assert!(matches!(exact_model_distribution(&m, 0, 2, &guided), Err(BarError::Capability(_))));
    }
}
