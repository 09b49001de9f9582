use rand::Rng;

use super::config::{lr_at, TrainConfig};
use super::optim::AdamW;
use crate::error::{BarError, Result};
use crate::exec::Exec;
use crate::harness::tasks::Sequence;
use crate::masking::{apply_bit_mask, MaskedToken};
use crate::model::{BarModel, ClassLabel, HeadKind};
use crate::nn::{Gradients, Graph, Ops, Tensor};
use crate::rng::stream;

const STEP_STREAM: u64 = 0x73746570;

/// Outcome of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    /// Batch loss before the update.
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub lr: f64,
}

/// Masked views for one training sequence: one ratio per token.
pub fn mask_sequence<R: Rng + ?Sized>(model: &BarModel, seq: &Sequence, cfg: &TrainConfig, rng: &mut R) -> Vec<MaskedToken> {
    if model.head_kind() != HeadKind::Mbm {
        return Vec::new();
    }
    seq.tokens
        .iter()
        .map(|t| {
            let ratio = cfg.mask_strategy.sample(rng);
            apply_bit_mask(t, ratio, rng)
        })
        .collect()
}

/// Loss and gradients of one sequence, with gradients scaled by `scale`.
fn sequence_gradients(
    model: &BarModel,
    seq: &Sequence,
    cfg: &TrainConfig,
    step: u64,
    index: usize,
    scale: f64,
) -> Result<(f64, Gradients)> {
    let mut rng = stream(cfg.seed, &[STEP_STREAM, step, index as u64]);
    let class = if rng.random::<f64>() < cfg.class_dropout { ClassLabel::Null } else { ClassLabel::Class(seq.class) };
    let masked = mask_sequence(model, seq, cfg, &mut rng);
    let mut g = Graph::new(model.params());
    let loss = model.sequence_loss(&mut g, &seq.tokens, class, &masked, cfg.loss_support)?;
    let value = g.value(&loss).item();
    let weight = g.constant(Tensor::scalar(scale));
    let scaled = g.mul(&loss, &weight);
    Ok((value, g.backward(scaled)))
}

/// Owns a model and its optimizer state.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: BarModel,
    pub optimizer: AdamW,
    pub config: TrainConfig,
    pub total_steps: u64,
}

impl Trainer {
    pub fn new(model: BarModel, config: TrainConfig, total_steps: u64) -> Result<Self> {
        config.validate()?;
        let optimizer = AdamW::new(config.optimizer(), model.params());
        Ok(Trainer { model, optimizer, config, total_steps })
    }

    pub fn step(&self) -> u64 {
        self.optimizer.step_count()
    }

    /// Mean loss over the batch, clipped gradient step, one AdamW update.
    /// Per-sequence randomness (class dropout, mask ratios and positions) is
    /// keyed by `(seed, step, index)`.
    pub fn train_step(&mut self, batch: &[Sequence], exec: Exec) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(BarError::Domain("empty batch".into()));
        }
        let len = batch[0].tokens.len();
        if batch.iter().any(|s| s.tokens.len() != len) {
            return Err(BarError::Shape("batch sequences differ in length".into()));
        }
        let step = self.step();
        let scale = 1.0 / batch.len() as f64;
        let (model, cfg) = (&self.model, &self.config);
        let results = exec.map_range(batch.len(), |i| sequence_gradients(model, &batch[i], cfg, step, i, scale));
        let mut grads = Gradients::zeros_like(self.model.params());
        let mut loss = 0.0;
        for r in results {
            let (l, g) = r?;
            loss += l * scale;
            grads.accumulate(&g);
        }
        let lr = lr_at(&self.config, step, self.total_steps);
        if !loss.is_finite() || !grads.is_finite() {
            let norms: Vec<String> = self
                .model
                .params()
                .ids()
                .filter(|&id| !self.model.params().get(id).is_finite())
                .map(|id| self.model.params().name(id).to_string())
                .collect();
            return Err(BarError::Numeric(format!(
                "non-finite loss {loss} at step {step} (lr {lr:e}); non-finite parameters: {norms:?}"
            )));
        }
        let grad_norm = grads.clip_global_norm(self.config.grad_clip_norm);
        self.optimizer.update(self.model.params_mut(), &grads, lr);
        Ok(StepReport { step, loss, grad_norm, lr })
    }
}
