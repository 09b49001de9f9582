//! Causal backbone over bit tokens with interchangeable prediction heads.

mod backbone;
mod checkpoint;
mod config;
mod heads;
mod loss;

pub use backbone::{Backbone, ClassLabel, KvCache};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub(crate) use config::{for_each_entry, parse_field};
pub use config::{HeadKind, ModelConfig, LINEAR_HEAD_MAX_BITS};
pub use loss::{loss_bitwise, loss_linear, LossSupport};

use heads::Head;

use crate::bitcodec::{bits_to_index, BitVector};
use crate::error::{BarError, Result};
use crate::masking::MaskedToken;
use crate::nn::{Eager, Ops, ParamId, ParamStore, Tensor};
use crate::rng::stream;

#[derive(Clone, Debug)]
pub struct BarModel {
    config: ModelConfig,
    params: ParamStore,
    backbone: Backbone,
    head: Head,
}

impl BarModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, &[0x6d6f64656c]);
        let mut params = ParamStore::new();
        let backbone = Backbone::new(&mut params, &config, &mut rng);
        let head = Head::new(&mut params, &config, &mut rng);
        Ok(BarModel { config, params, backbone, head })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn head_kind(&self) -> HeadKind {
        self.config.head_kind
    }

    pub fn bits(&self) -> usize {
        self.config.bits
    }

    pub fn head_param_count(&self) -> usize {
        self.params.scalar_count_with_prefix("head.")
    }

    pub fn backbone_param_count(&self) -> usize {
        self.params.scalar_count_with_prefix("backbone.")
    }

    /// Conditions for a token prefix: `tokens.len() + 1` rows.
    pub fn conditions<O: Ops>(&self, o: &mut O, tokens: &[BitVector], class: ClassLabel) -> Result<O::V> {
        self.backbone.forward(o, tokens, class)
    }

    pub fn backbone_forward(&self, tokens: &[BitVector], class: ClassLabel) -> Result<Tensor> {
        let mut o = Eager::new(&self.params);
        let z = self.conditions(&mut o, tokens, class)?;
        Ok(std::sync::Arc::unwrap_or_clone(z))
    }

    fn mbm(&self) -> Result<&heads::MbmHead> {
        match &self.head {
            Head::Mbm(h) => Ok(h),
            _ => Err(BarError::Capability(format!("model has a {} head", self.config.head_kind))),
        }
    }

    fn check_token(&self, t: &MaskedToken) -> Result<()> {
        if t.len() != self.config.bits {
            return Err(BarError::Shape(format!("{}-bit token for a {}-bit model", t.len(), self.config.bits)));
        }
        Ok(())
    }

    fn check_conditions(&self, z: &Tensor) -> Result<()> {
        if z.cols() != self.config.width {
            return Err(BarError::Shape(format!("condition of width {} for width {}", z.cols(), self.config.width)));
        }
        Ok(())
    }

    /// Sum of per-position embeddings `table[3j + s]` with `s` the visible
    /// bit or the mask symbol.
    pub fn embed_masked_token(&self, t: &MaskedToken) -> Result<Vec<f64>> {
        let head = self.mbm()?;
        self.check_token(t)?;
        let mut o = Eager::new(&self.params);
        Ok(head.embed(&mut o, &[t]).data().to_vec())
    }

    /// Bit logits of the masked-bit head for one token and condition.
    pub fn mbm_logits(&self, t: &MaskedToken, z: &[f64]) -> Result<Vec<f64>> {
        let z = Tensor::row_vector(z.to_vec());
        Ok(self.mbm_logits_rows(&[t], &z)?.into_data())
    }

    /// Batched form of [`BarModel::mbm_logits`]; row `i` pairs `tokens[i]`
    /// with row `i` of `z`.
    pub fn mbm_logits_rows(&self, tokens: &[&MaskedToken], z: &Tensor) -> Result<Tensor> {
        let head = self.mbm()?;
        self.check_conditions(z)?;
        if z.rows() != tokens.len() {
            return Err(BarError::Shape(format!("{} tokens for {} conditions", tokens.len(), z.rows())));
        }
        for t in tokens {
            self.check_token(t)?;
        }
        let mut o = Eager::new(&self.params);
        let z = o.constant(z.clone());
        Ok(std::sync::Arc::unwrap_or_clone(head.forward(&mut o, tokens, &z)))
    }

    fn affine_logits(&self, z: &[f64]) -> Result<Vec<f64>> {
        let a = match &self.head {
            Head::Bit(a) | Head::Linear(a) => a,
            Head::Mbm(_) => return Err(BarError::Capability("model has an mbm head".into())),
        };
        let z = Tensor::row_vector(z.to_vec());
        self.check_conditions(&z)?;
        let mut o = Eager::new(&self.params);
        let z = o.constant(z);
        Ok(a.apply(&mut o, &z).data().to_vec())
    }

    /// `k` independent bit logits from the bit head.
    pub fn bit_logits(&self, z: &[f64]) -> Result<Vec<f64>> {
        if self.config.head_kind != HeadKind::Bit {
            return Err(BarError::Capability(format!("model has a {} head", self.config.head_kind)));
        }
        self.affine_logits(z)
    }

    /// `2^k` vocabulary logits from the linear head.
    pub fn linear_logits(&self, z: &[f64]) -> Result<Vec<f64>> {
        if self.config.head_kind != HeadKind::Linear {
            return Err(BarError::Capability(format!("model has a {} head", self.config.head_kind)));
        }
        self.affine_logits(z)
    }

    /// Training loss of one sequence: the mean over predicted tokens of the
    /// per-token loss. For the masked-bit head `masked[i]` is the masked view
    /// of `tokens[i]`; tokens with no counted bit are left out of the mean.
    pub fn sequence_loss<O: Ops>(
        &self,
        o: &mut O,
        tokens: &[BitVector],
        class: ClassLabel,
        masked: &[MaskedToken],
        support: LossSupport,
    ) -> Result<O::V> {
        let n = tokens.len();
        if n == 0 {
            return Err(BarError::Domain("cannot score an empty sequence".into()));
        }
        let k = self.config.bits;
        let z = self.conditions(o, &tokens[..n - 1], class)?;
        match &self.head {
            Head::Mbm(head) => {
                if masked.len() != n {
                    return Err(BarError::Shape(format!("{} masked views for {n} tokens", masked.len())));
                }
                let mut targets = Tensor::zeros(n, k);
                let mut weights = Tensor::zeros(n, k);
                let counts: Vec<usize> = masked
                    .iter()
                    .map(|m| match support {
                        LossSupport::Masked => m.masked_count(),
                        LossSupport::AllBits => k,
                    })
                    .collect();
                let live = counts.iter().filter(|&&c| c > 0).count();
                if live == 0 {
                    return Ok(o.constant(Tensor::scalar(0.0)));
                }
                for (i, (t, m)) in tokens.iter().zip(masked).enumerate() {
                    self.check_token(m)?;
                    if m.bits() != t {
                        return Err(BarError::Shape(format!("masked view {i} does not match its token")));
                    }
                    for j in 0..k {
                        targets.row_mut(i)[j] = f64::from(t.get(j));
                        if support == LossSupport::AllBits || m.is_masked(j) {
                            weights.row_mut(i)[j] = 1.0 / (counts[i] * live) as f64;
                        }
                    }
                }
                let refs: Vec<&MaskedToken> = masked.iter().collect();
                let logits = head.forward(o, &refs, &z);
                Ok(o.bce_sum(&logits, &targets, &weights))
            }
            Head::Bit(a) => {
                let logits = a.apply(o, &z);
                let targets =
                    Tensor::from_vec(n, k, tokens.iter().flat_map(|t| t.bits().iter().map(|&b| f64::from(b))).collect());
                let weights = Tensor::full(n, k, 1.0 / (n * k) as f64);
                Ok(o.bce_sum(&logits, &targets, &weights))
            }
            Head::Linear(a) => {
                let logits = a.apply(o, &z);
                let targets = tokens
                    .iter()
                    .map(|t| bits_to_index(t).map(|i| i as usize))
                    .collect::<Result<Vec<_>>>()?;
                Ok(o.ce_sum(&logits, &targets, &vec![1.0 / n as f64; n]))
            }
        }
    }

    /// Parameters through which the condition reaches the masked-bit head's
    /// output; zeroing them makes the head ignore `z`.
    pub fn head_condition_weights(&self) -> Result<Vec<ParamId>> {
        Ok(self.mbm()?.modulation_weights())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.to_pairs(),
            tensors: self
                .params
                .ids()
                .map(|id| (self.params.name(id).to_string(), self.params.get(id).clone()))
                .collect(),
        }
    }

    /// Rebuilds a model from a checkpoint. Tensors whose names are not model
    /// parameters are ignored (optimizer state shares the container).
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = ModelConfig::from_pairs(ck.config.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
        let mut model = BarModel::new(config, 0)?;
        let ids: Vec<ParamId> = model.params.ids().collect();
        for id in ids {
            let name = model.params.name(id).to_string();
            let t = ck
                .tensor(&name)
                .ok_or_else(|| BarError::Format(format!("checkpoint lacks parameter `{name}`")))?;
            if t.shape() != model.params.get(id).shape() {
                return Err(BarError::Format(format!("parameter `{name}` has shape {:?}", t.shape())));
            }
            model.params.set(id, t.clone());
        }
        Ok(model)
    }

    /// Rounds every parameter to the nearest `f32`, the checkpoint precision.
    pub fn round_to_f32(&mut self) {
        let ids: Vec<ParamId> = self.params.ids().collect();
        for id in ids {
            self.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = f64::from(*v as f32));
        }
    }
}

#[cfg(test)]
mod tests;
