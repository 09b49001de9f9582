use rand::Rng;

use super::config::ModelConfig;
use crate::masking::MaskedToken;
use crate::nn::{Ops, ParamId, ParamStore, Tensor};

/// A `width → n` affine map with bias.
#[derive(Clone, Debug)]
pub(crate) struct Affine {
    pub w: ParamId,
    pub b: ParamId,
}

impl Affine {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, fan_in: usize, out: usize, std: f64, rng: &mut R) -> Self {
        Affine {
            w: store.add(format!("{name}.w"), Tensor::randn(fan_in, out, std, rng)),
            b: store.add(format!("{name}.b"), Tensor::zeros(1, out)),
        }
    }

    pub fn apply<O: Ops>(&self, o: &mut O, x: &O::V) -> O::V {
        o.linear(x, self.w, Some(self.b))
    }
}

#[derive(Clone, Debug)]
struct MbmBlock {
    shift: Affine,
    scale: Affine,
    gate: Affine,
    w_gate: ParamId,
    w_up: ParamId,
    w_down: ParamId,
}

/// Gated feed-forward blocks over the masked-token embedding whose
/// layer-norm shift, scale and residual gate are generated from the
/// condition `z`.
#[derive(Clone, Debug)]
pub(crate) struct MbmHead {
    bits: usize,
    mask_emb: ParamId,
    start: ParamId,
    blocks: Vec<MbmBlock>,
    final_shift: Affine,
    final_scale: Affine,
    out: Affine,
}

pub(crate) const MASK_SYMBOL: usize = 2;

impl MbmHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let (w, k, hw) = (cfg.width, cfg.bits, cfg.head_width);
        let mod_std = 0.1 / (w as f64).sqrt();
        let proj = 1.0 / (hw as f64).sqrt();
        let mask_emb = store.add("head.mask_emb", Tensor::randn(3 * k, hw, 1.0 / (k as f64).sqrt(), rng));
        let start = store.add("head.start", Tensor::randn(1, hw, 1.0, rng));
        let blocks = (0..cfg.head_layers)
            .map(|i| {
                let name = |s: &str| format!("head.block{i}.{s}");
                let shift = Affine::new(store, &name("shift"), w, hw, mod_std, rng);
                let scale = Affine::new(store, &name("scale"), w, hw, mod_std, rng);
                let gate = Affine::new(store, &name("gate"), w, hw, mod_std, rng);
                store.get_mut(gate.b).data_mut().fill(1.0);
                MbmBlock {
                    shift,
                    scale,
                    gate,
                    w_gate: store.add(name("w_gate"), Tensor::randn(hw, hw, proj, rng)),
                    w_up: store.add(name("w_up"), Tensor::randn(hw, hw, proj, rng)),
                    w_down: store.add(name("w_down"), Tensor::randn(hw, hw, proj, rng)),
                }
            })
            .collect();
        MbmHead {
            bits: k,
            mask_emb,
            start,
            final_shift: Affine::new(store, "head.final_shift", w, hw, mod_std, rng),
            final_scale: Affine::new(store, "head.final_scale", w, hw, mod_std, rng),
            out: Affine::new(store, "head.out", hw, k, proj, rng),
            blocks,
        }
    }

    /// Row `3j + s` of the embedding table holds position `j` with symbol
    /// `s ∈ {0, 1, MASK}`.
    pub fn indicators(&self, tokens: &[&MaskedToken]) -> Tensor {
        let mut ind = Tensor::zeros(tokens.len(), 3 * self.bits);
        for (r, t) in tokens.iter().enumerate() {
            let row = ind.row_mut(r);
            for j in 0..self.bits {
                let s = t.visible(j).map_or(MASK_SYMBOL, usize::from);
                row[3 * j + s] = 1.0;
            }
        }
        ind
    }

    pub fn embed<O: Ops>(&self, o: &mut O, tokens: &[&MaskedToken]) -> O::V {
        let ind = o.constant(self.indicators(tokens));
        let table = o.param(self.mask_emb);
        o.matmul(&ind, &table)
    }

    /// Bit logits, one row per (token, condition) pair.
    pub fn forward<O: Ops>(&self, o: &mut O, tokens: &[&MaskedToken], z: &O::V) -> O::V {
        let e = self.embed(o, tokens);
        let start = o.param(self.start);
        let mut h = o.add_row(&e, &start);
        let c = o.silu(z);
        for b in &self.blocks {
            let shift = b.shift.apply(o, &c);
            let scale = b.scale.apply(o, &c);
            let gate = b.gate.apply(o, &c);
            let n = o.layer_norm(&h);
            let m = o.modulate(&n, &shift, &scale);
            let g = o.linear(&m, b.w_gate, None);
            let g = o.silu(&g);
            let u = o.linear(&m, b.w_up, None);
            let f = o.mul(&g, &u);
            let f = o.linear(&f, b.w_down, None);
            let f = o.mul(&gate, &f);
            h = o.add(&h, &f);
        }
        let shift = self.final_shift.apply(o, &c);
        let scale = self.final_scale.apply(o, &c);
        let n = o.layer_norm(&h);
        let m = o.modulate(&n, &shift, &scale);
        self.out.apply(o, &m)
    }

    /// Weight matrices through which `z` reaches the output.
    pub fn modulation_weights(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.blocks.iter().flat_map(|b| [b.shift.w, b.scale.w, b.gate.w]).collect();
        ids.extend([self.final_shift.w, self.final_scale.w]);
        ids
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Head {
    Mbm(MbmHead),
    Bit(Affine),
    Linear(Affine),
}

impl Head {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let std = 1.0 / (cfg.width as f64).sqrt();
        match cfg.head_kind {
            super::HeadKind::Mbm => Head::Mbm(MbmHead::new(store, cfg, rng)),
            super::HeadKind::Bit => Head::Bit(Affine::new(store, "head.out", cfg.width, cfg.bits, std, rng)),
            super::HeadKind::Linear => {
                Head::Linear(Affine::new(store, "head.out", cfg.width, 1usize << cfg.bits, std, rng))
            }
        }
    }
}
