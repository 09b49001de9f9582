use std::sync::Arc;

use rand::Rng;

use super::config::ModelConfig;
use crate::bitcodec::BitVector;
use crate::error::{BarError, Result};
use crate::nn::{kernels, Eager, Ops, ParamId, ParamStore, Tensor};

/// Which class embedding conditions a sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ClassLabel {
    Class(usize),
    /// The learned unconditional embedding used for guidance.
    Null,
}

#[derive(Clone, Debug)]
struct BlockIds {
    attn_norm: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ffn_norm: ParamId,
    w_gate: ParamId,
    w_up: ParamId,
    w_down: ParamId,
}

/// Pre-norm causal transformer over bit tokens. The sequence is
/// `class_repeat` class rows followed by the tokens; the output row just
/// before token `i` is the condition that predicts it.
#[derive(Clone, Debug)]
pub struct Backbone {
    width: usize,
    heads: usize,
    bits: usize,
    class_count: usize,
    context_len: usize,
    prefix: usize,
    class_emb: ParamId,
    bit_emb: ParamId,
    blocks: Vec<BlockIds>,
    final_norm: ParamId,
}

/// Keys and values of every processed row, per layer.
#[derive(Clone, Debug)]
pub struct KvCache {
    layers: Vec<(Tensor, Tensor)>,
    len: usize,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

fn append_row(t: &mut Tensor, row: &[f64]) {
    let cols = row.len();
    let rows = if t.is_empty() { 0 } else { t.rows() };
    let mut data = std::mem::replace(t, Tensor::zeros(0, cols)).into_data();
    data.extend_from_slice(row);
    *t = Tensor::from_vec(rows + 1, cols, data);
}

impl Backbone {
    pub(crate) fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let (w, f, k) = (cfg.width, cfg.ffn_width, cfg.bits);
        let proj = 1.0 / (w as f64).sqrt();
        let out_proj = proj / (2.0 * cfg.depth as f64).sqrt();
        let class_emb = store.add("backbone.class_emb", Tensor::randn(cfg.class_count + 1, w, 1.0, rng));
        let bit_emb = store.add("backbone.bit_emb", Tensor::randn(2 * k, w, 1.0 / (k as f64).sqrt(), rng));
        let blocks = (0..cfg.depth)
            .map(|i| {
                let mut add = |name: &str, t: Tensor| store.add(format!("backbone.block{i}.{name}"), t);
                BlockIds {
                    attn_norm: add("attn_norm", Tensor::full(1, w, 1.0)),
                    wq: add("wq", Tensor::randn(w, w, proj, rng)),
                    wk: add("wk", Tensor::randn(w, w, proj, rng)),
                    wv: add("wv", Tensor::randn(w, w, proj, rng)),
                    wo: add("wo", Tensor::randn(w, w, out_proj, rng)),
                    ffn_norm: add("ffn_norm", Tensor::full(1, w, 1.0)),
                    w_gate: add("w_gate", Tensor::randn(w, f, proj, rng)),
                    w_up: add("w_up", Tensor::randn(w, f, proj, rng)),
                    w_down: add("w_down", Tensor::randn(f, w, out_proj * (w as f64 / f as f64).sqrt(), rng)),
                }
            })
            .collect();
        let final_norm = store.add("backbone.final_norm", Tensor::full(1, w, 1.0));
        Backbone {
            width: w,
            heads: cfg.heads,
            bits: k,
            class_count: cfg.class_count,
            context_len: cfg.context_len,
            prefix: cfg.class_repeat,
            class_emb,
            bit_emb,
            blocks,
            final_norm,
        }
    }

    pub(crate) fn validate_class(&self, class: ClassLabel) -> Result<usize> {
        match class {
            ClassLabel::Class(c) if c < self.class_count => Ok(c),
            ClassLabel::Class(c) => Err(BarError::Domain(format!(
                "class {c} outside 0..{}",
                self.class_count
            ))),
            ClassLabel::Null => Ok(self.class_count),
        }
    }

    fn validate_tokens(&self, tokens: &[BitVector]) -> Result<()> {
        if tokens.len() > self.context_len {
            return Err(BarError::Domain(format!(
                "{} tokens exceed the context of {}",
                tokens.len(),
                self.context_len
            )));
        }
        if let Some(t) = tokens.iter().find(|t| t.len() != self.bits) {
            return Err(BarError::Shape(format!("{}-bit token for a {}-bit model", t.len(), self.bits)));
        }
        Ok(())
    }

    /// Indicator matrices selecting class and bit embeddings, one row per
    /// input row; `None` marks a class row.
    fn input_indicators(&self, rows: &[Option<&BitVector>], class_row: usize) -> (Tensor, Tensor) {
        let mut cls = Tensor::zeros(rows.len(), self.class_count + 1);
        let mut bits = Tensor::zeros(rows.len(), 2 * self.bits);
        for (r, item) in rows.iter().enumerate() {
            match item {
                None => cls.row_mut(r)[class_row] = 1.0,
                Some(t) => {
                    let row = bits.row_mut(r);
                    for (j, &b) in t.bits().iter().enumerate() {
                        row[2 * j + b as usize] = 1.0;
                    }
                }
            }
        }
        (cls, bits)
    }

    fn embed<O: Ops>(&self, o: &mut O, cls: Tensor, bits: Tensor) -> O::V {
        let cls = o.constant(cls);
        let bits = o.constant(bits);
        let ce = o.param(self.class_emb);
        let be = o.param(self.bit_emb);
        let a = o.matmul(&cls, &ce);
        let b = o.matmul(&bits, &be);
        o.add(&a, &b)
    }

    /// One transformer block. `attend` receives the rotated queries and keys
    /// and the values, so full and cached decoding share every other op.
    fn block<O: Ops>(
        &self,
        o: &mut O,
        ids: &BlockIds,
        x: &O::V,
        offset: usize,
        attend: &mut dyn FnMut(&mut O, &O::V, &O::V, &O::V) -> O::V,
    ) -> O::V {
        let g = o.param(ids.attn_norm);
        let h = o.rms_norm(x);
        let h = o.mul_row(&h, &g);
        let q = o.linear(&h, ids.wq, None);
        let k = o.linear(&h, ids.wk, None);
        let v = o.linear(&h, ids.wv, None);
        let q = o.rope(&q, self.heads, offset);
        let k = o.rope(&k, self.heads, offset);
        let a = attend(o, &q, &k, &v);
        let a = o.linear(&a, ids.wo, None);
        let x = o.add(x, &a);
        let g = o.param(ids.ffn_norm);
        let h = o.rms_norm(&x);
        let h = o.mul_row(&h, &g);
        let gate = o.linear(&h, ids.w_gate, None);
        let gate = o.silu(&gate);
        let up = o.linear(&h, ids.w_up, None);
        let f = o.mul(&gate, &up);
        let f = o.linear(&f, ids.w_down, None);
        o.add(&x, &f)
    }

    fn final_norm<O: Ops>(&self, o: &mut O, x: &O::V) -> O::V {
        let g = o.param(self.final_norm);
        let h = o.rms_norm(x);
        o.mul_row(&h, &g)
    }

    /// Conditions for every position: `tokens.len() + 1` rows of width
    /// `width`. Row `i` predicts token `i`.
    pub fn forward<O: Ops>(&self, o: &mut O, tokens: &[BitVector], class: ClassLabel) -> Result<O::V> {
        let class_row = self.validate_class(class)?;
        self.validate_tokens(tokens)?;
        let rows: Vec<Option<&BitVector>> =
            std::iter::repeat_n(None, self.prefix).chain(tokens.iter().map(Some)).collect();
        let (cls, bits) = self.input_indicators(&rows, class_row);
        let mut x = self.embed(o, cls, bits);
        let heads = self.heads;
        for ids in &self.blocks {
            x = self.block(o, ids, &x, 0, &mut |o, q, k, v| o.causal_attention(q, k, v, heads));
        }
        let x = o.slice_rows(&x, self.prefix - 1, tokens.len() + 1);
        Ok(self.final_norm(o, &x))
    }

    /// Feeds the class prefix into an empty cache and returns the condition
    /// for the first token.
    pub fn start(&self, params: &ParamStore, class: ClassLabel) -> Result<(KvCache, Tensor)> {
        let class_row = self.validate_class(class)?;
        let mut cache = KvCache {
            layers: self.blocks.iter().map(|_| (Tensor::zeros(0, self.width), Tensor::zeros(0, self.width))).collect(),
            len: 0,
        };
        let mut z = None;
        for _ in 0..self.prefix {
            z = Some(self.step_row(params, &mut cache, &[], class_row));
        }
        Ok((cache, z.expect("prefix has at least one row")))
    }

    /// Feeds one token and returns the condition for the next one. Values
    /// equal the corresponding rows of [`Backbone::forward`] bit for bit.
    pub fn advance(&self, params: &ParamStore, cache: &mut KvCache, token: &BitVector) -> Result<Tensor> {
        self.validate_tokens(std::slice::from_ref(token))?;
        if cache.len - self.prefix >= self.context_len {
            return Err(BarError::Domain(format!("context of {} tokens is full", self.context_len)));
        }
        Ok(self.step_row(params, cache, std::slice::from_ref(token), 0))
    }

    fn step_row(&self, params: &ParamStore, cache: &mut KvCache, token: &[BitVector], class_row: usize) -> Tensor {
        let pos = cache.len;
        let mut o = Eager::new(params);
        let (cls, bits) = self.input_indicators(&[token.first()], class_row);
        let mut x = self.embed(&mut o, cls, bits);
        let heads = self.heads;
        for (ids, (keys, values)) in self.blocks.iter().zip(cache.layers.iter_mut()) {
            x = self.block(&mut o, ids, &x, pos, &mut |_, q, k, v| {
                append_row(keys, k.row(0));
                append_row(values, v.row(0));
                let mut out = vec![0.0; q.cols()];
                let mut probs = vec![0.0; heads * (pos + 1)];
                kernels::attend_row(q.row(0), keys, values, heads, pos + 1, &mut out, &mut probs);
                Arc::new(Tensor::row_vector(out))
            });
        }
        cache.len += 1;
        let z = self.final_norm(&mut o, &x);
        Arc::unwrap_or_clone(z)
    }
}
