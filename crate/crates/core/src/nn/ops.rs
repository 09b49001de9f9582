use super::kernels::ConvGeom;
use super::{ParamId, Tensor};

pub const NORM_EPS: f64 = 1e-6;

/// Differentiable operations. Model code is written once against this trait
/// and runs either on the recording [`Graph`](super::Graph) (training,
/// gradient checks) or on the [`Eager`](super::Eager) evaluator (sampling).
pub trait Ops {
    type V: Clone;

    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Tensor;
    fn param(&mut self, id: ParamId) -> Self::V;
    fn constant(&mut self, t: Tensor) -> Self::V;

    fn matmul(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    /// Adds a `1×n` row to every row of `a`.
    fn add_row(&mut self, a: &Self::V, row: &Self::V) -> Self::V;
    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    /// Multiplies every row of `a` elementwise by a `1×n` row.
    fn mul_row(&mut self, a: &Self::V, row: &Self::V) -> Self::V;
    fn silu(&mut self, a: &Self::V) -> Self::V;
    fn rms_norm(&mut self, a: &Self::V) -> Self::V;
    fn layer_norm(&mut self, a: &Self::V) -> Self::V;
    fn rope(&mut self, a: &Self::V, heads: usize, offset: usize) -> Self::V;
    fn causal_attention(&mut self, q: &Self::V, k: &Self::V, v: &Self::V, heads: usize) -> Self::V;
    fn slice_rows(&mut self, a: &Self::V, start: usize, len: usize) -> Self::V;
    /// Sign quantization to ±1 (ties to +1) with an identity backward pass.
    fn ste_sign(&mut self, a: &Self::V) -> Self::V;
    fn im2col(&mut self, a: &Self::V, geom: ConvGeom) -> Self::V;
    fn upsample2(&mut self, a: &Self::V, height: usize, width: usize) -> Self::V;

    /// `Σ w·bce(logit, target)` as a `1×1` value.
    fn bce_sum(&mut self, logits: &Self::V, targets: &Tensor, weights: &Tensor) -> Self::V;
    /// `Σ_r w_r·(−log softmax(logits_r)[target_r])`.
    fn ce_sum(&mut self, logits: &Self::V, targets: &[usize], weights: &[f64]) -> Self::V;
    /// `scale·Σ (a − target)²`.
    fn squared_error_sum(&mut self, a: &Self::V, target: &Tensor, scale: f64) -> Self::V;

    fn linear(&mut self, x: &Self::V, w: ParamId, b: Option<ParamId>) -> Self::V {
        let w = self.param(w);
        let y = self.matmul(x, &w);
        match b {
            Some(b) => {
                let b = self.param(b);
                self.add_row(&y, &b)
            }
            None => y,
        }
    }

    /// `x·(1 + scale) + shift`, the adaptive-normalization modulation.
    fn modulate(&mut self, x: &Self::V, shift: &Self::V, scale: &Self::V) -> Self::V {
        let xs = self.mul(x, scale);
        let y = self.add(x, &xs);
        self.add(&y, shift)
    }
}
