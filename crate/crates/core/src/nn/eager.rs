use std::sync::Arc;

use super::graph::{
    add_row_values, bce_sum_value, ce_sum_value, mul_row_values, squared_error_value, ste_sign_values,
};
use super::kernels::{self, ConvGeom};
use super::ops::{Ops, NORM_EPS};
use super::{ParamId, ParamStore, Tensor};

/// Forward-only evaluator. Uses the same kernels as [`Graph`](super::Graph),
/// so values agree bit for bit with a recorded forward pass.
pub struct Eager<'p> {
    params: &'p ParamStore,
}

impl<'p> Eager<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Eager { params }
    }
}

impl Ops for Eager<'_> {
    type V = Arc<Tensor>;

    fn value<'a>(&'a self, v: &'a Arc<Tensor>) -> &'a Tensor {
        v
    }

    fn param(&mut self, id: ParamId) -> Arc<Tensor> {
        self.params.shared(id)
    }

    fn constant(&mut self, t: Tensor) -> Arc<Tensor> {
        Arc::new(t)
    }

    fn matmul(&mut self, a: &Arc<Tensor>, b: &Arc<Tensor>) -> Arc<Tensor> {
        Arc::new(kernels::matmul(a, b))
    }

    fn add(&mut self, a: &Arc<Tensor>, b: &Arc<Tensor>) -> Arc<Tensor> {
        Arc::new(a.zip_map(b, |x, y| x + y))
    }

    fn add_row(&mut self, a: &Arc<Tensor>, row: &Arc<Tensor>) -> Arc<Tensor> {
        Arc::new(add_row_values(a, row))
    }

    fn mul(&mut self, a: &Arc<Tensor>, b: &Arc<Tensor>) -> Arc<Tensor> {
        Arc::new(a.zip_map(b, |x, y| x * y))
    }

    fn mul_row(&mut self, a: &Arc<Tensor>, row: &Arc<Tensor>) -> Arc<Tensor> {
        Arc::new(mul_row_values(a, row))
    }

    fn silu(&mut self, a: &Arc<Tensor>) -> Arc<Tensor> {
        Arc::new(a.map(kernels::silu))
    }

    fn rms_norm(&mut self, a: &Arc<Tensor>) -> Arc<Tensor> {
        Arc::new(kernels::rms_norm(a, NORM_EPS).0)
    }

    fn layer_norm(&mut self, a: &Arc<Tensor>) -> Arc<Tensor> {
        Arc::new(kernels::layer_norm(a, NORM_EPS).0)
    }

    fn rope(&mut self, a: &Arc<Tensor>, heads: usize, offset: usize) -> Arc<Tensor> {
        Arc::new(kernels::rope(a, heads, offset, 1.0))
    }

    fn causal_attention(
        &mut self,
        q: &Arc<Tensor>,
        k: &Arc<Tensor>,
        v: &Arc<Tensor>,
        heads: usize,
    ) -> Arc<Tensor> {
        Arc::new(kernels::causal_attention(q, k, v, heads).0)
    }

    fn slice_rows(&mut self, a: &Arc<Tensor>, start: usize, len: usize) -> Arc<Tensor> {
        Arc::new(a.slice_rows(start, len))
    }

    fn ste_sign(&mut self, a: &Arc<Tensor>) -> Arc<Tensor> {
        Arc::new(ste_sign_values(a))
    }

    fn im2col(&mut self, a: &Arc<Tensor>, geom: ConvGeom) -> Arc<Tensor> {
        Arc::new(kernels::im2col(a, &geom))
    }

    fn upsample2(&mut self, a: &Arc<Tensor>, height: usize, width: usize) -> Arc<Tensor> {
        Arc::new(kernels::upsample2(a, height, width))
    }

    fn bce_sum(&mut self, logits: &Arc<Tensor>, targets: &Tensor, weights: &Tensor) -> Arc<Tensor> {
        Arc::new(Tensor::scalar(bce_sum_value(logits, targets, weights)))
    }

    fn ce_sum(&mut self, logits: &Arc<Tensor>, targets: &[usize], weights: &[f64]) -> Arc<Tensor> {
        Arc::new(Tensor::scalar(ce_sum_value(logits, targets, weights).0))
    }

    fn squared_error_sum(&mut self, a: &Arc<Tensor>, target: &Tensor, scale: f64) -> Arc<Tensor> {
        Arc::new(Tensor::scalar(squared_error_value(a, target, scale)))
    }
}
