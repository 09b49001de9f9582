//! Reverse-mode automatic differentiation over a recorded tape.

use std::sync::Arc;

use super::kernels::{self, ConvGeom};
use super::ops::{Ops, NORM_EPS};
use super::{Gradients, ParamId, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Param(ParamId),
    Constant,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    Silu(NodeId),
    RmsNorm(NodeId, Vec<f64>),
    LayerNorm(NodeId, Vec<f64>),
    Rope(NodeId, usize, usize),
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        probs: Vec<f64>,
    },
    SliceRows(NodeId, usize),
    SteSign(NodeId),
    Im2col(NodeId, ConvGeom),
    Upsample2(NodeId, usize, usize),
    BceSum {
        logits: NodeId,
        targets: Tensor,
        weights: Tensor,
    },
    CeSum {
        logits: NodeId,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Tensor,
    },
    SquaredErrorSum {
        a: NodeId,
        target: Tensor,
        scale: f64,
    },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// A tape of operations over one parameter store.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<NodeId>>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[NodeId]) -> NodeId {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.push_arc(Arc::new(value), op, needs_grad)
    }

    fn push_arc(&mut self, value: Arc<Tensor>, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn val(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Backpropagates from a scalar node and returns parameter gradients.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        assert_eq!(self.val(loss).shape(), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = Gradients::zeros_like(self.params);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let send = |grads: &mut Vec<Option<Tensor>>, to: NodeId, d: Tensor| {
                if !self.needs(to) {
                    return;
                }
                match &mut grads[to.0] {
                    Some(acc) => acc.add_assign(&d),
                    slot => *slot = Some(d),
                }
            };
            match &node.op {
                Op::Param(pid) => out.get_mut(*pid).add_assign(&g),
                Op::Constant => {}
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        send(&mut grads, *a, kernels::matmul_nt(&g, self.val(*b)));
                    }
                    if self.needs(*b) {
                        send(&mut grads, *b, kernels::matmul_tn(self.val(*a), &g));
                    }
                }
                Op::Add(a, b) => {
                    send(&mut grads, *b, g.clone());
                    send(&mut grads, *a, g);
                }
                Op::AddRow(a, row) => {
                    if self.needs(*row) {
                        send(&mut grads, *row, column_sums(&g));
                    }
                    send(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        send(&mut grads, *a, g.zip_map(self.val(*b), |x, y| x * y));
                    }
                    if self.needs(*b) {
                        send(&mut grads, *b, g.zip_map(self.val(*a), |x, y| x * y));
                    }
                }
                Op::MulRow(a, row) => {
                    let r = self.val(*row);
                    if self.needs(*a) {
                        let mut da = g.clone();
                        for i in 0..da.rows() {
                            for (d, &s) in da.row_mut(i).iter_mut().zip(r.data()) {
                                *d *= s;
                            }
                        }
                        send(&mut grads, *a, da);
                    }
                    if self.needs(*row) {
                        send(&mut grads, *row, column_sums(&g.zip_map(self.val(*a), |x, y| x * y)));
                    }
                }
                Op::Silu(a) => {
                    let d = g.zip_map(self.val(*a), |gv, x| gv * kernels::silu_grad(x));
                    send(&mut grads, *a, d);
                }
                Op::RmsNorm(a, inv) => {
                    send(&mut grads, *a, kernels::rms_norm_backward(&node.value, inv, &g));
                }
                Op::LayerNorm(a, inv) => {
                    send(&mut grads, *a, kernels::layer_norm_backward(&node.value, inv, &g));
                }
                Op::Rope(a, heads, offset) => {
                    send(&mut grads, *a, kernels::rope(&g, *heads, *offset, -1.0));
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    probs,
                } => {
                    let (dq, dk, dv) = kernels::causal_attention_backward(
                        self.val(*q),
                        self.val(*k),
                        self.val(*v),
                        *heads,
                        probs,
                        &g,
                    );
                    send(&mut grads, *q, dq);
                    send(&mut grads, *k, dk);
                    send(&mut grads, *v, dv);
                }
                Op::SliceRows(a, start) => {
                    let src = self.val(*a);
                    let mut d = Tensor::zeros(src.rows(), src.cols());
                    let c = src.cols();
                    d.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                    send(&mut grads, *a, d);
                }
                Op::SteSign(a) => send(&mut grads, *a, g),
                Op::Im2col(a, geom) => send(&mut grads, *a, kernels::col2im(&g, geom)),
                Op::Upsample2(a, h, w) => {
                    send(&mut grads, *a, kernels::upsample2_backward(&g, *h, *w))
                }
                Op::BceSum {
                    logits,
                    targets,
                    weights,
                } => {
                    let s = g.item();
                    let x = self.val(*logits);
                    let mut d = x.zip_map(targets, |l, t| kernels::sigmoid(l) - t);
                    for (dv, w) in d.data_mut().iter_mut().zip(weights.data()) {
                        *dv *= w * s;
                    }
                    send(&mut grads, *logits, d);
                }
                Op::CeSum {
                    logits,
                    targets,
                    weights,
                    probs,
                } => {
                    let s = g.item();
                    let mut d = probs.clone();
                    for r in 0..d.rows() {
                        let row = d.row_mut(r);
                        row[targets[r]] -= 1.0;
                        row.iter_mut().for_each(|v| *v *= weights[r] * s);
                    }
                    send(&mut grads, *logits, d);
                }
                Op::SquaredErrorSum { a, target, scale } => {
                    let s = g.item() * 2.0 * scale;
                    let d = self.val(*a).zip_map(target, |x, t| s * (x - t));
                    send(&mut grads, *a, d);
                }
            }
        }
        out
    }
}

fn column_sums(g: &Tensor) -> Tensor {
    let mut out = vec![0.0; g.cols()];
    for r in 0..g.rows() {
        for (o, v) in out.iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    Tensor::row_vector(out)
}

fn broadcast_row(a: &Tensor, row: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    assert_eq!(row.shape(), (1, a.cols()), "row broadcast {:?} over {:?}", row, a);
    let mut out = a.clone();
    for r in 0..out.rows() {
        for (o, &v) in out.row_mut(r).iter_mut().zip(row.data()) {
            *o = f(*o, v);
        }
    }
    out
}

pub(crate) fn add_row_values(a: &Tensor, row: &Tensor) -> Tensor {
    broadcast_row(a, row, |x, y| x + y)
}

pub(crate) fn mul_row_values(a: &Tensor, row: &Tensor) -> Tensor {
    broadcast_row(a, row, |x, y| x * y)
}

pub(crate) fn ste_sign_values(a: &Tensor) -> Tensor {
    a.map(|x| if x >= 0.0 { 1.0 } else { -1.0 })
}

pub(crate) fn bce_sum_value(logits: &Tensor, targets: &Tensor, weights: &Tensor) -> f64 {
    assert_eq!(logits.shape(), targets.shape(), "bce target shape");
    assert_eq!(logits.shape(), weights.shape(), "bce weight shape");
    logits
        .data()
        .iter()
        .zip(targets.data())
        .zip(weights.data())
        .filter(|(_, &w)| w != 0.0)
        .map(|((&l, &t), &w)| w * kernels::bce_with_logit(l, t))
        .sum()
}

/// Returns the weighted cross-entropy sum and the row softmax.
pub(crate) fn ce_sum_value(logits: &Tensor, targets: &[usize], weights: &[f64]) -> (f64, Tensor) {
    assert_eq!(logits.rows(), targets.len(), "ce target count");
    let mut probs = logits.clone();
    let mut total = 0.0;
    for r in 0..probs.rows() {
        let row = probs.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        let target = logits.get(r, targets[r]);
        total += weights[r] * (max + z.ln() - target);
        row.iter_mut().for_each(|v| *v /= z);
    }
    (total, probs)
}

pub(crate) fn squared_error_value(a: &Tensor, target: &Tensor, scale: f64) -> f64 {
    assert_eq!(a.shape(), target.shape(), "squared error shape");
    scale
        * a.data()
            .iter()
            .zip(target.data())
            .map(|(x, t)| (x - t) * (x - t))
            .sum::<f64>()
}

impl Ops for Graph<'_> {
    type V = NodeId;

    fn value<'a>(&'a self, v: &'a NodeId) -> &'a Tensor {
        self.val(*v)
    }

    fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.param_nodes[id.0] {
            return n;
        }
        let n = self.push_arc(self.params.shared(id), Op::Param(id), true);
        self.param_nodes[id.0] = Some(n);
        n
    }

    fn constant(&mut self, t: Tensor) -> NodeId {
        self.push_arc(Arc::new(t), Op::Constant, false)
    }

    fn matmul(&mut self, a: &NodeId, b: &NodeId) -> NodeId {
        let v = kernels::matmul(self.val(*a), self.val(*b));
        self.push(v, Op::MatMul(*a, *b), &[*a, *b])
    }

    fn add(&mut self, a: &NodeId, b: &NodeId) -> NodeId {
        let v = self.val(*a).zip_map(self.val(*b), |x, y| x + y);
        self.push(v, Op::Add(*a, *b), &[*a, *b])
    }

    fn add_row(&mut self, a: &NodeId, row: &NodeId) -> NodeId {
        let v = add_row_values(self.val(*a), self.val(*row));
        self.push(v, Op::AddRow(*a, *row), &[*a, *row])
    }

    fn mul(&mut self, a: &NodeId, b: &NodeId) -> NodeId {
        let v = self.val(*a).zip_map(self.val(*b), |x, y| x * y);
        self.push(v, Op::Mul(*a, *b), &[*a, *b])
    }

    fn mul_row(&mut self, a: &NodeId, row: &NodeId) -> NodeId {
        let v = mul_row_values(self.val(*a), self.val(*row));
        self.push(v, Op::MulRow(*a, *row), &[*a, *row])
    }

    fn silu(&mut self, a: &NodeId) -> NodeId {
        let v = self.val(*a).map(kernels::silu);
        self.push(v, Op::Silu(*a), &[*a])
    }

    fn rms_norm(&mut self, a: &NodeId) -> NodeId {
        let (v, inv) = kernels::rms_norm(self.val(*a), NORM_EPS);
        self.push(v, Op::RmsNorm(*a, inv), &[*a])
    }

    fn layer_norm(&mut self, a: &NodeId) -> NodeId {
        let (v, inv) = kernels::layer_norm(self.val(*a), NORM_EPS);
        self.push(v, Op::LayerNorm(*a, inv), &[*a])
    }

    fn rope(&mut self, a: &NodeId, heads: usize, offset: usize) -> NodeId {
        let v = kernels::rope(self.val(*a), heads, offset, 1.0);
        self.push(v, Op::Rope(*a, heads, offset), &[*a])
    }

    fn causal_attention(&mut self, q: &NodeId, k: &NodeId, v: &NodeId, heads: usize) -> NodeId {
        let (out, probs) = kernels::causal_attention(self.val(*q), self.val(*k), self.val(*v), heads);
        self.push(
            out,
            Op::Attention {
                q: *q,
                k: *k,
                v: *v,
                heads,
                probs,
            },
            &[*q, *k, *v],
        )
    }

    fn slice_rows(&mut self, a: &NodeId, start: usize, len: usize) -> NodeId {
        let v = self.val(*a).slice_rows(start, len);
        self.push(v, Op::SliceRows(*a, start), &[*a])
    }

    fn ste_sign(&mut self, a: &NodeId) -> NodeId {
        let v = ste_sign_values(self.val(*a));
        self.push(v, Op::SteSign(*a), &[*a])
    }

    fn im2col(&mut self, a: &NodeId, geom: ConvGeom) -> NodeId {
        let v = kernels::im2col(self.val(*a), &geom);
        self.push(v, Op::Im2col(*a, geom), &[*a])
    }

    fn upsample2(&mut self, a: &NodeId, height: usize, width: usize) -> NodeId {
        let v = kernels::upsample2(self.val(*a), height, width);
        self.push(v, Op::Upsample2(*a, height, width), &[*a])
    }

    fn bce_sum(&mut self, logits: &NodeId, targets: &Tensor, weights: &Tensor) -> NodeId {
        let v = bce_sum_value(self.val(*logits), targets, weights);
        self.push(
            Tensor::scalar(v),
            Op::BceSum {
                logits: *logits,
                targets: targets.clone(),
                weights: weights.clone(),
            },
            &[*logits],
        )
    }

    fn ce_sum(&mut self, logits: &NodeId, targets: &[usize], weights: &[f64]) -> NodeId {
        let (v, probs) = ce_sum_value(self.val(*logits), targets, weights);
        self.push(
            Tensor::scalar(v),
            Op::CeSum {
                logits: *logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            &[*logits],
        )
    }

    fn squared_error_sum(&mut self, a: &NodeId, target: &Tensor, scale: f64) -> NodeId {
        let v = squared_error_value(self.val(*a), target, scale);
        self.push(
            Tensor::scalar(v),
            Op::SquaredErrorSum {
                a: *a,
                target: target.clone(),
                scale,
            },
            &[*a],
        )
    }
}
