//! Forward and backward kernels shared by the tape and the eager evaluator.
//!
//! Each output row of a row-wise kernel depends only on the matching input
//! row and is accumulated in a fixed order, so computing one row at a time
//! (incremental decoding) reproduces the full-batch result bit for bit.

use super::Tensor;

pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols(), b.rows(), "matmul {:?} x {:?}", a, b);
    let (m, n, p) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * p];
    let bd = b.data();
    for i in 0..m {
        let arow = a.row(i);
        let orow = &mut out[i * p..(i + 1) * p];
        for l in 0..n {
            let x = arow[l];
            if x == 0.0 {
                continue;
            }
            for (o, &w) in orow.iter_mut().zip(&bd[l * p..(l + 1) * p]) {
                *o += x * w;
            }
        }
    }
    Tensor::from_vec(m, p, out)
}

/// `aᵀ · b`
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.rows(), b.rows(), "matmul_tn {:?} x {:?}", a, b);
    let (m, n, p) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; n * p];
    for i in 0..m {
        let arow = a.row(i);
        let brow = b.row(i);
        for l in 0..n {
            let x = arow[l];
            if x == 0.0 {
                continue;
            }
            for (o, &w) in out[l * p..(l + 1) * p].iter_mut().zip(brow) {
                *o += x * w;
            }
        }
    }
    Tensor::from_vec(n, p, out)
}

/// `a · bᵀ`
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols(), b.cols(), "matmul_nt {:?} x {:?}", a, b);
    let (m, p) = (a.rows(), b.rows());
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        let arow = a.row(i);
        for j in 0..p {
            out[i * p + j] = dot(arow, b.row(j));
        }
    }
    Tensor::from_vec(m, p, out)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Binary cross-entropy of a Bernoulli logit against a 0/1 target.
pub fn bce_with_logit(logit: f64, target: f64) -> f64 {
    softplus(logit) - target * logit
}

/// Row-wise `x / rms(x)`; returns the output and the per-row inverse rms.
pub fn rms_norm(x: &Tensor, eps: f64) -> (Tensor, Vec<f64>) {
    let mut out = x.clone();
    let mut inv = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
        let s = 1.0 / (ms + eps).sqrt();
        row.iter_mut().for_each(|v| *v *= s);
        inv.push(s);
    }
    (out, inv)
}

pub fn rms_norm_backward(y: &Tensor, inv: &[f64], dy: &Tensor) -> Tensor {
    let n = y.cols() as f64;
    let mut dx = Tensor::zeros(y.rows(), y.cols());
    for r in 0..y.rows() {
        let (yr, gr) = (y.row(r), dy.row(r));
        let proj = dot(yr, gr) / n;
        for ((d, &yv), &gv) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
            *d = inv[r] * (gv - yv * proj);
        }
    }
    dx
}

/// Row-wise standardization without affine parameters.
pub fn layer_norm(x: &Tensor, eps: f64) -> (Tensor, Vec<f64>) {
    let mut out = x.clone();
    let mut inv = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let n = row.len() as f64;
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let s = 1.0 / (var + eps).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) * s);
        inv.push(s);
    }
    (out, inv)
}

pub fn layer_norm_backward(y: &Tensor, inv: &[f64], dy: &Tensor) -> Tensor {
    let n = y.cols() as f64;
    let mut dx = Tensor::zeros(y.rows(), y.cols());
    for r in 0..y.rows() {
        let (yr, gr) = (y.row(r), dy.row(r));
        let mean_g = gr.iter().sum::<f64>() / n;
        let proj = dot(yr, gr) / n;
        for ((d, &yv), &gv) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
            *d = inv[r] * (gv - mean_g - yv * proj);
        }
    }
    dx
}

const ROPE_BASE: f64 = 10_000.0;

/// Rotates each head's consecutive feature pairs by position-dependent
/// angles. Row `r` sits at absolute position `offset + r`. `sign = -1.0`
/// applies the inverse rotation, which is also the backward pass.
pub fn rope(x: &Tensor, heads: usize, offset: usize, sign: f64) -> Tensor {
    let dh = x.cols() / heads;
    let mut out = x.clone();
    for r in 0..x.rows() {
        let pos = (offset + r) as f64;
        let row = out.row_mut(r);
        for h in 0..heads {
            for m in 0..dh / 2 {
                let theta = pos * ROPE_BASE.powf(-2.0 * m as f64 / dh as f64);
                let (s, c) = (sign * theta).sin_cos();
                let i = h * dh + 2 * m;
                let (a, b) = (row[i], row[i + 1]);
                row[i] = a * c - b * s;
                row[i + 1] = a * s + b * c;
            }
        }
    }
    out
}

/// Multi-head attention of one query row over the first `len` key/value
/// rows. Writes the attention probabilities (`heads × len`) into `probs`.
pub fn attend_row(
    q: &[f64],
    keys: &Tensor,
    values: &Tensor,
    heads: usize,
    len: usize,
    out: &mut [f64],
    probs: &mut [f64],
) {
    let dh = q.len() / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        let p = &mut probs[h * len..(h + 1) * len];
        let qh = &q[cols.clone()];
        let mut max = f64::NEG_INFINITY;
        for (j, pj) in p.iter_mut().enumerate() {
            *pj = dot(qh, &keys.row(j)[cols.clone()]) * scale;
            max = max.max(*pj);
        }
        let mut z = 0.0;
        for pj in p.iter_mut() {
            *pj = (*pj - max).exp();
            z += *pj;
        }
        let o = &mut out[cols.clone()];
        o.iter_mut().for_each(|v| *v = 0.0);
        for (j, pj) in p.iter_mut().enumerate() {
            *pj /= z;
            for (ov, &vv) in o.iter_mut().zip(&values.row(j)[cols.clone()]) {
                *ov += *pj * vv;
            }
        }
    }
}

/// Causal self-attention; row `i` sees keys `0..=i`. Returns the output and
/// the probabilities laid out as `[row][head][key]` with stride `rows`.
pub fn causal_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> (Tensor, Vec<f64>) {
    let (t, d) = q.shape();
    let mut out = Tensor::zeros(t, d);
    let mut probs = vec![0.0; t * heads * t];
    for i in 0..t {
        let mut p = vec![0.0; heads * (i + 1)];
        attend_row(q.row(i), k, v, heads, i + 1, out.row_mut(i), &mut p);
        for h in 0..heads {
            let dst = &mut probs[(i * heads + h) * t..(i * heads + h) * t + i + 1];
            dst.copy_from_slice(&p[h * (i + 1)..(h + 1) * (i + 1)]);
        }
    }
    (out, probs)
}

pub fn causal_attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    probs: &[f64],
    dout: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (t, d) = q.shape();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Tensor::zeros(t, d);
    let mut dk = Tensor::zeros(t, d);
    let mut dv = Tensor::zeros(t, d);
    let mut dp = vec![0.0; t];
    for i in 0..t {
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let p = &probs[(i * heads + h) * t..(i * heads + h) * t + i + 1];
            let go = &dout.row(i)[cols.clone()];
            let mut acc = 0.0;
            for j in 0..=i {
                dp[j] = dot(go, &v.row(j)[cols.clone()]);
                acc += p[j] * dp[j];
                for (dvv, &g) in dv.row_mut(j)[cols.clone()].iter_mut().zip(go) {
                    *dvv += p[j] * g;
                }
            }
            for j in 0..=i {
                let ds = p[j] * (dp[j] - acc) * scale;
                if ds == 0.0 {
                    continue;
                }
                let krow = k.row(j)[cols.clone()].to_vec();
                for (dqv, kv) in dq.row_mut(i)[cols.clone()].iter_mut().zip(&krow) {
                    *dqv += ds * kv;
                }
                let qrow = q.row(i)[cols.clone()].to_vec();
                for (dkv, qv) in dk.row_mut(j)[cols.clone()].iter_mut().zip(&qrow) {
                    *dkv += ds * qv;
                }
            }
        }
    }
    (dq, dk, dv)
}

/// Geometry of a 2-D convolution over a `(height·width) × channels` map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }

    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let y = (oy * self.stride + ky) as isize - self.pad as isize;
        let x = (ox * self.stride + kx) as isize - self.pad as isize;
        if y < 0 || x < 0 || y >= self.height as isize || x >= self.width as isize {
            None
        } else {
            Some(y as usize * self.width + x as usize)
        }
    }
}

/// Unfolds receptive fields into rows; columns are ordered `(ky, kx, channel)`.
pub fn im2col(x: &Tensor, g: &ConvGeom) -> Tensor {
    let (oh, ow, c) = (g.out_height(), g.out_width(), g.channels);
    let mut out = Tensor::zeros(oh * ow, g.patch_len());
    for oy in 0..oh {
        for ox in 0..ow {
            let row = out.row_mut(oy * ow + ox);
            for ky in 0..g.kernel {
                for kx in 0..g.kernel {
                    if let Some(src) = g.source(oy, ox, ky, kx) {
                        let base = (ky * g.kernel + kx) * c;
                        row[base..base + c].copy_from_slice(x.row(src));
                    }
                }
            }
        }
    }
    out
}

pub fn col2im(cols: &Tensor, g: &ConvGeom) -> Tensor {
    let (oh, ow, c) = (g.out_height(), g.out_width(), g.channels);
    let mut out = Tensor::zeros(g.height * g.width, c);
    for oy in 0..oh {
        for ox in 0..ow {
            let row = cols.row(oy * ow + ox);
            for ky in 0..g.kernel {
                for kx in 0..g.kernel {
                    if let Some(src) = g.source(oy, ox, ky, kx) {
                        let base = (ky * g.kernel + kx) * c;
                        for (o, &v) in out.row_mut(src).iter_mut().zip(&row[base..base + c]) {
                            *o += v;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Nearest-neighbour ×2 upsampling of a `(h·w) × c` map.
pub fn upsample2(x: &Tensor, h: usize, w: usize) -> Tensor {
    let c = x.cols();
    let mut out = Tensor::zeros(4 * h * w, c);
    for y in 0..2 * h {
        for xx in 0..2 * w {
            out.row_mut(y * 2 * w + xx).copy_from_slice(x.row((y / 2) * w + xx / 2));
        }
    }
    out
}

pub fn upsample2_backward(dy: &Tensor, h: usize, w: usize) -> Tensor {
    let c = dy.cols();
    let mut out = Tensor::zeros(h * w, c);
    for y in 0..2 * h {
        for xx in 0..2 * w {
            let src = dy.row(y * 2 * w + xx).to_vec();
            for (o, v) in out.row_mut((y / 2) * w + xx / 2).iter_mut().zip(src) {
                *o += v;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let a = Tensor::from_vec(2, 3, vec![1., 2., 3., 4., 5., 6.]);
        let b = Tensor::from_vec(3, 2, vec![1., 0., 0., 1., 1., 1.]);
        let c = matmul(&a, &b);
        assert_eq!(c.data(), &[4., 5., 10., 11.]);
        let at = Tensor::from_vec(3, 2, vec![1., 4., 2., 5., 3., 6.]);
        assert_eq!(matmul_tn(&at, &b), c);
        let bt = Tensor::from_vec(2, 3, vec![1., 0., 1., 0., 1., 1.]);
        assert_eq!(matmul_nt(&a, &bt), c);
    }

    #[test]
    fn rope_inverse_restores_input() {
        let x = Tensor::from_vec(3, 4, (0..12).map(|v| v as f64 * 0.3 - 1.0).collect());
        let y = rope(&rope(&x, 2, 5, 1.0), 2, 5, -1.0);
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0);
    }

    #[test]
    fn attention_rows_match_incremental() {
        let q = Tensor::from_vec(3, 4, (0..12).map(|v| (v as f64).sin()).collect());
        let k = Tensor::from_vec(3, 4, (0..12).map(|v| (v as f64).cos()).collect());
        let v = Tensor::from_vec(3, 4, (0..12).map(|v| v as f64 * 0.1).collect());
        let (full, _) = causal_attention(&q, &k, &v, 2);
        let mut row = vec![0.0; 4];
        let mut p = vec![0.0; 2 * 2];
        attend_row(q.row(1), &k, &v, 2, 2, &mut row, &mut p);
        assert_eq!(row, full.row(1));
    }

    #[test]
    fn conv_unfold_folds_back() {
        let g = ConvGeom { height: 4, width: 4, channels: 2, kernel: 3, stride: 1, pad: 1 };
        let x = Tensor::full(16, 2, 1.0);
        let folded = col2im(&im2col(&x, &g), &g);
        // corner cells are covered by 4 windows, centre cells by 9
        assert_eq!(folded.get(0, 0), 4.0);
        assert_eq!(folded.get(5, 1), 9.0);
    }
}
