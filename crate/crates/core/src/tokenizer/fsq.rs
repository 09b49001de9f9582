//! Binary finite scalar quantization: one bit per latent channel.
//!
//! Levels sit at {-1, +1}. A value maps to bit 1 / level +1 when it is
//! non-negative, otherwise to bit 0 / level -1.

use crate::bitcodec::{BitVector, TokenGrid};
use crate::error::{BarError, Result};
use crate::nn::{Ops, Tensor};

pub const LEVELS_PER_CHANNEL: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FsqConfig {
    /// Latent channels per token; equals the token bit width.
    pub channels_per_token: usize,
    pub downsample_factor: usize,
}

impl FsqConfig {
    pub fn new(channels_per_token: usize, downsample_factor: usize) -> Result<Self> {
        if channels_per_token == 0 || downsample_factor == 0 {
            return Err(BarError::Domain("channels and downsample factor must be positive".into()));
        }
        Ok(FsqConfig { channels_per_token, downsample_factor })
    }

    pub fn bits_per_token(&self) -> usize {
        self.channels_per_token
    }
}

/// A `height × width` map of `channels`-dimensional real latent vectors,
/// stored one cell per row.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid {
    height: usize,
    width: usize,
    values: Tensor,
}

impl LatentGrid {
    pub fn new(height: usize, width: usize, values: Tensor) -> Result<Self> {
        if values.rows() != height * width || values.cols() == 0 {
            return Err(BarError::Shape(format!(
                "{}x{} latent grid cannot hold a {}x{} tensor",
                height,
                width,
                values.rows(),
                values.cols()
            )));
        }
        if !values.is_finite() {
            return Err(BarError::Numeric("latent grid holds NaN or infinite values".into()));
        }
        Ok(LatentGrid { height, width, values })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.values.cols()
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f64] {
        self.values.row(row * self.width + col)
    }
}

fn level(v: f64) -> f64 {
    if v >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Quantizes every channel to one bit; returns the bit tokens and the
/// quantized levels.
pub fn fsq_quantize(latent: &LatentGrid) -> Result<(TokenGrid, LatentGrid)> {
    if !latent.values.is_finite() {
        return Err(BarError::Numeric("cannot quantize NaN or infinite latents".into()));
    }
    let quantized = latent.values.map(level);
    let tokens = (0..quantized.rows())
        .map(|r| BitVector::new(quantized.row(r).iter().map(|&l| u8::from(l > 0.0)).collect()))
        .collect::<Result<Vec<_>>>()?;
    Ok((
        TokenGrid::new(latent.height, latent.width, tokens)?,
        LatentGrid { height: latent.height, width: latent.width, values: quantized },
    ))
}

pub fn fsq_dequantize(tokens: &TokenGrid) -> LatentGrid {
    let k = tokens.bits_per_token();
    let data = tokens
        .tokens()
        .iter()
        .flat_map(|t| t.bits().iter().map(|&b| if b == 1 { 1.0 } else { -1.0 }))
        .collect();
    LatentGrid {
        height: tokens.height(),
        width: tokens.width(),
        values: Tensor::from_vec(tokens.height() * tokens.width(), k, data),
    }
}

/// Differentiable quantization used inside training graphs: forward emits
/// the levels, backward passes the gradient through unchanged.
pub fn fsq_quantize_ste<O: Ops>(ops: &mut O, latent: &O::V) -> O::V {
    ops.ste_sign(latent)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bitcodec::{bits_to_index, index_to_bits};
    use crate::nn::{Graph, ParamStore};
    use crate::rng::stream;

    fn grid(h: usize, w: usize, c: usize, data: Vec<f64>) -> LatentGrid {
        LatentGrid::new(h, w, Tensor::from_vec(h * w, c, data)).unwrap()
    }

    #[test]
    fn sign_rule_and_tie() {
        let (tokens, q) = fsq_quantize(&grid(1, 1, 2, vec![-0.3, 0.7])).unwrap();
        assert_eq!(tokens.tokens()[0].bits(), &[0, 1]);
        assert_eq!(q.values().data(), &[-1.0, 1.0]);
        let (tokens, q) = fsq_quantize(&grid(1, 1, 1, vec![0.0])).unwrap();
        assert_eq!(tokens.tokens()[0].bits(), &[1]);
        assert_eq!(q.values().data(), &[1.0]);
    }

    #[test]
    fn rejects_non_finite() {
        let bad = LatentGrid::new(1, 1, Tensor::from_vec(1, 1, vec![f64::NAN]));
        assert!(matches!(bad, Err(BarError::Numeric(_))));
    }

    #[test]
    fn dequantize_levels() {
        let t = TokenGrid::new(1, 2, vec![
            BitVector::new(vec![0, 1]).unwrap(),
            BitVector::zeros(2).unwrap(),
        ])
        .unwrap();
        let l = fsq_dequantize(&t);
        assert_eq!(l.cell(0, 0), &[-1.0, 1.0]);
        assert_eq!(l.cell(0, 1), &[-1.0, -1.0]);
    }

    #[test]
    fn every_code_is_a_fixed_point_up_to_12_bits() {
        for k in 1..=12usize {
            let tokens = (0..1u64 << k).map(|v| index_to_bits(v, k).unwrap()).collect::<Vec<_>>();
            let n = tokens.len();
            let g = TokenGrid::new(1, n, tokens).unwrap();
            let (back, _) = fsq_quantize(&fsq_dequantize(&g)).unwrap();
            assert_eq!(back, g);
            assert_eq!(bits_to_index(&back.tokens()[n - 1]).unwrap(), (1 << k) - 1);
        }
    }

    #[test]
    fn straight_through_gradient_matches_surrogate_finite_differences() {
        // Surrogate forward: q = v + c with c = sign(v) - v frozen; its
        // derivative is checked against the tape's backward pass.
        let mut rng = stream(11, &[]);
        let v = Tensor::randn(100, 1, 1.0, &mut rng);
        let w = Tensor::randn(100, 1, 1.0, &mut rng);
        let mut store = ParamStore::new();
        let id = store.add("v", v.clone());
        let mut g = Graph::new(&store);
        let x = g.param(id);
        let q = fsq_quantize_ste(&mut g, &x);
        let wn = g.constant(w.clone());
        let prod = g.mul(&q, &wn);
        let ones = g.constant(Tensor::full(1, 100, 1.0));
        let loss = g.matmul(&ones, &prod);
        let grads = g.backward(loss);
        let frozen: Vec<f64> = v.data().iter().map(|&x| level(x) - x).collect();
        let surrogate = |vals: &[f64]| -> f64 {
            vals.iter().zip(&frozen).zip(w.data()).map(|((x, c), w)| (x + c) * w).sum()
        };
        let h = 1e-4;
        for i in 0..100 {
            let mut up = v.data().to_vec();
            let mut down = up.clone();
            up[i] += h;
            down[i] -= h;
            let fd = (surrogate(&up) - surrogate(&down)) / (2.0 * h);
            assert!((fd - grads.get(id).data()[i]).abs() <= 1e-5);
        }
    }
}
