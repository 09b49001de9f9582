//! Small convolutional autoencoder around the binary FSQ bottleneck.
//!
//! Encoder: three 3-channel-in conv blocks (the first `log2 f` of them
//! strided), then a 1×1 projection to `k` latent channels. The decoder
//! mirrors it with nearest-neighbour upsampling. Feature maps are stored as
//! `(height·width) × channels` tensors.

use rand::seq::SliceRandom;

use super::fsq::{fsq_quantize, fsq_quantize_ste, LatentGrid};
use crate::bitcodec::TokenGrid;
use crate::error::{BarError, Result};
use crate::exec::Exec;
use crate::nn::kernels::ConvGeom;
use crate::nn::{Eager, Gradients, Graph, Ops, ParamId, ParamStore, Tensor};
use crate::rng::stream;
use crate::trainer::optim::{AdamW, AdamWConfig};
use crate::trainer::schedule::warmup_cosine;

pub const CONV_BLOCKS: usize = 3;
/// Weight of the squared distance between latents and their binary codes.
pub const COMMITMENT: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AutoencoderConfig {
    pub image_size: usize,
    pub image_channels: usize,
    pub hidden: usize,
    /// Spatial downsampling: 1, 2, 4 or 8.
    pub downsample: usize,
    pub bits: usize,
    /// `false` trains the same network with the quantizer removed.
    pub quantize: bool,
}

impl AutoencoderConfig {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.downsample, 1 | 2 | 4 | 8) {
            return Err(BarError::config("downsample", "must be 1, 2, 4 or 8"));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(self.downsample) {
            return Err(BarError::config("image_size", "must be a positive multiple of the downsample factor"));
        }
        if self.bits == 0 || self.hidden == 0 || self.image_channels == 0 {
            return Err(BarError::config("bits", "bits, hidden width and channels must be positive"));
        }
        Ok(())
    }

    fn strided(&self, block: usize) -> bool {
        block < self.downsample.trailing_zeros() as usize
    }

    pub fn latent_size(&self) -> usize {
        self.image_size / self.downsample
    }

    /// Latent bits per image.
    pub fn bits_per_image(&self) -> usize {
        self.latent_size() * self.latent_size() * self.bits
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AutoencoderTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct TrainedAutoencoder {
    pub model: Autoencoder,
    /// Mean per-pixel training MSE of each epoch.
    pub curve: Vec<f64>,
    /// Per-pixel MSE over the whole dataset after training.
    pub final_mse: f64,
}

#[derive(Clone, Copy, Debug)]
struct Layer {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
pub struct Autoencoder {
    pub config: AutoencoderConfig,
    pub params: ParamStore,
    encoder: Vec<Layer>,
    enc_proj: Layer,
    dec_proj: Layer,
    decoder: Vec<Layer>,
    out: Layer,
}

fn layer(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut crate::rng::Rng) -> Layer {
    let std = (1.0 / fan_in as f64).sqrt();
    Layer {
        w: store.add(format!("{name}.w"), Tensor::randn(fan_in, fan_out, std, rng)),
        b: store.add(format!("{name}.b"), Tensor::zeros(1, fan_out)),
    }
}

impl Autoencoder {
    pub fn new(config: AutoencoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, &[0xAE]);
        let mut p = ParamStore::new();
        let h = config.hidden;
        let mut encoder = Vec::new();
        for i in 0..CONV_BLOCKS {
            let c_in = if i == 0 { config.image_channels } else { h };
            let kernel = if config.strided(i) { 4 } else { 3 };
            encoder.push(layer(&mut p, &format!("enc.{i}"), kernel * kernel * c_in, h, &mut rng));
        }
        let enc_proj = layer(&mut p, "enc.proj", h, config.bits, &mut rng);
        let dec_proj = layer(&mut p, "dec.proj", config.bits, h, &mut rng);
        let decoder = (0..CONV_BLOCKS)
            .map(|i| layer(&mut p, &format!("dec.{i}"), 9 * h, h, &mut rng))
            .collect();
        let out = layer(&mut p, "dec.out", 9 * h, config.image_channels, &mut rng);
        Ok(Autoencoder { config, params: p, encoder, enc_proj, dec_proj, decoder, out })
    }

    fn conv<O: Ops>(o: &mut O, x: &O::V, l: Layer, geom: ConvGeom) -> O::V {
        let cols = o.im2col(x, geom);
        o.linear(&cols, l.w, Some(l.b))
    }

    /// Pre-quantization latent `L` for one image.
    pub fn encode_latent<O: Ops>(&self, o: &mut O, image: &O::V) -> O::V {
        let cfg = &self.config;
        let mut size = cfg.image_size;
        let mut x = image.clone();
        for (i, l) in self.encoder.iter().enumerate() {
            let channels = if i == 0 { cfg.image_channels } else { cfg.hidden };
            let geom = if cfg.strided(i) {
                ConvGeom { height: size, width: size, channels, kernel: 4, stride: 2, pad: 1 }
            } else {
                ConvGeom { height: size, width: size, channels, kernel: 3, stride: 1, pad: 1 }
            };
            let y = Self::conv(o, &x, *l, geom);
            x = o.silu(&y);
            size = geom.out_height();
        }
        o.linear(&x, self.enc_proj.w, Some(self.enc_proj.b))
    }

    /// Decodes quantized (or raw) latents back to an image.
    pub fn decode_latent<O: Ops>(&self, o: &mut O, latent: &O::V) -> O::V {
        let cfg = &self.config;
        let mut size = cfg.latent_size();
        let y = o.linear(latent, self.dec_proj.w, Some(self.dec_proj.b));
        let mut x = o.silu(&y);
        for (i, l) in self.decoder.iter().enumerate() {
            if cfg.strided(CONV_BLOCKS - 1 - i) {
                x = o.upsample2(&x, size, size);
                size *= 2;
            }
            let geom = ConvGeom { height: size, width: size, channels: cfg.hidden, kernel: 3, stride: 1, pad: 1 };
            let y = Self::conv(o, &x, *l, geom);
            x = o.silu(&y);
        }
        let geom = ConvGeom { height: size, width: size, channels: cfg.hidden, kernel: 3, stride: 1, pad: 1 };
        Self::conv(o, &x, self.out, geom)
    }

    pub fn reconstruct<O: Ops>(&self, o: &mut O, image: &O::V) -> O::V {
        let latent = self.encode_latent(o, image);
        let x = if self.config.quantize { fsq_quantize_ste(o, &latent) } else { latent };
        self.decode_latent(o, &x)
    }

    pub fn encode(&self, image: &Tensor) -> Result<TokenGrid> {
        let mut e = Eager::new(&self.params);
        let img = e.constant(image.clone());
        let latent = self.encode_latent(&mut e, &img);
        let s = self.config.latent_size();
        let grid = LatentGrid::new(s, s, (*latent).clone())?;
        Ok(fsq_quantize(&grid)?.0)
    }

    pub fn decode(&self, tokens: &TokenGrid) -> Result<Tensor> {
        if tokens.bits_per_token() != self.config.bits {
            return Err(BarError::Shape(format!(
                "autoencoder expects {}-bit tokens, got {}",
                self.config.bits,
                tokens.bits_per_token()
            )));
        }
        let mut e = Eager::new(&self.params);
        let x = e.constant(super::fsq::fsq_dequantize(tokens).values().clone());
        Ok((*self.decode_latent(&mut e, &x)).clone())
    }

    /// Per-pixel MSE of one image.
    pub fn mse(&self, image: &Tensor) -> f64 {
        let mut e = Eager::new(&self.params);
        let x = e.constant(image.clone());
        let y = self.reconstruct(&mut e, &x);
        let l = e.squared_error_sum(&y, image, 1.0 / image.len() as f64);
        l.item()
    }

    /// Reconstruction MSE (returned) plus, when quantizing, the commitment
    /// term; gradients are of the scaled sum.
    fn gradients(&self, image: &Tensor, scale: f64) -> (f64, Gradients) {
        let mut g = Graph::new(&self.params);
        let x = g.constant(image.clone());
        let latent = self.encode_latent(&mut g, &x);
        let q = if self.config.quantize { fsq_quantize_ste(&mut g, &latent) } else { latent };
        let y = self.decode_latent(&mut g, &q);
        let l = g.squared_error_sum(&y, image, scale / image.len() as f64);
        let value = g.value(&l).item();
        let total = if self.config.quantize {
            // keeps latents near their codes so sign flips stay reachable
            let codes = g.value(&q).clone();
            let c = g.squared_error_sum(&latent, &codes, COMMITMENT * scale / codes.len() as f64);
            g.add(&l, &c)
        } else {
            l
        };
        (value / scale, g.backward(total))
    }
}

/// Trains an autoencoder with mean-squared reconstruction loss.
pub fn toy_autoencode_train(
    images: &[Tensor],
    config: AutoencoderConfig,
    train: AutoencoderTrainConfig,
    exec: Exec,
) -> Result<TrainedAutoencoder> {
    if images.is_empty() || train.batch_size == 0 {
        return Err(BarError::Domain("need a non-empty dataset and batch".into()));
    }
    let expected = (config.image_size * config.image_size, config.image_channels);
    if let Some(img) = images.iter().find(|i| i.shape() != expected) {
        return Err(BarError::Shape(format!("image {:?} does not match {:?}", img.shape(), expected)));
    }
    let mut model = Autoencoder::new(config, train.seed)?;
    let mut opt = AdamW::new(AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }, &model.params);
    let steps_per_epoch = images.len().div_ceil(train.batch_size);
    let total = (steps_per_epoch * train.epochs) as u64;
    let warmup = (total / 20).max(1).min(total);
    let mut curve = Vec::with_capacity(train.epochs);
    let mut step = 0u64;
    for epoch in 0..train.epochs {
        let mut order: Vec<usize> = (0..images.len()).collect();
        order.shuffle(&mut stream(train.seed, &[1, epoch as u64]));
        let mut epoch_loss = 0.0;
        for batch in order.chunks(train.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            let m = &model;
            let results = exec.map(batch, |&i| m.gradients(&images[i], scale));
            let mut grads = Gradients::zeros_like(&model.params);
            let mut loss = 0.0;
            for (l, g) in &results {
                loss += l * scale;
                grads.accumulate(g);
            }
            if !loss.is_finite() || !grads.is_finite() {
                return Err(BarError::Numeric(format!(
                    "autoencoder diverged at epoch {epoch}, step {step}: loss {loss}, previous epoch {:?}",
                    curve.last()
                )));
            }
            grads.clip_global_norm(1.0);
            let lr = warmup_cosine(train.learning_rate, train.learning_rate * 0.1, warmup, step, total);
            opt.update(&mut model.params, &grads, lr);
            step += 1;
            epoch_loss += loss * batch.len() as f64;
        }
        curve.push(epoch_loss / images.len() as f64);
    }
    let final_mse = exec.map(images, |img| model.mse(img)).iter().sum::<f64>() / images.len() as f64;
    if !final_mse.is_finite() {
        return Err(BarError::Numeric("final reconstruction error is not finite".into()));
    }
    Ok(TrainedAutoencoder { model, curve, final_mse })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::max_gradient_error;

    fn cfg(downsample: usize, bits: usize) -> AutoencoderConfig {
        AutoencoderConfig { image_size: 8, image_channels: 3, hidden: 4, downsample, bits, quantize: false }
    }

    fn image(seed: u64, size: usize) -> Tensor {
        let mut rng = stream(seed, &[]);
        Tensor::randn(size * size, 3, 0.5, &mut rng)
    }

    #[test]
    fn shapes_for_each_downsample() {
        for f in [1, 2, 4, 8] {
            let ae = Autoencoder::new(AutoencoderConfig { quantize: true, ..cfg(f, 5) }, 0).unwrap();
            let img = image(1, 8);
            let tokens = ae.encode(&img).unwrap();
            assert_eq!((tokens.height(), tokens.width(), tokens.bits_per_token()), (8 / f, 8 / f, 5));
            assert_eq!(ae.decode(&tokens).unwrap().shape(), (64, 3));
        }
        assert!(Autoencoder::new(cfg(3, 4), 0).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let ae = Autoencoder::new(cfg(4, 3), 2).unwrap();
        let img = image(3, 8);
        let (_, grads) = ae.gradients(&img, 1.0);
        let ids: Vec<_> = ae.params.ids().collect();
        let err = max_gradient_error(&ae.params, &ids, &grads, 1e-5, 1e-6, |p| {
            let mut m = ae.clone();
            m.params = p.clone();
            m.mse(&img)
        });
        assert!(err < 1e-4, "gradient error {err}");
    }

    #[test]
    fn single_image_memorizes() {
        let img = image(5, 8).map(|v| v.tanh());
        let out = toy_autoencode_train(
            &[img],
            AutoencoderConfig { hidden: 16, quantize: true, ..cfg(2, 8) },
            AutoencoderTrainConfig { epochs: 600, batch_size: 1, learning_rate: 1e-2, seed: 0 },
            Exec::Sequential,
        )
        .unwrap();
        assert!(out.final_mse < 1e-3, "final mse {}", out.final_mse);
        assert_eq!(out.curve.len(), 600);
    }
}
