//! Config-driven tokenizer runs: train the toy autoencoder, then encode the
//! dataset into token grids.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use super::tasks::{gen_dataset, CheckerTextures, SyntheticTask, TaskKind, ToyImages};
use crate::bitcodec::write_grid;
use crate::error::{BarError, Result};
use crate::exec::Exec;
use crate::model::{for_each_entry, parse_field, Checkpoint};
use crate::nn::Tensor;
use crate::tokenizer::{toy_autoencode_train, Autoencoder, AutoencoderConfig, AutoencoderTrainConfig};

pub const AUTOENCODER_FILE: &str = "autoencoder.barc";
pub const TOKENS_FILE: &str = "tokens.barg";
pub const SUMMARY_FILE: &str = "tokenize.json";
/// Images written side by side with their reconstructions.
pub const PREVIEW_COUNT: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct TokenizeConfig {
    pub task: TaskKind,
    pub classes: usize,
    pub images: usize,
    pub data_seed: u64,
    pub autoencoder: AutoencoderConfig,
    pub train: AutoencoderTrainConfig,
}

impl Default for TokenizeConfig {
    fn default() -> Self {
        TokenizeConfig {
            task: TaskKind::ToyImages,
            classes: 3,
            images: 48,
            data_seed: 3,
            autoencoder: AutoencoderConfig {
                image_size: 8,
                image_channels: 3,
                hidden: 16,
                downsample: 2,
                bits: 8,
                quantize: true,
            },
            train: AutoencoderTrainConfig { epochs: 100, batch_size: 8, learning_rate: 3e-3, seed: 0 },
        }
    }
}

impl TokenizeConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TokenizeConfig::default();
        for_each_entry(text, |key, value| cfg.set(key, value))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (a, t) = (&mut self.autoencoder, &mut self.train);
        match key {
            "task" => self.task = value.parse()?,
            "classes" => self.classes = parse_field(key, value)?,
            "images" => self.images = parse_field(key, value)?,
            "data_seed" => self.data_seed = parse_field(key, value)?,
            "image_size" => a.image_size = parse_field(key, value)?,
            "image_channels" => a.image_channels = parse_field(key, value)?,
            "hidden" => a.hidden = parse_field(key, value)?,
            "downsample" => a.downsample = parse_field(key, value)?,
            "k" => a.bits = parse_field(key, value)?,
            "quantize" => a.quantize = parse_field(key, value)?,
            "epochs" => t.epochs = parse_field(key, value)?,
            "batch_size" => t.batch_size = parse_field(key, value)?,
            "learning_rate" => t.learning_rate = parse_field(key, value)?,
            "seed" => t.seed = parse_field(key, value)?,
            _ => return Err(BarError::config(key, "unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.autoencoder.validate()?;
        if self.task == TaskKind::MarkovBits {
            return Err(BarError::config("task", "tokenize needs an image task"));
        }
        if self.classes == 0 || self.images == 0 {
            return Err(BarError::config("images", "classes and images must be positive"));
        }
        if self.train.batch_size == 0 {
            return Err(BarError::config("batch_size", "must be positive"));
        }
        if !(self.train.learning_rate > 0.0) {
            return Err(BarError::config("learning_rate", "must be positive"));
        }
        Ok(())
    }

    pub fn images(&self) -> Result<Vec<Tensor>> {
        let (size, channels, classes) = (self.autoencoder.image_size, self.autoencoder.image_channels, self.classes);
        let task = match self.task {
            TaskKind::CheckerTextures => SyntheticTask::CheckerTextures(CheckerTextures { size, channels, classes }),
            _ => SyntheticTask::ToyImages(ToyImages { size, channels, classes }),
        };
        Ok(gen_dataset(&task, self.images, self.data_seed)?.into_images()?.into_iter().map(|l| l.image).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TokenizeSummary {
    pub bits_per_token: usize,
    pub tokens_per_image: usize,
    pub bits_per_image: usize,
    pub images: usize,
    pub final_mse: f64,
    pub curve: Vec<f64>,
}

pub fn autoencoder_checkpoint(model: &Autoencoder) -> Checkpoint {
    let c = &model.config;
    let config = [
        ("image_size", c.image_size.to_string()),
        ("image_channels", c.image_channels.to_string()),
        ("hidden", c.hidden.to_string()),
        ("downsample", c.downsample.to_string()),
        ("k", c.bits.to_string()),
        ("quantize", c.quantize.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    let tensors = model.params.ids().map(|id| (model.params.name(id).to_string(), model.params.get(id).clone())).collect();
    Checkpoint { config, tensors }
}

pub fn autoencoder_from_checkpoint(ck: &Checkpoint) -> Result<Autoencoder> {
    let field = |key: &str| ck.get(key).ok_or_else(|| BarError::Format(format!("checkpoint lacks `{key}`")));
    let config = AutoencoderConfig {
        image_size: parse_field("image_size", field("image_size")?)?,
        image_channels: parse_field("image_channels", field("image_channels")?)?,
        hidden: parse_field("hidden", field("hidden")?)?,
        downsample: parse_field("downsample", field("downsample")?)?,
        bits: parse_field("k", field("k")?)?,
        quantize: parse_field("quantize", field("quantize")?)?,
    };
    let mut model = Autoencoder::new(config, 0)?;
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        let name = model.params.name(id).to_string();
        let t = ck.tensor(&name).ok_or_else(|| BarError::Format(format!("checkpoint lacks tensor `{name}`")))?;
        if t.shape() != model.params.get(id).shape() {
            return Err(BarError::Format(format!("tensor `{name}` has shape {:?}", t.shape())));
        }
        model.params.set(id, t.clone());
    }
    Ok(model)
}

/// Binary PPM of `images` placed left to right, values mapped from [-1, 1].
pub fn write_ppm<W: Write>(mut out: W, images: &[&Tensor], size: usize) -> Result<()> {
    let width = size * images.len();
    write!(out, "P6\n{width} {size}\n255\n")?;
    for y in 0..size {
        for img in images {
            for x in 0..size {
                let px = img.row(y * size + x);
                for c in 0..3 {
                    let v = px.get(c).or(px.first()).copied().unwrap_or(0.0);
                    out.write_all(&[((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8])?;
                }
            }
        }
    }
    Ok(())
}

/// Trains the autoencoder and writes its checkpoint, every image's token
/// grid, a JSON summary and PPM previews into `out_dir`.
pub fn run_tokenize(cfg: &TokenizeConfig, out_dir: &Path, exec: Exec) -> Result<TokenizeSummary> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    let images = cfg.images()?;
    let trained = toy_autoencode_train(&images, cfg.autoencoder, cfg.train, exec)?;
    let model = &trained.model;
    autoencoder_checkpoint(model).save(&out_dir.join(AUTOENCODER_FILE))?;
    let mut tokens = BufWriter::new(File::create(out_dir.join(TOKENS_FILE))?);
    let grids: Vec<_> = exec.map(&images, |img| model.encode(img)).into_iter().collect::<Result<_>>()?;
    for g in &grids {
        write_grid(&mut tokens, g)?;
    }
    tokens.flush()?;
    let size = cfg.autoencoder.image_size;
    for (i, (img, grid)) in images.iter().zip(&grids).take(PREVIEW_COUNT).enumerate() {
        let decoded = model.decode(grid)?;
        let file = BufWriter::new(File::create(out_dir.join(format!("preview_{i}.ppm")))?);
        write_ppm(file, &[img, &decoded], size)?;
    }
    let latent = cfg.autoencoder.latent_size();
    let summary = TokenizeSummary {
        bits_per_token: cfg.autoencoder.bits,
        tokens_per_image: latent * latent,
        bits_per_image: cfg.autoencoder.bits_per_image(),
        images: images.len(),
        final_mse: trained.final_mse,
        curve: trained.curve,
    };
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bitcodec::read_all_grids;

    #[test]
    fn run_writes_round_trippable_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TokenizeConfig::parse("images=6\nepochs=2\nk=5\nhidden=4\n# short\n").unwrap();
        let summary = run_tokenize(&cfg, dir.path(), Exec::Parallel).unwrap();
        assert_eq!(summary.curve.len(), 2);
        assert_eq!(summary.bits_per_image, 16 * 5);
        let grids = read_all_grids(File::open(dir.path().join(TOKENS_FILE)).unwrap()).unwrap();
        assert_eq!(grids.len(), 6);
        let ck = Checkpoint::load(&dir.path().join(AUTOENCODER_FILE)).unwrap();
        let model = autoencoder_from_checkpoint(&ck).unwrap();
        let images = cfg.images().unwrap();
        // weights went through f32, so codes of confident latents survive
        let again = model.encode(&images[0]).unwrap();
        let same = again.tokens().iter().zip(grids[0].tokens()).filter(|(a, b)| a == b).count();
        assert!(same * 4 >= grids[0].tokens().len() * 3);
        let ppm = fs::read(dir.path().join("preview_0.ppm")).unwrap();
        assert!(ppm.starts_with(b"P6\n16 8\n255\n"));
        assert_eq!(ppm.len(), b"P6\n16 8\n255\n".len() + 16 * 8 * 3);
    }

    #[test]
    fn unknown_and_invalid_keys() {
        assert!(matches!(TokenizeConfig::parse("colour=3\n"), Err(BarError::Config { field, .. }) if field == "line 1.colour"));
        assert!(matches!(TokenizeConfig::parse("downsample=3\n"), Err(BarError::Config { field, .. }) if field == "downsample"));
        assert!(TokenizeConfig::parse("task=markov_bits\n").is_err());
    }
}
