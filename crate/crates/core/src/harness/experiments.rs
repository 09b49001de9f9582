//! Baseline comparisons and sweeps whose results feed the plot files.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::tasks::{gen_dataset, MarkovBits, Sequence, SyntheticTask, ToyImages};
use crate::error::{BarError, Result};
use crate::exec::Exec;
use crate::masking::{RatioStrategy, UnmaskSchedule};
use crate::model::{BarModel, HeadKind, ModelConfig};
use crate::rng::{derive_seed, stream};
use crate::sampler::{generate_sequence, DecodeMode, SampleConfig, Selection};
use crate::tokenizer::{toy_autoencode_train, AutoencoderConfig, AutoencoderTrainConfig};
use crate::trainer::eval::token_nll;
use crate::trainer::{TrainConfig, Trainer};

/// Bit widths the head comparison accepts.
pub const COMPARISON_BITS: [usize; 7] = [4, 6, 8, 10, 12, 16, 32];

/// Task, model and optimizer shared by every cell of the head comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonSettings {
    pub heads: Vec<HeadKind>,
    pub states: usize,
    pub classes: usize,
    pub branching: usize,
    pub seq_len: usize,
    pub train_size: usize,
    pub eval_size: usize,
    pub task_seed: u64,
    pub depth: usize,
    pub width: usize,
    pub head_layers: usize,
    pub head_width: usize,
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for ComparisonSettings {
    fn default() -> Self {
        ComparisonSettings {
            heads: HeadKind::ALL.to_vec(),
            states: 8,
            classes: 2,
            branching: 2,
            seq_len: 6,
            train_size: 256,
            eval_size: 64,
            task_seed: 7,
            depth: 2,
            width: 32,
            head_layers: 2,
            head_width: 32,
            steps: 300,
            batch_size: 16,
            learning_rate: 3e-3,
        }
    }
}

impl ComparisonSettings {
    fn model_config(&self, k: usize, head: HeadKind) -> ModelConfig {
        ModelConfig {
            depth: self.depth,
            width: self.width,
            ffn_width: 2 * self.width,
            heads: 2,
            bits: k,
            head_kind: head,
            head_layers: self.head_layers,
            head_width: self.head_width,
            class_count: self.classes,
            context_len: self.seq_len,
            class_repeat: 1,
        }
    }

    fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            end_learning_rate: self.learning_rate * 0.05,
            weight_decay: 0.0,
            batch_size: self.batch_size,
            epochs: 1,
            warmup_epochs: 0,
            class_dropout: 0.0,
            mask_strategy: RatioStrategy::Uniform,
            seed,
            ..TrainConfig::default()
        }
    }

    pub fn task(&self, k: usize) -> Result<MarkovBits> {
        MarkovBits::reference(k, self.states, self.classes, self.branching, self.seq_len, derive_seed(self.task_seed, &[k as u64]))
    }
}

/// One trained cell of the comparison. `error` is set when the head cannot
/// be built at this width; `nll` and `measured_params` are then absent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadRun {
    pub k: usize,
    pub head: String,
    pub seed: u64,
    pub closed_form_params: u128,
    pub measured_params: Option<usize>,
    /// Held-out nats per token.
    pub nll: Option<f64>,
    /// Held-out nats per token of the generating chain itself.
    pub task_nll: f64,
    pub wall_seconds: f64,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HeadReport {
    pub runs: Vec<HeadRun>,
}

impl HeadReport {
    pub fn find(&self, k: usize, head: HeadKind, seed: u64) -> Option<&HeadRun> {
        self.runs.iter().find(|r| r.k == k && r.head == head.name() && r.seed == seed)
    }

    /// `(k, seed)` cells where the masked-bit head is worse than the bit head.
    pub fn ordering_violations(&self) -> Vec<(usize, u64, f64, f64)> {
        self.runs
            .iter()
            .filter(|r| r.head == HeadKind::Mbm.name())
            .filter_map(|m| {
                let b = self.find(m.k, HeadKind::Bit, m.seed)?;
                match (m.nll, b.nll) {
                    (Some(x), Some(y)) if x > y => Some((m.k, m.seed, x, y)),
                    _ => None,
                }
            })
            .collect()
    }
}

/// Closed-form head size that does not overflow for wide linear heads.
fn closed_form_params(cfg: &ModelConfig) -> u128 {
    match cfg.head_kind {
        HeadKind::Linear => (cfg.width as u128 + 1) << cfg.bits,
        _ => cfg.head_param_count() as u128,
    }
}

fn train_on(model: BarModel, cfg: TrainConfig, steps: u64, data: &[Sequence], exec: Exec) -> Result<BarModel> {
    let batch = cfg.batch_size;
    let seed = cfg.seed;
    let mut trainer = Trainer::new(model, cfg, steps)?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = data.len();
    let mut epoch = 0u64;
    for _ in 0..steps {
        if cursor + batch > data.len() {
            order.shuffle(&mut stream(seed, &[0x7368756666, epoch]));
            epoch += 1;
            cursor = 0;
        }
        let chunk: Vec<Sequence> = order[cursor..cursor + batch.min(data.len())].iter().map(|&i| data[i].clone()).collect();
        cursor += batch;
        trainer.train_step(&chunk, exec)?;
    }
    Ok(trainer.model)
}

fn run_cell(settings: &ComparisonSettings, k: usize, head: HeadKind, seed: u64, exec: Exec) -> Result<HeadRun> {
    let started = Instant::now();
    let cfg = settings.model_config(k, head);
    let task = settings.task(k)?;
    let data_seed = derive_seed(settings.task_seed, &[k as u64, 0x6461]);
    let task_ref = SyntheticTask::MarkovBits(task.clone());
    let train = gen_dataset(&task_ref, settings.train_size, data_seed)?.into_sequences()?;
    let eval = gen_dataset(&task_ref, settings.eval_size, data_seed ^ 1)?.into_sequences()?;
    let task_nll = eval.iter().map(|s| task.smoothed_nll(s, 0.0)).sum::<f64>() / eval.len() as f64;
    let mut run = HeadRun {
        k,
        head: head.name().to_string(),
        seed,
        closed_form_params: closed_form_params(&cfg),
        measured_params: None,
        nll: None,
        task_nll,
        wall_seconds: 0.0,
        error: None,
    };
    let model = match BarModel::new(cfg, seed) {
        Ok(m) => m,
        Err(e @ BarError::Capability(_)) => {
            run.error = Some(e.to_string());
            return Ok(run);
        }
        Err(e) => return Err(e),
    };
    run.measured_params = Some(model.head_param_count());
    let model = train_on(model, settings.train_config(seed), settings.steps, &train, exec)?;
    run.nll = Some(token_nll(&model, &eval, derive_seed(seed, &[0x6e6c6c]), exec)?);
    run.wall_seconds = started.elapsed().as_secs_f64();
    Ok(run)
}

/// Trains every requested head per bit width and seed on the reference
/// chain and reports held-out NLL. Heads too wide to build are reported
/// with their error rather than aborting the comparison.
pub fn head_comparison_experiment(
    ks: &[usize],
    seeds: &[u64],
    settings: &ComparisonSettings,
    exec: Exec,
) -> Result<HeadReport> {
    if let Some(k) = ks.iter().find(|k| !COMPARISON_BITS.contains(k)) {
        return Err(BarError::config("k", format!("{k} is not one of {COMPARISON_BITS:?}")));
    }
    let mut runs = Vec::new();
    for &k in ks {
        for &head in &settings.heads {
            for &seed in seeds {
                runs.push(run_cell(settings, k, head, seed, exec)?);
            }
        }
    }
    Ok(HeadReport { runs })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleRow {
    pub schedule: String,
    pub steps: usize,
    /// Mean per-token NLL of generated sequences under the true chain.
    pub sample_nll: f64,
    pub head_calls_per_token: f64,
}

/// Generates `samples` sequences per schedule and scores them under the
/// generating chain, smoothed by `eps`.
pub fn schedule_sweep(
    model: &BarModel,
    task: &MarkovBits,
    schedules: &[UnmaskSchedule],
    base: &SampleConfig,
    samples: usize,
    exec: Exec,
) -> Result<Vec<ScheduleRow>> {
    const EPS: f64 = 1e-3;
    let classes = task.class_count();
    schedules
        .iter()
        .map(|schedule| {
            let cfg = SampleConfig { schedule: schedule.clone(), grid_rows: Some(1), patch_size: 1, ..base.clone() };
            let scored = exec.map_range(samples, |i| -> Result<(f64, f64)> {
                let cfg = SampleConfig { seed: derive_seed(base.seed, &[i as u64]), ..cfg.clone() };
                let class = i % classes;
                let g = generate_sequence(model, class, task.seq_len(), &cfg, DecodeMode::Cached)?;
                let seq = Sequence { class, tokens: g.sequence };
                Ok((task.smoothed_nll(&seq, EPS), g.stats.head_calls_per_token))
            });
            let (mut nll, mut calls) = (0.0, 0.0);
            for s in scored {
                let (a, b) = s?;
                nll += a;
                calls += b;
            }
            Ok(ScheduleRow {
                schedule: schedule.to_string(),
                steps: schedule.len(),
                sample_nll: nll / samples as f64,
                head_calls_per_token: calls / samples as f64,
            })
        })
        .collect()
}

/// Trains a masked-bit model on the reference chain for the schedule sweep.
pub fn schedule_sweep_model(settings: &ComparisonSettings, k: usize, seed: u64, exec: Exec) -> Result<(BarModel, MarkovBits)> {
    let task = settings.task(k)?;
    let data = gen_dataset(&SyntheticTask::MarkovBits(task.clone()), settings.train_size, derive_seed(settings.task_seed, &[k as u64, 0x6461]))?
        .into_sequences()?;
    let model = BarModel::new(settings.model_config(k, HeadKind::Mbm), seed)?;
    let model = train_on(model, settings.train_config(seed), settings.steps, &data, exec)?;
    Ok((model, task))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThroughputRow {
    pub patch_size: usize,
    pub bits_per_token: usize,
    pub tokens: usize,
    pub grid_tokens: usize,
    pub head_calls: usize,
    pub wall_seconds: f64,
    pub tokens_per_sec: f64,
    pub grid_tokens_per_sec: f64,
}

/// Desk model used for throughput measurements.
pub fn throughput_model_config(bits: usize, patch: usize, tokens: usize) -> ModelConfig {
    ModelConfig {
        depth: 2,
        width: 64,
        ffn_width: 128,
        heads: 4,
        bits: bits * patch * patch,
        head_kind: HeadKind::Mbm,
        head_layers: 2,
        head_width: 64,
        class_count: 10,
        context_len: tokens,
        class_repeat: 1,
    }
}

/// Generates a `side × side` grid of `bits`-bit tokens with each patch size,
/// `repeats` times, and reports rates over the total wall time.
pub fn throughput_sweep(bits: usize, side: usize, patch_sizes: &[usize], repeats: usize, seed: u64) -> Result<Vec<ThroughputRow>> {
    if repeats == 0 {
        return Err(BarError::Domain("throughput needs at least one repeat".into()));
    }
    patch_sizes
        .iter()
        .map(|&p| {
            if p == 0 || !side.is_multiple_of(p) {
                return Err(BarError::Domain(format!("patch size {p} does not tile a {side}x{side} grid")));
            }
            let rows = side / p;
            let tokens = rows * rows;
            let model = BarModel::new(throughput_model_config(bits, p, tokens), seed)?;
            let k = model.bits();
            let cfg = SampleConfig {
                selection: Selection::Confidence,
                patch_size: p,
                grid_rows: Some(rows),
                seed,
                ..SampleConfig::unguided(k)?
            };
            let mut row = ThroughputRow {
                patch_size: p,
                bits_per_token: k,
                tokens,
                grid_tokens: 0,
                head_calls: 0,
                wall_seconds: 0.0,
                tokens_per_sec: 0.0,
                grid_tokens_per_sec: 0.0,
            };
            for r in 0..repeats {
                let cfg = SampleConfig { seed: derive_seed(seed, &[r as u64]), ..cfg.clone() };
                let g = generate_sequence(&model, r % 10, tokens, &cfg, DecodeMode::Cached)?;
                row.grid_tokens = g.stats.grid_tokens;
                row.head_calls += g.stats.head_calls;
                row.wall_seconds += g.stats.wall_seconds;
            }
            let n = repeats as f64;
            row.tokens_per_sec = tokens as f64 * n / row.wall_seconds;
            row.grid_tokens_per_sec = row.grid_tokens as f64 * n / row.wall_seconds;
            Ok(row)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructionSettings {
    pub image_size: usize,
    pub image_channels: usize,
    pub classes: usize,
    pub hidden: usize,
    pub downsample: usize,
    pub images: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub data_seed: u64,
}

impl Default for ReconstructionSettings {
    fn default() -> Self {
        ReconstructionSettings {
            image_size: 8,
            image_channels: 3,
            classes: 3,
            hidden: 16,
            downsample: 2,
            images: 48,
            epochs: 100,
            batch_size: 8,
            learning_rate: 3e-3,
            data_seed: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionRow {
    pub k: usize,
    pub seed: u64,
    pub bits_per_image: usize,
    pub final_mse: f64,
}

/// Trains the toy autoencoder once per bit width and seed on a fixed set of
/// toy images.
pub fn reconstruction_sweep(
    ks: &[usize],
    seeds: &[u64],
    settings: &ReconstructionSettings,
    exec: Exec,
) -> Result<Vec<ReconstructionRow>> {
    let task = SyntheticTask::ToyImages(ToyImages {
        size: settings.image_size,
        channels: settings.image_channels,
        classes: settings.classes,
    });
    let images: Vec<_> = gen_dataset(&task, settings.images, settings.data_seed)?
        .into_images()?
        .into_iter()
        .map(|l| l.image)
        .collect();
    let mut rows = Vec::new();
    for &k in ks {
        for &seed in seeds {
            let cfg = AutoencoderConfig {
                image_size: settings.image_size,
                image_channels: settings.image_channels,
                hidden: settings.hidden,
                downsample: settings.downsample,
                bits: k,
                quantize: true,
            };
            let train = AutoencoderTrainConfig {
                epochs: settings.epochs,
                batch_size: settings.batch_size,
                learning_rate: settings.learning_rate,
                seed,
            };
            let out = toy_autoencode_train(&images, cfg, train, exec)?;
            rows.push(ReconstructionRow { k, seed, bits_per_image: cfg.bits_per_image(), final_mse: out.final_mse });
        }
    }
    Ok(rows)
}

/// Median final MSE per bit width, in the order the widths first appear.
pub fn median_mse_by_k(rows: &[ReconstructionRow]) -> Vec<(usize, f64)> {
    let mut ks: Vec<usize> = Vec::new();
    for r in rows {
        if !ks.contains(&r.k) {
            ks.push(r.k);
        }
    }
    ks.into_iter()
        .map(|k| {
            let mut v: Vec<f64> = rows.iter().filter(|r| r.k == k).map(|r| r.final_mse).collect();
            v.sort_by(f64::total_cmp);
            let m = v.len() / 2;
            let median = if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) };
            (k, median)
        })
        .collect()
}
