//! Config-file driven training runs with checkpoints and a metrics log.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::Serialize;

use super::config::{lr_at, TrainConfig};
use super::eval::{greedy_config, masked_bit_nll, token_accuracy, token_nll, RatioSource};
use super::optim::AdamW;
use super::step::Trainer;
use crate::error::{BarError, Result};
use crate::exec::Exec;
use crate::harness::tasks::{gen_dataset, MarkovBits, Sequence, SyntheticTask, TaskKind, CheckerTextures, ToyImages};
use crate::masking::{make_schedule, parse_steps, ScheduleMode};
use crate::model::{for_each_entry, parse_field, BarModel, Checkpoint, HeadKind, ModelConfig};
use crate::nn::Tensor;
use crate::rng::stream;
use crate::sampler::{GuidanceSchedule, SampleConfig, Selection, TemperatureMode};

/// Data-generation settings of an experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskConfig {
    pub kind: TaskKind,
    pub states: usize,
    /// Successors per state in the Markov task.
    pub branching: usize,
    pub seq_len: usize,
    pub train_size: usize,
    pub eval_size: usize,
    pub data_seed: u64,
    pub image_size: usize,
    pub image_channels: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            kind: TaskKind::MarkovBits,
            states: 16,
            branching: 1,
            seq_len: 8,
            train_size: 512,
            eval_size: 128,
            data_seed: 0,
            image_size: 16,
            image_channels: 3,
        }
    }
}

/// Sampling settings; the schedule is resolved against `k` later.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSettings {
    pub unmask_schedule: Option<Vec<usize>>,
    pub temperature: f64,
    pub temperature_mode: TemperatureMode,
    pub guidance_scale: f64,
    pub guidance_schedule: GuidanceSchedule,
    pub selection: Selection,
    pub sample_seed: u64,
    pub patch_size: usize,
}

impl Default for SampleSettings {
    fn default() -> Self {
        SampleSettings {
            unmask_schedule: None,
            temperature: 2.0,
            temperature_mode: TemperatureMode::Logit,
            guidance_scale: 0.0,
            guidance_schedule: GuidanceSchedule::Linear,
            selection: Selection::Confidence,
            sample_seed: 0,
            patch_size: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sample: SampleSettings,
    pub task: TaskConfig,
    /// Evaluate every this many epochs (and after the last one).
    pub eval_every: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            sample: SampleSettings::default(),
            task: TaskConfig::default(),
            eval_every: 1,
        }
    }
}

fn set_task(t: &mut TaskConfig, key: &str, value: &str) -> Result<bool> {
    match key {
        "task" => t.kind = value.trim().parse()?,
        "states" => t.states = parse_field(key, value)?,
        "branching" => t.branching = parse_field(key, value)?,
        "seq_len" => t.seq_len = parse_field(key, value)?,
        "train_size" => t.train_size = parse_field(key, value)?,
        "eval_size" => t.eval_size = parse_field(key, value)?,
        "data_seed" => t.data_seed = parse_field(key, value)?,
        "image_size" => t.image_size = parse_field(key, value)?,
        "image_channels" => t.image_channels = parse_field(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn set_sample(s: &mut SampleSettings, key: &str, value: &str) -> Result<bool> {
    match key {
        "unmask_schedule" => s.unmask_schedule = Some(parse_steps(value)?),
        "temperature" => s.temperature = parse_field(key, value)?,
        "temperature_mode" => s.temperature_mode = value.trim().parse()?,
        "guidance_scale" => s.guidance_scale = parse_field(key, value)?,
        "guidance_schedule" => s.guidance_schedule = value.trim().parse()?,
        "selection" => s.selection = value.trim().parse()?,
        "sample_seed" => s.sample_seed = parse_field(key, value)?,
        "patch_size" => s.patch_size = parse_field(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

impl ExperimentConfig {
    /// Parses flat `key=value` lines; `#` starts a comment. Unknown keys and
    /// repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for_each_entry(text, |key, value| cfg.set(key, value))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let known = self.model.set(key, value)?
            || self.train.set(key, value)?
            || set_sample(&mut self.sample, key, value)?
            || set_task(&mut self.task, key, value)?;
        if key == "eval_every" {
            self.eval_every = parse_field(key, value)?;
        } else if !known {
            return Err(BarError::config(key, "unknown key"));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.sample_config()?;
        if self.eval_every == 0 {
            return Err(BarError::config("eval_every", "must be positive"));
        }
        let t = &self.task;
        if t.kind == TaskKind::MarkovBits {
            if t.seq_len < 2 {
                return Err(BarError::config("seq_len", "needs at least two tokens"));
            }
            if t.seq_len > self.model.context_len {
                return Err(BarError::config("seq_len", "exceeds context_len"));
            }
            if t.train_size == 0 || t.eval_size == 0 {
                return Err(BarError::config("train_size", "train and eval sets must be non-empty"));
            }
        }
        Ok(())
    }

    /// Resolved sampling configuration. Without an explicit schedule the
    /// guided or unguided defaults apply.
    pub fn sample_config(&self) -> Result<SampleConfig> {
        let k = self.model.bits;
        let s = &self.sample;
        let base = if s.guidance_scale > 0.0 { SampleConfig::guided(k)? } else { SampleConfig::unguided(k)? };
        let schedule = match &s.unmask_schedule {
            Some(steps) => make_schedule(k, ScheduleMode::Explicit(steps.clone()))
                .map_err(|e| BarError::config("unmask_schedule", e.to_string()))?,
            None => base.schedule,
        };
        let cfg = SampleConfig {
            schedule,
            temperature: s.temperature,
            temperature_mode: s.temperature_mode,
            guidance_scale: s.guidance_scale,
            guidance_schedule: s.guidance_schedule,
            selection: s.selection,
            seed: s.sample_seed,
            patch_size: s.patch_size,
            grid_rows: None,
        };
        cfg.validate(k)?;
        Ok(cfg)
    }

    pub fn build_task(&self) -> Result<SyntheticTask> {
        let t = &self.task;
        let classes = self.model.class_count;
        Ok(match t.kind {
            TaskKind::MarkovBits => SyntheticTask::MarkovBits(MarkovBits::reference(
                self.model.bits,
                t.states,
                classes,
                t.branching,
                t.seq_len,
                t.data_seed,
            )?),
            TaskKind::CheckerTextures => SyntheticTask::CheckerTextures(CheckerTextures {
                size: t.image_size,
                channels: t.image_channels,
                classes,
            }),
            TaskKind::ToyImages => {
                SyntheticTask::ToyImages(ToyImages { size: t.image_size, channels: t.image_channels, classes })
            }
        })
    }

    /// Training and held-out sequences of a sequence task.
    pub fn datasets(&self) -> Result<(Vec<Sequence>, Vec<Sequence>)> {
        let task = self.build_task()?;
        let seed = self.task.data_seed;
        let train = gen_dataset(&task, self.task.train_size, seed)?.into_sequences()?;
        let eval = gen_dataset(&task, self.task.eval_size, seed ^ 0x005e_ed0f_e7a1)?.into_sequences()?;
        Ok((train, eval))
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.task.train_size.div_ceil(self.train.batch_size) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_per_epoch() * self.train.epochs as u64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalMetrics {
    pub masked_bit_nll: Option<f64>,
    pub token_nll: f64,
    pub token_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub eval: Option<EvalMetrics>,
    pub wall_seconds: f64,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    /// Continue from the checkpoint in the output directory.
    pub resume: bool,
    /// Stop after this many completed epochs (the schedule still spans the
    /// configured number).
    pub stop_after_epochs: Option<usize>,
    pub exec: Exec,
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub model: BarModel,
    /// Pre-update batch loss of every step run in this invocation, with its
    /// global step index.
    pub step_losses: Vec<(u64, f64)>,
    pub metrics: Vec<EpochMetrics>,
    pub checkpoint: PathBuf,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.barc";
pub const METRICS_FILE: &str = "metrics.jsonl";

pub fn evaluate(model: &BarModel, cfg: &ExperimentConfig, eval: &[Sequence], exec: Exec) -> Result<EvalMetrics> {
    let seed = cfg.train.seed;
    let masked_bit_nll = if model.head_kind() == HeadKind::Mbm {
        Some(masked_bit_nll(model, eval, RatioSource::Strategy(cfg.train.mask_strategy), seed, exec)?)
    } else {
        None
    };
    Ok(EvalMetrics {
        masked_bit_nll,
        token_nll: token_nll(model, eval, seed, exec)?,
        token_accuracy: token_accuracy(model, eval, &greedy_config(model.bits())?, exec)?,
    })
}

/// Model, optimizer state and progress in one container.
pub fn training_checkpoint(trainer: &Trainer, epoch: usize) -> Checkpoint {
    let mut ck = trainer.model.to_checkpoint();
    ck.config.push(("train.epoch".into(), epoch.to_string()));
    ck.config.push(("adam.step".into(), trainer.step().to_string()));
    let (first, second) = trainer.optimizer.moments();
    let params = trainer.model.params();
    for (prefix, moments) in [("adam.m.", first), ("adam.v.", second)] {
        for id in params.ids() {
            ck.tensors.push((format!("{prefix}{}", params.name(id)), moments[id.0].clone()));
        }
    }
    ck
}

/// Restores a trainer and the number of completed epochs.
pub fn restore_trainer(ck: &Checkpoint, cfg: &TrainConfig, total_steps: u64) -> Result<(Trainer, usize)> {
    let model = BarModel::from_checkpoint(ck)?;
    let field = |key: &str| -> Result<u64> {
        ck.get(key)
            .ok_or_else(|| BarError::Format(format!("checkpoint lacks `{key}`")))?
            .parse()
            .map_err(|_| BarError::Format(format!("checkpoint field `{key}` is not an integer")))
    };
    let epoch = field("train.epoch")? as usize;
    let step = field("adam.step")?;
    let params = model.params();
    let moments = |prefix: &str| -> Result<Vec<Tensor>> {
        params
            .ids()
            .map(|id| {
                ck.tensor(&format!("{prefix}{}", params.name(id)))
                    .cloned()
                    .ok_or_else(|| BarError::Format(format!("checkpoint lacks optimizer state for `{}`", params.name(id))))
            })
            .collect()
    };
    let optimizer = AdamW::with_state(cfg.optimizer(), step, moments("adam.m.")?, moments("adam.v.")?);
    cfg.validate()?;
    Ok((Trainer { model, optimizer, config: cfg.clone(), total_steps }, epoch))
}

/// Trains on the configured sequence task, writing `checkpoint.barc` after
/// every epoch and one JSON line of metrics per epoch to `metrics.jsonl`.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path, opts: RunOptions) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    if cfg.task.kind != TaskKind::MarkovBits {
        return Err(BarError::config("task", "training needs a token-sequence task (markov_bits)"));
    }
    fs::create_dir_all(out_dir)?;
    let (train, eval) = cfg.datasets()?;
    let total = cfg.total_steps();
    let ck_path = out_dir.join(CHECKPOINT_FILE);
    let metrics_path = out_dir.join(METRICS_FILE);
    let (mut trainer, start_epoch) = if opts.resume {
        let ck = Checkpoint::load(&ck_path)?;
        let (t, e) = restore_trainer(&ck, &cfg.train, total)?;
        if t.model.config() != &cfg.model {
            return Err(BarError::config("model", "checkpoint model differs from the config"));
        }
        (t, e)
    } else {
        (Trainer::new(BarModel::new(cfg.model.clone(), cfg.train.seed)?, cfg.train.clone(), total)?, 0)
    };
    let mut log = BufWriter::new(if opts.resume {
        OpenOptions::new().append(true).create(true).open(&metrics_path)?
    } else {
        File::create(&metrics_path)?
    });
    if !opts.resume {
        training_checkpoint(&trainer, 0).save(&ck_path)?;
    }
    let started = Instant::now();
    let end_epoch = opts.stop_after_epochs.map_or(cfg.train.epochs, |s| s.min(cfg.train.epochs));
    let mut step_losses = Vec::new();
    let mut metrics = Vec::new();
    for epoch in start_epoch..end_epoch {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut stream(cfg.train.seed, &[0x65706f6368, epoch as u64]));
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.train.batch_size) {
            let batch: Vec<Sequence> = chunk.iter().map(|&i| train[i].clone()).collect();
            let report = trainer.train_step(&batch, opts.exec)?;
            step_losses.push((report.step, report.loss));
            sum += report.loss * batch.len() as f64;
        }
        let done = epoch + 1;
        let eval_metrics = if done % cfg.eval_every == 0 || done == cfg.train.epochs {
            Some(evaluate(&trainer.model, cfg, &eval, opts.exec)?)
        } else {
            None
        };
        let m = EpochMetrics {
            epoch: done,
            step: trainer.step(),
            loss: sum / train.len() as f64,
            lr: lr_at(&cfg.train, trainer.step(), total),
            eval: eval_metrics,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        writeln!(log, "{}", serde_json::to_string(&m).expect("metrics serialize"))?;
        log.flush()?;
        training_checkpoint(&trainer, done).save(&ck_path)?;
        metrics.push(m);
    }
    Ok(ExperimentOutcome { model: trainer.model, step_losses, metrics, checkpoint: ck_path })
}
