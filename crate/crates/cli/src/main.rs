use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bar_core::bitcodec::write_grid;
use bar_core::exec::Exec;
use bar_core::harness::experiments::{
    head_comparison_experiment, reconstruction_sweep, schedule_sweep, schedule_sweep_model, throughput_sweep,
    ComparisonSettings, ReconstructionSettings,
};
use bar_core::harness::plot::{emit_plot_data, Report};
use bar_core::harness::tokenize::{run_tokenize, TokenizeConfig, SUMMARY_FILE};
use bar_core::masking::{make_schedule, ScheduleMode, UnmaskSchedule};
use bar_core::model::{BarModel, Checkpoint, HeadKind};
use bar_core::sampler::{generate_sequence, DecodeMode, GuidanceSchedule, SampleConfig, Selection};
use bar_core::tokenizer::budget::{budget_table, parse_descriptions, reference_descriptions};
use bar_core::trainer::experiment::{evaluate, CHECKPOINT_FILE};
use bar_core::trainer::{run_experiment, ExperimentConfig, RunOptions};
use bar_core::{BarError, Result};

/// Seed override applied on top of any config or flag.
const SEED_ENV: &str = "BAR_SEED";

#[derive(Parser)]
#[command(name = "bar", version, about = "Masked bit autoregressive modeling at desk scale")]
struct Cli {
    /// Directory that receives every artifact.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Use the single-threaded execution path.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the bit budget of tokenizer descriptions as TSV.
    Budget {
        /// One `name kind H W f k_or_D` line per tokenizer; reference set when absent.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train the toy autoencoder and encode its dataset into token grids.
    Tokenize {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a model from an experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Generate token grids from a checkpoint.
    Sample(SampleArgs),
    /// Evaluate a checkpoint on the held-out set of an experiment config.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to the checkpoint in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train each head kind per bit width and compare held-out NLL.
    CompareHeads {
        #[arg(long, value_delimiter = ',', default_values_t = [4usize, 8, 12, 16, 32])]
        k: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
        seeds: Vec<u64>,
        #[arg(long, value_delimiter = ',', default_values_t = [HeadKind::Linear, HeadKind::Bit, HeadKind::Mbm])]
        heads: Vec<HeadKind>,
        #[arg(long, default_value_t = 300)]
        steps: u64,
    },
    /// Write the plot TSV files, running the experiments unless a report is given.
    PlotData {
        /// A `report.json` from an earlier run.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = [4usize, 8, 16])]
        k: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
        seeds: Vec<u64>,
    },
}

#[derive(Args)]
struct SampleArgs {
    /// Defaults to the checkpoint in the output directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    class: usize,
    /// Number of grids to generate.
    #[arg(long, default_value_t = 1)]
    n: usize,
    /// Tokens per grid; the model's context length when absent.
    #[arg(long)]
    tokens: Option<usize>,
    /// Comma-separated bits revealed per step, e.g. `2,2,5,7`.
    #[arg(long)]
    schedule: Option<String>,
    #[arg(long)]
    temp: Option<f64>,
    /// Guidance scale; 0 disables guidance.
    #[arg(long)]
    cfg: Option<f64>,
    #[arg(long, default_value_t = GuidanceSchedule::Linear)]
    cfg_schedule: GuidanceSchedule,
    #[arg(long, default_value_t = Selection::Confidence)]
    selection: Selection,
    #[arg(long, default_value_t = 1)]
    patch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Grid file, relative to the output directory.
    #[arg(long, default_value = "samples.barg")]
    out: PathBuf,
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| BarError::config(SEED_ENV, format!("`{v}` is not a seed"))),
        Err(_) => Ok(None),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| BarError::config(path.display().to_string(), e.to_string()))
}

fn load_experiment(path: &Path) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::parse(&read_text(path)?)?;
    if let Some(seed) = env_seed()? {
        cfg.set("seed", &seed.to_string())?;
        cfg.set("sample_seed", &seed.to_string())?;
    }
    Ok(cfg)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| BarError::Format(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn budget(cli: &Cli, config: &Option<PathBuf>) -> Result<()> {
    let descriptions = match config {
        Some(path) => parse_descriptions(&read_text(path)?)?,
        None => reference_descriptions(),
    };
    let table = budget_table(&descriptions)?;
    print!("{table}");
    fs::create_dir_all(&cli.out_dir)?;
    fs::write(cli.out_dir.join("budget.tsv"), table)?;
    Ok(())
}

fn tokenize(cli: &Cli, exec: Exec, config: &Option<PathBuf>) -> Result<()> {
    let mut cfg = match config {
        Some(path) => TokenizeConfig::parse(&read_text(path)?)?,
        None => TokenizeConfig::default(),
    };
    if let Some(seed) = env_seed()? {
        cfg.train.seed = seed;
    }
    let summary = run_tokenize(&cfg, &cli.out_dir, exec)?;
    write_json(&cli.out_dir.join(SUMMARY_FILE), &summary)?;
    println!(
        "{} images, {} tokens of {} bits each, final mse {}",
        summary.images, summary.tokens_per_image, summary.bits_per_token, summary.final_mse
    );
    Ok(())
}

fn train(cli: &Cli, exec: Exec, config: &Path, resume: bool) -> Result<()> {
    let cfg = load_experiment(config)?;
    let out = run_experiment(&cfg, &cli.out_dir, RunOptions { resume, stop_after_epochs: None, exec })?;
    match out.metrics.last() {
        Some(m) => {
            let accuracy = m.eval.as_ref().map_or_else(|| "not evaluated".into(), |e| format!("{:.4}", e.token_accuracy));
            println!("epoch {} step {}: loss {:.6}, held-out token accuracy {accuracy}", m.epoch, m.step, m.loss);
        }
        None => println!("wrote initial checkpoint"),
    }
    Ok(())
}

fn load_model(cli: &Cli, checkpoint: &Option<PathBuf>) -> Result<BarModel> {
    let path = checkpoint.clone().unwrap_or_else(|| cli.out_dir.join(CHECKPOINT_FILE));
    BarModel::from_checkpoint(&Checkpoint::load(&path)?)
}

fn sample(cli: &Cli, args: &SampleArgs) -> Result<()> {
    let model = load_model(cli, &args.checkpoint)?;
    let k = model.bits();
    let scale = args.cfg.unwrap_or(0.0);
    let base = if scale > 0.0 { SampleConfig::guided(k)? } else { SampleConfig::unguided(k)? };
    let schedule = match &args.schedule {
        Some(text) => UnmaskSchedule::parse(text, k).map_err(|e| BarError::config("schedule", e.to_string()))?,
        None => base.schedule.clone(),
    };
    let seed = env_seed()?.unwrap_or(args.seed);
    let cfg = SampleConfig {
        schedule,
        temperature: args.temp.unwrap_or(base.temperature),
        guidance_scale: scale,
        guidance_schedule: args.cfg_schedule,
        selection: args.selection,
        patch_size: args.patch_size,
        seed,
        ..base
    };
    cfg.validate(k)?;
    let tokens = args.tokens.unwrap_or(model.config().context_len);
    fs::create_dir_all(&cli.out_dir)?;
    let grid_path = cli.out_dir.join(&args.out);
    let stats_path = grid_path.with_extension("stats.jsonl");
    let mut grids = BufWriter::new(File::create(&grid_path)?);
    let mut stats = BufWriter::new(File::create(&stats_path)?);
    for i in 0..args.n {
        let cfg = SampleConfig { seed: bar_core::rng::derive_seed(seed, &[i as u64]), ..cfg.clone() };
        let g = generate_sequence(&model, args.class, tokens, &cfg, DecodeMode::Cached)?;
        write_grid(&mut grids, &g.grid)?;
        let line = serde_json::to_string(&g.stats).map_err(|e| BarError::Format(e.to_string()))?;
        writeln!(stats, "{line}")?;
    }
    grids.flush()?;
    stats.flush()?;
    println!("wrote {} grids to {}", args.n, grid_path.display());
    Ok(())
}

fn eval(cli: &Cli, exec: Exec, config: &Path, checkpoint: &Option<PathBuf>) -> Result<()> {
    let cfg = load_experiment(config)?;
    let model = load_model(cli, checkpoint)?;
    if model.config() != &cfg.model {
        return Err(BarError::config("checkpoint", "model settings differ from the config"));
    }
    let (_, held_out) = cfg.datasets()?;
    let metrics = evaluate(&model, &cfg, &held_out, exec)?;
    fs::create_dir_all(&cli.out_dir)?;
    write_json(&cli.out_dir.join("eval.json"), &metrics)?;
    println!("{}", serde_json::to_string(&metrics).map_err(|e| BarError::Format(e.to_string()))?);
    Ok(())
}

fn compare_heads(cli: &Cli, exec: Exec, k: &[usize], seeds: &[u64], heads: &[HeadKind], steps: u64) -> Result<()> {
    let settings = ComparisonSettings { heads: heads.to_vec(), steps, ..ComparisonSettings::default() };
    let heads = head_comparison_experiment(k, seeds, &settings, exec)?;
    for r in &heads.runs {
        let nll = r.nll.map_or_else(|| r.error.clone().unwrap_or_default(), |v| format!("{v:.4}"));
        println!("k={:<3} {:<6} seed={} params={:<12} nll={}", r.k, r.head, r.seed, r.closed_form_params, nll);
    }
    fs::create_dir_all(&cli.out_dir)?;
    write_json(&cli.out_dir.join("report.json"), &Report { heads, ..Report::default() })
}

fn plot_data(cli: &Cli, exec: Exec, report: &Option<PathBuf>, k: &[usize], seeds: &[u64]) -> Result<()> {
    let report: Report = match report {
        Some(path) => serde_json::from_str(&read_text(path)?).map_err(|e| BarError::Format(e.to_string()))?,
        None => {
            let settings = ComparisonSettings::default();
            let reconstruction = reconstruction_sweep(k, seeds, &ReconstructionSettings::default(), exec)?;
            let heads = head_comparison_experiment(k, seeds, &settings, exec)?;
            let sweep_k = 8;
            let (model, task) = schedule_sweep_model(&settings, sweep_k, seeds.first().copied().unwrap_or(0), exec)?;
            let schedules = [vec![8], vec![4, 4], vec![2, 2, 2, 2], vec![1, 1, 3, 3], vec![3, 3, 1, 1]]
                .into_iter()
                .map(|s| make_schedule(sweep_k, ScheduleMode::Explicit(s)))
                .collect::<Result<Vec<_>>>()?;
            let base = SampleConfig { temperature: 1.0, selection: Selection::RandomOrder, ..SampleConfig::unguided(sweep_k)? };
            let schedules = schedule_sweep(&model, &task, &schedules, &base, 256, exec)?;
            let throughput = throughput_sweep(4, 8, &[1, 2, 4], 3, 0)?;
            let report = Report { reconstruction, heads, schedules, throughput };
            fs::create_dir_all(&cli.out_dir)?;
            write_json(&cli.out_dir.join("report.json"), &report)?;
            report
        }
    };
    for path in emit_plot_data(&report, &cli.out_dir)? {
        println!("{}", path.display());
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let exec = if cli.sequential { Exec::Sequential } else { Exec::Parallel };
    match &cli.command {
        Command::Budget { config } => budget(cli, config),
        Command::Tokenize { config } => tokenize(cli, exec, config),
        Command::Train { config, resume } => train(cli, exec, config, *resume),
        Command::Sample(args) => sample(cli, args),
        Command::Eval { config, checkpoint } => eval(cli, exec, config, checkpoint),
        Command::CompareHeads { k, seeds, heads, steps } => compare_heads(cli, exec, k, seeds, heads, *steps),
        Command::PlotData { report, k, seeds } => plot_data(cli, exec, report, k, seeds),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("bar: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
