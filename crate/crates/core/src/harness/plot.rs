//! Tab-separated plot files assembled from experiment results.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::experiments::{HeadReport, ReconstructionRow, ScheduleRow, ThroughputRow};
use crate::error::Result;
use crate::tokenizer::budget::{budget_table, reference_descriptions};

/// Everything the plot files are drawn from. Sections may be empty.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub reconstruction: Vec<ReconstructionRow>,
    pub heads: HeadReport,
    pub schedules: Vec<ScheduleRow>,
    pub throughput: Vec<ThroughputRow>,
}

pub const PLOT_FILES: [&str; 5] = [
    "budget.tsv",
    "bits_vs_reconstruction.tsv",
    "k_vs_nll.tsv",
    "schedule_vs_nll.tsv",
    "patchsize_vs_throughput.tsv",
];

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "NA".to_string(), T::to_string)
}

/// The contents of each plot file, keyed by file name.
pub fn plot_tables(report: &Report) -> Result<Vec<(&'static str, String)>> {
    let mut recon = String::from("k\tseed\tbits_per_image\tfinal_mse\n");
    for r in &report.reconstruction {
        let _ = writeln!(recon, "{}\t{}\t{}\t{}", r.k, r.seed, r.bits_per_image, r.final_mse);
    }
    let mut heads = String::from("k\thead\tseed\tclosed_form_params\tmeasured_params\tnll\ttask_nll\twall_seconds\tstatus\n");
    for r in &report.heads.runs {
        let status = if r.error.is_some() { "capability_error" } else { "ok" };
        let _ = writeln!(
            heads,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.k,
            r.head,
            r.seed,
            r.closed_form_params,
            opt(&r.measured_params),
            opt(&r.nll),
            r.task_nll,
            r.wall_seconds,
            status
        );
    }
    let mut schedules = String::from("schedule\tsteps\tsample_nll\thead_calls_per_token\n");
    for r in &report.schedules {
        let _ = writeln!(schedules, "{}\t{}\t{}\t{}", r.schedule, r.steps, r.sample_nll, r.head_calls_per_token);
    }
    let mut throughput =
        String::from("patch_size\tbits_per_token\ttokens\tgrid_tokens\thead_calls\twall_seconds\ttokens_per_sec\tgrid_tokens_per_sec\n");
    for r in &report.throughput {
        let _ = writeln!(
            throughput,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.patch_size, r.bits_per_token, r.tokens, r.grid_tokens, r.head_calls, r.wall_seconds, r.tokens_per_sec, r.grid_tokens_per_sec
        );
    }
    let budget = budget_table(&reference_descriptions())?;
    Ok(PLOT_FILES.into_iter().zip([budget, recon, heads, schedules, throughput]).collect())
}

/// Writes one TSV per figure family into `dir` and returns their paths.
pub fn emit_plot_data(report: &Report, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    plot_tables(report)?
        .into_iter()
        .map(|(name, body)| {
            let path = dir.join(name);
            std::fs::write(&path, body)?;
            Ok(path)
        })
        .collect()
}
