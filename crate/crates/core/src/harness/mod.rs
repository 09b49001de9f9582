//! Synthetic tasks, brute-force oracles, baseline comparisons and plot data.

pub mod experiments;
pub mod oracle;
pub mod plot;
pub mod tasks;
pub mod tokenize;

pub use experiments::{head_comparison_experiment, ComparisonSettings, HeadReport, HeadRun};
pub use oracle::exact_model_distribution;
pub use plot::{emit_plot_data, Report};
pub use tasks::{gen_dataset, Dataset, MarkovBits, Sequence, SyntheticTask, TaskKind};
