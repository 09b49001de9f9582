//! Binary FSQ bottleneck, bit-budget arithmetic, and a toy autoencoder.

pub mod autoencoder;
pub mod budget;
pub mod fsq;

pub use autoencoder::{toy_autoencode_train, Autoencoder, AutoencoderConfig, AutoencoderTrainConfig, TrainedAutoencoder};
pub use budget::{bit_budget_continuous, bit_budget_discrete, BudgetQuery, TokenizerDescription, TokenizerKind};
pub use fsq::{fsq_dequantize, fsq_quantize, FsqConfig, LatentGrid};
