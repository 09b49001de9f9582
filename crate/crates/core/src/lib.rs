// `!(x > 0.0)` also rejects NaN, which is the point of writing it that way.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bitcodec;
pub mod error;
pub mod exec;
pub mod harness;
pub mod masking;
pub mod model;
pub mod nn;
pub mod rng;
pub mod sampler;
pub mod tokenizer;
pub mod trainer;

pub use error::{BarError, Result};
