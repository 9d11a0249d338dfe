//! Two-stage reinforcement-learning loop on a synthetic text-to-image
//! model: a pairwise evaluator trained with verifiable rewards, then a
//! reprompting policy trained against that frozen evaluator.

// Index loops mirror the math; `!(x > 0.0)` deliberately rejects NaN.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod grpo;
pub mod optim;
pub mod policy;
pub mod rewards;
pub mod rng;
pub mod trainer;
mod vecmath;
pub mod vocab;
pub mod world;

pub use config::RunConfig;
pub use error::{Error, Result};
