// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cfg_engine;
pub mod distributions;
pub mod error;
pub mod gan_engine;
pub mod harness;
pub mod metrics;
pub mod models;
pub mod numerics;
pub mod parallel;
pub mod samplers;
pub mod schedules;

pub use error::{Error, Result};
