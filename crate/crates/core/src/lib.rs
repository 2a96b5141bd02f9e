//! Dual-branch prompt learning for zero-shot anomaly detection on toy
//! encoders: a learnable prompt pool, a frozen attribute bank queried with
//! sparse Gumbel-entmax, projection fusion, joint image/pixel training and
//! label-free test-time adaptation, plus the metrics and analyses around it.

// `!(x > 0.0)` style checks are meant to reject NaN too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod cli;
pub mod config;
pub mod datagen;
pub mod encoders;
pub mod error;
pub mod grad;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod prompts;
pub mod sparse_select;
pub mod trainer;
pub mod tta;

pub use error::{PilotError, Result};
