//! Temporal U-Transformer (TUT) for temporal action segmentation.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense tensors, a reverse-mode differentiation tape and Adam.
//! - [`attention`]: full, windowed-local and log-sparse multi-head attention
//!   with relative positional encodings.
//! - [`net`]: the encoder/decoder stages, multi-stage composition and the
//!   checkpoint format.
//! - [`loss`]: cross-entropy, truncated MSE and the boundary-aware loss.
//! - [`metrics`]: frame accuracy, segmental edit score and F1@τ.
//! - [`data`]: dataset ingestion, resampling and a synthetic generator.
//! - [`trainer`]: training loop, evaluation, prediction and ablation grids.

pub mod attention;
pub mod data;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
