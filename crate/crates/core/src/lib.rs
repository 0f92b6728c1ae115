//! Recurrent adapters (READ) and partial video-language alignment (PVLA)
//! for parameter-efficient fine-tuning of a small cross-modal transformer.
//!
//! Everything runs on the CPU in `f64` with a reverse-mode tape of its own:
//!
//! - [`tensor`] and [`autodiff`]: dense matrices and the tape.
//! - [`pot`]: entropic partial optimal transport, an exact solver, and the
//!   alignment loss built on them.
//! - [`backbone`] and [`adapters`]: the frozen encoder plus READ, Adapter,
//!   LoRA and prompt modules.
//! - [`data`]: deterministic synthetic temporal-grounding tasks and mAP.
//! - [`train`]: strategies, AdamW, the training loop, pretraining,
//!   checkpoints and presets.
//! - [`config`] and [`pipeline`]: run configuration and the workflows
//!   behind the `read-pvla` binary.
//!
//! The `examples/` directory has one runnable program per capability.

pub mod adapters;
pub mod autodiff;
pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod params;
pub mod pipeline;
pub mod pot;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
