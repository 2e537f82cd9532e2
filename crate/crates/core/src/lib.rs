//! Diversity-driven EarlyLate dataset distillation.
//!
//! The pipeline has three decoupled stages: a frozen teacher is trained
//! ("squeeze"), synthetic images are optimized against it with staggered
//! start points ("recover"), and students are post-trained on the result
//! with teacher soft labels ("relabel").

pub mod augment;
pub mod data;
pub mod error;
pub mod experiments;
pub mod init;
pub mod metrics;
pub mod nn;
pub mod patches;
pub mod recovery;
pub mod relabel;
pub mod schedule;
pub mod store;
pub mod teacher;
pub mod types;

pub use candle_core::Device;
pub use error::{DeltError, Result};
