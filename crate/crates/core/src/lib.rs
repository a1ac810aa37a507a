//! Dual-axis multi-expert learning for class-imbalanced classification.
//!
//! A shared backbone feeds `K` expert blocks, each trained with plain
//! cross-entropy through a cosine classifier. The experts' normalized
//! representations are concatenated, detached, and fed to an auxiliary
//! cosine classifier trained with a class-balanced loss; that classifier is the
//! only prediction path at test time. Along the time axis the network weights
//! are aggregated once per epoch with an exponential moving average, and the
//! aggregated weights (with recomputed normalization statistics) are what gets
//! evaluated.
//!
//! Everything runs on a small f64 reverse-mode engine ([`tensor`]) so the whole
//! pipeline is reproducible bit-for-bit on a CPU.

pub mod averaging;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
