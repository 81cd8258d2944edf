//! Linear probing of pooled vision-language-model hidden states for
//! aesthetic attributes, and per-user linear estimators for personalized
//! aesthetics assessment.
//!
//! - [`store`]: FSTORE v1 feature matrices and their manifests
//! - [`regression`]: standardized ridge with leave-one-out penalty selection
//! - [`metrics`]: Spearman ρ, R², aggregation, bootstrap statistics
//! - [`probing`]: layer-wise attribute probing sweeps
//! - [`piaa`]: the personalized evaluation protocol
//! - [`synth`]: synthetic worlds and brute-force oracles

pub mod error;
pub mod metrics;
pub mod piaa;
pub mod probing;
pub mod regression;
pub mod rng;
pub mod store;
pub mod synth;
pub mod tables;

pub use error::{Error, Result};
