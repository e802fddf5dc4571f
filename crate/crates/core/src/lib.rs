//! Pre-training item embeddings by reconstructing user intention from click
//! histories, then feeding them to a CTR ranker.
//!
//! The pipeline runs: [`synth`] data → [`objective`] + [`trainer`]
//! pre-training → [`quantize`] cluster ids / similarity scores →
//! [`downstream`] CTR model and ranking metrics.

pub mod downstream;
pub mod encoder;
pub mod error;
pub mod nn;
pub mod objective;
pub mod quantize;
pub mod seed;
pub mod synth;
pub mod trainer;

pub use error::{CoreError, Result};
pub use diffcore::DiffError;
