//! Finding beautiful and happy natural images.
//!
//! The crate covers the whole assessment pipeline: corpus curation, rating
//! aggregation and statistics, content-based reference retrieval, a
//! three-module comparison network (global Siamese comparison, local patch
//! comparison, emotion assistance), staged training, score fusion and
//! evaluation.

pub mod curation;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod model;
pub mod nn;
pub mod ratings;
pub mod retrieval;
pub mod rng;
pub mod scoring;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use ratings::Dimension;
