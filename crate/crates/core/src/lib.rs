//! Async learned user embeddings, user-similarity graphs and u2u ads
//! candidate retrieval.
//!
//! Stages, in pipeline order: [`event_model`] (data and synthetic
//! generator), [`cfee`] and [`encoder`] (user representation model),
//! [`pipeline`] (snapshot production), [`graph`] (similarity graph),
//! [`retrieval`] (candidate generation) and [`eval`] (metrics and the
//! end-to-end experiment).

pub mod cfee;
mod codec;
pub mod config;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod event_model;
pub mod graph;
pub mod parallel;
pub mod pipeline;
pub mod retrieval;
pub mod tensor;

pub use error::{Error, Result};
