//! Grammatical error detection and correction for word insertion and
//! deletion errors with a masked language model that predicts a `[NULL]`
//! token for spurious words.

pub mod align;
pub mod baselines;
pub mod corpus;
pub mod corruption;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod inference;
pub mod model;
pub mod oracle;
pub mod scoring;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
