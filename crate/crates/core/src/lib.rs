pub mod classifier;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod extraction;
pub mod outcomes;
pub mod pipeline;
pub mod reconcile;
pub mod synth;
pub mod weaksup;

pub use error::{Error, Result};
