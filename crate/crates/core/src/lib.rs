//! Class-aware optimal transport with higher-order moment matching for
//! unsupervised domain adaptation.

pub mod cli;
pub mod data;
pub mod engine;
pub mod error;
pub mod hmm;
pub mod nn;
pub mod numerics;
pub mod ot;

pub use error::{Error, Result};
