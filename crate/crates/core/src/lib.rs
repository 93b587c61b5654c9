//! Embedding- and score-level fusion for spoofing-aware speaker verification.
//!
//! The crate scores trials of a typed protocol (target, nontarget, spoof)
//! from precomputed ASV and CM embeddings, trains the fusion network and
//! its two reference baselines, and reports SV-, SPF- and SASV-EER.

pub mod embedstore;
pub mod fusionnet;
pub mod metrics;
pub mod protocol;
pub mod baselines;
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod pipeline;
pub mod syndata;

pub use error::{Error, Result};
