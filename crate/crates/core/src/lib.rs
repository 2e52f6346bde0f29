//! Dual contrastive learning for face-forgery detection on procedurally
//! generated corpora.
//!
//! The pipeline runs corpus synthesis ([`data`]), stochastic view generation
//! ([`views`]), query/key encoders ([`encoder`]), inter-instance
//! ([`inter_icl`]) and intra-instance ([`intra_icl`]) contrastive losses,
//! training ([`trainer`]), evaluation ([`eval`]) and the cross-manipulation
//! experiment ([`experiment`]). [`cli`] ties them together behind the `dcl`
//! binary.

pub mod cli;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod imageops;
pub mod inter_icl;
pub mod intra_icl;
pub mod similarity;
pub mod trainer;
pub mod views;

pub use error::{DclError, Result};
