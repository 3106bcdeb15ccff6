//! Multi-stage multi-codebook speech representation learning.
//!
//! The crate builds three things on top of a small deterministic `f64`
//! autodiff tape:
//!
//! * a multi-head vector quantizer with EMA-learned codebooks ([`vq`]),
//! * a multi-stage VQ autoencoder that turns feature sequences into
//!   multi-resolution code sequences and back ([`analyzer`]),
//! * a stage-wise acoustic predictor mapping token sequences onto those
//!   code sequences ([`predictor`]),
//!
//! plus the surrounding plumbing: mel extraction and a stub waveform
//! decoder ([`pipeline`]), bit-exact representation files, compression
//! accounting and quality metrics ([`metrics`]), synthetic corpora
//! ([`corpus`]), checkpoints ([`checkpoint`]), and training loops
//! ([`train`]).

pub mod analyzer;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
mod ioutil;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod predictor;
pub mod train;
pub mod vq;

pub use analyzer::FeatureSequence;
pub use error::{Error, Result};
