//! Uncertainty-aware classification of noisily labelled, embedded text.
//!
//! The crate provides a sparse variational Gaussian-process classifier
//! ([`svgp`]), a deep-ensemble baseline ([`ensemble`]), isotonic calibration
//! and reliability binning ([`calibration`]), evaluation metrics aimed at
//! labeller disagreement ([`metrics`]), and the data pipeline that turns
//! dual-labelled reports into feature vectors ([`corpus`]).

// Range checks are written `!(x > 0.0)` so that NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibration;
pub mod corpus;
pub mod ensemble;
pub mod error;
pub mod kernel;
pub mod labels;
pub mod metrics;
pub mod numerics;
pub mod svgp;

pub use error::{Error, Result};
pub use labels::{ClassProbs, Label, NUM_CLASSES};
