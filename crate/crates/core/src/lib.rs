//! Entropy-adaptive test-time merging of domain-specific classifiers.
//!
//! A pool of small feed-forward experts, each trained on one source domain,
//! is merged per unlabeled target batch. Merging coefficients come from the
//! experts' mean predictive entropy on the batch, with separate coefficient
//! vectors for the encoder blocks and the classification head. Baseline
//! mergers, parameter-geometry diagnostics and a leave-one-domain-out stream
//! harness live alongside.
//!
//! Module map:
//! - [`tensor`]: dense tensors and the named [`ParameterSet`] container
//! - [`nn`]: forward pass, entropy, loss, backpropagation, augmentation consistency
//! - [`data`]: synthetic domains, CSV ingestion, target stream construction
//! - [`training`]: source training sweeps and per-domain expert selection
//! - [`merging`]: the online entropy-adaptive engine and baseline mergers
//! - [`diagnostics`]: layer angles, norm ratios, depth-wise drift, signal loss
//! - [`harness`]: configuration, checkpoints, evaluation protocol, reports

// NaN-rejecting guards are written as `!(x > 0.0)` on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod merging;
pub mod nn;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{LayerSelector, ParameterSet, Tensor};
