//! Multilevel gray-level thresholding: fit a Gaussian mixture to an image
//! histogram with an Artificial Bee Colony optimizer, then cut between
//! adjacent classes where their misclassification error is smallest.
// `!(x > 0.0)` is used on purpose so NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod abc;
pub mod cli;
pub mod em;
pub mod histogram;
pub mod mixture;
pub mod pgm;
pub mod synth;
pub mod thresholds;
