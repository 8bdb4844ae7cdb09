//! Vertical federated learning simulator and large-batch gradient leakage
//! laboratory.
//!
//! The crate simulates a VFL training loop over a split network, runs the
//! three-step CAFE data recovery attack and comparison attacks against it,
//! applies the fake-gradients countermeasure (and a DP-noise baseline), and
//! checks the convexity and recovery-bound results numerically.

// `!(x >= 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attack;
pub mod config;
pub mod defense;
pub mod dual;
pub mod error;
pub mod experiment;
pub mod io;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod theory;
pub mod vfl;

pub use error::{LabError, Result};
pub use tensor::Tensor;
