//! Stochastic variance-reduced gradient (SVRG) methods for sparse linear
//! classifiers.
//!
//! The crate is `no_std` and only needs `alloc`. It covers:
//!
//! - [`data`]: compressed sparse datasets, preprocessing, synthetic problems
//!   and seeded train/test splits.
//! - [`losses`]: logistic and Huberized hinge losses, per-example Lipschitz
//!   constants, regularizers and their proximal maps.
//! - [`sampling`]: uniform, without-replacement and alias-table sampling, plus
//!   snapshot batch-size and SG step-size schedules.
//! - [`optimizers`]: the stage loop (snapshot, inner steps, snapshot update)
//!   with every inner-step rule, and SG / FG baselines.
//! - [`analysis`]: closed-form contraction factors and the empirical
//!   estimators used to check them.
//!
//! File formats, experiment fan-out and the command line live in the
//! `svrg-bench` crate.

#![cfg_attr(not(test), no_std)]
// Negated float comparisons are how inputs reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod analysis;
pub mod data;
pub mod losses;
pub mod optimizers;
pub mod rng;
pub mod sampling;

mod math;

pub use data::{DataError, SparseDataset, SparseExample};
pub use losses::{LossError, LossKind, LossModel, Mode, Regularizer};
pub use optimizers::{RunResult, RunStatus, StageReport, Svrg, SvrgConfig, Variant};
