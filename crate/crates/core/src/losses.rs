//! Losses for linear classifiers, their Lipschitz constants, regularizers
//! and proximal maps.
//!
//! Every per-example loss is `f_i(x) = ℓ(b_i a_i·x)` plus, in
//! [`Mode::Folded`], the ridge term `(λ/2)‖x‖²`. Gradients are therefore a
//! scalar multiple of the sparse row `a_i` plus an optional dense `λx`.

use alloc::string::String;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

use crate::data::SparseDataset;
use crate::math;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error("invalid loss parameter: {0}")]
    Parameter(String),
    #[error("example index {index} out of range for n = {n}")]
    IndexOutOfRange { index: usize, n: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    Logistic,
    /// Huberized hinge loss with threshold `epsilon > 0`.
    Hsvm { epsilon: f64 },
}

impl LossKind {
    /// `ℓ(τ)`
    pub fn value(&self, tau: f64) -> f64 {
        match *self {
            LossKind::Logistic => {
                if tau < -30.0 {
                    -tau + math::ln_1p(math::exp(tau))
                } else {
                    math::ln_1p(math::exp(-tau))
                }
            }
            LossKind::Hsvm { epsilon } => {
                if tau > 1.0 + epsilon {
                    0.0
                } else if tau < 1.0 - epsilon {
                    1.0 - tau
                } else {
                    let r = 1.0 + epsilon - tau;
                    r * r / (4.0 * epsilon)
                }
            }
        }
    }

    /// `ℓ'(τ)`. Exactly zero in the flat HSVM region.
    pub fn deriv(&self, tau: f64) -> f64 {
        match *self {
            LossKind::Logistic => -1.0 / (1.0 + math::exp(tau)),
            LossKind::Hsvm { epsilon } => {
                if tau > 1.0 + epsilon {
                    0.0
                } else if tau < 1.0 - epsilon {
                    -1.0
                } else {
                    -(1.0 + epsilon - tau) / (2.0 * epsilon)
                }
            }
        }
    }

    /// Lipschitz constant of `ℓ'`.
    pub fn curvature(&self) -> f64 {
        match *self {
            LossKind::Logistic => 0.25,
            LossKind::Hsvm { epsilon } => 1.0 / (2.0 * epsilon),
        }
    }

    fn validate(&self) -> Result<(), LossError> {
        match *self {
            LossKind::Hsvm { epsilon } if !(epsilon > 0.0 && epsilon.is_finite()) => Err(
                LossError::Parameter(alloc::format!("HSVM threshold must be positive, got {epsilon}")),
            ),
            _ => Ok(()),
        }
    }
}

/// Where the ridge term lives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// `f_i = ℓ_i + (λ/2)‖x‖²`; the plain SVRG family uses this.
    Folded,
    /// `g_i = ℓ_i` and `h = (λ/2)‖x‖²` held out; regularized and proximal
    /// updates use this.
    Composite,
}

/// Counts gradient evaluations. Concurrent increments are never lost.
#[derive(Debug, Default)]
pub struct EvalCounter(AtomicU64);

impl EvalCounter {
    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }

    pub fn add(&self, k: u64) {
        self.0.fetch_add(k, Ordering::Relaxed);
    }

    pub fn reset(&self) {
        self.0.store(0, Ordering::Relaxed);
    }
}

impl Clone for EvalCounter {
    fn clone(&self) -> Self {
        Self(AtomicU64::new(self.get()))
    }
}

/// Gradient of one example, `coeff · a_i + ridge · x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExampleGradient {
    pub index: usize,
    /// `ℓ'(b_i a_i·x) b_i`
    pub coeff: f64,
    /// `λ` in folded mode, 0 otherwise.
    pub ridge: f64,
}

impl ExampleGradient {
    pub fn to_dense(&self, ds: &SparseDataset, x: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = x.iter().map(|v| self.ridge * v).collect();
        ds.example(self.index).axpy(self.coeff, &mut out);
        out
    }
}

#[derive(Debug, Clone)]
pub struct LossModel {
    kind: LossKind,
    lambda: f64,
    mode: Mode,
    lipschitz: Vec<f64>,
    l_max: f64,
    l_mean: f64,
    l_g: f64,
    evals: EvalCounter,
}

impl LossModel {
    /// Computes `L_i = c_ℓ‖a_i‖² (+ λ in folded mode)` for every example.
    pub fn new(kind: LossKind, lambda: f64, mode: Mode, ds: &SparseDataset) -> Result<Self, LossError> {
        kind.validate()?;
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(LossError::Parameter(alloc::format!(
                "ridge strength must be nonnegative, got {lambda}"
            )));
        }
        let c = kind.curvature();
        let extra = match mode {
            Mode::Folded => lambda,
            Mode::Composite => 0.0,
        };
        let loss_part: Vec<f64> = ds.examples().iter().map(|ex| c * ex.norm_sq()).collect();
        let l_g = loss_part.iter().copied().fold(0.0, f64::max);
        let lipschitz: Vec<f64> = loss_part.into_iter().map(|l| l + extra).collect();
        let l_max = lipschitz.iter().copied().fold(0.0, f64::max);
        let l_mean = lipschitz.iter().sum::<f64>() / lipschitz.len() as f64;
        Ok(Self {
            kind,
            lambda,
            mode,
            lipschitz,
            l_max,
            l_mean,
            l_g,
            evals: EvalCounter::default(),
        })
    }

    /// Same loss and data, other mode.
    pub fn with_mode(&self, mode: Mode, ds: &SparseDataset) -> Self {
        Self::new(self.kind, self.lambda, mode, ds).expect("parameters already validated")
    }

    pub fn kind(&self) -> LossKind {
        self.kind
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Ridge coefficient carried inside each `f_i`.
    #[inline]
    pub fn folded_ridge(&self) -> f64 {
        match self.mode {
            Mode::Folded => self.lambda,
            Mode::Composite => 0.0,
        }
    }

    /// Per-example constants `L_i`.
    pub fn lipschitz(&self) -> &[f64] {
        &self.lipschitz
    }

    /// `L = max_i L_i`
    pub fn l_max(&self) -> f64 {
        self.l_max
    }

    /// `L̄ = mean_i L_i`
    pub fn l_mean(&self) -> f64 {
        self.l_mean
    }

    /// Lipschitz constant shared by every loss part `g_i'`.
    pub fn l_g(&self) -> f64 {
        self.l_g
    }

    /// Lipschitz constant of the ridge gradient `λx`.
    pub fn l_h(&self) -> f64 {
        self.lambda
    }

    /// `max(L_g, L_h)`
    pub fn l_m(&self) -> f64 {
        self.l_g.max(self.lambda)
    }

    /// Lipschitz constant of the folded `f_i'`, `L_g + λ`.
    pub fn l_folded(&self) -> f64 {
        self.l_g + self.lambda
    }

    /// Strong-convexity modulus used by the rate formulas. `λ` is only a
    /// lower bound on the true modulus.
    pub fn mu(&self) -> f64 {
        self.lambda
    }

    pub fn evals(&self) -> &EvalCounter {
        &self.evals
    }

    fn check_index(&self, ds: &SparseDataset, i: usize) -> Result<(), LossError> {
        if i >= ds.n() {
            Err(LossError::IndexOutOfRange { index: i, n: ds.n() })
        } else {
            Ok(())
        }
    }

    fn check_dim(ds: &SparseDataset, x: &[f64]) -> Result<(), LossError> {
        if x.len() != ds.dim() {
            Err(LossError::Dimension {
                expected: ds.dim(),
                got: x.len(),
            })
        } else {
            Ok(())
        }
    }

    /// `τ_i = b_i a_i·x`
    #[inline]
    pub fn margin(&self, ds: &SparseDataset, i: usize, x: &[f64]) -> f64 {
        let ex = ds.example(i);
        ex.label() * ex.dot(x)
    }

    /// `ℓ'(τ) b` for a precomputed `a_i·x`. Not counted.
    #[inline]
    pub fn coeff_from_dot(&self, label: f64, dot: f64) -> f64 {
        self.kind.deriv(label * dot) * label
    }

    /// Loss-part gradient coefficient of example `i` at `x`. Not counted.
    #[inline]
    pub fn coeff(&self, ds: &SparseDataset, i: usize, x: &[f64]) -> f64 {
        let ex = ds.example(i);
        self.coeff_from_dot(ex.label(), ex.dot(x))
    }

    /// Same as [`Self::coeff`] but counted as one gradient evaluation.
    #[inline]
    pub fn coeff_counted(&self, ds: &SparseDataset, i: usize, x: &[f64]) -> f64 {
        self.evals.add(1);
        self.coeff(ds, i, x)
    }

    /// `f_i'(x)`, counted as one evaluation.
    pub fn example_gradient(&self, ds: &SparseDataset, i: usize, x: &[f64]) -> Result<ExampleGradient, LossError> {
        self.check_index(ds, i)?;
        Self::check_dim(ds, x)?;
        Ok(ExampleGradient {
            index: i,
            coeff: self.coeff_counted(ds, i, x),
            ridge: self.folded_ridge(),
        })
    }

    /// Mean of `f_i'(x)` over `batch`, summed in ascending index order.
    /// Counts `|batch|` evaluations.
    pub fn batch_gradient(&self, ds: &SparseDataset, batch: &[usize], x: &[f64]) -> Result<Vec<f64>, LossError> {
        if batch.is_empty() {
            return Err(LossError::EmptyBatch);
        }
        Self::check_dim(ds, x)?;
        let mut sorted = batch.to_vec();
        sorted.sort_unstable();
        for &i in &sorted {
            self.check_index(ds, i)?;
        }
        self.evals.add(sorted.len() as u64);
        Ok(self.mean_gradient(ds, sorted.iter().copied(), sorted.len(), x))
    }

    /// `f'(x)`, counting `n` evaluations.
    pub fn full_gradient(&self, ds: &SparseDataset, x: &[f64]) -> Result<Vec<f64>, LossError> {
        Self::check_dim(ds, x)?;
        self.evals.add(ds.n() as u64);
        Ok(self.mean_gradient(ds, 0..ds.n(), ds.n(), x))
    }

    /// `f'(x)` without touching the counter; used for diagnostics and
    /// reference solutions.
    pub fn full_gradient_uncounted(&self, ds: &SparseDataset, x: &[f64]) -> Vec<f64> {
        self.mean_gradient(ds, 0..ds.n(), ds.n(), x)
    }

    fn mean_gradient(&self, ds: &SparseDataset, rows: impl Iterator<Item = usize>, count: usize, x: &[f64]) -> Vec<f64> {
        let mut sum = alloc::vec![0.0; ds.dim()];
        for i in rows {
            let c = self.coeff(ds, i, x);
            if c != 0.0 {
                ds.example(i).axpy(c, &mut sum);
            }
        }
        let inv = 1.0 / count as f64;
        let ridge = self.folded_ridge();
        for (s, xi) in sum.iter_mut().zip(x) {
            *s *= inv;
            if ridge != 0.0 {
                *s += ridge * xi;
            }
        }
        sum
    }

    /// `g_i(x) = ℓ(b_i a_i·x)`
    pub fn example_loss(&self, ds: &SparseDataset, i: usize, x: &[f64]) -> f64 {
        self.kind.value(self.margin(ds, i, x))
    }

    /// `(1/n) Σ ℓ(b_i a_i·x)`
    pub fn loss_average(&self, ds: &SparseDataset, x: &[f64]) -> f64 {
        let total: f64 = (0..ds.n()).map(|i| self.example_loss(ds, i, x)).sum();
        total / ds.n() as f64
    }

    /// `(λ/2)‖x‖²`
    pub fn ridge_value(&self, x: &[f64]) -> f64 {
        0.5 * self.lambda * math::norm_sq(x)
    }

    /// Training objective `(1/n) Σ ℓ(b_i a_i·x) + (λ/2)‖x‖²`, the same in
    /// both modes.
    pub fn objective(&self, ds: &SparseDataset, x: &[f64]) -> f64 {
        self.loss_average(ds, x) + self.ridge_value(x)
    }

    /// `false` exactly when the loss-part gradient vanishes at `x`, i.e. the
    /// HSVM margin exceeds `1 + ε`. Logistic examples always count as
    /// support vectors.
    pub fn is_support_vector(&self, ds: &SparseDataset, i: usize, x: &[f64]) -> bool {
        match self.kind {
            LossKind::Logistic => true,
            LossKind::Hsvm { .. } => self.kind.deriv(self.margin(ds, i, x)) != 0.0,
        }
    }
}

/// Fraction of examples with `sign(a_i·x) != b_i`. Ties count as errors.
/// An empty dataset cannot occur (datasets are never empty).
pub fn test_error(ds: &SparseDataset, x: &[f64]) -> f64 {
    let wrong = ds
        .examples()
        .iter()
        .filter(|ex| ex.label() * ex.dot(x) <= 0.0)
        .count();
    wrong as f64 / ds.n() as f64
}

/// Nonsmooth or smooth term handled by a proximal map.
#[derive(Debug, Clone, PartialEq)]
pub enum Regularizer {
    None,
    L2 { lambda: f64 },
    L1 { lambda: f64 },
    /// Indicator of `{x : ‖x − center‖ ≤ radius}`. An empty center is the
    /// origin.
    Ball2 { radius: f64, center: Vec<f64> },
}

impl Regularizer {
    pub fn validate(&self) -> Result<(), LossError> {
        match self {
            Regularizer::L1 { lambda } | Regularizer::L2 { lambda } if !(*lambda >= 0.0) => Err(
                LossError::Parameter(alloc::format!("regularization strength must be >= 0, got {lambda}")),
            ),
            Regularizer::Ball2 { radius, .. } if !(*radius > 0.0) => Err(LossError::Parameter(
                alloc::format!("ball radius must be positive, got {radius}"),
            )),
            _ => Ok(()),
        }
    }

    /// `h(x)`; infinite outside the ball.
    pub fn value(&self, x: &[f64]) -> f64 {
        match self {
            Regularizer::None => 0.0,
            Regularizer::L2 { lambda } => 0.5 * lambda * math::norm_sq(x),
            Regularizer::L1 { lambda } => lambda * x.iter().map(|v| v.abs()).sum::<f64>(),
            Regularizer::Ball2 { radius, center } => {
                let dist_sq: f64 = x
                    .iter()
                    .enumerate()
                    .map(|(j, a)| a - center_at(center, j))
                    .map(|v| v * v)
                    .sum();
                if math::sqrt(dist_sq) <= radius * (1.0 + 1e-12) {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
        }
    }

    /// In-place `prox_{t h}(y)`.
    pub fn prox_in_place(&self, step: f64, y: &mut [f64]) {
        match self {
            Regularizer::None => {}
            Regularizer::L2 { lambda } => {
                let scale = 1.0 / (1.0 + step * lambda);
                y.iter_mut().for_each(|v| *v *= scale);
            }
            Regularizer::L1 { lambda } => {
                let threshold = step * lambda;
                for v in y.iter_mut() {
                    let shrunk = v.abs() - threshold;
                    *v = if shrunk > 0.0 { v.signum() * shrunk } else { 0.0 };
                }
            }
            Regularizer::Ball2 { radius, center } => {
                let dist_sq: f64 = y
                    .iter()
                    .enumerate()
                    .map(|(j, a)| a - center_at(center, j))
                    .map(|v| v * v)
                    .sum();
                let dist = math::sqrt(dist_sq);
                if dist > *radius {
                    let scale = radius / dist;
                    for (j, v) in y.iter_mut().enumerate() {
                        let c = center_at(center, j);
                        *v = c + (*v - c) * scale;
                    }
                }
            }
        }
    }
}

fn center_at(center: &[f64], j: usize) -> f64 {
    center.get(j).copied().unwrap_or(0.0)
}

/// `prox_{t h}(y) = argmin_u ½‖u − y‖² + t h(u)`
pub fn prox(reg: &Regularizer, step: f64, y: &[f64]) -> Vec<f64> {
    let mut out = y.to_vec();
    reg.prox_in_place(step, &mut out);
    out
}
