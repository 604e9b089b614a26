//! Closed-form contraction factors and the empirical estimators used to
//! check them.
//!
//! Rate functions never fail. When the step size or batch size breaks the
//! premise of a bound, they return [`Rate::PremiseViolated`] so callers can
//! annotate results where the theory says nothing.

use alloc::vec::Vec;

use crate::data::SparseDataset;
use crate::losses::LossModel;
use crate::math;

/// Inputs of the rate formulas. Fields a formula does not use are ignored.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateParams {
    pub eta: f64,
    /// Inner iterations per stage.
    pub m: f64,
    /// Strong-convexity modulus.
    pub mu: f64,
    pub l: f64,
    pub l_bar: f64,
    /// Bound on `‖x_t − x*‖`.
    pub z: f64,
    /// Bound on `E‖f_i'(x)‖²`.
    pub sigma2: f64,
    /// `|B^s| / n`
    pub alpha: f64,
}

impl Default for RateParams {
    fn default() -> Self {
        Self {
            eta: 0.0,
            m: 1.0,
            mu: 0.0,
            l: 0.0,
            l_bar: 0.0,
            z: 0.0,
            sigma2: 0.0,
            alpha: 1.0,
        }
    }
}

/// Why a rate bound does not apply.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Premise {
    /// The step-size denominator is not positive.
    StepTooLarge,
    /// The formula evaluates to `value ≥ 1` (or is not finite).
    NotContracting(f64),
    /// A parameter that must be positive is not.
    InvalidInput,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Rate {
    Contracting(f64),
    PremiseViolated(Premise),
}

impl Rate {
    pub fn value(&self) -> Option<f64> {
        match *self {
            Rate::Contracting(v) => Some(v),
            Rate::PremiseViolated(_) => None,
        }
    }

    pub fn is_contracting(&self) -> bool {
        matches!(self, Rate::Contracting(_))
    }

    fn classify(denominator_ok: bool, inputs_ok: bool, value: f64) -> Rate {
        if !inputs_ok {
            Rate::PremiseViolated(Premise::InvalidInput)
        } else if !denominator_ok {
            Rate::PremiseViolated(Premise::StepTooLarge)
        } else if value.is_finite() && value > 0.0 && value < 1.0 {
            Rate::Contracting(value)
        } else {
            Rate::PremiseViolated(Premise::NotContracting(value))
        }
    }
}

/// Raw value of `ρ(a, b) = (1 / (1 − 2ηa)) (1/(mμη) + 2bη)`.
pub fn rho_value(a: f64, b: f64, p: &RateParams) -> f64 {
    (1.0 / (1.0 - 2.0 * p.eta * a)) * (1.0 / (p.m * p.mu * p.eta) + 2.0 * b * p.eta)
}

fn positive_inputs(p: &RateParams) -> bool {
    p.eta > 0.0 && p.m > 0.0 && p.mu > 0.0
}

pub fn rho(a: f64, b: f64, p: &RateParams) -> Rate {
    Rate::classify(2.0 * p.eta * a < 1.0, positive_inputs(p), rho_value(a, b, p))
}

/// `ρ = ρ(L, L)`
pub fn rho_l(p: &RateParams) -> Rate {
    rho(p.l, p.l, p)
}

/// `ρ(L̄)`, the rate under Lipschitz-proportional sampling.
pub fn rho_nus(p: &RateParams) -> Rate {
    rho(p.l_bar, p.l_bar, p)
}

/// `ρ(L, αL)` for the mixed SG/SVRG method.
pub fn rho_mixed(p: &RateParams) -> Rate {
    rho(p.l, p.alpha * p.l, p)
}

/// Additive term of the inexact-snapshot bounds:
/// `(Z E‖e‖ + η E‖e‖² + (ησ²/2)(1 − α)) / (1 − 2ηL)`.
/// With `α = 1` the variance part vanishes.
pub fn error_term(p: &RateParams, e_norm: f64, e_norm_sq: f64) -> f64 {
    (p.z * e_norm + p.eta * e_norm_sq + 0.5 * p.eta * p.sigma2 * (1.0 - p.alpha)) / (1.0 - 2.0 * p.eta * p.l)
}

/// Raw value of `ρ_M = (1/(M − 2ηL̄)) (M/(mμη) + 2L̄η)`.
pub fn rho_minibatch_value(batch: f64, p: &RateParams) -> f64 {
    (1.0 / (batch - 2.0 * p.eta * p.l_bar)) * (batch / (p.m * p.mu * p.eta) + 2.0 * p.l_bar * p.eta)
}

pub fn rho_minibatch(batch: usize, p: &RateParams) -> Rate {
    let b = batch as f64;
    Rate::classify(
        b - 2.0 * p.eta * p.l_bar > 0.0,
        positive_inputs(p) && batch >= 1,
        rho_minibatch_value(b, p),
    )
}

/// Constants of the fixed-plus-random mini-batch bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedRandomRate {
    /// `ζ = (n − M_f) L̄_r / ((M − M_f) n)`
    pub zeta: f64,
    /// `κ = max(L_1 / n, ζ)`
    pub kappa: f64,
    /// `ρ(κ, ζ)`
    pub rate: Rate,
    /// Whether the fixed set is predicted to beat plain Lipschitz
    /// mini-batching: `L_1 ≤ nL̄/M` and `M_f < (α − 1) n M / (α n − M)`
    /// with `α = L̄ / L̄_r`.
    pub advantage: bool,
}

/// `l_1` is the largest `L_i`, `l_bar_r` the mean `L_i` outside the fixed
/// set; `p.l_bar` is the overall mean.
pub fn rho_fixed_random(n: usize, batch: usize, fixed: usize, l_1: f64, l_bar_r: f64, p: &RateParams) -> FixedRandomRate {
    let nf = n as f64;
    let mf = fixed as f64;
    let mb = batch as f64;
    let zeta = (nf - mf) * l_bar_r / ((mb - mf) * nf);
    let kappa = (l_1 / nf).max(zeta);
    let rate = if batch > fixed && fixed < n {
        rho(kappa, zeta, p)
    } else {
        Rate::PremiseViolated(Premise::InvalidInput)
    };
    let alpha = p.l_bar / l_bar_r;
    let advantage = l_1 <= nf * p.l_bar / mb && mf < (alpha - 1.0) * nf * mb / (alpha * nf - mb);
    FixedRandomRate {
        zeta,
        kappa,
        rate,
        advantage,
    }
}

/// Raw value of the proximal bound
/// `1/(mμ(1 − 4ηL)η) + 4Lη(m + 1)/((1 − 4ηL)m)`.
pub fn rho_prox_value(p: &RateParams) -> f64 {
    let shrink = 1.0 - 4.0 * p.eta * p.l;
    1.0 / (p.m * p.mu * shrink * p.eta) + 4.0 * p.l * p.eta * (p.m + 1.0) / (shrink * p.m)
}

pub fn rho_prox(p: &RateParams) -> Rate {
    Rate::classify(4.0 * p.eta * p.l < 1.0, positive_inputs(p), rho_prox_value(p))
}

/// `(1/(n−1)) Σ_i [‖v_i‖² − ‖v̄‖²]` for explicit vectors. Zero for `n < 2`.
pub fn gradient_sample_variance(grads: &[Vec<f64>]) -> f64 {
    let n = grads.len();
    if n < 2 {
        return 0.0;
    }
    let dim = grads[0].len();
    let mut mean = alloc::vec![0.0; dim];
    for g in grads {
        mean.iter_mut().zip(g).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mean_sq = math::norm_sq(&mean);
    let total: f64 = grads.iter().map(|g| math::norm_sq(g) - mean_sq).sum();
    total / (n - 1) as f64
}

/// Sample variance of the example gradients at `x`,
/// `(1/(n−1)) Σ_i [‖f_i'(x)‖² − ‖f'(x)‖²]`. Not counted.
pub fn estimate_s2(model: &LossModel, ds: &SparseDataset, x: &[f64]) -> f64 {
    let n = ds.n();
    if n < 2 {
        return 0.0;
    }
    let mean_sq = math::norm_sq(&model.full_gradient_uncounted(ds, x));
    let ridge = model.folded_ridge();
    let x_sq = math::norm_sq(x);
    let total: f64 = (0..n)
        .map(|i| {
            let ex = ds.example(i);
            let dot = ex.dot(x);
            let c = model.coeff_from_dot(ex.label(), dot);
            // ‖c a + λx‖²
            c * c * ex.norm_sq() + 2.0 * c * ridge * dot + ridge * ridge * x_sq - mean_sq
        })
        .sum();
    total / (n - 1) as f64
}

/// Without-replacement bound `E‖e^s‖² ≤ ((n − |B|)/(n|B|)) S²`.
pub fn error_norm_bound(s2: f64, n: usize, batch: usize) -> f64 {
    let nf = n as f64;
    let b = batch as f64;
    (nf - b) / (nf * b) * s2
}

/// Stage `log(γn/S²) / (2 log(1/ρ̃))` at which the variance-based schedule
/// reaches `n/2`, i.e. where `nγρ̃^{2s} = S²`. Negative values mean the
/// schedule starts past it.
pub fn inflection_stage(s2: f64, gamma: f64, n: usize, rho_tilde: f64) -> f64 {
    math::ln(gamma * n as f64 / s2) / (2.0 * math::ln(1.0 / rho_tilde))
}

/// Gaps below this are treated as converged to rounding noise.
pub const GAP_FLOOR: f64 = 1e-10;

/// Per-stage contraction ratios `[f(x^{s+1}) − f*] / [f(x^s) − f*]`,
/// averaged across runs. `objectives[r][s]` is run `r` at stage `s` (index 0
/// is the starting point). A run contributes at stage `s` only while its gap
/// exceeds [`GAP_FLOOR`]; the sequence stops once no run does or a run ends.
pub fn empirical_contraction(objectives: &[Vec<f64>], f_star: f64) -> Vec<f64> {
    let stages = objectives.iter().map(Vec::len).min().unwrap_or(0);
    let mut ratios = Vec::new();
    for s in 0..stages.saturating_sub(1) {
        let mut sum = 0.0;
        let mut count = 0usize;
        for o in objectives {
            let before = o[s] - f_star;
            if before > GAP_FLOOR {
                sum += (o[s + 1] - f_star).max(0.0) / before;
                count += 1;
            }
        }
        if count == 0 {
            break;
        }
        ratios.push(sum / count as f64);
    }
    ratios
}

/// High-accuracy minimizer of the smooth training objective.
#[derive(Debug, Clone)]
pub struct ReferenceSolution {
    pub x: Vec<f64>,
    pub f_star: f64,
    pub grad_norm: f64,
    pub iterations: usize,
}

/// Accelerated full-gradient descent with adaptive restart, stopped once
/// `‖f'(x)‖ < tol` or after `max_iter` iterations. Uses uncounted
/// gradients; this is the `f*` oracle, not a benchmarked method.
pub fn reference_solution(model: &LossModel, ds: &SparseDataset, tol: f64, max_iter: usize) -> ReferenceSolution {
    let d = ds.dim();
    let l = model.l_folded().max(f64::MIN_POSITIVE);
    let mu = model.mu();
    let step = 1.0 / l;
    let momentum = if mu > 0.0 {
        let (sl, sm) = (math::sqrt(l), math::sqrt(mu));
        Some((sl - sm) / (sl + sm))
    } else {
        None
    };
    let folded = model.with_mode(crate::losses::Mode::Folded, ds);
    let mut x = alloc::vec![0.0; d];
    let mut y = x.clone();
    let mut f_x = folded.objective(ds, &x);
    let mut k = 0usize;
    let mut iterations = 0;
    let mut grad_norm = math::norm(&folded.full_gradient_uncounted(ds, &x));
    while iterations < max_iter && grad_norm >= tol {
        let g = folded.full_gradient_uncounted(ds, &y);
        let next: Vec<f64> = y.iter().zip(&g).map(|(yi, gi)| yi - step * gi).collect();
        let f_next = folded.objective(ds, &next);
        let beta = momentum.unwrap_or(k as f64 / (k as f64 + 3.0));
        if f_next > f_x && k > 0 {
            // restart momentum from the better point
            y = x.clone();
            k = 0;
        } else {
            y = next.iter().zip(&x).map(|(n, o)| n + beta * (n - o)).collect();
            x = next;
            f_x = f_next;
            k += 1;
        }
        iterations += 1;
        grad_norm = math::norm(&folded.full_gradient_uncounted(ds, &x));
    }
    ReferenceSolution {
        f_star: f_x,
        x,
        grad_norm,
        iterations,
    }
}
