//! Theoretical contraction factors for a configured experiment.

use std::fmt::{self, Write};

use svrg_core::analysis::{self, Premise, Rate, RateParams};
use svrg_core::optimizers::{MiniBatchSampling, Variant};
use svrg_core::sampling::BatchSchedule;
use svrg_core::{LossModel, SparseDataset};

/// Constants of a problem instance that enter every rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProblemConstants {
    pub n: usize,
    /// `max_i L_i` of the folded objective.
    pub l: f64,
    pub l_bar: f64,
    pub l_m: f64,
    pub mu: f64,
}

impl ProblemConstants {
    pub fn of(model: &LossModel, ds: &SparseDataset) -> Self {
        let lambda = model.lambda();
        let n = ds.n();
        let l_bar = model.lipschitz().iter().sum::<f64>() / n as f64 + lambda - model.folded_ridge();
        Self {
            n,
            l: model.l_g() + lambda,
            l_bar,
            l_m: model.l_m(),
            mu: model.mu(),
        }
    }

    pub fn params(&self, eta: f64, m: usize) -> RateParams {
        RateParams {
            eta,
            m: m as f64,
            mu: self.mu,
            l: self.l,
            l_bar: self.l_bar,
            ..RateParams::default()
        }
    }
}

/// Bound for a variant, or `None` where no bound applies (SG, FG, adaptive
/// sampling).
pub fn variant_rate(variant: &Variant, model: &LossModel, ds: &SparseDataset, eta: f64, m: usize) -> Option<Rate> {
    let c = ProblemConstants::of(model, ds);
    let p = c.params(eta, m);
    match variant {
        Variant::Plain | Variant::Mixed { .. } => Some(analysis::rho_l(&p)),
        Variant::Nus => Some(analysis::rho_nus(&p)),
        Variant::Regularized => Some(analysis::rho(c.l_m, c.l_m, &p)),
        Variant::Prox(_) => Some(analysis::rho_prox(&p)),
        Variant::MiniBatch { size, sampling } => match sampling {
            MiniBatchSampling::Lipschitz => Some(analysis::rho_minibatch(*size, &p)),
            MiniBatchSampling::Uniform => Some(analysis::rho_minibatch(*size, &RateParams { l_bar: c.l, ..p })),
            MiniBatchSampling::Adaptive(_) => None,
        },
        Variant::FixedRandom { fixed, random } => {
            let lambda = model.lambda() - model.folded_ridge();
            let mut l: Vec<f64> = model.lipschitz().iter().map(|v| v + lambda).collect();
            l.sort_by(|a, b| b.total_cmp(a));
            let rest = &l[*fixed..];
            let l_bar_r = rest.iter().sum::<f64>() / rest.len() as f64;
            Some(analysis::rho_fixed_random(c.n, fixed + random, *fixed, l[0], l_bar_r, &p).rate)
        }
        Variant::Sg | Variant::Fg => None,
    }
}

pub fn describe(rate: Option<Rate>) -> String {
    match rate {
        None => "n/a".into(),
        Some(Rate::Contracting(v)) => format!("{v:.6}"),
        Some(Rate::PremiseViolated(Premise::StepTooLarge)) => "premise_violated (step too large)".into(),
        Some(Rate::PremiseViolated(Premise::NotContracting(v))) => {
            format!("premise_violated (value {v:.6} >= 1)")
        }
        Some(Rate::PremiseViolated(Premise::InvalidInput)) => "premise_violated (invalid input)".into(),
    }
}

/// Human-readable report.
#[derive(Debug, Clone)]
pub struct RatesReport {
    pub constants: ProblemConstants,
    pub eta: f64,
    pub m: usize,
    pub rows: Vec<(String, Option<Rate>)>,
    pub schedule: BatchSchedule,
    pub preview: Vec<usize>,
    pub inflection: Option<f64>,
}

impl RatesReport {
    pub fn new(
        constants: ProblemConstants,
        eta: f64,
        m: usize,
        rows: Vec<(String, Option<Rate>)>,
        schedule: BatchSchedule,
    ) -> Self {
        let n = constants.n;
        let mut preview = Vec::new();
        for s in 0..200 {
            let b = schedule.batch_size(s, n);
            preview.push(b);
            if b >= n {
                break;
            }
        }
        let inflection = match schedule {
            BatchSchedule::VarianceBased {
                gamma, rho_tilde, s2, ..
            } => Some(analysis::inflection_stage(s2, gamma, n, rho_tilde)),
            _ => None,
        };
        Self {
            constants,
            eta,
            m,
            rows,
            schedule,
            preview,
            inflection,
        }
    }
}

impl fmt::Display for RatesReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = &self.constants;
        writeln!(f, "n = {}  L = {:.6}  Lbar = {:.6}  L_m = {:.6}  mu = {:.6}", c.n, c.l, c.l_bar, c.l_m, c.mu)?;
        writeln!(f, "eta = {:.6e} (2*eta*L = {:.4})  m = {}", self.eta, 2.0 * self.eta * c.l, self.m)?;
        let width = self.rows.iter().map(|r| r.0.len()).max().unwrap_or(7).max(7);
        writeln!(f, "{:<width$}  rate", "variant")?;
        for (name, rate) in &self.rows {
            writeln!(f, "{name:<width$}  {}", describe(*rate))?;
        }
        let mut preview = String::new();
        for (k, b) in self.preview.iter().enumerate() {
            if k > 0 {
                preview.push(',');
            }
            write!(preview, "{b}")?;
        }
        writeln!(f, "schedule {:?}", self.schedule)?;
        writeln!(f, "batch sizes: {preview}")?;
        if let Some(s) = self.inflection {
            writeln!(f, "inflection stage: {s:.4} (|B| = n/2)")?;
        }
        Ok(())
    }
}

/// `S²` and `γ = f(x⁰)` at the origin for the variance schedule.
pub fn variance_schedule_at_origin(model: &LossModel, ds: &SparseDataset, gamma: Option<f64>) -> (f64, f64) {
    let x0 = vec![0.0; ds.dim()];
    let s2 = analysis::estimate_s2(model, ds, &x0);
    let gamma = gamma.unwrap_or_else(|| model.objective(ds, &x0));
    (s2, gamma)
}
