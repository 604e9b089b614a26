//! The SVRG stage loop and its inner-step rules.
//!
//! A stage draws a snapshot batch `B^s`, forms `μ^s` as the mean gradient
//! over it at the snapshot `x^s`, runs `m` inner steps of the selected
//! [`Variant`], and then picks the next snapshot according to
//! [`SnapshotOption`]. SG and FG baselines share the same driver so that
//! traces are directly comparable.
//!
//! Gradient evaluations are charged to both [`OptimizerState::grad_evals`]
//! and the model's [`EvalCounter`](crate::losses::EvalCounter). Diagnostic
//! work (the exact `f'(x^s)` used to measure `e^s`, objectives, test error)
//! is never charged.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use thiserror::Error;

use crate::analysis;
use crate::data::SparseDataset;
use crate::losses::{self, LossKind, LossModel, Mode, Regularizer};
use crate::math;
use crate::rng::{self, StreamRng};
use crate::sampling::{self, AdaptiveMode, BatchDrawer, BatchSchedule, S2Source, WeightedSampler};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("invalid optimizer configuration: {0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

/// How mini-batch members are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MiniBatchSampling {
    Uniform,
    /// `p_i = L_i / (n L̄)`
    Lipschitz,
    /// Proportional to a snapshot quantity, recomputed once per stage.
    Adaptive(AdaptiveMode),
}

/// Inner-step rule.
#[derive(Debug, Clone, PartialEq)]
pub enum Variant {
    /// `x ← x − η(f_i'(x) − f_i'(x^s) + μ^s)`
    Plain,
    /// Plain step with `i ~ L_i` and the difference scaled by `L̄ / L_i`.
    Nus,
    /// SVRG step when `i ∈ B^s`, SG step otherwise. With `sg_scale = Some(c)`
    /// the SG step uses `min(η, c √((n−|B|)/(n|B|)))`, otherwise `η`.
    Mixed { sg_scale: Option<f64> },
    /// Exact gradient of the ridge term plus an SVRG step on the losses.
    /// Needs a [`Mode::Composite`] model.
    Regularized,
    /// Proximal SVRG on the composite model plus `reg`.
    Prox(Regularizer),
    /// `size` independent draws per step, each reweighted by `1/(n p_i)`.
    MiniBatch { size: usize, sampling: MiniBatchSampling },
    /// The `fixed` examples with largest `L_i` are evaluated exactly every
    /// step; `random` more are drawn from the rest proportionally to `L_i`.
    FixedRandom { fixed: usize, random: usize },
    /// Stochastic gradient baseline, `η_t = η / (1 + t/n)`.
    Sg,
    /// Full gradient baseline; one step per stage.
    Fg,
}

impl Variant {
    fn needs_composite(&self) -> bool {
        matches!(self, Variant::Regularized | Variant::Prox(_))
    }

    fn has_snapshot(&self) -> bool {
        !matches!(self, Variant::Sg | Variant::Fg)
    }
}

/// Which iterate becomes the next snapshot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SnapshotOption {
    LastIterate,
    /// `x_t` for `t` uniform in `1..=m`.
    RandomIterate,
    /// `(1/m) Σ_t x_t`; proximal variant only.
    AverageIterate,
}

/// Support-vector bookkeeping for HSVM.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum SvSkipping {
    Off,
    /// Remember which batch members had `g_i'(x^s) = 0` and skip
    /// re-evaluating them at `x^s`. Exact.
    ExactListOnly,
    /// Exact list plus exponential back-off on examples whose gradient keeps
    /// coming back zero. Inexact.
    Heuristic,
}

/// Inner iterations per stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InnerLength {
    Fixed(usize),
    /// `m = |B^s|`
    BatchSize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvrgConfig {
    pub eta: f64,
    pub inner: InnerLength,
    pub variant: Variant,
    pub schedule: BatchSchedule,
    pub snapshot: SnapshotOption,
    pub sv: SvSkipping,
    pub stages: usize,
    pub seed: u64,
    /// Measure `‖e^s‖` against the exact gradient at every snapshot.
    pub diagnostic: bool,
    /// Apply the folded ridge term through a scalar rescaling so plain
    /// inner steps only touch the nonzeros of `a_i`.
    pub lazy_ridge: bool,
    /// Keep `f_i'(x^s)` once computed in a stage (linear models only need one
    /// scalar per example), trading memory for `m + n` accounting.
    pub cache_snapshot_gradients: bool,
    /// A run is declared diverged once the objective exceeds this multiple
    /// of its starting value.
    pub divergence_factor: f64,
}

pub const DEFAULT_STAGES: usize = 30;
pub const DEFAULT_DIVERGENCE_FACTOR: f64 = 1e3;

impl SvrgConfig {
    pub fn new(eta: f64, variant: Variant) -> Self {
        Self {
            eta,
            inner: InnerLength::BatchSize,
            variant,
            schedule: BatchSchedule::Full,
            snapshot: SnapshotOption::LastIterate,
            sv: SvSkipping::Off,
            stages: DEFAULT_STAGES,
            seed: 0,
            diagnostic: false,
            lazy_ridge: true,
            cache_snapshot_gradients: false,
            divergence_factor: DEFAULT_DIVERGENCE_FACTOR,
        }
    }

    pub fn validate(&self, model: &LossModel, ds: &SparseDataset) -> Result<(), ConfigError> {
        let n = ds.n();
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(invalid(alloc::format!("step size must be positive, got {}", self.eta)));
        }
        if self.inner == InnerLength::Fixed(0) {
            return Err(invalid("m must be at least 1"));
        }
        if self.sv == SvSkipping::Heuristic && !matches!(model.kind(), LossKind::Hsvm { .. }) {
            return Err(invalid("support-vector heuristic requires the HSVM loss"));
        }
        if self.snapshot == SnapshotOption::AverageIterate && !matches!(self.variant, Variant::Prox(_)) {
            return Err(invalid("average-iterate snapshots are only defined for the proximal variant"));
        }
        if self.variant.needs_composite() != (model.mode() == Mode::Composite) {
            return Err(invalid(if self.variant.needs_composite() {
                "regularized and proximal variants need a composite-mode model"
            } else {
                "this variant needs a folded-mode model"
            }));
        }
        if !(self.divergence_factor > 1.0) {
            return Err(invalid("divergence factor must exceed 1"));
        }
        match &self.variant {
            Variant::Prox(reg) => reg.validate().map_err(|e| invalid(alloc::format!("{e}")))?,
            Variant::MiniBatch { size, .. } if *size == 0 => return Err(invalid("mini-batch size must be >= 1")),
            Variant::FixedRandom { fixed, random } => {
                if fixed + 1 > n {
                    return Err(invalid(alloc::format!("fixed set of {fixed} leaves no random part for n = {n}")));
                }
                if *random == 0 {
                    return Err(invalid("random part must draw at least one example"));
                }
            }
            Variant::Mixed { sg_scale: Some(c) } if !(*c >= 0.0) => {
                return Err(invalid("SG step scale must be nonnegative"))
            }
            _ => {}
        }
        if let BatchSchedule::VarianceBased { gamma, rho_tilde, s2, .. } = self.schedule {
            if !(gamma > 0.0) || !(rho_tilde > 0.0 && rho_tilde < 1.0) || !(s2 >= 0.0) {
                return Err(invalid("variance schedule needs γ > 0, 0 < ρ̃ < 1 and S² ≥ 0"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    Ok,
    /// Objective became non-finite or exceeded the divergence threshold.
    Diverged,
}

/// Metrics after one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub stage: usize,
    pub batch_size: usize,
    pub inner_steps: usize,
    /// Cumulative, including fixed-set evaluations.
    pub grad_evals: u64,
    /// Cumulative evaluations spent on the fixed set of
    /// [`Variant::FixedRandom`].
    pub fixed_set_evals: u64,
    pub objective: f64,
    pub test_error: Option<f64>,
    /// `‖μ^s − f'(x^s)‖` for this stage's snapshot, diagnostic mode only.
    pub error_norm: Option<f64>,
    pub status: RunStatus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub status: RunStatus,
    pub initial_objective: f64,
    pub reports: Vec<StageReport>,
    pub x: Vec<f64>,
    /// Adaptive weights received the zero floor at least once.
    pub weight_floor_used: bool,
}

impl RunResult {
    /// `f(x^0), f(x^1), …`
    pub fn objectives(&self) -> Vec<f64> {
        core::iter::once(self.initial_objective)
            .chain(self.reports.iter().map(|r| r.objective))
            .collect()
    }
}

/// Per-example counters of the skipping heuristic.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkipCounters {
    /// Evaluations still to skip.
    pub skip: Vec<u64>,
    /// Consecutive zero evaluations.
    pub pass: Vec<u32>,
}

impl SkipCounters {
    pub fn new(n: usize) -> Self {
        Self {
            skip: alloc::vec![0; n],
            pass: alloc::vec![0; n],
        }
    }

    /// Runs `evaluate` unless example `i` is currently being skipped, in
    /// which case zero is returned and nothing is evaluated. Returns the
    /// value and whether an evaluation happened.
    pub fn visit(&mut self, i: usize, evaluate: impl FnOnce() -> f64) -> (f64, bool) {
        if self.skip[i] == 0 {
            let g = evaluate();
            if g == 0.0 {
                self.pass[i] = self.pass[i].saturating_add(1);
                let exponent = self.pass[i].saturating_sub(2).min(62);
                self.skip[i] = 1u64 << exponent;
            } else {
                self.pass[i] = 0;
            }
            (g, true)
        } else {
            self.skip[i] -= 1;
            (0.0, false)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    /// Current iterate `x_t`.
    pub x: Vec<f64>,
    /// Snapshot `x^s`.
    pub snapshot: Vec<f64>,
    /// `μ^s`
    pub mu: Vec<f64>,
    /// Completed stages.
    pub stage: usize,
    pub grad_evals: u64,
    pub fixed_set_evals: u64,
    /// Uncharged evaluations spent on `e^s` measurement.
    pub diagnostic_evals: u64,
    /// Inner steps of [`Variant::Mixed`] that took the SVRG branch.
    pub mixed_svrg_steps: u64,
    pub skip: SkipCounters,
    /// `nonsupport[i]`: `g_i'(x^s) = 0` was established in the snapshot pass.
    pub nonsupport: Vec<bool>,
    /// Membership bitset of `B^s`.
    pub in_batch: Vec<bool>,
    pub batch: Vec<usize>,
    pub error_norm: Option<f64>,
    /// Current `S²` of the variance-based schedule.
    pub s2: Option<f64>,
}

/// Fixed set of [`Variant::FixedRandom`] and the sampler over the rest.
#[derive(Debug, Clone)]
struct FixedSplit {
    fixed: Vec<usize>,
    is_fixed: Vec<bool>,
    rest: Vec<usize>,
    sampler: WeightedSampler,
    /// `g'(x^s)` estimated over the non-fixed batch members.
    g_snapshot: Vec<f64>,
}

/// Folded iterate `x = scale · w + shift · u` with `u = λx^s − μ^s` fixed
/// during a stage, so a plain step touches only the nonzeros of `a_i`.
#[derive(Debug, Clone)]
struct LazyIterate {
    w: Vec<f64>,
    u: Vec<f64>,
    scale: f64,
    shift: f64,
    decay: f64,
    eta: f64,
}

impl LazyIterate {
    fn new(x: &[f64], snapshot: &[f64], mu: &[f64], ridge: f64, eta: f64) -> Self {
        Self {
            w: x.to_vec(),
            u: snapshot.iter().zip(mu).map(|(s, m)| ridge * s - m).collect(),
            scale: 1.0,
            shift: 0.0,
            decay: 1.0 - eta * ridge,
            eta,
        }
    }

    #[inline]
    fn dot(&self, ex: &crate::data::SparseExample) -> f64 {
        self.scale * ex.dot(&self.w) + self.shift * ex.dot(&self.u)
    }

    #[inline]
    fn step(&mut self, ex: &crate::data::SparseExample, delta: f64) {
        self.scale *= self.decay;
        self.shift = self.decay * self.shift + self.eta;
        if delta != 0.0 {
            ex.axpy(-self.eta * delta / self.scale, &mut self.w);
        }
        if self.scale.abs() < 1e-100 {
            let mut x = alloc::vec![0.0; self.w.len()];
            self.materialize(&mut x);
            self.w = x;
            self.scale = 1.0;
            self.shift = 0.0;
        }
    }

    fn materialize(&self, out: &mut [f64]) {
        for ((o, w), u) in out.iter_mut().zip(&self.w).zip(&self.u) {
            *o = self.scale * w + self.shift * u;
        }
    }
}

/// One optimizer run over a training set.
pub struct Svrg<'a> {
    config: SvrgConfig,
    model: &'a LossModel,
    ds: &'a SparseDataset,
    test: Option<&'a SparseDataset>,
    rng: StreamRng,
    drawer: BatchDrawer,
    lipschitz_sampler: Option<WeightedSampler>,
    adaptive_sampler: Option<WeightedSampler>,
    fixed: Option<FixedSplit>,
    snapshot_cache: Vec<f64>,
    sg_steps: u64,
    initial_objective: f64,
    weight_floor_used: bool,
    pub state: OptimizerState,
}

impl<'a> Svrg<'a> {
    pub fn new(config: SvrgConfig, model: &'a LossModel, ds: &'a SparseDataset) -> Result<Self, ConfigError> {
        config.validate(model, ds)?;
        let n = ds.n();
        let d = ds.dim();
        let needs_lipschitz = matches!(
            config.variant,
            Variant::Nus
                | Variant::MiniBatch {
                    sampling: MiniBatchSampling::Lipschitz,
                    ..
                }
        );
        let lipschitz_sampler = if needs_lipschitz {
            Some(WeightedSampler::new(model.lipschitz()).map_err(|e| invalid(alloc::format!("{e}")))?)
        } else {
            None
        };
        let fixed = match config.variant {
            Variant::FixedRandom { fixed, .. } => Some(Self::split_fixed(model, fixed, d)?),
            _ => None,
        };
        let x = alloc::vec![0.0; d];
        let s2 = match config.schedule {
            BatchSchedule::VarianceBased { s2, .. } => Some(s2),
            _ => None,
        };
        let mut me = Self {
            rng: rng::stream(config.seed, rng::SAMPLING_STREAM),
            drawer: BatchDrawer::new(n),
            lipschitz_sampler,
            adaptive_sampler: None,
            fixed,
            snapshot_cache: alloc::vec![f64::NAN; n],
            sg_steps: 0,
            initial_objective: 0.0,
            weight_floor_used: false,
            state: OptimizerState {
                snapshot: x.clone(),
                mu: alloc::vec![0.0; d],
                stage: 0,
                grad_evals: 0,
                fixed_set_evals: 0,
                diagnostic_evals: 0,
                mixed_svrg_steps: 0,
                skip: SkipCounters::new(n),
                nonsupport: alloc::vec![false; n],
                in_batch: alloc::vec![false; n],
                batch: Vec::new(),
                error_norm: None,
                s2,
                x,
            },
            config,
            model,
            ds,
            test: None,
        };
        me.initial_objective = me.objective(&me.state.x);
        Ok(me)
    }

    fn split_fixed(model: &LossModel, fixed: usize, d: usize) -> Result<FixedSplit, ConfigError> {
        let l = model.lipschitz();
        let mut order: Vec<usize> = (0..l.len()).collect();
        // largest L_i first, ties by index
        order.sort_by(|&a, &b| l[b].total_cmp(&l[a]).then(a.cmp(&b)));
        let mut is_fixed = alloc::vec![false; l.len()];
        let mut fixed_set: Vec<usize> = order[..fixed].to_vec();
        fixed_set.sort_unstable();
        for &i in &fixed_set {
            is_fixed[i] = true;
        }
        let rest: Vec<usize> = (0..l.len()).filter(|&i| !is_fixed[i]).collect();
        let weights: Vec<f64> = rest.iter().map(|&i| l[i]).collect();
        let sampler = WeightedSampler::new(&weights).map_err(|e| invalid(alloc::format!("{e}")))?;
        Ok(FixedSplit {
            fixed: fixed_set,
            is_fixed,
            rest,
            sampler,
            g_snapshot: alloc::vec![0.0; d],
        })
    }

    pub fn with_test(mut self, test: &'a SparseDataset) -> Self {
        self.test = Some(test);
        self
    }

    /// Starts from `x0` instead of the origin.
    pub fn with_initial(mut self, x0: &[f64]) -> Self {
        assert_eq!(x0.len(), self.ds.dim(), "initial point has the wrong dimension");
        self.state.x = x0.to_vec();
        self.state.snapshot = x0.to_vec();
        self.initial_objective = self.objective(&self.state.x);
        self
    }

    pub fn config(&self) -> &SvrgConfig {
        &self.config
    }

    pub fn initial_objective(&self) -> f64 {
        self.initial_objective
    }

    pub fn weight_floor_used(&self) -> bool {
        self.weight_floor_used
    }

    /// Training objective, including the proximal term for
    /// [`Variant::Prox`].
    pub fn objective(&self, x: &[f64]) -> f64 {
        let base = self.model.objective(self.ds, x);
        match &self.config.variant {
            Variant::Prox(reg) => base + reg.value(x),
            _ => base,
        }
    }

    /// Charges gradient evaluations spent outside the engine on this run's
    /// behalf, such as a one-time `S²` estimate.
    pub fn charge_external(&mut self, k: u64) {
        self.charge(k);
    }

    fn charge(&mut self, k: u64) {
        self.state.grad_evals += k;
        self.model.evals().add(k);
    }

    /// Charged loss-part coefficient of example `i` at `x`.
    fn eval_at(&mut self, i: usize, x_is_snapshot: bool) -> f64 {
        self.charge(1);
        let x = if x_is_snapshot { &self.state.snapshot } else { &self.state.x };
        self.model.coeff(self.ds, i, x)
    }

    /// Evaluation routed through the skipping heuristic when enabled.
    /// Returns the coefficient and whether it was actually evaluated.
    fn visit_checked(&mut self, i: usize, dot: impl FnOnce(&Self) -> f64) -> (f64, bool) {
        let label = self.ds.example(i).label();
        if self.config.sv == SvSkipping::Heuristic {
            let model = self.model;
            let mut skip = core::mem::replace(&mut self.state.skip, SkipCounters { skip: Vec::new(), pass: Vec::new() });
            let (c, evaluated) = skip.visit(i, || model.coeff_from_dot(label, dot(self)));
            self.state.skip = skip;
            if evaluated {
                self.charge(1);
            }
            (c, evaluated)
        } else {
            self.charge(1);
            (self.model.coeff_from_dot(label, dot(self)), true)
        }
    }

    fn visit(&mut self, i: usize, dot: impl FnOnce(&Self) -> f64) -> f64 {
        self.visit_checked(i, dot).0
    }

    /// `g_i'(x^s)` coefficient: free when known from the list or cache.
    fn snapshot_coeff(&mut self, i: usize) -> f64 {
        if self.config.sv != SvSkipping::Off && self.state.nonsupport[i] {
            return 0.0;
        }
        if self.config.cache_snapshot_gradients && !self.snapshot_cache[i].is_nan() {
            return self.snapshot_cache[i];
        }
        let c = self.visit(i, |me| me.ds.example(i).dot(&me.state.snapshot));
        if self.config.cache_snapshot_gradients {
            self.snapshot_cache[i] = c;
        }
        c
    }

    /// `g_i'(x_t)` coefficient.
    fn current_coeff(&mut self, i: usize) -> f64 {
        self.visit(i, |me| me.ds.example(i).dot(&me.state.x))
    }

    /// Algorithm-level entry to the skipping heuristic: returns the loss-part
    /// coefficient of `g_i'(x)` or zero when skipped.
    pub fn maybe_skip_gradient(&mut self, i: usize, x: &[f64]) -> f64 {
        let model = self.model;
        let ds = self.ds;
        let (c, evaluated) = self.state.skip.visit(i, || model.coeff(ds, i, x));
        if evaluated {
            self.charge(1);
        }
        c
    }

    fn inner_steps(&self, batch: usize) -> usize {
        match self.config.inner {
            InnerLength::Fixed(m) => m,
            InnerLength::BatchSize => batch.max(1),
        }
    }

    /// Draws `B^s` from the schedule and computes `μ^s` at the current
    /// iterate, which becomes the snapshot.
    pub fn take_snapshot(&mut self) {
        let n = self.ds.n();
        let s = self.state.stage;
        let size = match (self.config.schedule, self.state.s2) {
            (BatchSchedule::VarianceBased { gamma, rho_tilde, .. }, Some(s2)) => {
                sampling::variance_batch_size(n, s2, gamma, rho_tilde, s)
            }
            (schedule, _) => schedule.batch_size(s, n),
        };
        let batch = if size >= n {
            (0..n).collect()
        } else {
            let mut b = self.drawer.draw(size, &mut self.rng).expect("size in range").to_vec();
            b.sort_unstable();
            b
        };
        self.take_snapshot_with(batch);
    }

    /// Snapshot pass over an explicit batch (sorted internally).
    pub fn take_snapshot_with(&mut self, mut batch: Vec<usize>) {
        batch.sort_unstable();
        batch.dedup();
        assert!(!batch.is_empty(), "snapshot batch must be nonempty");
        let n = self.ds.n();
        assert!(batch[batch.len() - 1] < n, "snapshot batch index out of range");
        let d = self.ds.dim();
        let ridge = self.model.folded_ridge();
        self.state.snapshot.clone_from(&self.state.x);
        self.state.nonsupport.iter_mut().for_each(|v| *v = false);
        self.state.in_batch.iter_mut().for_each(|v| *v = false);
        if self.config.cache_snapshot_gradients {
            self.snapshot_cache.iter_mut().for_each(|v| *v = f64::NAN);
        }

        let mut sum = alloc::vec![0.0; d];
        let mut rest_sum = alloc::vec![0.0; d];
        let mut rest_count = 0usize;
        let track_s2 = matches!(
            self.config.schedule,
            BatchSchedule::VarianceBased {
                source: S2Source::PerStage,
                ..
            }
        );
        let mut sq_norms = 0.0;
        let snap_sq = math::norm_sq(&self.state.snapshot);
        for &i in &batch {
            self.state.in_batch[i] = true;
            let ex = self.ds.example(i);
            let dot = ex.dot(&self.state.snapshot);
            let (c, evaluated) = self.visit_checked(i, |_| dot);
            // only verified zeros enter the list; a skipped guess does not
            if self.config.sv != SvSkipping::Off && evaluated && c == 0.0 {
                self.state.nonsupport[i] = true;
            }
            if self.config.cache_snapshot_gradients {
                self.snapshot_cache[i] = c;
            }
            if c != 0.0 {
                ex.axpy(c, &mut sum);
            }
            if let Some(fixed) = &self.fixed {
                if !fixed.is_fixed[i] {
                    rest_count += 1;
                    if c != 0.0 {
                        ex.axpy(c, &mut rest_sum);
                    }
                }
            }
            if track_s2 {
                sq_norms += c * c * ex.norm_sq() + 2.0 * c * ridge * dot + ridge * ridge * snap_sq;
            }
        }
        let b = batch.len() as f64;
        for (m, (s, xs)) in self.state.mu.iter_mut().zip(sum.iter().zip(&self.state.snapshot)) {
            *m = s / b;
            if ridge != 0.0 {
                *m += ridge * xs;
            }
        }
        if let Some(fixed) = &mut self.fixed {
            let share = rest_count as f64 / b;
            for ((g, s), xs) in fixed.g_snapshot.iter_mut().zip(&rest_sum).zip(&self.state.snapshot) {
                *g = s / b;
                if ridge != 0.0 {
                    *g += ridge * share * xs;
                }
            }
        }
        if track_s2 && batch.len() > 1 {
            let mean_sq = math::norm_sq(&self.state.mu);
            self.state.s2 = Some(((sq_norms - b * mean_sq) / (b - 1.0)).max(0.0));
        }

        if let Variant::MiniBatch {
            sampling: MiniBatchSampling::Adaptive(mode),
            ..
        } = self.config.variant
        {
            let weights = sampling::adaptive_weights(self.model, self.ds, &self.state.snapshot, mode);
            if weights.contains(&sampling::ADAPTIVE_WEIGHT_FLOOR) {
                self.weight_floor_used = true;
            }
            self.charge(n as u64);
            self.adaptive_sampler = Some(WeightedSampler::new(&weights).expect("floored weights are positive"));
        }

        self.state.error_norm = if self.config.diagnostic {
            let exact = self.model.full_gradient_uncounted(self.ds, &self.state.snapshot);
            self.state.diagnostic_evals += n as u64;
            let err: Vec<f64> = self.state.mu.iter().zip(&exact).map(|(a, b)| a - b).collect();
            Some(math::norm(&err))
        } else {
            None
        };
        self.state.batch = batch;
    }

    /// `ν = base + x_coef·x + diff_coef·(x − x^s) + Σ_k w_k (c_t,k − c_s,k) a_k`
    fn build_direction(&self, base: &[f64], x_coef: f64, diff_coef: f64, terms: &[(usize, f64, f64)]) -> Vec<f64> {
        let x = &self.state.x;
        let xs = &self.state.snapshot;
        let mut nu = base.to_vec();
        if diff_coef != 0.0 {
            for ((v, a), b) in nu.iter_mut().zip(x).zip(xs) {
                *v += diff_coef * (a - b);
            }
        }
        if x_coef != 0.0 {
            for (v, a) in nu.iter_mut().zip(x) {
                *v += x_coef * a;
            }
        }
        for &(i, weight, delta) in terms {
            if delta != 0.0 {
                self.ds.example(i).axpy(weight * delta, &mut nu);
            }
        }
        nu
    }

    fn apply(&mut self, eta: f64, nu: &[f64]) {
        for (x, v) in self.state.x.iter_mut().zip(nu) {
            *x -= eta * v;
        }
    }

    /// Search direction of the plain update.
    pub fn plain_direction(&mut self, i: usize) -> Vec<f64> {
        let delta = self.current_coeff(i) - self.snapshot_coeff(i);
        let mu = core::mem::take(&mut self.state.mu);
        let nu = self.build_direction(&mu, 0.0, self.model.folded_ridge(), &[(i, 1.0, delta)]);
        self.state.mu = mu;
        nu
    }

    /// `x ← x − η(f_i'(x) − f_i'(x^s) + μ^s)`
    pub fn svrg_step(&mut self, i: usize, eta: f64) {
        let nu = self.plain_direction(i);
        self.apply(eta, &nu);
    }

    pub fn nus_direction(&mut self, i: usize) -> Vec<f64> {
        let factor = self.model.l_mean() / self.model.lipschitz()[i];
        let delta = self.current_coeff(i) - self.snapshot_coeff(i);
        let mu = core::mem::take(&mut self.state.mu);
        let nu = self.build_direction(&mu, 0.0, factor * self.model.folded_ridge(), &[(i, factor, delta)]);
        self.state.mu = mu;
        nu
    }

    /// Plain update with the difference scaled by `L̄ / L_i`.
    pub fn nus_step(&mut self, i: usize, eta: f64) {
        let nu = self.nus_direction(i);
        self.apply(eta, &nu);
    }

    /// SVRG step if `i ∈ B^s`, otherwise `x ← x − η_sg f_i'(x)`.
    /// Returns whether the SVRG branch ran.
    pub fn mixed_step(&mut self, i: usize, eta: f64, eta_sg: f64) -> bool {
        if self.state.in_batch[i] {
            self.svrg_step(i, eta);
            self.state.mixed_svrg_steps += 1;
            true
        } else {
            let c = self.current_coeff(i);
            let ridge = self.model.folded_ridge();
            if ridge != 0.0 {
                let shrink = eta_sg * ridge;
                self.state.x.iter_mut().for_each(|v| *v -= shrink * *v);
            }
            if c != 0.0 {
                self.ds.example(i).axpy(-eta_sg * c, &mut self.state.x);
            }
            false
        }
    }

    pub fn regularized_direction(&mut self, i: usize) -> Vec<f64> {
        let delta = self.current_coeff(i) - self.snapshot_coeff(i);
        let mu = core::mem::take(&mut self.state.mu);
        let nu = self.build_direction(&mu, self.model.lambda(), 0.0, &[(i, 1.0, delta)]);
        self.state.mu = mu;
        nu
    }

    /// `x ← x − η(h'(x) + g_i'(x) − g_i'(x^s) + μ^s)` with `h = (λ/2)‖x‖²`.
    pub fn regularized_step(&mut self, i: usize, eta: f64) {
        let nu = self.regularized_direction(i);
        self.apply(eta, &nu);
    }

    /// `x ← prox_{ηh}(x − ην)` with `ν = λx + g_i'(x) − g_i'(x^s) + μ^s`.
    pub fn prox_step(&mut self, i: usize, eta: f64) {
        let nu = self.regularized_direction(i);
        self.apply(eta, &nu);
        if let Variant::Prox(reg) = &self.config.variant {
            reg.prox_in_place(eta, &mut self.state.x);
        }
    }

    fn minibatch_probability(&self, i: usize) -> f64 {
        match self.config.variant {
            Variant::MiniBatch { sampling, .. } => match sampling {
                MiniBatchSampling::Uniform => 1.0 / self.ds.n() as f64,
                MiniBatchSampling::Lipschitz => self.lipschitz_sampler.as_ref().expect("built").probability(i),
                MiniBatchSampling::Adaptive(_) => self
                    .adaptive_sampler
                    .as_ref()
                    .expect("snapshot taken before inner steps")
                    .probability(i),
            },
            Variant::Nus => self.lipschitz_sampler.as_ref().expect("built").probability(i),
            _ => 1.0 / self.ds.n() as f64,
        }
    }

    /// `ν = μ^s + (1/M) Σ_k (1/(n p_k)) (f_k'(x) − f_k'(x^s))`
    pub fn minibatch_direction(&mut self, draws: &[usize]) -> Vec<f64> {
        let n = self.ds.n() as f64;
        let inv_m = 1.0 / draws.len() as f64;
        let mut terms = Vec::with_capacity(draws.len());
        let mut weight_sum = 0.0;
        for &i in draws {
            let w = inv_m / (n * self.minibatch_probability(i));
            let delta = self.current_coeff(i) - self.snapshot_coeff(i);
            weight_sum += w;
            terms.push((i, w, delta));
        }
        let mu = core::mem::take(&mut self.state.mu);
        let nu = self.build_direction(&mu, 0.0, weight_sum * self.model.folded_ridge(), &terms);
        self.state.mu = mu;
        nu
    }

    pub fn minibatch_step(&mut self, draws: &[usize], eta: f64) {
        let nu = self.minibatch_direction(draws);
        self.apply(eta, &nu);
    }

    /// `ν = h'(x) + g'(x^s) + (1/M_r) Σ_k (1/(n p_k)) (f_k'(x) − f_k'(x^s))`
    /// where `h` averages the fixed set (scaled by `1/n`) and `g` the rest.
    /// `draws` index the full dataset and must avoid the fixed set.
    pub fn fixed_random_direction(&mut self, draws: &[usize]) -> Vec<f64> {
        let fixed = self.fixed.take().expect("fixed-random variant");
        let n = self.ds.n() as f64;
        let ridge = self.model.folded_ridge();
        let rest_total = fixed.sampler.total();
        let inv_m = 1.0 / draws.len() as f64;
        let mut terms = Vec::with_capacity(draws.len() + fixed.fixed.len());
        let mut weight_sum = 0.0;
        for &i in draws {
            debug_assert!(!fixed.is_fixed[i]);
            let p = self.model.lipschitz()[i] / rest_total;
            let w = inv_m / (n * p);
            let delta = self.current_coeff(i) - self.snapshot_coeff(i);
            weight_sum += w;
            terms.push((i, w, delta));
        }
        for &j in &fixed.fixed {
            let c = self.eval_at(j, false);
            self.state.fixed_set_evals += 1;
            terms.push((j, 1.0 / n, c));
        }
        let x_coef = ridge * fixed.fixed.len() as f64 / n;
        let nu = self.build_direction(&fixed.g_snapshot, x_coef, weight_sum * ridge, &terms);
        self.fixed = Some(fixed);
        nu
    }

    pub fn fixed_random_step(&mut self, draws: &[usize], eta: f64) {
        let nu = self.fixed_random_direction(draws);
        self.apply(eta, &nu);
    }

    /// Examples in the fixed set, ascending.
    pub fn fixed_set(&self) -> Option<&[usize]> {
        self.fixed.as_ref().map(|f| f.fixed.as_slice())
    }

    /// Sampling probability of a non-fixed example within the random part.
    pub fn rest_probability(&self, i: usize) -> Option<f64> {
        let fixed = self.fixed.as_ref()?;
        (!fixed.is_fixed[i]).then(|| self.model.lipschitz()[i] / fixed.sampler.total())
    }

    /// Probability that one inner-step draw picks example `i`.
    pub fn sampling_probability(&self, i: usize) -> f64 {
        self.minibatch_probability(i)
    }

    fn sg_step(&mut self, i: usize) {
        let n = self.ds.n() as f64;
        let eta = self.config.eta / (1.0 + self.sg_steps as f64 / n);
        self.sg_steps += 1;
        let c = self.current_coeff(i);
        let ridge = self.model.folded_ridge();
        if ridge != 0.0 {
            let shrink = eta * ridge;
            self.state.x.iter_mut().for_each(|v| *v -= shrink * *v);
        }
        if c != 0.0 {
            self.ds.example(i).axpy(-eta * c, &mut self.state.x);
        }
    }

    fn fg_step(&mut self) {
        let g = self
            .model
            .full_gradient(self.ds, &self.state.x)
            .expect("dimensions checked at construction");
        self.state.grad_evals += self.ds.n() as u64;
        let eta = self.config.eta;
        self.apply(eta, &g);
    }

    /// Plain steps on the lazily scaled iterate.
    fn run_plain_lazy(&mut self, m: usize, keep_at: Option<usize>) -> Option<Vec<f64>> {
        let eta = self.config.eta;
        let n = self.ds.n();
        let ridge = self.model.folded_ridge();
        let mut lazy = LazyIterate::new(&self.state.x, &self.state.snapshot, &self.state.mu, ridge, eta);
        let mut kept = None;
        for t in 1..=m {
            let i = sampling::sample_uniform(n, &mut self.rng);
            let c_s = self.snapshot_coeff(i);
            let ex = self.ds.example(i);
            let lazy_ref = &lazy;
            let c_t = self.visit(i, |_| lazy_ref.dot(ex));
            lazy.step(ex, c_t - c_s);
            if keep_at == Some(t) {
                let mut x = alloc::vec![0.0; self.ds.dim()];
                lazy.materialize(&mut x);
                kept = Some(x);
            }
        }
        lazy.materialize(&mut self.state.x);
        kept
    }

    fn inner_loop(&mut self, m: usize) -> Vec<f64> {
        let n = self.ds.n();
        let eta = self.config.eta;
        let keep_at = match self.config.snapshot {
            SnapshotOption::RandomIterate => Some(self.rng.random_range(1..=m)),
            _ => None,
        };
        let averaging = self.config.snapshot == SnapshotOption::AverageIterate;
        let lazy = self.config.lazy_ridge && self.config.variant == Variant::Plain && self.model.mode() == Mode::Folded;
        if lazy {
            let kept = self.run_plain_lazy(m, keep_at);
            return kept.unwrap_or_else(|| self.state.x.clone());
        }

        let eta_sg = match self.config.variant {
            Variant::Mixed { sg_scale: Some(c) } => sampling::sg_step_size(eta, n, self.state.batch.len(), c),
            _ => eta,
        };
        let mut kept = None;
        let mut average = if averaging { Some(alloc::vec![0.0; self.ds.dim()]) } else { None };
        let mut draws = Vec::new();
        for t in 1..=m {
            match self.config.variant.clone() {
                Variant::Plain => {
                    let i = sampling::sample_uniform(n, &mut self.rng);
                    self.svrg_step(i, eta);
                }
                Variant::Nus => {
                    let i = self.lipschitz_sampler.as_ref().expect("built").sample(&mut self.rng);
                    self.nus_step(i, eta);
                }
                Variant::Mixed { .. } => {
                    let i = sampling::sample_uniform(n, &mut self.rng);
                    self.mixed_step(i, eta, eta_sg);
                }
                Variant::Regularized => {
                    let i = sampling::sample_uniform(n, &mut self.rng);
                    self.regularized_step(i, eta);
                }
                Variant::Prox(_) => {
                    let i = sampling::sample_uniform(n, &mut self.rng);
                    self.prox_step(i, eta);
                }
                Variant::MiniBatch { size, sampling: how } => {
                    draws.clear();
                    for _ in 0..size {
                        let i = match how {
                            MiniBatchSampling::Uniform => sampling::sample_uniform(n, &mut self.rng),
                            MiniBatchSampling::Lipschitz => {
                                self.lipschitz_sampler.as_ref().expect("built").sample(&mut self.rng)
                            }
                            MiniBatchSampling::Adaptive(_) => {
                                self.adaptive_sampler.as_ref().expect("built").sample(&mut self.rng)
                            }
                        };
                        draws.push(i);
                    }
                    let batch = core::mem::take(&mut draws);
                    self.minibatch_step(&batch, eta);
                    draws = batch;
                }
                Variant::FixedRandom { random, .. } => {
                    draws.clear();
                    {
                        let fixed = self.fixed.as_ref().expect("built");
                        for _ in 0..random {
                            draws.push(fixed.rest[fixed.sampler.sample(&mut self.rng)]);
                        }
                    }
                    let batch = core::mem::take(&mut draws);
                    self.fixed_random_step(&batch, eta);
                    draws = batch;
                }
                Variant::Sg => {
                    let i = sampling::sample_uniform(n, &mut self.rng);
                    self.sg_step(i);
                }
                Variant::Fg => self.fg_step(),
            }
            if keep_at == Some(t) {
                kept = Some(self.state.x.clone());
            }
            if let Some(avg) = average.as_mut() {
                avg.iter_mut().zip(&self.state.x).for_each(|(a, x)| *a += x);
            }
        }
        if let Some(mut avg) = average {
            avg.iter_mut().for_each(|a| *a /= m as f64);
            return avg;
        }
        kept.unwrap_or_else(|| self.state.x.clone())
    }

    /// Snapshot, `m` inner steps, snapshot update, then metrics.
    pub fn run_stage(&mut self) -> StageReport {
        let n = self.ds.n();
        let (batch_size, m) = match self.config.variant {
            Variant::Fg => (n, 1),
            Variant::Sg => (0, self.inner_steps(n)),
            _ => {
                self.take_snapshot();
                let b = self.state.batch.len();
                (b, self.inner_steps(b))
            }
        };
        let next = self.inner_loop(m);
        self.state.x = next;
        if !self.config.variant.has_snapshot() {
            self.state.snapshot.clone_from(&self.state.x);
        }
        let stage = self.state.stage;
        self.state.stage += 1;

        let objective = self.objective(&self.state.x);
        let status = if !objective.is_finite()
            || objective > self.config.divergence_factor * self.initial_objective.abs().max(f64::MIN_POSITIVE)
        {
            RunStatus::Diverged
        } else {
            RunStatus::Ok
        };
        StageReport {
            stage,
            batch_size,
            inner_steps: m,
            grad_evals: self.state.grad_evals,
            fixed_set_evals: self.state.fixed_set_evals,
            objective,
            test_error: self.test.map(|t| losses::test_error(t, &self.state.x)),
            error_norm: self.state.error_norm,
            status,
        }
    }

    /// Runs the configured number of stages, stopping early on divergence.
    pub fn run(mut self) -> RunResult {
        let mut reports = Vec::with_capacity(self.config.stages);
        let mut status = RunStatus::Ok;
        for _ in 0..self.config.stages {
            let report = self.run_stage();
            let diverged = report.status == RunStatus::Diverged;
            reports.push(report);
            if diverged {
                status = RunStatus::Diverged;
                break;
            }
        }
        RunResult {
            status,
            initial_objective: self.initial_objective,
            reports,
            x: self.state.x,
            weight_floor_used: self.weight_floor_used,
        }
    }
}

/// Rate parameters for a model and step size, with `μ = λ`.
pub fn rate_params(model: &LossModel, eta: f64, m: usize) -> analysis::RateParams {
    analysis::RateParams {
        eta,
        m: m as f64,
        mu: model.mu(),
        l: model.l_max(),
        l_bar: model.l_mean(),
        ..analysis::RateParams::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic;
    use alloc::vec;

    /// `f_1 = x²/2`, `f_2 = (x − 2)²/2 + const` while `2x < 1 − ε`.
    fn quadratic_toy() -> (SparseDataset, LossModel) {
        let ds = SparseDataset::new(
            vec![
                crate::data::SparseExample::new(vec![], vec![], 1.0).unwrap(),
                crate::data::SparseExample::new(vec![0], vec![2.0], 1.0).unwrap(),
            ],
            1,
        )
        .unwrap();
        let model = LossModel::new(LossKind::Hsvm { epsilon: 0.5 }, 1.0, Mode::Folded, &ds).unwrap();
        (ds, model)
    }

    #[test]
    fn toy_plain_step() {
        let (ds, model) = quadratic_toy();
        let mut opt = Svrg::new(SvrgConfig::new(0.1, Variant::Plain), &model, &ds).unwrap();
        opt.take_snapshot_with(vec![0, 1]);
        assert_eq!(opt.state.mu, vec![-1.0]);
        assert_eq!(opt.state.grad_evals, 2);
        opt.svrg_step(0, 0.1);
        assert!((opt.state.x[0] - 0.1).abs() < 1e-15);
        assert_eq!(opt.state.grad_evals, 4);
    }

    #[test]
    fn toy_partial_batch_error() {
        let (ds, model) = quadratic_toy();
        let mut cfg = SvrgConfig::new(0.1, Variant::Plain);
        cfg.diagnostic = true;
        let mut opt = Svrg::new(cfg, &model, &ds).unwrap();
        opt.take_snapshot_with(vec![0]);
        assert_eq!(opt.state.mu, vec![0.0]);
        assert_eq!(opt.state.error_norm, Some(1.0));
        assert_eq!(opt.state.grad_evals, 1);
        assert_eq!(opt.state.diagnostic_evals, 2);
        opt.state.x = vec![0.1];
        let mean: f64 = (0..2).map(|i| opt.plain_direction(i)[0]).sum::<f64>() / 2.0;
        // f'(0.1) + e^s = -0.9 + 1
        assert!((mean - 0.1).abs() < 1e-12);
    }

    #[test]
    fn fixed_point_is_stationary() {
        let ds = generate_synthetic(30, 3, 0.0, 2).unwrap();
        let model = LossModel::new(LossKind::Logistic, 0.1, Mode::Folded, &ds).unwrap();
        let star = analysis::reference_solution(&model, &ds, 1e-13, 10_000);
        let mut opt = Svrg::new(SvrgConfig::new(0.5, Variant::Plain), &model, &ds)
            .unwrap()
            .with_initial(&star.x);
        opt.take_snapshot();
        for i in 0..30 {
            opt.svrg_step(i, 0.5);
        }
        for (a, b) in opt.state.x.iter().zip(&star.x) {
            assert!((a - b).abs() < 1e-11);
        }
    }

    #[test]
    fn skip_counters_follow_back_off() {
        let mut sk = SkipCounters::new(1);
        sk.pass[0] = 2;
        assert_eq!(sk.visit(0, || 0.0), (0.0, true));
        assert_eq!((sk.pass[0], sk.skip[0]), (3, 2));
        sk.skip[0] = 3;
        assert_eq!(sk.visit(0, || panic!("must not evaluate")), (0.0, false));
        assert_eq!(sk.skip[0], 2);
        sk.skip[0] = 0;
        assert_eq!(sk.visit(0, || 0.7), (0.7, true));
        assert_eq!(sk.pass[0], 0);
        // first zero already schedules one skip
        let mut fresh = SkipCounters::new(1);
        fresh.visit(0, || 0.0);
        assert_eq!((fresh.pass[0], fresh.skip[0]), (1, 1));
    }

    #[test]
    fn plain_stage_accounting() {
        let ds = generate_synthetic(100, 5, 0.0, 1).unwrap();
        let model = LossModel::new(LossKind::Logistic, 0.01, Mode::Folded, &ds).unwrap();
        let mut cfg = SvrgConfig::new(0.1, Variant::Plain);
        cfg.inner = InnerLength::Fixed(100);
        cfg.stages = 3;
        let before = model.evals().get();
        let result = Svrg::new(cfg, &model, &ds).unwrap().run();
        let evals: Vec<u64> = result.reports.iter().map(|r| r.grad_evals).collect();
        assert_eq!(evals, vec![300, 600, 900]);
        assert_eq!(model.evals().get() - before, 900);
    }

    #[test]
    fn cache_mode_gives_m_plus_n() {
        let ds = generate_synthetic(50, 4, 0.0, 1).unwrap();
        let model = LossModel::new(LossKind::Logistic, 0.01, Mode::Folded, &ds).unwrap();
        let mut cfg = SvrgConfig::new(0.1, Variant::Plain);
        cfg.inner = InnerLength::Fixed(80);
        cfg.stages = 2;
        cfg.cache_snapshot_gradients = true;
        let cached = Svrg::new(cfg.clone(), &model, &ds).unwrap().run();
        assert_eq!(cached.reports[0].grad_evals, 130);
        cfg.cache_snapshot_gradients = false;
        let plain = Svrg::new(cfg, &model, &ds).unwrap().run();
        assert_eq!(cached.x, plain.x);
    }

    #[test]
    fn config_validation() {
        let ds = generate_synthetic(10, 2, 0.0, 1).unwrap();
        let logistic = LossModel::new(LossKind::Logistic, 0.1, Mode::Folded, &ds).unwrap();
        let mut cfg = SvrgConfig::new(0.1, Variant::Plain);
        cfg.sv = SvSkipping::Heuristic;
        assert!(Svrg::new(cfg, &logistic, &ds).is_err());
        assert!(Svrg::new(SvrgConfig::new(0.0, Variant::Plain), &logistic, &ds).is_err());
        assert!(Svrg::new(SvrgConfig::new(0.1, Variant::Regularized), &logistic, &ds).is_err());
        let mut cfg = SvrgConfig::new(0.1, Variant::Plain);
        cfg.snapshot = SnapshotOption::AverageIterate;
        assert!(Svrg::new(cfg, &logistic, &ds).is_err());
        let fr = SvrgConfig::new(0.1, Variant::FixedRandom { fixed: 10, random: 1 });
        assert!(Svrg::new(fr, &logistic, &ds).is_err());
        let fr = SvrgConfig::new(0.1, Variant::FixedRandom { fixed: 9, random: 1 });
        assert!(Svrg::new(fr, &logistic, &ds).is_ok());
    }

    #[test]
    fn divergence_is_reported() {
        let ds = generate_synthetic(40, 5, 0.0, 3).unwrap();
        let model = LossModel::new(LossKind::Logistic, 0.0, Mode::Folded, &ds).unwrap();
        let mut cfg = SvrgConfig::new(1e6, Variant::Fg);
        cfg.stages = 10;
        cfg.divergence_factor = 10.0;
        let result = Svrg::new(cfg, &model, &ds).unwrap().run();
        assert_eq!(result.status, RunStatus::Diverged);
        assert_eq!(result.reports.last().unwrap().status, RunStatus::Diverged);
        assert!(result.reports.len() < 10);
    }
}
