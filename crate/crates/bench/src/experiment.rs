//! Runs every (variant, seed) pair of a spec and collects traces.

use std::path::PathBuf;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use svrg_core::analysis::Rate;
use svrg_core::data::{generate_synthetic, split};
use svrg_core::optimizers::{ConfigError, InnerLength, RunStatus, Svrg, SvrgConfig, Variant};
use svrg_core::sampling::BatchSchedule;
use svrg_core::{DataError, LossError, LossModel, Regularizer, SparseDataset};
use thiserror::Error;

use crate::libsvm::{self, LibsvmError};
use crate::rates::{self, ProblemConstants};
use crate::spec::{DatasetSource, ExperimentSpec, ScheduleKind, SpecError, VariantSpec};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error("dataset: {0}")]
    Libsvm(#[from] LibsvmError),
    #[error("dataset: {0}")]
    Data(#[from] DataError),
    #[error("model: {0}")]
    Loss(#[from] LossError),
    #[error("variant `{variant}`: {source}")]
    Config { variant: String, source: ConfigError },
    #[error("output: {0}")]
    Output(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    /// Process exit code: 1 for usage problems, 2 for data problems.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Spec(_) | HarnessError::Config { .. } | HarnessError::Loss(_) => 1,
            _ => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceStatus {
    Ok,
    Diverged,
    /// The run is healthy but its variant's rate bound does not apply.
    PremiseViolated,
}

impl TraceStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            TraceStatus::Ok => "ok",
            TraceStatus::Diverged => "diverged",
            TraceStatus::PremiseViolated => "premise_violated",
        }
    }
}

/// One row per completed stage of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub variant: String,
    pub seed: u64,
    /// Completed stages, starting at 1.
    pub stage: usize,
    pub grad_evals: u64,
    pub effective_passes: f64,
    pub train_objective: f64,
    pub test_error: Option<f64>,
    pub batch_size: usize,
    pub error_norm: Option<f64>,
    pub wall_time_ms: Option<f64>,
    pub status: TraceStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub variant: String,
    pub seed: u64,
    pub diverged: bool,
    pub eta: f64,
    pub initial_objective: f64,
    pub rate: String,
    pub weight_floor_used: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

impl Stat {
    fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        Some(Stat {
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            mean: values.iter().sum::<f64>() / values.len() as f64,
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

/// Across-seed statistics of one variant at one stage. Diverged runs are
/// excluded from the statistics and counted separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variant: String,
    pub stage: usize,
    pub runs: usize,
    pub diverged: usize,
    pub train_objective: Option<Stat>,
    pub test_error: Option<Stat>,
    pub effective_passes: Option<Stat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub n_train: usize,
    pub n_test: Option<usize>,
    pub dim: usize,
    pub lambda: f64,
    pub l: f64,
    pub l_bar: f64,
    pub mu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub spec: ExperimentSpec,
    pub metadata: Metadata,
    pub runs: Vec<RunSummary>,
    pub records: Vec<TraceRecord>,
    pub summary: Vec<SummaryRow>,
}

impl ExperimentResult {
    pub fn all_diverged(&self) -> bool {
        !self.runs.is_empty() && self.runs.iter().all(|r| r.diverged)
    }
}

/// Preprocessed training and optional test data.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: SparseDataset,
    pub test: Option<SparseDataset>,
}

fn load_source(source: &DatasetSource) -> Result<SparseDataset, HarnessError> {
    Ok(match source {
        DatasetSource::File { path } => libsvm::read_path(path)?,
        DatasetSource::Synthetic { n, d, margin, seed } => generate_synthetic(*n, *d, *margin, *seed)?,
    })
}

fn widen(ds: SparseDataset, dim: usize) -> Result<SparseDataset, HarnessError> {
    if ds.dim() == dim {
        Ok(ds)
    } else {
        Ok(SparseDataset::new(ds.examples().to_vec(), dim)?)
    }
}

pub fn prepare(spec: &ExperimentSpec) -> Result<Prepared, HarnessError> {
    let source = spec
        .dataset
        .as_ref()
        .ok_or_else(|| SpecError::Invalid("no dataset given".into()))?;
    let mut train = load_source(source)?;
    let mut test = match &spec.test {
        Some(path) => Some(libsvm::read_path(path)?),
        None => None,
    };
    if let Some(fraction) = spec.test_fraction {
        if test.is_some() {
            return Err(SpecError::Invalid("give either a test file or a test fraction".into()).into());
        }
        let (tr, te) = split(&train, fraction, spec.split_seed)?;
        train = tr;
        test = Some(te);
    }
    let dim = train.dim().max(test.as_ref().map_or(0, SparseDataset::dim));
    let train = widen(train, dim)?.preprocess(spec.bias, spec.normalize);
    let test = match test {
        Some(t) => Some(widen(t, dim)?.preprocess(spec.bias, spec.normalize)),
        None => None,
    };
    Ok(Prepared { train, test })
}

fn lambda_for(spec: &ExperimentSpec, n: usize) -> f64 {
    spec.lambda.unwrap_or(1.0 / n as f64)
}

/// Model for a variant, in the mode that variant needs.
pub fn model_for(spec: &ExperimentSpec, prepared: &Prepared, variant: &VariantSpec) -> Result<LossModel, HarnessError> {
    let ds = &prepared.train;
    Ok(LossModel::new(
        spec.loss.kind(),
        lambda_for(spec, ds.n()),
        variant.mode(),
        ds,
    )?)
}

/// Fills in dimension-dependent pieces of a parsed variant.
fn concrete_variant(variant: Variant, dim: usize) -> Variant {
    match variant {
        Variant::Prox(Regularizer::Ball2 { radius, center }) if center.is_empty() => Variant::Prox(Regularizer::Ball2 {
            radius,
            center: vec![0.0; dim],
        }),
        other => other,
    }
}

/// Engine configuration for one run, plus the evaluations spent setting it
/// up (the one-time `S²` estimate of the variance schedule).
pub fn svrg_config(
    spec: &ExperimentSpec,
    prepared: &Prepared,
    model: &LossModel,
    variant: &VariantSpec,
    seed: u64,
) -> (SvrgConfig, u64) {
    let ds = &prepared.train;
    let constants = ProblemConstants::of(model, ds);
    let eta = spec.eta.resolve(constants.l);
    let mut cfg = SvrgConfig::new(eta, concrete_variant(variant.variant(), ds.dim()));
    let mut setup = 0;
    cfg.schedule = match spec.schedule {
        ScheduleKind::Full => BatchSchedule::Full,
        ScheduleKind::Grow => BatchSchedule::Doubling {
            initial: spec.grow_initial,
        },
        ScheduleKind::Var => {
            let (s2, gamma) = rates::variance_schedule_at_origin(model, ds, spec.gamma);
            setup = ds.n() as u64;
            BatchSchedule::VarianceBased {
                gamma,
                rho_tilde: spec.rho_tilde,
                s2,
                source: spec.s2_source(),
            }
        }
    };
    cfg.inner = spec.m.map_or(InnerLength::BatchSize, InnerLength::Fixed);
    cfg.snapshot = spec.snapshot;
    cfg.sv = spec.sv;
    cfg.stages = spec.stages;
    cfg.seed = seed;
    cfg.diagnostic = spec.diagnostic;
    (cfg, setup)
}

struct RunOutput {
    summary: RunSummary,
    records: Vec<TraceRecord>,
}

fn run_one(
    spec: &ExperimentSpec,
    prepared: &Prepared,
    variant: &VariantSpec,
    seed: u64,
) -> Result<RunOutput, HarnessError> {
    let ds = &prepared.train;
    let model = model_for(spec, prepared, variant)?;
    let (cfg, setup) = svrg_config(spec, prepared, &model, variant, seed);
    let eta = cfg.eta;
    let m = spec.m.unwrap_or(ds.n());
    let rate = rates::variant_rate(&cfg.variant, &model, ds, eta, m);
    let premise_ok = !matches!(rate, Some(Rate::PremiseViolated(_)));
    let stages = cfg.stages;
    let mut opt = Svrg::new(cfg, &model, ds).map_err(|source| HarnessError::Config {
        variant: variant.name.clone(),
        source,
    })?;
    if let Some(test) = &prepared.test {
        opt = opt.with_test(test);
    }
    opt.charge_external(setup);
    let start = Instant::now();
    let mut records = Vec::with_capacity(stages);
    let mut diverged = false;
    for _ in 0..stages {
        let r = opt.run_stage();
        let status = match r.status {
            RunStatus::Diverged => TraceStatus::Diverged,
            RunStatus::Ok if premise_ok => TraceStatus::Ok,
            RunStatus::Ok => TraceStatus::PremiseViolated,
        };
        records.push(TraceRecord {
            variant: variant.name.clone(),
            seed,
            stage: r.stage + 1,
            grad_evals: r.grad_evals,
            effective_passes: r.grad_evals as f64 / ds.n() as f64,
            train_objective: r.objective,
            test_error: r.test_error,
            batch_size: r.batch_size,
            error_norm: r.error_norm,
            wall_time_ms: spec.wall_time.then(|| start.elapsed().as_secs_f64() * 1e3),
            status,
        });
        if r.status == RunStatus::Diverged {
            diverged = true;
            break;
        }
    }
    Ok(RunOutput {
        summary: RunSummary {
            variant: variant.name.clone(),
            seed,
            diverged,
            eta,
            initial_objective: opt.initial_objective(),
            rate: rates::describe(rate),
            weight_floor_used: opt.weight_floor_used(),
        },
        records,
    })
}

fn summarize(spec: &ExperimentSpec, runs: &[RunOutput]) -> Vec<SummaryRow> {
    let mut rows = Vec::new();
    for variant in &spec.variants {
        let of_variant: Vec<&RunOutput> = runs.iter().filter(|r| r.summary.variant == variant.name).collect();
        let diverged = of_variant.iter().filter(|r| r.summary.diverged).count();
        let healthy: Vec<&RunOutput> = of_variant.iter().copied().filter(|r| !r.summary.diverged).collect();
        for stage in 1..=spec.stages {
            let at: Vec<&TraceRecord> = healthy
                .iter()
                .filter_map(|r| r.records.iter().find(|t| t.stage == stage))
                .collect();
            let pick = |f: fn(&TraceRecord) -> Option<f64>| Stat::of(&at.iter().filter_map(|t| f(t)).collect::<Vec<_>>());
            rows.push(SummaryRow {
                variant: variant.name.clone(),
                stage,
                runs: at.len(),
                diverged,
                train_objective: pick(|t| Some(t.train_objective)),
                test_error: pick(|t| t.test_error),
                effective_passes: pick(|t| Some(t.effective_passes)),
            });
        }
    }
    rows
}

/// Runs all (variant, seed) pairs on a worker pool. Output order follows the
/// spec's variant order, then seed order, then stage.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentResult, HarnessError> {
    spec.validate()?;
    let prepared = prepare(spec)?;
    run_prepared(spec, &prepared)
}

pub fn run_prepared(spec: &ExperimentSpec, prepared: &Prepared) -> Result<ExperimentResult, HarnessError> {
    spec.validate()?;
    let jobs: Vec<(&VariantSpec, u64)> = spec
        .variants
        .iter()
        .flat_map(|v| spec.seeds.iter().map(move |&s| (v, s)))
        .collect();
    let work = || -> Result<Vec<RunOutput>, HarnessError> {
        jobs.par_iter().map(|(v, s)| run_one(spec, prepared, v, *s)).collect()
    };
    let outputs = match spec.threads {
        Some(k) => rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build()
            .map_err(|e| HarnessError::Output(e.to_string()))?
            .install(work)?,
        None => work()?,
    };
    let first = spec.variants.first().expect("validated");
    let model = model_for(spec, prepared, first)?;
    let c = ProblemConstants::of(&model, &prepared.train);
    let metadata = Metadata {
        n_train: prepared.train.n(),
        n_test: prepared.test.as_ref().map(SparseDataset::n),
        dim: prepared.train.dim(),
        lambda: model.lambda(),
        l: c.l,
        l_bar: c.l_bar,
        mu: c.mu,
    };
    let summary = summarize(spec, &outputs);
    let mut runs = Vec::with_capacity(outputs.len());
    let mut records = Vec::new();
    for out in outputs {
        runs.push(out.summary);
        records.extend(out.records);
    }
    Ok(ExperimentResult {
        spec: spec.clone(),
        metadata,
        runs,
        records,
        summary,
    })
}

/// Writes the configured dataset (after splitting, before preprocessing)
/// to libsvm files.
pub fn write_split(
    source: &DatasetSource,
    fraction: f64,
    seed: u64,
    train_out: &PathBuf,
    test_out: &PathBuf,
) -> Result<(usize, usize), HarnessError> {
    let ds = load_source(source)?;
    let (train, test) = split(&ds, fraction, seed)?;
    libsvm::write_path(&train, train_out)?;
    libsvm::write_path(&test, test_out)?;
    Ok((train.n(), test.n()))
}
