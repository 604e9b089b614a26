//! Command line interface. Exit codes: 0 ok, 1 usage, 2 data error,
//! 3 every run diverged.

use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use svrg_core::data::generate_synthetic;

use crate::experiment::{self, HarnessError, Prepared};
use crate::libsvm;
use crate::output;
use crate::rates::{self, ProblemConstants, RatesReport};
use crate::spec::{DatasetSource, ExperimentSpec, SpecError, VariantSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_ALL_DIVERGED: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "svrg", version, about = "SVRG variants: experiments, traces and rate reports")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset as a libsvm file.
    Gen(GenArgs),
    /// Run an experiment and write its trace.
    Run(RunArgs),
    /// Print theoretical rates and the batch schedule for a spec.
    Rates(SpecArgs),
    /// Split a dataset into train and test libsvm files.
    Split(SplitArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub d: usize,
    /// Labels are flipped for points closer than this to the hyperplane;
    /// 0 gives a non-separable problem.
    #[arg(long, default_value_t = 0.0)]
    pub margin: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// Path or `synthetic:N:D:MARGIN:SEED`.
    #[arg(long)]
    pub dataset: String,
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub train_out: PathBuf,
    #[arg(long)]
    pub test_out: PathBuf,
}

/// Spec flags; each overrides the config file.
#[derive(Debug, Args, Default)]
pub struct SpecArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Path or `synthetic:N:D:MARGIN:SEED`.
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long)]
    pub test: Option<String>,
    #[arg(long)]
    pub test_fraction: Option<String>,
    #[arg(long, value_parser = ["logistic", "hsvm"])]
    pub loss: Option<String>,
    #[arg(long)]
    pub epsilon: Option<String>,
    #[arg(long)]
    pub lambda: Option<String>,
    /// Repeatable; replaces the config file's variants.
    #[arg(long)]
    pub variant: Vec<String>,
    #[arg(long, value_parser = ["full", "grow", "var"])]
    pub schedule: Option<String>,
    /// Absolute, or a multiple of 1/L such as `0.1/L`.
    #[arg(long)]
    pub eta: Option<String>,
    #[arg(long)]
    pub m: Option<String>,
    #[arg(long)]
    pub stages: Option<String>,
    /// Comma-separated list.
    #[arg(long)]
    pub seeds: Option<String>,
    #[arg(long, value_parser = ["off", "exact", "heuristic"])]
    pub sv: Option<String>,
    #[arg(long)]
    pub diagnostic: bool,
    #[arg(long)]
    pub threads: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub spec: SpecArgs,
    /// Defaults to standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    /// Record wall time per stage; makes output machine-dependent.
    #[arg(long)]
    pub wall_time: bool,
}

impl SpecArgs {
    /// Config file first, then flags on top.
    pub fn build(&self) -> Result<ExperimentSpec, HarnessError> {
        let mut spec = ExperimentSpec::default();
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path)
                .map_err(|e| SpecError::Invalid(format!("cannot read config {}: {e}", path.display())))?;
            spec.apply_config(&text)?;
        }
        let pairs = [
            ("dataset", &self.dataset),
            ("test", &self.test),
            ("test_fraction", &self.test_fraction),
            ("loss", &self.loss),
            ("epsilon", &self.epsilon),
            ("lambda", &self.lambda),
            ("schedule", &self.schedule),
            ("eta", &self.eta),
            ("m", &self.m),
            ("stages", &self.stages),
            ("seeds", &self.seeds),
            ("sv", &self.sv),
            ("threads", &self.threads),
        ];
        for (key, value) in pairs {
            if let Some(v) = value {
                spec.set(key, v)?;
            }
        }
        if !self.variant.is_empty() {
            spec.variants.clear();
            for v in &self.variant {
                spec.set("variant", v)?;
            }
        }
        if self.diagnostic {
            spec.diagnostic = true;
        }
        Ok(spec)
    }
}

fn write_to(out: &Option<PathBuf>, text: &str) -> Result<(), HarnessError> {
    match out {
        Some(path) => fs::write(path, text)?,
        None => io::stdout().lock().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn cmd_gen(a: &GenArgs) -> Result<i32, HarnessError> {
    let ds = generate_synthetic(a.n, a.d, a.margin, a.seed)?;
    libsvm::write_path(&ds, &a.out)?;
    Ok(EXIT_OK)
}

fn cmd_split(a: &SplitArgs) -> Result<i32, HarnessError> {
    let source: DatasetSource = a.dataset.parse().map_err(|e: String| SpecError::Value {
        key: "dataset".into(),
        message: e,
    })?;
    let (n_train, n_test) = experiment::write_split(&source, a.test_fraction, a.seed, &a.train_out, &a.test_out)?;
    eprintln!("train: {n_train} examples, test: {n_test} examples");
    Ok(EXIT_OK)
}

fn cmd_run(a: &RunArgs) -> Result<i32, HarnessError> {
    let mut spec = a.spec.build()?;
    spec.wall_time |= a.wall_time;
    let result = experiment::run_experiment(&spec)?;
    let text = match a.format {
        Format::Csv => output::csv_string(&result.records)?,
        Format::Json => output::json_string(&result)?,
    };
    write_to(&a.out, &text)?;
    let diverged = result.runs.iter().filter(|r| r.diverged).count();
    if diverged > 0 {
        eprintln!("{diverged} of {} runs diverged", result.runs.len());
    }
    Ok(if result.all_diverged() { EXIT_ALL_DIVERGED } else { EXIT_OK })
}

/// Variants always listed by `rates`, after the spec's own.
const STANDARD_VARIANTS: [&str; 5] = ["svrg", "nus", "regularized", "prox", "lipschitz-plus:1:4"];

pub fn rates_report(spec: &ExperimentSpec) -> Result<RatesReport, HarnessError> {
    let prepared: Prepared = experiment::prepare(spec)?;
    let ds = &prepared.train;
    let mut variants: Vec<VariantSpec> = spec.variants.clone();
    for name in STANDARD_VARIANTS {
        if !variants.iter().any(|v| v.name == name) {
            variants.push(name.parse().expect("standard variant names parse"));
        }
    }
    let plain: VariantSpec = "svrg".parse().expect("standard variant names parse");
    let model = experiment::model_for(spec, &prepared, &plain)?;
    let constants = ProblemConstants::of(&model, ds);
    let eta = spec.eta.resolve(constants.l);
    let m = spec.m.unwrap_or(ds.n());
    let mut rows = Vec::new();
    for v in &variants {
        let vm = experiment::model_for(spec, &prepared, v)?;
        rows.push((v.name.clone(), rates::variant_rate(&v.variant(), &vm, ds, eta, m)));
    }
    let (cfg, _) = experiment::svrg_config(spec, &prepared, &model, &plain, 0);
    Ok(RatesReport::new(constants, eta, m, rows, cfg.schedule))
}

fn cmd_rates(a: &SpecArgs) -> Result<i32, HarnessError> {
    let spec = a.build()?;
    let report = rates_report(&spec)?;
    print!("{report}");
    Ok(EXIT_OK)
}

/// Parses `args` (program name first) and runs the command; returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Run(a) => cmd_run(a),
        Command::Rates(a) => cmd_rates(a),
        Command::Split(a) => cmd_split(a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
