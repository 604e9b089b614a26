//! Experiment specification: a flat `key = value` file plus flag overrides.
//!
//! ```text
//! # comments start with '#'
//! dataset = synthetic:1000:20:0:1
//! loss = hsvm
//! epsilon = 0.5
//! variant = svrg, mixed, lipschitz:4
//! schedule = grow
//! eta = 1/L
//! seeds = 1,2,3
//! ```

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use svrg_core::optimizers::{MiniBatchSampling, SnapshotOption, SvSkipping, Variant};
use svrg_core::sampling::{AdaptiveMode, S2Source};
use svrg_core::{LossKind, Mode, Regularizer};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SpecError {
    #[error("config line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("invalid value for `{key}`: {message}")]
    Value { key: String, message: String },
    #[error("{0}")]
    Invalid(String),
}

fn bad(key: &str, message: impl Into<String>) -> SpecError {
    SpecError::Value {
        key: key.to_string(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    File { path: PathBuf },
    Synthetic { n: usize, d: usize, margin: f64, seed: u64 },
}

impl FromStr for DatasetSource {
    type Err = String;

    /// A path, or `synthetic:N:D:MARGIN:SEED`.
    fn from_str(s: &str) -> Result<Self, String> {
        match s.strip_prefix("synthetic:") {
            Some(rest) => {
                let parts: Vec<&str> = rest.split(':').collect();
                if parts.len() != 4 {
                    return Err("expected synthetic:N:D:MARGIN:SEED".into());
                }
                let num = |k: usize| parts[k].parse::<f64>().map_err(|_| format!("`{}` is not a number", parts[k]));
                let int = |k: usize| parts[k].parse::<u64>().map_err(|_| format!("`{}` is not an integer", parts[k]));
                Ok(DatasetSource::Synthetic {
                    n: int(0)? as usize,
                    d: int(1)? as usize,
                    margin: num(2)?,
                    seed: int(3)?,
                })
            }
            None if s.is_empty() => Err("empty path".into()),
            None => Ok(DatasetSource::File { path: s.into() }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossSpec {
    Logistic,
    Hsvm { epsilon: f64 },
}

impl LossSpec {
    pub fn kind(self) -> LossKind {
        match self {
            LossSpec::Logistic => LossKind::Logistic,
            LossSpec::Hsvm { epsilon } => LossKind::Hsvm { epsilon },
        }
    }
}

/// A named inner-step rule. The name is what appears in trace files and is
/// the serialized form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct VariantSpec {
    pub name: String,
    variant: Variant,
}

impl VariantSpec {
    pub fn variant(&self) -> Variant {
        self.variant.clone()
    }

    pub fn mode(&self) -> Mode {
        match self.variant {
            Variant::Regularized | Variant::Prox(_) => Mode::Composite,
            _ => Mode::Folded,
        }
    }
}

impl FromStr for VariantSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let s = s.trim();
        Ok(VariantSpec {
            variant: parse_variant(s)?,
            name: s.to_string(),
        })
    }
}

impl TryFrom<String> for VariantSpec {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<VariantSpec> for String {
    fn from(v: VariantSpec) -> String {
        v.name
    }
}

fn parse_variant(name: &str) -> Result<Variant, String> {
    let mut parts = name.split(':');
    let head = parts.next().unwrap_or_default();
    let args: Vec<&str> = parts.collect();
    let count = |k: usize| -> Result<usize, String> {
        args.get(k)
            .ok_or_else(|| format!("variant `{name}` needs {} argument(s)", k + 1))?
            .parse()
            .map_err(|_| format!("variant `{name}`: `{}` is not a count", args[k]))
    };
    let real = |k: usize| -> Result<f64, String> {
        args.get(k)
            .ok_or_else(|| format!("variant `{name}` needs {} argument(s)", k + 1))?
            .parse()
            .map_err(|_| format!("variant `{name}`: `{}` is not a number", args[k]))
    };
    let arity = |expected: usize| {
        if args.len() == expected {
            Ok(())
        } else {
            Err(format!("variant `{name}` takes {expected} argument(s)"))
        }
    };
    let minibatch = |sampling| -> Result<Variant, String> {
        arity(1)?;
        Ok(Variant::MiniBatch { size: count(0)?, sampling })
    };
    match head {
        "svrg" => arity(0).map(|_| Variant::Plain),
        "nus" => arity(0).map(|_| Variant::Nus),
        "mixed" if args.is_empty() => Ok(Variant::Mixed { sg_scale: None }),
        "mixed" => arity(1).and_then(|_| Ok(Variant::Mixed { sg_scale: Some(real(0)?) })),
        "regularized" => arity(0).map(|_| Variant::Regularized),
        "prox" => arity(0).map(|_| Variant::Prox(Regularizer::None)),
        "prox-l1" => arity(1).and_then(|_| Ok(Variant::Prox(Regularizer::L1 { lambda: real(0)? }))),
        "prox-ball" => arity(1).and_then(|_| {
            Ok(Variant::Prox(Regularizer::Ball2 {
                radius: real(0)?,
                center: Vec::new(),
            }))
        }),
        "minibatch" => minibatch(MiniBatchSampling::Uniform),
        "lipschitz" => minibatch(MiniBatchSampling::Lipschitz),
        "function" => minibatch(MiniBatchSampling::Adaptive(AdaptiveMode::FunctionValue)),
        "gradient" => minibatch(MiniBatchSampling::Adaptive(AdaptiveMode::GradNorm)),
        "lipschitz-plus" => arity(2).and_then(|_| {
            Ok(Variant::FixedRandom {
                fixed: count(0)?,
                random: count(1)?,
            })
        }),
        "sg" => arity(0).map(|_| Variant::Sg),
        "fg" => arity(0).map(|_| Variant::Fg),
        _ => Err(format!("unknown variant `{name}`")),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// Every snapshot uses all examples.
    Full,
    /// `|B^s| = grow_initial · 2^s`
    Grow,
    /// Variance-based schedule.
    Var,
}

impl FromStr for ScheduleKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "full" => Ok(ScheduleKind::Full),
            "grow" => Ok(ScheduleKind::Grow),
            "var" => Ok(ScheduleKind::Var),
            _ => Err(format!("unknown schedule `{s}` (full, grow, var)")),
        }
    }
}

/// Step size, absolute or as a multiple of `1/L`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum StepSpec {
    Absolute(f64),
    OverL(f64),
}

impl StepSpec {
    pub fn resolve(self, l: f64) -> f64 {
        match self {
            StepSpec::Absolute(eta) => eta,
            StepSpec::OverL(c) => c / l,
        }
    }
}

impl FromStr for StepSpec {
    type Err = String;

    /// `0.01`, `1/L` or `0.1/L`.
    fn from_str(s: &str) -> Result<Self, String> {
        let s = s.trim();
        let parsed = match s.strip_suffix("/L") {
            Some(c) => c.parse().map(StepSpec::OverL),
            None => s.parse().map(StepSpec::Absolute),
        };
        match parsed {
            Ok(StepSpec::Absolute(v) | StepSpec::OverL(v)) if v > 0.0 && v.is_finite() => Ok(parsed.unwrap()),
            _ => Err(format!("`{s}` is not a positive step size")),
        }
    }
}

impl fmt::Display for StepSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StepSpec::Absolute(v) => write!(f, "{v}"),
            StepSpec::OverL(c) => write!(f, "{c}/L"),
        }
    }
}

fn parse_sv(s: &str) -> Result<SvSkipping, String> {
    match s {
        "off" => Ok(SvSkipping::Off),
        "exact" => Ok(SvSkipping::ExactListOnly),
        "heuristic" => Ok(SvSkipping::Heuristic),
        _ => Err(format!("unknown sv mode `{s}` (off, exact, heuristic)")),
    }
}

fn sv_name(sv: SvSkipping) -> &'static str {
    match sv {
        SvSkipping::Off => "off",
        SvSkipping::ExactListOnly => "exact",
        SvSkipping::Heuristic => "heuristic",
    }
}

fn parse_snapshot(s: &str) -> Result<SnapshotOption, String> {
    match s {
        "last" => Ok(SnapshotOption::LastIterate),
        "random" => Ok(SnapshotOption::RandomIterate),
        "average" => Ok(SnapshotOption::AverageIterate),
        _ => Err(format!("unknown snapshot option `{s}` (last, random, average)")),
    }
}

fn snapshot_name(s: SnapshotOption) -> &'static str {
    match s {
        SnapshotOption::LastIterate => "last",
        SnapshotOption::RandomIterate => "random",
        SnapshotOption::AverageIterate => "average",
    }
}

mod sv_serde {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &SvSkipping, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(sv_name(*v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<SvSkipping, D::Error> {
        let s = String::deserialize(d)?;
        parse_sv(&s).map_err(serde::de::Error::custom)
    }
}

mod snapshot_serde {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &SnapshotOption, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(snapshot_name(*v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<SnapshotOption, D::Error> {
        let s = String::deserialize(d)?;
        parse_snapshot(&s).map_err(serde::de::Error::custom)
    }
}

/// Everything needed to reproduce an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub dataset: Option<DatasetSource>,
    /// Held-out set for test error; otherwise `test_fraction` splits the
    /// training data.
    pub test: Option<PathBuf>,
    pub test_fraction: Option<f64>,
    pub split_seed: u64,
    pub bias: bool,
    pub normalize: bool,
    pub loss: LossSpec,
    /// Defaults to `1/n`.
    pub lambda: Option<f64>,
    pub variants: Vec<VariantSpec>,
    pub schedule: ScheduleKind,
    pub grow_initial: usize,
    /// Defaults to `f(x⁰)`.
    pub gamma: Option<f64>,
    pub rho_tilde: f64,
    pub s2_per_stage: bool,
    pub eta: StepSpec,
    /// Defaults to `|B^s|`.
    pub m: Option<usize>,
    pub stages: usize,
    pub seeds: Vec<u64>,
    #[serde(with = "sv_serde")]
    pub sv: SvSkipping,
    #[serde(with = "snapshot_serde")]
    pub snapshot: SnapshotOption,
    pub diagnostic: bool,
    pub wall_time: bool,
    pub threads: Option<usize>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            dataset: None,
            test: None,
            test_fraction: None,
            split_seed: 0,
            bias: true,
            normalize: true,
            loss: LossSpec::Logistic,
            lambda: None,
            variants: Vec::new(),
            schedule: ScheduleKind::Full,
            grow_initial: 1,
            gamma: None,
            rho_tilde: svrg_core::sampling::DEFAULT_RHO_TILDE,
            s2_per_stage: false,
            eta: StepSpec::OverL(1.0),
            m: None,
            stages: svrg_core::optimizers::DEFAULT_STAGES,
            seeds: vec![1],
            sv: SvSkipping::Off,
            snapshot: SnapshotOption::LastIterate,
            diagnostic: false,
            wall_time: false,
            threads: None,
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool, SpecError> {
    match v {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(bad(key, format!("`{v}` is not a boolean"))),
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T, SpecError> {
    v.parse().map_err(|_| bad(key, format!("`{v}` is not a valid number")))
}

pub fn parse_seeds(v: &str) -> Result<Vec<u64>, String> {
    v.split(',')
        .map(|s| s.trim().parse().map_err(|_| format!("`{}` is not a seed", s.trim())))
        .collect()
}

impl ExperimentSpec {
    /// Applies one `key = value` setting. `variant` appends.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), SpecError> {
        let v = value.trim();
        match key {
            "dataset" => self.dataset = Some(v.parse().map_err(|e| bad(key, e))?),
            "test" => self.test = Some(v.into()),
            "test_fraction" => self.test_fraction = Some(parse_num(key, v)?),
            "split_seed" => self.split_seed = parse_num(key, v)?,
            "bias" => self.bias = parse_bool(key, v)?,
            "normalize" => self.normalize = parse_bool(key, v)?,
            "loss" => {
                self.loss = match v {
                    "logistic" => LossSpec::Logistic,
                    "hsvm" => LossSpec::Hsvm {
                        epsilon: match self.loss {
                            LossSpec::Hsvm { epsilon } => epsilon,
                            LossSpec::Logistic => 0.5,
                        },
                    },
                    _ => return Err(bad(key, format!("unknown loss `{v}` (logistic, hsvm)"))),
                }
            }
            "epsilon" => {
                let epsilon = parse_num(key, v)?;
                self.loss = LossSpec::Hsvm { epsilon };
            }
            "lambda" => self.lambda = Some(parse_num(key, v)?),
            "variant" | "variants" => {
                for name in v.split(',').filter(|s| !s.trim().is_empty()) {
                    self.variants.push(name.parse().map_err(|e| bad(key, e))?);
                }
            }
            "schedule" => self.schedule = v.parse().map_err(|e| bad(key, e))?,
            "grow_initial" => self.grow_initial = parse_num(key, v)?,
            "gamma" => self.gamma = Some(parse_num(key, v)?),
            "rho_tilde" => self.rho_tilde = parse_num(key, v)?,
            "s2" => {
                self.s2_per_stage = match v {
                    "initial" => false,
                    "per_stage" => true,
                    _ => return Err(bad(key, "expected `initial` or `per_stage`")),
                }
            }
            "eta" => self.eta = v.parse().map_err(|e| bad(key, e))?,
            "m" => self.m = Some(parse_num(key, v)?),
            "stages" => self.stages = parse_num(key, v)?,
            "seeds" => self.seeds = parse_seeds(v).map_err(|e| bad(key, e))?,
            "sv" => self.sv = parse_sv(v).map_err(|e| bad(key, e))?,
            "snapshot" => self.snapshot = parse_snapshot(v).map_err(|e| bad(key, e))?,
            "diagnostic" => self.diagnostic = parse_bool(key, v)?,
            "wall_time" => self.wall_time = parse_bool(key, v)?,
            "threads" => self.threads = Some(parse_num(key, v)?),
            _ => return Err(SpecError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Parses a config file body on top of `self`.
    pub fn apply_config(&mut self, text: &str) -> Result<(), SpecError> {
        for (k, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| SpecError::Syntax {
                line: k + 1,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            self.set(key.trim(), value).map_err(|e| match e {
                SpecError::Syntax { .. } => e,
                other => SpecError::Syntax {
                    line: k + 1,
                    message: other.to_string(),
                },
            })?;
        }
        Ok(())
    }

    pub fn from_config(text: &str) -> Result<Self, SpecError> {
        let mut spec = Self::default();
        spec.apply_config(text)?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), SpecError> {
        if self.dataset.is_none() {
            return Err(SpecError::Invalid("no dataset given".into()));
        }
        if self.variants.is_empty() {
            return Err(SpecError::Invalid("at least one variant is required".into()));
        }
        if self.seeds.is_empty() {
            return Err(SpecError::Invalid("at least one seed is required".into()));
        }
        if self.stages == 0 {
            return Err(bad("stages", "must be at least 1"));
        }
        if self.m == Some(0) {
            return Err(bad("m", "must be at least 1"));
        }
        if let Some(l) = self.lambda {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(bad("lambda", "must be finite and nonnegative"));
            }
        }
        if let LossSpec::Hsvm { epsilon } = self.loss {
            if !(epsilon > 0.0 && epsilon < 1.0) {
                return Err(bad("epsilon", "must lie in (0, 1)"));
            }
        }
        if let Some(f) = self.test_fraction {
            if !(f > 0.0 && f < 1.0) {
                return Err(bad("test_fraction", "must lie in (0, 1)"));
            }
        }
        if !(self.rho_tilde > 0.0 && self.rho_tilde < 1.0) {
            return Err(bad("rho_tilde", "must lie in (0, 1)"));
        }
        if self.grow_initial == 0 {
            return Err(bad("grow_initial", "must be at least 1"));
        }
        Ok(())
    }

    /// `S²` source for the variance schedule.
    pub fn s2_source(&self) -> S2Source {
        if self.s2_per_stage {
            S2Source::PerStage
        } else {
            S2Source::Initial
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names() {
        let ok = [
            ("svrg", Variant::Plain),
            ("nus", Variant::Nus),
            ("mixed", Variant::Mixed { sg_scale: None }),
            ("mixed:0.5", Variant::Mixed { sg_scale: Some(0.5) }),
            ("regularized", Variant::Regularized),
            ("prox-l1:0.01", Variant::Prox(Regularizer::L1 { lambda: 0.01 })),
            (
                "lipschitz:4",
                Variant::MiniBatch {
                    size: 4,
                    sampling: MiniBatchSampling::Lipschitz,
                },
            ),
            ("lipschitz-plus:2:3", Variant::FixedRandom { fixed: 2, random: 3 }),
            ("sg", Variant::Sg),
            ("fg", Variant::Fg),
        ];
        for (name, want) in ok {
            assert_eq!(name.parse::<VariantSpec>().unwrap().variant(), want, "{name}");
        }
        for name in ["svrg:1", "lipschitz", "lipschitz:x", "prox-l1", "nope", "lipschitz-plus:1"] {
            assert!(name.parse::<VariantSpec>().is_err(), "{name}");
        }
    }

    #[test]
    fn step_sizes() {
        assert_eq!("0.1/L".parse::<StepSpec>().unwrap(), StepSpec::OverL(0.1));
        assert_eq!("1/L".parse::<StepSpec>().unwrap().resolve(4.0), 0.25);
        assert_eq!("0.5".parse::<StepSpec>().unwrap(), StepSpec::Absolute(0.5));
        assert!("-1".parse::<StepSpec>().is_err());
        assert!("0/L".parse::<StepSpec>().is_err());
    }

    #[test]
    fn config_file_round() {
        let text = "# demo\ndataset = synthetic:100:5:0:3\nloss = hsvm\nepsilon = 0.2\nvariant = svrg, nus\nvariant = sg\nseeds = 1, 2\neta = 0.1/L\nsv = exact\n";
        let spec = ExperimentSpec::from_config(text).unwrap();
        assert_eq!(spec.loss, LossSpec::Hsvm { epsilon: 0.2 });
        assert_eq!(spec.variants.len(), 3);
        assert_eq!(spec.seeds, vec![1, 2]);
        assert_eq!(spec.sv, SvSkipping::ExactListOnly);
        assert_eq!(
            spec.dataset,
            Some(DatasetSource::Synthetic {
                n: 100,
                d: 5,
                margin: 0.0,
                seed: 3
            })
        );
        spec.validate().unwrap();
    }

    #[test]
    fn config_errors_name_the_line() {
        assert_eq!(
            ExperimentSpec::from_config("stages = 3\nbogus\n"),
            Err(SpecError::Syntax {
                line: 2,
                message: "expected `key = value`, got `bogus`".into()
            })
        );
        assert!(matches!(
            ExperimentSpec::from_config("colour = red\n"),
            Err(SpecError::Syntax { line: 1, .. })
        ));
    }

    #[test]
    fn validation() {
        let mut spec = ExperimentSpec::default();
        assert!(spec.validate().is_err());
        spec.set("dataset", "x.svm").unwrap();
        assert!(spec.validate().is_err());
        spec.set("variant", "svrg").unwrap();
        spec.validate().unwrap();
        spec.seeds.clear();
        assert!(spec.validate().is_err());
    }
}
