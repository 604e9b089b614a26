use std::fs;
use std::path::Path;
use std::process::Command;

use svrg_bench::cli::{self, SpecArgs, EXIT_DATA, EXIT_OK, EXIT_USAGE};
use svrg_bench::experiment::{self, TraceStatus};
use svrg_bench::libsvm;
use svrg_bench::output;
use svrg_bench::spec::ExperimentSpec;
use svrg_core::analysis::Rate;
use svrg_core::data::generate_synthetic;

fn svrg(args: &[&str]) -> i32 {
    cli::run(std::iter::once("svrg").chain(args.iter().copied()))
}

fn spec(pairs: &[(&str, &str)]) -> ExperimentSpec {
    let mut s = ExperimentSpec::default();
    for (k, v) in pairs {
        s.set(k, v).unwrap();
    }
    s
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn one_row_per_stage_and_seed() {
    let s = spec(&[
        ("dataset", "synthetic:400:5:0:2"),
        ("lambda", "0.1"),
        ("eta", "0.1/L"),
        ("variant", "svrg"),
        ("stages", "5"),
        ("seeds", "1,2"),
    ]);
    let r = experiment::run_experiment(&s).unwrap();
    assert_eq!(r.records.len(), 10);
    assert_eq!(r.summary.len(), 5);
    assert_eq!(r.runs.len(), 2);
    for (k, rec) in r.records.iter().enumerate() {
        assert_eq!(rec.seed, [1, 2][k / 5]);
        assert_eq!(rec.stage, k % 5 + 1);
        assert_eq!(rec.status, TraceStatus::Ok);
        assert!(rec.wall_time_ms.is_none());
    }
    for row in &r.summary {
        assert_eq!(row.runs, 2);
        let obj = row.train_objective.as_ref().unwrap();
        assert!(obj.min <= obj.mean && obj.mean <= obj.max);
    }
    let evals: Vec<u64> = r.records[..5].iter().map(|x| x.grad_evals).collect();
    assert!(evals.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn json_round_trip_reproduces_csv() {
    let s = spec(&[
        ("dataset", "synthetic:60:4:0:3"),
        ("test_fraction", "0.25"),
        ("variant", "svrg,nus"),
        ("schedule", "var"),
        ("stages", "4"),
        ("seeds", "5,6"),
    ]);
    let r = experiment::run_experiment(&s).unwrap();
    assert!(r.records.iter().all(|x| x.test_error.is_some()));
    let back = output::read_json(&output::json_string(&r).unwrap()).unwrap();
    assert_eq!(back.spec, r.spec);
    assert!(output::json_string(&r).unwrap().contains("\"variants\": [\n      \"svrg\",\n      \"nus\"\n    ]"));
    assert_eq!(back.records.len(), r.records.len());
    assert_eq!(output::csv_string(&back.records).unwrap(), output::csv_string(&r.records).unwrap());
}

#[test]
fn flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("exp.cfg");
    fs::write(
        &config,
        "# comment\ndataset = synthetic:50:3:0:1\nvariant = svrg, nus\nstages = 7\nlambda = 0.5\neta = 0.2/L\n",
    )
    .unwrap();
    let args = SpecArgs {
        config: Some(config),
        variant: vec!["prox".into()],
        stages: Some("3".into()),
        ..SpecArgs::default()
    };
    let s = args.build().unwrap();
    assert_eq!(s.stages, 3);
    assert_eq!(s.lambda, Some(0.5));
    assert_eq!(s.variants.len(), 1);
    assert_eq!(s.variants[0].name, "prox");
    assert_eq!(s.eta.resolve(2.0), 0.1);
}

#[test]
fn bad_config_line_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.cfg");
    fs::write(&config, "dataset = synthetic:50:3:0:1\nnot a setting\n").unwrap();
    let code = svrg(&["run", "--config", path_str(&config), "--variant", "svrg"]);
    assert_eq!(code, EXIT_USAGE);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t.csv");
    assert_eq!(svrg(&["run", "--bogus"]), EXIT_USAGE);
    assert_eq!(svrg(&["--help"]), EXIT_OK);
    assert_eq!(svrg(&["run", "--dataset", "synthetic:30:3:0:1", "--variant", "nope"]), EXIT_USAGE);
    assert_eq!(svrg(&["run", "--dataset", "synthetic:30:3:0:1", "--variant", "svrg", "--epsilon", "2"]), EXIT_USAGE);
    let missing = dir.path().join("missing.svm");
    assert_eq!(
        svrg(&["run", "--dataset", path_str(&missing), "--variant", "svrg", "--out", path_str(&out)]),
        EXIT_DATA
    );
    let garbage = dir.path().join("garbage.svm");
    fs::write(&garbage, "+1 1:0.5\nbanana 2:1\n").unwrap();
    assert_eq!(svrg(&["run", "--dataset", path_str(&garbage), "--variant", "svrg"]), EXIT_DATA);
    assert!(!out.exists());
}

#[test]
fn gen_split_run_from_files() {
    let dir = tempfile::tempdir().unwrap();
    let all = dir.path().join("all.svm");
    let train = dir.path().join("train.svm");
    let test = dir.path().join("test.svm");
    let out = dir.path().join("trace.csv");
    let n = "120";
    assert_eq!(svrg(&["gen", "--n", n, "--d", "6", "--seed", "4", "--out", path_str(&all)]), EXIT_OK);
    assert_eq!(
        svrg(&[
            "split",
            "--dataset",
            path_str(&all),
            "--test-fraction",
            "0.25",
            "--train-out",
            path_str(&train),
            "--test-out",
            path_str(&test),
        ]),
        EXIT_OK
    );
    let n_train = libsvm::read_path(&train).unwrap().n();
    let n_test = libsvm::read_path(&test).unwrap().n();
    assert_eq!(n_train + n_test, 120);
    assert_eq!(n_test, 30);
    assert_eq!(
        svrg(&[
            "run",
            "--dataset",
            path_str(&train),
            "--test",
            path_str(&test),
            "--variant",
            "svrg",
            "--stages",
            "3",
            "--lambda",
            "0.1",
            "--eta",
            "0.1/L",
            "--m",
            "400",
            "--out",
            path_str(&out),
        ]),
        EXIT_OK
    );
    let text = fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), output::CSV_HEADER.join(","));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.ends_with(",ok") && !r.contains(",,,,")));
}

#[test]
fn libsvm_round_trip() {
    let ds = generate_synthetic(40, 7, 0.2, 9).unwrap();
    let mut buf = Vec::new();
    libsvm::write(&ds, &mut buf).unwrap();
    let back = libsvm::read(buf.as_slice()).unwrap();
    assert_eq!(back.n(), ds.n());
    assert!(back.dim() <= ds.dim());
    for i in 0..ds.n() {
        let (a, b) = (back.example(i), ds.example(i));
        assert_eq!(a.label(), b.label());
        assert_eq!(a.indices(), b.indices());
        assert_eq!(a.values(), b.values());
    }
}

#[test]
fn rates_report_flags_large_steps() {
    let base = [("dataset", "synthetic:500:20:0:1"), ("lambda", "0.1")];
    let r = cli::rates_report(&spec(&base)).unwrap();
    let plain = r.rows.iter().find(|(name, _)| name == "svrg").unwrap().1;
    assert!(matches!(plain, Some(Rate::PremiseViolated(_))));

    let mut small = base.to_vec();
    small.push(("eta", "0.1/L"));
    let r = cli::rates_report(&spec(&small)).unwrap();
    for (name, rate) in &r.rows {
        let v = rate.and_then(|x| x.value()).unwrap_or_else(|| panic!("{name} has no rate"));
        assert!(v > 0.0 && v < 1.0, "{name}: {v}");
    }
    assert!(format!("{r}").contains("batch sizes: 500\n"));
}

#[test]
fn rates_preview_of_doubling_schedule() {
    let s = spec(&[("dataset", "synthetic:100:4:0:1"), ("schedule", "grow")]);
    let r = cli::rates_report(&s).unwrap();
    assert_eq!(r.preview, vec![1, 2, 4, 8, 16, 32, 64, 100]);
    assert!(r.inflection.is_none());

    let s = spec(&[("dataset", "synthetic:100:4:0:1"), ("schedule", "var")]);
    let r = cli::rates_report(&s).unwrap();
    assert!(r.preview.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(*r.preview.last().unwrap(), 100);
    assert!(r.inflection.is_some());
}

#[test]
fn binary_writes_csv_to_stdout() {
    let out = Command::new(env!("CARGO_BIN_EXE_svrg"))
        .args(["run", "--dataset", "synthetic:40:3:0:1", "--variant", "svrg", "--stages", "2"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(EXIT_OK));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 3);
}
