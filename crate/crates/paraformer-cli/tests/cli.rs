//! Contract tests for the command-line surface: exit codes, artifact
//! layout, table output, and environment-variable resolution. Every run
//! uses the tiny two-clique dataset so the whole file stays fast.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn exe() -> &'static str {
    env!("CARGO_BIN_EXE_paraformer")
}

struct Run {
    out: Output,
}

impl Run {
    fn stdout(&self) -> String {
        String::from_utf8_lossy(&self.out.stdout).into_owned()
    }

    fn stderr(&self) -> String {
        String::from_utf8_lossy(&self.out.stderr).into_owned()
    }

    fn code(&self) -> i32 {
        self.out.status.code().expect("process exited")
    }

    fn expect_success(self, what: &str) -> Self {
        assert_eq!(
            self.code(),
            0,
            "{what} exited {} with stderr: {}",
            self.code(),
            self.stderr()
        );
        self
    }
}

fn run(args: &[&str]) -> Run {
    run_with(args, &[])
}

fn run_with(args: &[&str], envs: &[(&str, &Path)]) -> Run {
    let mut cmd = Command::new(exe());
    cmd.args(args);
    for (k, v) in envs {
        cmd.env(k, v);
    }
    Run {
        out: cmd.output().expect("binary launches"),
    }
}

/// Generates the toy dataset once per temp dir and returns its path.
fn toy_data(tmp: &Path) -> PathBuf {
    let data = tmp.join("toyset");
    run(&[
        "--out",
        data.to_str().unwrap(),
        "--seed",
        "3",
        "prepare",
        "--generate",
        "toy",
    ])
    .expect_success("prepare --generate toy");
    data
}

fn write_quick_config(tmp: &Path) -> PathBuf {
    let path = tmp.join("quick.json");
    std::fs::write(
        &path,
        r#"{
  "model": { "k": 3, "beta": 0.5, "d_hidden": 8, "dropout_rate": 0.0, "attention_mode": "scalable" },
  "train": { "lr": 0.05, "max_epochs": 40, "patience": 40, "seed": 0 }
}"#,
    )
    .unwrap();
    path
}

// ---------------------------------------------------------------------------
// train / eval
// ---------------------------------------------------------------------------

#[test]
fn train_writes_reports_checkpoint_and_prints_accuracy() {
    let tmp = tempfile::tempdir().unwrap();
    let data = toy_data(tmp.path());
    let config = write_quick_config(tmp.path());
    let out_dir = tmp.path().join("run");

    let r = run(&[
        "--out",
        out_dir.to_str().unwrap(),
        "train",
        "--data",
        data.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
    ])
    .expect_success("train");

    assert!(r.stdout().contains("test_accuracy"));
    assert!(out_dir.join("train_report.csv").exists());
    assert!(out_dir.join("train_curves.svg").exists());
    assert!(out_dir.join("checkpoint/params.json").exists());
    let summary = std::fs::read_to_string(out_dir.join("summary.json")).unwrap();
    assert!(
        summary.contains("\"test_accuracy\""),
        "summary.json lacks test_accuracy: {summary}"
    );

    // Evaluating the checkpoint reproduces a sane accuracy table.
    let eval_out = tmp.path().join("eval");
    let r = run(&[
        "--out",
        eval_out.to_str().unwrap(),
        "eval",
        "--data",
        data.to_str().unwrap(),
        "--run",
        out_dir.to_str().unwrap(),
    ])
    .expect_success("eval");
    assert!(r.stdout().contains("test_accuracy"));
    assert!(eval_out.join("eval_summary.json").exists());
}

#[test]
fn missing_config_exits_2_and_names_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let data = toy_data(tmp.path());
    let r = run(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--config",
        "/nonexistent/cfg.json",
    ]);
    assert_eq!(r.code(), 2);
    assert!(
        r.stderr().contains("/nonexistent/cfg.json"),
        "stderr does not name the missing config: {}",
        r.stderr()
    );
}

#[test]
fn missing_dataset_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_quick_config(tmp.path());
    let r = run(&[
        "train",
        "--data",
        "/nonexistent/data",
        "--config",
        config.to_str().unwrap(),
    ]);
    assert_eq!(r.code(), 2);
    assert!(r.stderr().contains("/nonexistent/data"));
}

#[test]
fn relative_dataset_paths_resolve_against_data_dir_env() {
    let tmp = tempfile::tempdir().unwrap();
    let data = toy_data(tmp.path());
    let config = write_quick_config(tmp.path());
    let out_dir = tmp.path().join("envrun");
    // Pass only the dataset's basename; the env var supplies the root.
    let r = run_with(
        &[
            "--out",
            out_dir.to_str().unwrap(),
            "train",
            "--data",
            "toyset",
            "--config",
            config.to_str().unwrap(),
        ],
        &[("PARAFORMER_DATA_DIR", tmp.path())],
    );
    assert_eq!(r.code(), 0, "stderr: {}", r.stderr());
    assert!(out_dir.join("summary.json").exists());
    assert_eq!(data.file_name().unwrap(), "toyset");
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

#[test]
fn sweep_writes_csv_sorted_by_validation() {
    let tmp = tempfile::tempdir().unwrap();
    let data = toy_data(tmp.path());
    let spec = tmp.path().join("sweep.json");
    std::fs::write(
        &spec,
        r#"{
  "model": { "k": 3, "beta": 0.5, "d_hidden": 8, "dropout_rate": 0.0, "attention_mode": "scalable" },
  "train": { "lr": 0.05, "max_epochs": 25, "patience": 25 },
  "grid": { "lr": [0.05, 0.000001] },
  "seeds": [0, 1]
}"#,
    )
    .unwrap();
    let out_dir = tmp.path().join("sweep_out");
    run(&[
        "--out",
        out_dir.to_str().unwrap(),
        "--workers",
        "2",
        "sweep",
        "--data",
        data.to_str().unwrap(),
        "--config",
        spec.to_str().unwrap(),
    ])
    .expect_success("sweep");
    let csv = std::fs::read_to_string(out_dir.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3, "header + two cells: {csv}");
    assert!(lines[0].starts_with("lr,weight_decay"));
    let first_valid: f64 = lines[1].split(',').nth(4).unwrap().parse().unwrap();
    let second_valid: f64 = lines[2].split(',').nth(4).unwrap().parse().unwrap();
    assert!(first_valid >= second_valid, "rows not sorted: {csv}");
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

#[test]
fn verify_all_suites_pass_on_fresh_build() {
    let tmp = tempfile::tempdir().unwrap();
    let r = run(&[
        "--out",
        tmp.path().join("v").to_str().unwrap(),
        "verify",
        "--trials",
        "4",
    ])
    .expect_success("verify");
    let stdout = r.stdout();
    for suite in [
        "factorization",
        "gradients exact/gcn2",
        "gradients scalable/gprgnn",
        "dc-extraction",
        "theorem2",
    ] {
        assert!(stdout.contains(suite), "missing suite row {suite}: {stdout}");
    }
    assert!(!stdout.contains("FAIL"), "unexpected failure: {stdout}");
}

#[test]
fn verify_injected_fault_exits_1_and_records_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("v");
    let r = run(&[
        "--out",
        out_dir.to_str().unwrap(),
        "--seed",
        "9",
        "verify",
        "--suite",
        "factorization",
        "--trials",
        "3",
        "--inject-fault",
    ]);
    assert_eq!(r.code(), 1);
    assert!(
        r.stderr().contains("seed=9"),
        "failing seed not reported: {}",
        r.stderr()
    );
    let replay = std::fs::read_to_string(out_dir.join("verify_failures.json")).unwrap();
    assert!(replay.contains("\"seed\": 9"), "replay file lacks seed: {replay}");
}

#[test]
fn verify_gradient_suite_checks_exactly_the_requested_trials() {
    let tmp = tempfile::tempdir().unwrap();
    let r = run(&[
        "--out",
        tmp.path().join("v").to_str().unwrap(),
        "verify",
        "--suite",
        "gradients",
        "--trials",
        "10",
    ])
    .expect_success("verify --suite gradients");
    let stdout = r.stdout();
    let gradient_rows: Vec<&str> = stdout
        .lines()
        .filter(|l| l.starts_with("gradients "))
        .collect();
    assert_eq!(gradient_rows.len(), 4, "one row per mode/variant: {stdout}");
    for row in gradient_rows {
        let cols: Vec<&str> = row.split_whitespace().collect();
        // name spans two tokens ("gradients exact/gcn2"), then trials/passed/failed.
        assert_eq!(cols[2], "10", "trials column wrong in {row}");
        assert_eq!(cols[3], "10", "passed column wrong in {row}");
    }
    assert!(!stdout.contains("factorization"), "unrequested suite ran");
}

// ---------------------------------------------------------------------------
// diagnose
// ---------------------------------------------------------------------------

#[test]
fn diagnose_oversmoothing_writes_one_csv_per_model_and_one_svg() {
    let tmp = tempfile::tempdir().unwrap();
    let data = toy_data(tmp.path());
    let config = write_quick_config(tmp.path());
    let out_dir = tmp.path().join("os");
    run(&[
        "--out",
        out_dir.to_str().unwrap(),
        "diagnose",
        "oversmoothing",
        "--data",
        data.to_str().unwrap(),
        "--models",
        "vanilla,paraformer",
        "--depths",
        "1..3",
        "--config",
        config.to_str().unwrap(),
    ])
    .expect_success("diagnose oversmoothing");
    let csv_v = out_dir.join("oversmoothing_two_clique_toy_vanilla.csv");
    let csv_p = out_dir.join("oversmoothing_two_clique_toy_paraformer.csv");
    let svg = out_dir.join("oversmoothing_two_clique_toy.svg");
    assert!(csv_v.exists() && csv_p.exists() && svg.exists());
    let body = std::fs::read_to_string(csv_p).unwrap();
    assert_eq!(body.lines().count(), 4, "header + depths 1,2,3: {body}");
    assert!(body.starts_with("depth,test_accuracy,d_l2,s_cos"));
}

#[test]
fn diagnose_filter_prints_trend_check_and_writes_curve() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("f");
    let r = run(&[
        "--out",
        out_dir.to_str().unwrap(),
        "diagnose",
        "filter",
        "--a",
        "0.02",
        "--n",
        "16",
        "--kmax",
        "16",
    ])
    .expect_success("diagnose filter");
    assert!(
        r.stdout().contains("monotone-trend check") && r.stdout().contains("PASS"),
        "missing trend check: {}",
        r.stdout()
    );
    let csv = std::fs::read_to_string(out_dir.join("filter_response.csv")).unwrap();
    assert_eq!(csv.lines().count(), 18, "header + K=0..16: {csv}");
    assert!(out_dir.join("filter_response.svg").exists());

    // Decay out of range is a usage error.
    let bad = run(&["diagnose", "filter", "--a", "0.2", "--n", "16", "--kmax", "8"]);
    assert_eq!(bad.code(), 2);
}

#[test]
fn diagnose_gamma_csv_matches_the_checkpoint_weights() {
    let tmp = tempfile::tempdir().unwrap();
    let data = toy_data(tmp.path());
    let config = write_quick_config(tmp.path());
    let run_dir = tmp.path().join("run");
    run(&[
        "--out",
        run_dir.to_str().unwrap(),
        "train",
        "--data",
        data.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
    ])
    .expect_success("train");

    let gamma_out = tmp.path().join("g");
    run(&[
        "--out",
        gamma_out.to_str().unwrap(),
        "diagnose",
        "gamma",
        "--run",
        run_dir.to_str().unwrap(),
    ])
    .expect_success("diagnose gamma");

    let (params, _) =
        paraformer::model::load_checkpoint(&run_dir.join("checkpoint")).unwrap();
    let expected = params.gamma_values();
    let csv = std::fs::read_to_string(gamma_out.join("gamma.csv")).unwrap();
    let got: Vec<f64> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(got, expected, "gamma CSV deviates from checkpoint");
    assert!(gamma_out.join("gamma.svg").exists());
}

#[test]
fn diagnose_inequality_probe_reports_all_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("t2");
    let r = run(&[
        "--out",
        out_dir.to_str().unwrap(),
        "diagnose",
        "theorem2",
        "--n",
        "8",
        "--trials",
        "25",
    ])
    .expect_success("diagnose theorem2");
    assert!(r.stdout().contains("passes 25 / 25"), "{}", r.stdout());
    assert!(out_dir.join("theorem2_margins.csv").exists());
    assert!(out_dir.join("theorem2_margins.svg").exists());
}

// ---------------------------------------------------------------------------
// bench / prepare
// ---------------------------------------------------------------------------

#[test]
fn bench_prints_slope_and_requires_sizes() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("b");
    let r = run(&[
        "--out",
        out_dir.to_str().unwrap(),
        "bench",
        "--op",
        "scalable",
        "--sizes",
        "200,400",
        "--d",
        "16",
        "--k",
        "4",
        "--repeats",
        "3",
    ])
    .expect_success("bench");
    assert!(
        r.stdout().contains("loglog_slope="),
        "slope not printed: {}",
        r.stdout()
    );
    let csv = std::fs::read_to_string(out_dir.join("bench_gpa_scalable.csv")).unwrap();
    assert!(csv.starts_with("op,n,d,k,repeat,seconds"));

    let bad = run(&["bench", "--op", "dense"]);
    assert_eq!(bad.code(), 2);
}

#[test]
fn prepare_validates_generated_dataset_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("hetero");
    run(&[
        "--out",
        data.to_str().unwrap(),
        "prepare",
        "--generate",
        "heterophilic",
    ])
    .expect_success("prepare --generate heterophilic");
    let r = run(&["prepare", "--data", data.to_str().unwrap()])
        .expect_success("prepare --data");
    let stdout = r.stdout();
    assert!(stdout.contains("valid"), "{stdout}");
    assert!(stdout.contains("edge_homophily="), "{stdout}");

    // Heterophilic graphs mostly join different classes.
    let homophily: f64 = stdout
        .split("edge_homophily=")
        .nth(1)
        .unwrap()
        .trim()
        .parse()
        .unwrap();
    assert!(homophily < 0.3, "expected low homophily, got {homophily}");

    let none = run(&["prepare"]);
    assert_eq!(none.code(), 2);
}
