//! Experiment runner: every training run, verification suite, diagnostic
//! probe, and benchmark in the workspace is exposed as a subcommand that
//! reads JSON configs and writes CSV tables plus static SVG charts.
//!
//! Exit codes are a stable contract: 0 on success, 1 when an assertion or
//! verification suite fails, 2 on usage or configuration errors.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::rc::Rc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

use paraformer::attention::{
    gpa_exact, gpa_scalable, linear_attention_factors, AttentionMode, GammaWeights,
};
use paraformer::dataset::{load_dataset, save_dataset, Dataset};
use paraformer::diagnostics::{
    depth_sweep, highpass_probe, theorem2_probe, DepthSweepResult, GammaReport, ModelKind,
};
use paraformer::linalg::{frobenius_norm, row_softmax, Mat};
use paraformer::model::{
    load_checkpoint, save_checkpoint, GnnVariant, ModelParams, ParaFormerConfig, PreparedGraph,
};
use paraformer::report::{
    curve_csv, depth_sweep_csv, fmt_f64, gamma_csv, sweep_csv, train_report_csv, write_text,
    LineChart, Series,
};
use paraformer::synthetic::{cora_like, heterophilic_small, two_clique_toy};
use paraformer::train::{
    compute_gradients, sweep, train, Batch, SweepGrid, TrainConfig, TrainReport,
};
use paraformer_oracle::{dft_dc_oracle, finite_diff_grad, scaling_benchmark, BenchOp, Coord};

// ---------------------------------------------------------------------------
// argument surface
// ---------------------------------------------------------------------------

#[derive(Parser)]
#[command(
    name = "paraformer",
    version,
    about = "Graph-transformer laboratory: train, sweep, verify, diagnose, bench"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct GlobalArgs {
    /// Seed for every seeded operation; overrides the config file's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for written artifacts (created if absent).
    #[arg(long, global = true, default_value = "runs/out")]
    out: PathBuf,
    /// Keep every written artifact byte-stable across identical invocations
    /// (timing fields are omitted from reports).
    #[arg(long, global = true)]
    strict_deterministic: bool,
    /// Worker threads for sweep grids; 1 runs fully sequentially.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model; writes train_report.csv, summary.json, and a checkpoint.
    Train(TrainArgs),
    /// Evaluate a saved run's checkpoint on a dataset.
    Eval(EvalArgs),
    /// Hyper-parameter grid sweep aggregated over seeds.
    Sweep(SweepArgs),
    /// Cross-check the optimized kernels against the independent oracles.
    Verify(VerifyArgs),
    /// Collapse, spectral-filter, and hop-weight probes.
    #[command(subcommand)]
    Diagnose(DiagnoseCommand),
    /// Wall-clock scaling benchmark of the attention kernels.
    Bench(BenchArgs),
    /// Generate synthetic datasets or validate a dataset directory.
    Prepare(PrepareArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (resolved against PARAFORMER_DATA_DIR when relative).
    #[arg(long)]
    data: PathBuf,
    /// JSON config with "model" and "train" sections.
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Run directory produced by `train` (containing checkpoint/), or a
    /// checkpoint directory itself.
    #[arg(long)]
    run: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// JSON config with "model", "train", "grid", and "seeds" sections.
    #[arg(long)]
    config: PathBuf,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum SuiteName {
    All,
    Factorization,
    Gradients,
    Dc,
    Theorem2,
}

#[derive(Args)]
struct VerifyArgs {
    /// Which suite to run.
    #[arg(long, value_enum, default_value_t = SuiteName::All)]
    suite: SuiteName,
    /// Instances per suite (gradients: per attention-mode/GNN-variant pair).
    #[arg(long, default_value_t = 20)]
    trials: usize,
    /// Test hook: perturb the factorized propagation output so the
    /// factorization suite must fail.
    #[arg(long, hide = true)]
    inject_fault: bool,
}

#[derive(Subcommand)]
enum DiagnoseCommand {
    /// Depth sweeps measuring representation collapse per model.
    Oversmoothing(OversmoothingArgs),
    /// High-pass response curve of the damped propagation filter.
    Filter(FilterArgs),
    /// Hop-weight distribution of a trained checkpoint.
    Gamma(GammaArgs),
    /// Prescribed-weight l1 inequality probe on random attention logits.
    Theorem2(Theorem2Args),
}

#[derive(Args)]
struct OversmoothingArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated models: vanilla, sgformer, paraformer.
    #[arg(long, value_delimiter = ',', required = true)]
    models: Vec<ModelName>,
    /// Depths as an inclusive range "1..10" or a comma list "1,2,5".
    #[arg(long, default_value = "1..8")]
    depths: String,
    /// Optional JSON config with "model" and "train" sections; the default
    /// uses a 50-epoch budget per depth.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum ModelName {
    Vanilla,
    Sgformer,
    Paraformer,
}

impl ModelName {
    fn kind(self) -> ModelKind {
        match self {
            ModelName::Vanilla => ModelKind::VanillaTransformer,
            ModelName::Sgformer => ModelKind::SgformerLike,
            ModelName::Paraformer => ModelKind::Paraformer,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            ModelName::Vanilla => "vanilla",
            ModelName::Sgformer => "sgformer",
            ModelName::Paraformer => "paraformer",
        }
    }
}

#[derive(Args)]
struct FilterArgs {
    /// Damping coefficient; must satisfy 0 < a < 1/n.
    #[arg(long)]
    a: f64,
    /// Matrix size of the random row-stochastic propagation operator.
    #[arg(long, default_value_t = 16)]
    n: usize,
    /// Largest polynomial order K of the response curve.
    #[arg(long, default_value_t = 16)]
    kmax: usize,
}

#[derive(Args)]
struct GammaArgs {
    /// Run directory produced by `train` (or a checkpoint directory).
    #[arg(long)]
    run: PathBuf,
}

#[derive(Args)]
struct Theorem2Args {
    /// Number of nodes per random logit matrix.
    #[arg(long, default_value_t = 8)]
    n: usize,
    /// Number of random matrices to probe.
    #[arg(long, default_value_t = 100)]
    trials: usize,
    /// Logits are drawn uniformly from [-scale, scale].
    #[arg(long, default_value_t = 3.0)]
    scale: f64,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum OpName {
    Scalable,
    Dense,
}

#[derive(Args)]
struct BenchArgs {
    /// Kernel to time.
    #[arg(long, value_enum)]
    op: OpName,
    /// Comma-separated node counts.
    #[arg(long, value_delimiter = ',')]
    sizes: Vec<usize>,
    /// Feature width (default: 64 scalable, 16 dense).
    #[arg(long)]
    d: Option<usize>,
    /// Propagation depth K (default: 10 scalable, 4 dense).
    #[arg(long)]
    k: Option<usize>,
    /// Timed repetitions per size (one extra warm-up run is discarded).
    #[arg(long, default_value_t = 5)]
    repeats: usize,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum GenName {
    /// Citation-network stand-in: 2708 nodes, 7 classes, homophilous.
    Cora,
    /// Small two-class graph whose edges mostly cross classes.
    Heterophilic,
    /// Two cliques joined by one bridge edge.
    Toy,
}

#[derive(Args)]
struct PrepareArgs {
    /// Generate this synthetic dataset into --out.
    #[arg(long, value_enum)]
    generate: Option<GenName>,
    /// Validate an existing dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
}

// ---------------------------------------------------------------------------
// error plumbing and exit codes
// ---------------------------------------------------------------------------

enum CliError {
    /// Bad flags, missing files, unparsable configs — exit 2.
    Usage(String),
    /// A computation or verification suite failed — exit 1.
    Failure(String),
}

type CliResult<T> = Result<T, CliError>;

impl From<paraformer::Error> for CliError {
    fn from(e: paraformer::Error) -> Self {
        CliError::Failure(e.to_string())
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let code = match dispatch(cli) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(CliError::Failure(msg)) => {
            eprintln!("error: {msg}");
            1
        }
    };
    std::process::exit(code);
}

fn dispatch(cli: Cli) -> CliResult<()> {
    let g = cli.global;
    if g.workers == 0 {
        return Err(usage("--workers must be at least 1"));
    }
    match cli.command {
        Command::Train(a) => cmd_train(&g, &a),
        Command::Eval(a) => cmd_eval(&g, &a),
        Command::Sweep(a) => cmd_sweep(&g, &a),
        Command::Verify(a) => cmd_verify(&g, &a),
        Command::Diagnose(a) => cmd_diagnose(&g, &a),
        Command::Bench(a) => cmd_bench(&g, &a),
        Command::Prepare(a) => cmd_prepare(&g, &a),
    }
}

// ---------------------------------------------------------------------------
// shared plumbing
// ---------------------------------------------------------------------------

/// Experiment config file: field names mirror the library config structs.
#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ExperimentConfig {
    model: ParaFormerConfig,
    train: TrainConfig,
}

/// Sweep config file: base experiment plus grid axes and seeds.
#[derive(Debug, Clone, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
struct SweepSpec {
    model: ParaFormerConfig,
    train: TrainConfig,
    grid: SweepGrid,
    seeds: Vec<u64>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            model: ParaFormerConfig::default(),
            train: TrainConfig::default(),
            grid: SweepGrid::default(),
            seeds: vec![0],
        }
    }
}

/// Relative dataset paths that do not exist locally are resolved against
/// the PARAFORMER_DATA_DIR root when that is set.
fn resolve_data_path(p: &Path) -> PathBuf {
    if p.is_absolute() || p.exists() {
        return p.to_path_buf();
    }
    if let Ok(root) = std::env::var("PARAFORMER_DATA_DIR") {
        if !root.is_empty() {
            let joined = Path::new(&root).join(p);
            if joined.exists() {
                return joined;
            }
        }
    }
    p.to_path_buf()
}

fn load_dataset_arg(p: &Path) -> CliResult<Dataset> {
    let dir = resolve_data_path(p);
    if !dir.exists() {
        return Err(usage(format!(
            "dataset directory not found: {}",
            dir.display()
        )));
    }
    load_dataset(&dir).map_err(|e| usage(format!("invalid dataset {}: {e}", dir.display())))
}

fn read_config_text(path: &Path) -> CliResult<String> {
    if !path.exists() {
        return Err(usage(format!("config file not found: {}", path.display())));
    }
    std::fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))
}

fn load_experiment_config(path: &Path) -> CliResult<ExperimentConfig> {
    let text = read_config_text(path)?;
    let cfg: ExperimentConfig = serde_json::from_str(&text)
        .map_err(|e| usage(format!("invalid config {}: {e}", path.display())))?;
    cfg.model
        .validate()
        .and_then(|()| cfg.train.validate())
        .map_err(|e| usage(format!("invalid config {}: {e}", path.display())))?;
    Ok(cfg)
}

fn load_sweep_spec(path: &Path) -> CliResult<SweepSpec> {
    let text = read_config_text(path)?;
    let spec: SweepSpec = serde_json::from_str(&text)
        .map_err(|e| usage(format!("invalid config {}: {e}", path.display())))?;
    spec.model
        .validate()
        .and_then(|()| spec.train.validate())
        .map_err(|e| usage(format!("invalid config {}: {e}", path.display())))?;
    Ok(spec)
}

fn ensure_out_dir(g: &GlobalArgs) -> CliResult<()> {
    std::fs::create_dir_all(&g.out)
        .map_err(|e| usage(format!("cannot create {}: {e}", g.out.display())))
}

fn write_artifact(path: &Path, content: &str) -> CliResult<()> {
    write_text(path, content)?;
    Ok(())
}

/// Finds the checkpoint directory for a run path: either `<run>/checkpoint`
/// or the run path itself when it already holds `params.json`.
fn checkpoint_dir(run: &Path) -> CliResult<PathBuf> {
    let nested = run.join("checkpoint");
    if nested.join("params.json").exists() {
        return Ok(nested);
    }
    if run.join("params.json").exists() {
        return Ok(run.to_path_buf());
    }
    Err(usage(format!(
        "no checkpoint found under {} (looked for checkpoint/params.json and params.json)",
        run.display()
    )))
}

// ---------------------------------------------------------------------------
// train / eval / sweep
// ---------------------------------------------------------------------------

#[derive(serde::Serialize)]
struct TrainSummary {
    dataset: String,
    nodes: usize,
    edges: usize,
    classes: usize,
    seed: u64,
    best_epoch: Option<usize>,
    epochs_run: usize,
    valid_accuracy: f64,
    test_accuracy: f64,
    gamma: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    wall_seconds: Option<f64>,
}

fn cmd_train(g: &GlobalArgs, a: &TrainArgs) -> CliResult<()> {
    let ds = load_dataset_arg(&a.data)?;
    let mut cfg = load_experiment_config(&a.config)?;
    if let Some(seed) = g.seed {
        cfg.train.seed = seed;
    }
    ensure_out_dir(g)?;

    let t0 = Instant::now();
    let (params, report) = train(&ds, &cfg.model, &cfg.train)?;
    let wall = t0.elapsed().as_secs_f64();

    write_artifact(&g.out.join("train_report.csv"), &train_report_csv(&report))?;
    save_checkpoint(&g.out.join("checkpoint"), &params, &cfg.model)?;
    let summary = TrainSummary {
        dataset: ds.name.clone(),
        nodes: ds.n(),
        edges: ds.graph.m(),
        classes: ds.num_classes(),
        seed: cfg.train.seed,
        best_epoch: report.best_epoch,
        epochs_run: report.epochs.len(),
        valid_accuracy: report.final_valid_accuracy,
        test_accuracy: report.final_test_accuracy,
        gamma: report.gamma_final.clone(),
        wall_seconds: if g.strict_deterministic {
            None
        } else {
            Some(wall)
        },
    };
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_artifact(&g.out.join("summary.json"), &(json + "\n"))?;
    write_artifact(
        &g.out.join("train_curves.svg"),
        &train_curves_svg(&report).render_svg(),
    )?;

    println!(
        "trained {} for {} epochs (best {})",
        ds.name,
        report.epochs.len(),
        report
            .best_epoch
            .map(|e| e.to_string())
            .unwrap_or_else(|| "-".into())
    );
    println!("valid_accuracy {}", fmt_f64(report.final_valid_accuracy));
    println!("test_accuracy {}", fmt_f64(report.final_test_accuracy));
    eprintln!("wall {wall:.1}s");
    Ok(())
}

fn train_curves_svg(report: &TrainReport) -> LineChart {
    let epochs: Vec<f64> = report.epochs.iter().map(|e| e.epoch as f64).collect();
    let mk = |label: &str, ys: Vec<f64>| Series {
        label: label.into(),
        points: epochs.iter().copied().zip(ys).collect(),
    };
    LineChart {
        title: "training curves".into(),
        x_label: "epoch".into(),
        y_label: "loss / accuracy".into(),
        series: vec![
            mk("loss", report.epochs.iter().map(|e| e.loss).collect()),
            mk(
                "acc_valid",
                report.epochs.iter().map(|e| e.acc_valid).collect(),
            ),
            mk(
                "acc_test",
                report.epochs.iter().map(|e| e.acc_test).collect(),
            ),
        ],
    }
}

#[derive(serde::Serialize)]
struct EvalSummary {
    dataset: String,
    checkpoint: String,
    train_accuracy: f64,
    valid_accuracy: f64,
    test_accuracy: f64,
}

fn cmd_eval(g: &GlobalArgs, a: &EvalArgs) -> CliResult<()> {
    let ds = load_dataset_arg(&a.data)?;
    let ckpt = checkpoint_dir(&a.run)?;
    let (params, config) =
        load_checkpoint(&ckpt).map_err(|e| usage(format!("cannot load checkpoint: {e}")))?;
    let (pred, _) = paraformer::model::node_forward(
        ds.features.as_mat(),
        &ds.graph,
        &params,
        &config,
        false,
        None,
    )?;
    let acc = |mask: &[usize]| paraformer::model::accuracy(&pred, &ds.labels, mask);
    let summary = EvalSummary {
        dataset: ds.name.clone(),
        checkpoint: ckpt.display().to_string(),
        train_accuracy: acc(&ds.splits.train)?,
        valid_accuracy: acc(&ds.splits.valid)?,
        test_accuracy: acc(&ds.splits.test)?,
    };
    ensure_out_dir(g)?;
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_artifact(&g.out.join("eval_summary.json"), &(json + "\n"))?;
    println!("train_accuracy {}", fmt_f64(summary.train_accuracy));
    println!("valid_accuracy {}", fmt_f64(summary.valid_accuracy));
    println!("test_accuracy {}", fmt_f64(summary.test_accuracy));
    Ok(())
}

fn cmd_sweep(g: &GlobalArgs, a: &SweepArgs) -> CliResult<()> {
    let ds = load_dataset_arg(&a.data)?;
    let mut spec = load_sweep_spec(&a.config)?;
    if let Some(seed) = g.seed {
        spec.train.seed = seed;
    }
    if spec.seeds.is_empty() {
        return Err(usage("sweep config needs at least one seed"));
    }
    ensure_out_dir(g)?;
    let rows = sweep(
        &ds,
        &spec.model,
        &spec.train,
        &spec.grid,
        &spec.seeds,
        g.workers,
    )?;
    write_artifact(&g.out.join("sweep.csv"), &sweep_csv(&rows))?;
    println!("{} cells, best first:", rows.len());
    for row in rows.iter().take(5) {
        println!(
            "lr={} wd={} dropout={} beta={} valid={}±{} test={}±{}",
            fmt_f64(row.lr),
            fmt_f64(row.weight_decay),
            fmt_f64(row.dropout_rate),
            fmt_f64(row.beta),
            fmt_f64(row.valid_mean),
            fmt_f64(row.valid_std),
            fmt_f64(row.test_mean),
            fmt_f64(row.test_std),
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

#[derive(serde::Serialize)]
struct SuiteFailure {
    suite: String,
    instance: usize,
    seed: u64,
    detail: String,
}

struct SuiteOutcome {
    name: String,
    trials: usize,
    failures: Vec<SuiteFailure>,
}

fn cmd_verify(g: &GlobalArgs, a: &VerifyArgs) -> CliResult<()> {
    if a.trials == 0 {
        return Err(usage("--trials must be at least 1"));
    }
    let seed0 = g.seed.unwrap_or(0);
    let mut outcomes = Vec::new();
    let want = |s: SuiteName| a.suite == SuiteName::All || a.suite == s;

    if want(SuiteName::Factorization) {
        outcomes.push(suite_factorization(a.trials, seed0, a.inject_fault)?);
    }
    if want(SuiteName::Gradients) {
        outcomes.extend(suite_gradients(a.trials, seed0)?);
    }
    if want(SuiteName::Dc) {
        outcomes.push(suite_dc(a.trials, seed0)?);
    }
    if want(SuiteName::Theorem2) {
        outcomes.push(suite_theorem2(a.trials, seed0));
    }

    println!(
        "{:<28} {:>6} {:>7} {:>7}  result",
        "suite", "trials", "passed", "failed"
    );
    let mut all_failures = Vec::new();
    for o in &mut outcomes {
        let failed = o.failures.len();
        println!(
            "{:<28} {:>6} {:>7} {:>7}  {}",
            o.name,
            o.trials,
            o.trials - failed,
            failed,
            if failed == 0 { "PASS" } else { "FAIL" }
        );
        all_failures.append(&mut o.failures);
    }

    if all_failures.is_empty() {
        Ok(())
    } else {
        ensure_out_dir(g)?;
        let path = g.out.join("verify_failures.json");
        let json = serde_json::to_string_pretty(&all_failures).expect("failures serialize");
        write_artifact(&path, &(json + "\n"))?;
        let first = &all_failures[0];
        Err(CliError::Failure(format!(
            "{} verification failure(s); first: suite={} seed={} ({}); replay data in {}",
            all_failures.len(),
            first.suite,
            first.seed,
            first.detail,
            path.display()
        )))
    }
}

/// Factorized propagation must match the exact path run on the materialized
/// factor product.
fn suite_factorization(trials: usize, seed0: u64, inject_fault: bool) -> CliResult<SuiteOutcome> {
    let mut failures = Vec::new();
    for t in 0..trials {
        let seed = seed0.wrapping_add(t as u64);
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let n = rng.gen_range(2..=64);
        let d = rng.gen_range(1..=16);
        let k_max = rng.gen_range(0..=10);
        let rand_mat = |rng: &mut ChaCha20Rng, r: usize, c: usize| {
            Mat::from_shape_fn((r, c), |_| rng.gen_range(-2.0..2.0))
        };
        let q = rand_mat(&mut rng, n, d);
        let k = rand_mat(&mut rng, n, d);
        let v = rand_mat(&mut rng, n, d);
        let gamma = GammaWeights::ppr(k_max, 0.1)?;
        let factors = linear_attention_factors(&q, &k)?;
        let mut fast = gpa_scalable(&factors, &v, &gamma)?;
        if inject_fault {
            fast[[0, 0]] += 1e-6;
        }
        let slow = gpa_exact(&factors.materialize(), &v, &gamma)?;
        let denom = frobenius_norm(&slow).max(1e-300);
        let rel = frobenius_norm(&(&fast - &slow)) / denom;
        // `is_nan()` keeps a NaN result counted as a failure.
        if rel.is_nan() || rel > 1e-10 {
            failures.push(SuiteFailure {
                suite: "factorization".into(),
                instance: t,
                seed,
                detail: format!("n={n} d={d} K={k_max} rel_frobenius_error={rel:.3e}"),
            });
        }
    }
    Ok(SuiteOutcome {
        name: "factorization".into(),
        trials,
        failures,
    })
}

/// Analytic gradients must match central finite differences on a small
/// instance, for each attention mode and GNN variant.
fn suite_gradients(trials: usize, seed0: u64) -> CliResult<Vec<SuiteOutcome>> {
    let modes = [
        (AttentionMode::Exact, GnnVariant::Gcn2, "gradients exact/gcn2"),
        (
            AttentionMode::Exact,
            GnnVariant::GprGnn,
            "gradients exact/gprgnn",
        ),
        (
            AttentionMode::Scalable,
            GnnVariant::Gcn2,
            "gradients scalable/gcn2",
        ),
        (
            AttentionMode::Scalable,
            GnnVariant::GprGnn,
            "gradients scalable/gprgnn",
        ),
    ];
    let mut outcomes = Vec::new();
    for (mode, variant, name) in modes {
        let mut failures = Vec::new();
        for t in 0..trials {
            let seed = seed0.wrapping_add(1000 + t as u64);
            if let Some(detail) = gradient_instance(mode, variant, seed)? {
                failures.push(SuiteFailure {
                    suite: name.into(),
                    instance: t,
                    seed,
                    detail,
                });
            }
        }
        outcomes.push(SuiteOutcome {
            name: name.into(),
            trials,
            failures,
        });
    }
    Ok(outcomes)
}

/// Returns None when the instance passes, or a failure description.
fn gradient_instance(
    mode: AttentionMode,
    variant: GnnVariant,
    seed: u64,
) -> CliResult<Option<String>> {
    let ds = two_clique_toy(5, seed)?;
    let config = ParaFormerConfig {
        k: 3,
        beta: 0.5,
        d_hidden: 6,
        dropout_rate: 0.0,
        attention_mode: mode,
        gnn_variant: variant,
        gnn_k: 3,
        ..ParaFormerConfig::default()
    };
    let params = ModelParams::init(&config, ds.d(), ds.num_classes(), seed)?;
    let prepared = PreparedGraph::new(&ds.graph);
    let x = Rc::new(ds.features.as_mat().clone());
    let batch = Batch {
        x: &x,
        prepared: &prepared,
        labels: &ds.labels,
        mask: &ds.splits.train,
    };
    let (_, grads) = compute_gradients(&params, &batch, &config, None)?;

    let mats: Vec<Mat> = params.tensors().iter().map(|(_, m)| (*m).clone()).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x9e3779b97f4a7c15);
    let mut coords: Vec<Coord> = Vec::new();
    for _ in 0..5 {
        let ti = rng.gen_range(0..mats.len());
        let r = rng.gen_range(0..mats[ti].nrows());
        let c = rng.gen_range(0..mats[ti].ncols());
        coords.push((ti, r, c));
    }

    let mut loss_fn = |ms: &[Mat]| -> f64 {
        let mut p = params.clone();
        for ((_, dst), src) in p.tensors_mut().into_iter().zip(ms) {
            *dst = src.clone();
        }
        let (loss, _) = compute_gradients(&p, &batch, &config, None).expect("loss evaluates");
        loss
    };
    let fd = finite_diff_grad(&mut loss_fn, &mats, &coords, 1e-4)
        .map_err(|e| CliError::Failure(e.to_string()))?;

    for (&(ti, r, c), &fd_val) in coords.iter().zip(&fd) {
        let analytic = grads[ti].1[[r, c]];
        let rel = (analytic - fd_val).abs() / analytic.abs().max(1e-8);
        // `is_nan()` keeps a NaN result counted as a failure.
        if rel.is_nan() || rel > 1e-4 {
            return Ok(Some(format!(
                "tensor={} coord=({r},{c}) analytic={analytic:.6e} fd={fd_val:.6e} rel={rel:.3e}",
                grads[ti].0
            )));
        }
    }
    Ok(None)
}

/// The mean-based constant-component extraction must match the Fourier
/// bin-zero oracle.
fn suite_dc(trials: usize, seed0: u64) -> CliResult<SuiteOutcome> {
    let mut failures = Vec::new();
    for t in 0..trials {
        let seed = seed0.wrapping_add(2000 + t as u64);
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let n = rng.gen_range(2..=40);
        let d = rng.gen_range(1..=8);
        let h = Mat::from_shape_fn((n, d), |_| rng.gen_range(-3.0..3.0));
        let fast = paraformer::diagnostics::spectral_split(&h).dc;
        let slow = dft_dc_oracle(&h).map_err(|e| CliError::Failure(e.to_string()))?;
        let denom = frobenius_norm(&slow).max(1e-300);
        let rel = frobenius_norm(&(&fast - &slow)) / denom;
        // `is_nan()` keeps a NaN result counted as a failure.
        if rel.is_nan() || rel > 1e-10 {
            failures.push(SuiteFailure {
                suite: "dc-extraction".into(),
                instance: t,
                seed,
                detail: format!("n={n} d={d} rel_frobenius_error={rel:.3e}"),
            });
        }
    }
    Ok(SuiteOutcome {
        name: "dc-extraction".into(),
        trials,
        failures,
    })
}

/// The prescribed-hop-weight l1 inequality must hold on every random logit
/// matrix whose row-max concentration exceeds one.
fn suite_theorem2(trials: usize, seed0: u64) -> SuiteOutcome {
    let report = theorem2_probe(8, trials, 3.0, seed0.wrapping_add(3000));
    let failed = report.trials - report.passes - report.skipped_degenerate;
    let mut failures = Vec::new();
    if failed > 0 || report.skipped_degenerate > 0 {
        failures.push(SuiteFailure {
            suite: "theorem2".into(),
            instance: 0,
            seed: seed0.wrapping_add(3000),
            detail: format!(
                "passes={} skipped={} of {} (min margin {:?})",
                report.passes,
                report.skipped_degenerate,
                report.trials,
                report.min_margin()
            ),
        });
    }
    SuiteOutcome {
        name: "theorem2".into(),
        trials,
        failures,
    }
}

// ---------------------------------------------------------------------------
// diagnose
// ---------------------------------------------------------------------------

fn cmd_diagnose(g: &GlobalArgs, cmd: &DiagnoseCommand) -> CliResult<()> {
    match cmd {
        DiagnoseCommand::Oversmoothing(a) => diagnose_oversmoothing(g, a),
        DiagnoseCommand::Filter(a) => diagnose_filter(g, a),
        DiagnoseCommand::Gamma(a) => diagnose_gamma(g, a),
        DiagnoseCommand::Theorem2(a) => diagnose_theorem2(g, a),
    }
}

fn parse_depths(text: &str) -> CliResult<Vec<usize>> {
    let text = text.trim();
    let parse_one = |s: &str| -> CliResult<usize> {
        s.trim()
            .parse::<usize>()
            .map_err(|_| usage(format!("invalid depth value: {s:?}")))
    };
    let depths: Vec<usize> = if let Some((lo, hi)) = text.split_once("..") {
        let lo = parse_one(lo)?;
        let hi = parse_one(hi)?;
        if lo > hi {
            return Err(usage(format!("empty depth range {lo}..{hi}")));
        }
        (lo..=hi).collect()
    } else {
        text.split(',')
            .filter(|s| !s.trim().is_empty())
            .map(parse_one)
            .collect::<CliResult<_>>()?
    };
    if depths.is_empty() {
        return Err(usage("depth list is empty"));
    }
    if depths.contains(&0) {
        return Err(usage("depths must be at least 1"));
    }
    Ok(depths)
}

fn diagnose_oversmoothing(g: &GlobalArgs, a: &OversmoothingArgs) -> CliResult<()> {
    let ds = load_dataset_arg(&a.data)?;
    let depths = parse_depths(&a.depths)?;
    let mut cfg = match &a.config {
        Some(path) => load_experiment_config(path)?,
        None => ExperimentConfig {
            train: TrainConfig {
                max_epochs: 50,
                patience: 50,
                ..TrainConfig::default()
            },
            ..ExperimentConfig::default()
        },
    };
    if let Some(seed) = g.seed {
        cfg.train.seed = seed;
    }
    ensure_out_dir(g)?;

    let mut charts: Vec<(ModelName, DepthSweepResult)> = Vec::new();
    for &model in &a.models {
        let result = depth_sweep(&ds, model.kind(), &depths, &cfg.model, &cfg.train)?;
        let csv_path = g
            .out
            .join(format!("oversmoothing_{}_{}.csv", ds.name, model.as_str()));
        write_artifact(&csv_path, &depth_sweep_csv(&result))?;
        println!(
            "{}: D_L2 first={} last={} (acc last={})",
            model.as_str(),
            fmt_f64(result.d_l2[0]),
            fmt_f64(*result.d_l2.last().expect("nonempty")),
            fmt_f64(*result.test_accuracy.last().expect("nonempty")),
        );
        charts.push((model, result));
    }

    let chart = LineChart {
        title: format!("representation collapse vs depth ({})", ds.name),
        x_label: "depth / propagation budget".into(),
        y_label: "mean pairwise L2 distance".into(),
        series: charts
            .iter()
            .map(|(model, r)| Series {
                label: model.as_str().into(),
                points: r
                    .depths
                    .iter()
                    .zip(&r.d_l2)
                    .map(|(&d, &y)| (d as f64, y))
                    .collect(),
            })
            .collect(),
    };
    write_artifact(
        &g.out.join(format!("oversmoothing_{}.svg", ds.name)),
        &chart.render_svg(),
    )?;
    Ok(())
}

fn diagnose_filter(g: &GlobalArgs, a: &FilterArgs) -> CliResult<()> {
    if a.n < 2 {
        return Err(usage("--n must be at least 2"));
    }
    if a.kmax < 2 {
        return Err(usage("--kmax must be at least 2"));
    }
    if !(a.a > 0.0 && a.a < 1.0 / a.n as f64) {
        return Err(usage(format!(
            "--a must satisfy 0 < a < 1/n = {}, got {}",
            1.0 / a.n as f64,
            a.a
        )));
    }
    let seed = g.seed.unwrap_or(0);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let logits = Mat::from_shape_fn((a.n, a.n), |_| rng.gen_range(-2.0..2.0));
    let p = row_softmax(&logits);
    let curve = highpass_probe(&p, a.a, a.kmax, seed)?;

    ensure_out_dir(g)?;
    write_artifact(
        &g.out.join("filter_response.csv"),
        &curve_csv("k", "dc_suppression", &curve),
    )?;
    let chart = LineChart {
        title: "constant-component suppression vs polynomial order".into(),
        x_label: "K".into(),
        y_label: "residual DC ratio r(K)".into(),
        series: vec![Series {
            label: format!("a={}", fmt_f64(a.a)),
            points: curve
                .iter()
                .enumerate()
                .map(|(k, &r)| (k as f64, r))
                .collect(),
        }],
    };
    write_artifact(&g.out.join("filter_response.svg"), &chart.render_svg())?;

    let r2 = curve[2];
    let rk = curve[a.kmax];
    let pass = rk < r2;
    println!(
        "monotone-trend check: r(2)={} r({})={} decreasing={}",
        fmt_f64(r2),
        a.kmax,
        fmt_f64(rk),
        if pass { "PASS" } else { "FAIL" }
    );
    if pass {
        Ok(())
    } else {
        Err(CliError::Failure(
            "high-pass response did not decrease with polynomial order".into(),
        ))
    }
}

fn diagnose_gamma(g: &GlobalArgs, a: &GammaArgs) -> CliResult<()> {
    let ckpt = checkpoint_dir(&a.run)?;
    let (params, config) =
        load_checkpoint(&ckpt).map_err(|e| usage(format!("cannot load checkpoint: {e}")))?;
    let report = GammaReport::from_values(params.gamma_values());
    ensure_out_dir(g)?;
    write_artifact(&g.out.join("gamma.csv"), &gamma_csv(&report))?;
    let chart = LineChart {
        title: "trained hop weights".into(),
        x_label: "hop k".into(),
        y_label: "gamma_k".into(),
        series: vec![Series {
            label: format!("K={}", config.k),
            points: report
                .values
                .iter()
                .enumerate()
                .map(|(k, &v)| (k as f64, v))
                .collect(),
        }],
    };
    write_artifact(&g.out.join("gamma.svg"), &chart.render_svg())?;
    let k_max = report.values.len() - 1;
    println!("hop weights (K={k_max}):");
    for (k, v) in report.values.iter().enumerate() {
        println!("gamma_{k} {}", fmt_f64(*v));
    }
    println!("has_negative {}", report.has_negative);
    Ok(())
}

fn diagnose_theorem2(g: &GlobalArgs, a: &Theorem2Args) -> CliResult<()> {
    if a.n < 2 {
        return Err(usage("--n must be at least 2"));
    }
    if a.trials == 0 {
        return Err(usage("--trials must be at least 1"));
    }
    let seed = g.seed.unwrap_or(0);
    let report = theorem2_probe(a.n, a.trials, a.scale, seed);
    ensure_out_dir(g)?;
    write_artifact(
        &g.out.join("theorem2_margins.csv"),
        &curve_csv("trial", "margin", &report.margins),
    )?;
    let chart = LineChart {
        title: "l1 inequality margin per trial".into(),
        x_label: "trial".into(),
        y_label: "c - ||filter||_1 margin".into(),
        series: vec![Series {
            label: format!("n={}", a.n),
            points: report
                .margins
                .iter()
                .enumerate()
                .map(|(i, &m)| (i as f64, m))
                .collect(),
        }],
    };
    write_artifact(&g.out.join("theorem2_margins.svg"), &chart.render_svg())?;
    println!(
        "passes {} / {} (skipped degenerate: {}), min margin {}",
        report.passes,
        report.trials,
        report.skipped_degenerate,
        report
            .min_margin()
            .map(fmt_f64)
            .unwrap_or_else(|| "-".into())
    );
    if report.all_pass() {
        Ok(())
    } else {
        Err(CliError::Failure(format!(
            "l1 inequality failed on {} of {} trials",
            report.trials - report.passes - report.skipped_degenerate,
            report.trials
        )))
    }
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

fn cmd_bench(g: &GlobalArgs, a: &BenchArgs) -> CliResult<()> {
    if a.sizes.is_empty() {
        return Err(usage("--sizes needs at least one node count"));
    }
    if a.repeats == 0 {
        return Err(usage("--repeats must be at least 1"));
    }
    let (op, d_default, k_default) = match a.op {
        OpName::Scalable => (BenchOp::GpaScalable, 64, 10),
        OpName::Dense => (BenchOp::GpaExactDense, 16, 4),
    };
    let d = a.d.unwrap_or(d_default);
    let k = a.k.unwrap_or(k_default);
    let seed = g.seed.unwrap_or(0);
    let result = scaling_benchmark(op, &a.sizes, d, k, a.repeats, seed)
        .map_err(|e| usage(e.to_string()))?;
    ensure_out_dir(g)?;
    write_artifact(&g.out.join(format!("bench_{}.csv", op.name())), &result.to_csv())?;

    let chart = LineChart {
        title: format!("median wall time vs n ({})", op.name()),
        x_label: "ln n".into(),
        y_label: "ln seconds".into(),
        series: vec![Series {
            label: op.name().into(),
            points: result
                .medians
                .iter()
                .map(|&(n, s)| ((n as f64).ln(), s.ln()))
                .collect(),
        }],
    };
    write_artifact(
        &g.out.join(format!("bench_{}.svg", op.name())),
        &chart.render_svg(),
    )?;

    for &(n, s) in &result.medians {
        println!("n={n} median_seconds={s:.6}");
    }
    println!("op={} loglog_slope={:.4}", op.name(), result.slope);
    Ok(())
}

// ---------------------------------------------------------------------------
// prepare
// ---------------------------------------------------------------------------

fn cmd_prepare(g: &GlobalArgs, a: &PrepareArgs) -> CliResult<()> {
    if a.generate.is_none() && a.data.is_none() {
        return Err(usage("prepare needs --generate <name> and/or --data <dir>"));
    }
    let seed = g.seed.unwrap_or(0);
    if let Some(which) = a.generate {
        let ds = match which {
            GenName::Cora => cora_like(seed),
            GenName::Heterophilic => heterophilic_small(seed),
            GenName::Toy => two_clique_toy(8, seed)?,
        };
        ensure_out_dir(g)?;
        save_dataset(&ds, &g.out)?;
        println!(
            "wrote dataset {} to {} (n={} m={} d={} c={})",
            ds.name,
            g.out.display(),
            ds.n(),
            ds.graph.m(),
            ds.d(),
            ds.num_classes()
        );
    }
    if let Some(dir) = &a.data {
        let ds = load_dataset_arg(dir)?;
        ds.splits
            .validate(ds.n())
            .map_err(|e| usage(format!("invalid dataset splits: {e}")))?;
        let mut same = 0usize;
        let mut labeled = 0usize;
        for &(u, v) in ds.graph.edges() {
            if let (Some(lu), Some(lv)) = (ds.labels.label(u as usize), ds.labels.label(v as usize))
            {
                labeled += 1;
                if lu == lv {
                    same += 1;
                }
            }
        }
        let mut line = format!(
            "dataset {} valid: n={} m={} d={} c={} splits={}/{}/{}",
            ds.name,
            ds.n(),
            ds.graph.m(),
            ds.d(),
            ds.num_classes(),
            ds.splits.train.len(),
            ds.splits.valid.len(),
            ds.splits.test.len(),
        );
        if labeled > 0 {
            let _ = write!(line, " edge_homophily={:.4}", same as f64 / labeled as f64);
        }
        println!("{line}");
    }
    Ok(())
}
