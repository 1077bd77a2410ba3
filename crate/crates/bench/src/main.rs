use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};

use clap::{Args, Parser, Subcommand};
use copp::conformal::{fit_pipeline, BehaviorSource, CalibrationMode, CoppSettings, Sampler};
use copp::extensions::{copp_ms_predict_batch, MultiSplitConfig};
use copp::policy::{DeterministicPolicy, UniformPolicy};
use copp::rng::stream;
use copp::synthetic::{Example1, Example2, Example3, ScenarioSpec, SequentialDesign, TargetKind};
use copp::{BanditDataset, ForestConfig, LogisticModel, Penalty, PredictionSet, SharedPolicy};
use copp_bench::config::{parse_methods, ConfigError, ExperimentConfig, Method};
use copp_bench::presets::{self, Cell, PresetOptions};
use copp_bench::report::format_real;
use copp_bench::runner::{run_experiment_with_progress, RunError};

const EXIT_CONFIG: u8 = 2;
const EXIT_PARTIAL: u8 = 3;

#[derive(Parser)]
#[command(name = "copp", version, about = "Conformal off-policy prediction: simulations and interval emission")]
struct Cli {
    /// Worker threads for replicate-level parallelism (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a simulated dataset, a test sample and the generating truth.
    Simulate(SimulateArgs),
    /// Run an experiment from a JSON config.
    Run(RunArgs),
    /// DM / SM / COPP under stochastic and deterministic targets.
    Figure2(FigureArgs),
    /// Examples 1-2, low and high dimension, all COPP variants and baselines.
    Figure3(FigureArgs),
    /// Example 3 at horizons 3, 4, 5.
    Figure4(FigureArgs),
    /// Prediction intervals for user data (no coverage evaluation).
    Predict(PredictArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Take the scenario from an experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    example: u8,
    #[arg(long, default_value_t = 2000)]
    n: usize,
    #[arg(long)]
    high_dim: bool,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    deterministic: bool,
    #[arg(long, default_value_t = 10_000)]
    test_points: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    reps: Option<usize>,
    /// Comma-separated method list, e.g. `COPP,COPP-IS,SM`.
    #[arg(long)]
    methods: Option<String>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct FigureArgs {
    #[arg(long, default_value_t = 100)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    methods: Option<String>,
    #[arg(long, default_value_t = 10_000)]
    test_points: usize,
    #[arg(long, default_value_t = 2000)]
    n: usize,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    /// Logged data: CSV with columns x0..x{d-1},t,y.
    #[arg(long)]
    data: PathBuf,
    /// Query contexts: CSV with columns x0..x{d-1}.
    #[arg(long)]
    contexts: PathBuf,
    /// Target policy: `uniform`, `action:<k>` or `model:<logistic.json>`.
    #[arg(long)]
    target: String,
    /// One of COPP, COPP-IS, COPP-MS, COPP-IS-MS.
    #[arg(long, default_value = "COPP")]
    method: String,
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
    /// Ridge-penalize the behavior model with cross-validated strength.
    #[arg(long)]
    ridge_cv: bool,
    #[arg(long, default_value_t = 200)]
    trees: usize,
    #[arg(long, default_value_t = 100)]
    splits: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug)]
enum Failure {
    Config(String),
    Other(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        match e {
            RunError::Config(c) => Failure::Config(c.to_string()),
            other => Failure::Other(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Other(e.to_string())
    }
}

impl From<copp::DataError> for Failure {
    fn from(e: copp::DataError) -> Self {
        Failure::Config(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    }
    let result = match cli.command {
        Command::Simulate(a) => simulate(a).map(|_| 0),
        Command::Run(a) => run(a),
        Command::Figure2(a) => figure(a, presets::figure2),
        Command::Figure3(a) => figure(a, presets::figure3),
        Command::Figure4(a) => figure(a, presets::figure4),
        Command::Predict(a) => predict(a).map(|_| 0),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Other(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn write_rows(path: &Path, header: &[String], rows: impl Iterator<Item = Vec<String>>) -> Result<(), Failure> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Failure::Other(e.to_string()))?;
    w.write_record(header).map_err(|e| Failure::Other(e.to_string()))?;
    for r in rows {
        w.write_record(&r).map_err(|e| Failure::Other(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

fn simulate(a: SimulateArgs) -> Result<(), Failure> {
    let spec = match &a.config {
        Some(p) => ExperimentConfig::load(p)?.scenario,
        None => {
            let target = if a.deterministic { TargetKind::Deterministic } else { TargetKind::Stochastic };
            ScenarioSpec {
                example: a.example,
                n: a.n,
                high_dim: a.high_dim,
                horizon: a.horizon,
                target,
            }
        }
    };
    spec.validate().map_err(|e| Failure::Config(e.to_string()))?;
    std::fs::create_dir_all(&a.out)?;
    let mut data_rng = stream(a.seed, 0, copp::rng::purpose::DATA);
    let mut test_rng = stream(a.seed, 0, copp::rng::purpose::TEST);
    let (test, truth) = if spec.example == 1 {
        let ex = Example1::new(spec.high_dim);
        let data = ex.generate(spec.n, &mut data_rng);
        data.write_csv(std::fs::File::create(a.out.join("data.csv"))?)?;
        (ex.test_sample(a.test_points, spec.target, &mut test_rng), ex.truth(spec))
    } else {
        let design: Box<dyn SequentialDesign> = if spec.example == 2 {
            Box::new(Example2::new(spec.high_dim))
        } else {
            Box::new(Example3::new(spec.horizon.unwrap_or(3)))
        };
        let data = design.generate(spec.n, &mut data_rng);
        data.write_csv(std::fs::File::create(a.out.join("data.csv"))?)?;
        (design.test_sample(a.test_points, spec.target, &mut test_rng), design.truth(spec))
    };
    let d = test.contexts.ncols();
    let mut header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
    header.push("y".into());
    write_rows(
        &a.out.join("test.csv"),
        &header,
        test.contexts.outer_iter().zip(&test.outcomes).map(|(x, y)| {
            let mut row: Vec<String> = x.iter().map(|v| format!("{v:.17e}")).collect();
            row.push(format!("{y:.17e}"));
            row
        }),
    )?;
    std::fs::write(
        a.out.join("truth.json"),
        serde_json::to_string_pretty(&truth).map_err(|e| Failure::Other(e.to_string()))?,
    )?;
    eprintln!("wrote {} rows and {} test points to {}", spec.n, test.len(), a.out.display());
    Ok(())
}

fn execute(cells: Vec<Cell>, out: &Path) -> Result<u8, Failure> {
    let mut failures = 0;
    let mut summary = Vec::new();
    for cell in cells {
        eprintln!("== {} ({} replications)", cell.label, cell.config.replications);
        let done = AtomicUsize::new(0);
        let total = cell.config.replications;
        let report = run_experiment_with_progress(&cell.config, |_| {
            let k = done.fetch_add(1, Ordering::Relaxed) + 1;
            if k % 10 == 0 || k == total {
                eprintln!("   {k}/{total}");
            }
        })?;
        report.emit(out, &cell.label)?;
        print!("{}\n{}", cell.label, report.summary_table());
        failures += report.total_failures();
        for s in &report.summaries {
            let opt = |v: Option<f64>| v.map(format_real).unwrap_or_default();
            summary.push(vec![
                cell.label.clone(),
                s.method.name().to_string(),
                opt(s.mean_coverage),
                opt(s.sd_coverage),
                opt(s.mean_length),
                opt(s.mean_matched_cal),
                s.failures.to_string(),
            ]);
        }
    }
    let header: Vec<String> = ["scenario", "method", "mean_coverage", "sd_coverage", "mean_length", "mean_matched_cal", "failures"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    write_rows(&out.join("summary.csv"), &header, summary.into_iter())?;
    Ok(if failures > 0 { EXIT_PARTIAL } else { 0 })
}

fn run(a: RunArgs) -> Result<u8, Failure> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    if let Some(s) = a.seed {
        cfg.master_seed = s;
    }
    if let Some(r) = a.reps {
        cfg.replications = r;
    }
    if let Some(m) = &a.methods {
        cfg.methods = parse_methods(m)?;
    }
    cfg.validate()?;
    let label = a
        .config
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "report".into());
    execute(vec![Cell { label, config: cfg }], &a.out)
}

fn figure(a: FigureArgs, grid: fn(&PresetOptions) -> Vec<Cell>) -> Result<u8, Failure> {
    let opts = PresetOptions {
        replications: a.reps,
        master_seed: a.seed,
        test_points: a.test_points,
        n: a.n,
        methods: a.methods.as_deref().map(parse_methods).transpose()?,
    };
    let cells = grid(&opts);
    for c in &cells {
        c.config.validate()?;
    }
    execute(cells, &a.out)
}

fn parse_target(spec: &str, dim: usize, num_actions: usize) -> Result<SharedPolicy, Failure> {
    if spec == "uniform" {
        return Ok(std::sync::Arc::new(UniformPolicy { num_actions }));
    }
    if let Some(k) = spec.strip_prefix("action:") {
        let k: usize = k.parse().map_err(|_| Failure::Config(format!("bad action in {spec:?}")))?;
        if k >= num_actions {
            return Err(Failure::Config(format!("action {k} out of range")));
        }
        return Ok(DeterministicPolicy::new(num_actions, move |_| k).shared());
    }
    if let Some(path) = spec.strip_prefix("model:") {
        let model = LogisticModel::from_json(&std::fs::read_to_string(path)?)
            .map_err(|e| Failure::Config(format!("{path}: {e}")))?;
        if model.dim() != dim || model.num_actions != num_actions {
            return Err(Failure::Config(format!(
                "target model has {} features and {} actions; data has {dim} and {num_actions}",
                model.dim(),
                model.num_actions
            )));
        }
        return Ok(model.shared());
    }
    Err(Failure::Config(format!("unknown target {spec:?}")))
}

fn read_contexts(path: &Path, dim: usize) -> Result<ndarray::Array2<f64>, Failure> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Failure::Config(e.to_string()))?;
    let mut flat = Vec::new();
    let mut rows = 0;
    for rec in r.records() {
        let rec = rec.map_err(|e| Failure::Config(e.to_string()))?;
        if rec.len() < dim {
            return Err(Failure::Config(format!("context row {rows} has {} columns, need {dim}", rec.len())));
        }
        for v in rec.iter().take(dim) {
            flat.push(v.trim().parse::<f64>().map_err(|e| Failure::Config(format!("row {rows}: {e}")))?);
        }
        rows += 1;
    }
    ndarray::Array2::from_shape_vec((rows, dim), flat).map_err(|e| Failure::Config(e.to_string()))
}

fn predict(a: PredictArgs) -> Result<(), Failure> {
    let method: Method = a.method.parse()?;
    if !matches!(method, Method::Copp | Method::CoppIs | Method::CoppMs | Method::CoppIsMs) {
        return Err(Failure::Config(format!("{method} is not available for user data")));
    }
    let data = BanditDataset::read_csv(std::fs::File::open(&a.data)?, None)?;
    let target = parse_target(&a.target, data.dim(), data.num_actions())?;
    let contexts = read_contexts(&a.contexts, data.dim())?;
    let penalty = if a.ridge_cv { Penalty::RidgeCv } else { Penalty::None };
    let behavior = BehaviorSource::Logistic(penalty);
    let settings = CoppSettings {
        alpha: a.alpha,
        forest: ForestConfig::default().with_trees(a.trees),
        ..CoppSettings::default()
    };
    let err = |e: copp::ConformalError| Failure::Other(e.to_string());
    let sets: Vec<PredictionSet> = match method {
        Method::Copp | Method::CoppIs => {
            let mode = if method == Method::Copp {
                CalibrationMode::Matched
            } else {
                CalibrationMode::ImportanceSampling
            };
            fit_pipeline(&data, &target, &behavior, &settings, Sampler::Pseudo, a.seed)
                .and_then(|p| p.model(mode))
                .and_then(|m| m.predict_batch(contexts.view()))
                .map_err(err)?
        }
        _ => {
            let mode = if method == Method::CoppMs {
                CalibrationMode::Matched
            } else {
                CalibrationMode::ImportanceSampling
            };
            let ms = MultiSplitConfig::default().with_repetitions(a.splits);
            copp_ms_predict_batch(&data, &target, &behavior, &settings, &ms, &[mode], contexts.view(), a.seed)
                .map_err(err)?
                .remove(0)
                .sets
        }
    };
    let mut header: Vec<String> = (0..data.dim()).map(|j| format!("x{j}")).collect();
    header.extend(["piece".into(), "lower".into(), "upper".into()]);
    let rows = contexts.outer_iter().zip(&sets).flat_map(|(x, s)| {
        let x: Vec<String> = x.iter().map(|v| v.to_string()).collect();
        let pieces: Vec<(f64, f64)> = if s.is_empty() { vec![(f64::NAN, f64::NAN)] } else { s.pieces().to_vec() };
        pieces.into_iter().enumerate().map(move |(k, (lo, hi))| {
            let mut row = x.clone();
            row.extend([k.to_string(), format_real(lo), format_real(hi)]);
            row
        })
    });
    match &a.out {
        Some(p) => write_rows(p, &header, rows),
        None => {
            let mut w = csv::Writer::from_writer(std::io::stdout());
            let io = |e: csv::Error| Failure::Other(e.to_string());
            w.write_record(&header).map_err(io)?;
            for r in rows {
                w.write_record(&r).map_err(io)?;
            }
            w.flush()?;
            Ok(())
        }
    }
}
