use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use leafgp::bench::{self, ExperimentSpec};
use leafgp::causal::{self, CausalConfig, CausalDataset, CausalGpOptions};
use leafgp::conformal::{self, EnsembleRegressor};
use leafgp::ensemble::{self, FitConfig};
use leafgp::gpx::{self, GPConfig};
use leafgp::io::{self, Table};
use leafgp::{Dataset, Error, ErrorKind, Interval, Result};

/// Tree ensembles with per-leaf Gaussian-process extrapolation.
#[derive(Parser)]
#[command(name = "leafgp", version)]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the regression ensemble.
    Fit(FitArgs),
    /// Constant-leaf predictive intervals.
    Predict(PredictArgs),
    /// Predictive intervals with per-leaf GP extrapolation.
    GpPredict(GpPredictArgs),
    /// Fit the causal forest.
    CausalFit(CausalFitArgs),
    /// Treatment-effect intervals, optionally GP-extrapolated.
    CausalPredict(CausalPredictArgs),
    /// Run a simulation experiment.
    Bench(BenchArgs),
    /// Print version and model schema versions.
    Version,
}

#[derive(Args)]
struct CsvArgs {
    /// Input CSV files have no header row; columns are then named by 0-based index.
    #[arg(long)]
    no_header: bool,
    /// Response column (header name or 0-based index).
    #[arg(long)]
    response_col: Option<String>,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    train: PathBuf,
    #[command(flatten)]
    csv: CsvArgs,
    #[arg(long, default_value_t = 20)]
    trees: usize,
    #[arg(long, default_value_t = 100)]
    sweeps: usize,
    #[arg(long, default_value_t = 15)]
    burnin: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output model file.
    #[arg(long)]
    model: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[command(flatten)]
    csv: CsvArgs,
    /// Conformal intervals from held-out refits instead of the posterior.
    #[arg(long, value_enum)]
    baseline: Option<Baseline>,
    /// Folds for cv+.
    #[arg(long, default_value_t = 10)]
    folds: usize,
    /// Training data; required with --baseline.
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    #[value(name = "jackknife+")]
    JackknifePlus,
    #[value(name = "cv+")]
    CvPlus,
}

#[derive(Args)]
struct GpArgs {
    #[arg(long, default_value_t = GPConfig::DEFAULT_THETA)]
    theta: f64,
    /// Kernel scale (default: training variance over the tree count).
    #[arg(long)]
    tau_gp: Option<f64>,
    #[arg(long, default_value_t = 100)]
    gp_subsample: usize,
    #[arg(long, default_value_t = 0.95)]
    cube_coverage: f64,
}

#[derive(Args)]
struct GpPredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// The labelled data the model was fitted on.
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    test: PathBuf,
    #[command(flatten)]
    csv: CsvArgs,
    #[command(flatten)]
    gp: GpArgs,
    /// Intervals for f rather than y: no observation noise is added to the draws.
    #[arg(long)]
    noiseless: bool,
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CausalCols {
    /// 0/1 treatment column.
    #[arg(long)]
    treatment_col: Option<String>,
    /// Optional propensity column; estimated when absent.
    #[arg(long)]
    pihat_col: Option<String>,
}

#[derive(Args)]
struct CausalFitArgs {
    #[arg(long)]
    train: PathBuf,
    #[command(flatten)]
    csv: CsvArgs,
    #[command(flatten)]
    cols: CausalCols,
    #[arg(long, default_value_t = 30)]
    lmu: usize,
    #[arg(long, default_value_t = 20)]
    ltau: usize,
    #[arg(long, default_value_t = 60)]
    sweeps: usize,
    #[arg(long, default_value_t = 20)]
    burnin: usize,
    #[arg(long, default_value_t = 20)]
    nmin_arm: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    model: PathBuf,
}

#[derive(Args)]
struct CausalPredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// Training data; required with --gp.
    #[arg(long)]
    train: Option<PathBuf>,
    #[command(flatten)]
    csv: CsvArgs,
    #[command(flatten)]
    cols: CausalCols,
    /// Extrapolate treatment effects outside each leaf's overlap region.
    #[arg(long)]
    gp: bool,
    #[command(flatten)]
    gp_args: GpArgs,
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    spec: PathBuf,
    /// Report CSV (default: the spec's `output`, else stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn usage(msg: impl Into<String>) -> Error {
    Error::InvalidConfig(msg.into())
}

fn read(path: &Path, csv: &CsvArgs) -> Result<Table> {
    io::read_table(path, !csv.no_header)
}

fn required_col(t: &Table, key: &Option<String>, flag: &str) -> Result<usize> {
    match key {
        Some(k) => t.column_index(k),
        None => Err(usage(format!("{flag} is required"))),
    }
}

/// Covariates of a test file: drops the named non-covariate columns that are
/// present whenever the file is wider than the model expects.
fn test_covariates(t: &Table, keys: &[&Option<String>], n_features: usize) -> Result<Dataset> {
    let drop: Vec<usize> = if t.ncols() > n_features {
        keys.iter()
            .filter_map(|k| k.as_ref())
            .filter_map(|k| t.column_index(k).ok())
            .collect()
    } else {
        Vec::new()
    };
    t.into_dataset(None, &drop)
}

fn write_prediction(out: &Path, mean: &[f64], intervals: &[Interval], exterior: &[f64]) -> Result<()> {
    let ids: Vec<f64> = (0..mean.len()).map(|i| i as f64).collect();
    let lo: Vec<f64> = intervals.iter().map(|iv| iv.lo).collect();
    let hi: Vec<f64> = intervals.iter().map(|iv| iv.hi).collect();
    io::write_csv(
        out,
        &[
            ("point_id", &ids),
            ("mean", mean),
            ("lo", &lo),
            ("hi", &hi),
            ("exterior_any_leaf", exterior),
        ],
    )
}

fn fit(a: &FitArgs) -> Result<()> {
    let t = read(&a.train, &a.csv)?;
    let rc = required_col(&t, &a.csv.response_col, "--response-col")?;
    let data = t.into_dataset(Some(rc), &[])?;
    let cfg = FitConfig::for_response(data.require_y()?, a.trees, a.sweeps, a.burnin);
    let draws = ensemble::fit(&data, &cfg, a.seed)?;
    ensemble::save(&draws, &a.model)
}

fn predict(a: &PredictArgs) -> Result<()> {
    let draws = ensemble::load(&a.model)?;
    let t = read(&a.test, &a.csv)?;
    let xte = test_covariates(&t, &[&a.csv.response_col], draws.n_features)?;
    let zeros = vec![0.0; xte.n()];
    let Some(baseline) = a.baseline else {
        let p = ensemble::predict(&draws, &xte, a.alpha, a.seed)?;
        return write_prediction(&a.out, &p.mean, &p.intervals, &zeros);
    };
    let Some(train_path) = &a.train else {
        return Err(usage("--baseline needs --train: the conformal intervals refit the ensemble on held-out splits"));
    };
    let tt = read(train_path, &a.csv)?;
    let rc = required_col(&tt, &a.csv.response_col, "--response-col")?;
    let train = tt.into_dataset(Some(rc), &[])?;
    let reg = EnsembleRegressor {
        num_trees: draws.config.num_trees,
        num_sweeps: draws.config.num_sweeps,
        burn_in: draws.config.burn_in,
    };
    let p = match baseline {
        Baseline::JackknifePlus => conformal::jackknife_plus(&reg, &train, &xte, a.alpha, a.seed)?,
        Baseline::CvPlus => conformal::cv_plus(&reg, &train, &xte, a.folds, a.alpha, a.seed)?,
    };
    write_prediction(&a.out, &p.mean, &p.intervals, &zeros)
}

fn gp_predict(a: &GpPredictArgs) -> Result<()> {
    let Some(train_path) = &a.train else {
        return Err(usage(
            "gp-predict needs --train: each leaf GP conditions on the training rows and partial residuals of that leaf",
        ));
    };
    let draws = ensemble::load(&a.model)?;
    let tt = read(train_path, &a.csv)?;
    let rc = required_col(&tt, &a.csv.response_col, "--response-col")?;
    let train = tt.into_dataset(Some(rc), &[])?;
    let t = read(&a.test, &a.csv)?;
    let xte = test_covariates(&t, &[&a.csv.response_col], draws.n_features)?;
    let mut cfg = GPConfig::for_response(train.require_y()?, draws.num_trees());
    cfg.theta = a.gp.theta;
    if let Some(tau) = a.gp.tau_gp {
        cfg.tau_gp = tau;
    }
    cfg.subsample = a.gp.gp_subsample;
    cfg.hypercube_coverage = a.gp.cube_coverage;
    let p = gpx::predict_gp_with(&draws, &train, &xte, a.alpha, &cfg, a.seed, !a.noiseless)?;
    write_prediction(&a.out, &p.prediction.mean, &p.prediction.intervals, &p.exterior_fraction)
}

fn causal_data(t: &Table, csv: &CsvArgs, cols: &CausalCols) -> Result<CausalDataset> {
    let rc = required_col(t, &csv.response_col, "--response-col")?;
    let zc = required_col(t, &cols.treatment_col, "--treatment-col")?;
    let pc = cols.pihat_col.as_ref().map(|k| t.column_index(k)).transpose()?;
    let z = t
        .column(zc)
        .iter()
        .enumerate()
        .map(|(i, &v)| match v {
            0.0 => Ok(false),
            1.0 => Ok(true),
            _ => Err(Error::InvalidData(format!("treatment at data row {} is {v}, expected 0 or 1", i + 1))),
        })
        .collect::<Result<Vec<bool>>>()?;
    let mut drop = vec![rc, zc];
    drop.extend(pc);
    let x = t.into_dataset(None, &drop)?;
    CausalDataset::new(x, z, t.column(rc), pc.map(|c| t.column(c)))
}

fn causal_fit(a: &CausalFitArgs) -> Result<()> {
    let t = read(&a.train, &a.csv)?;
    let data = causal_data(&t, &a.csv, &a.cols)?;
    let mut cfg = CausalConfig::new(a.lmu, a.ltau);
    cfg.num_sweeps = a.sweeps;
    cfg.burn_in = a.burnin;
    cfg.n_min_arm = a.nmin_arm;
    let draws = causal::fit_xbcf(&data, &cfg, a.seed)?;
    causal::save(&draws, &a.model)
}

fn causal_predict(a: &CausalPredictArgs) -> Result<()> {
    let draws = causal::load(&a.model)?;
    let t = read(&a.test, &a.csv)?;
    let keys = [&a.csv.response_col, &a.cols.treatment_col, &a.cols.pihat_col];
    let xte = test_covariates(&t, &keys, draws.n_features)?;
    if !a.gp {
        let p = causal::predict_cate(&draws, &xte, a.alpha)?;
        return write_prediction(&a.out, &p.mean, &p.intervals, &vec![0.0; xte.n()]);
    }
    let Some(train_path) = &a.train else {
        return Err(usage(
            "causal-predict --gp needs --train: each leaf GP conditions on the training rows inside the leaf's overlap region",
        ));
    };
    let train = causal_data(&read(train_path, &a.csv)?, &a.csv, &a.cols)?;
    let opts = CausalGpOptions {
        theta: a.gp_args.theta,
        tau_gp: a.gp_args.tau_gp,
        subsample: a.gp_args.gp_subsample,
        hypercube_coverage: a.gp_args.cube_coverage,
        ..CausalGpOptions::default()
    };
    let p = causal::predict_cate_gp(&draws, &train, &xte, a.alpha, &opts, a.seed)?;
    write_prediction(&a.out, &p.prediction.mean, &p.prediction.intervals, &p.exterior_fraction)
}

fn run_bench(a: &BenchArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.spec).map_err(|source| Error::Io {
        path: a.spec.clone(),
        source,
    })?;
    let spec = ExperimentSpec::from_json(&text)?;
    let rows = bench::run_experiment(&spec)?;
    match a.out.clone().or_else(|| spec.output.clone().map(PathBuf::from)) {
        Some(path) => bench::write_report(path, &rows),
        None => {
            print!("{}", bench::report_to_string(&rows)?);
            Ok(())
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| usage(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::Fit(a) => fit(a),
        Command::Predict(a) => predict(a),
        Command::GpPredict(a) => gp_predict(a),
        Command::CausalFit(a) => causal_fit(a),
        Command::CausalPredict(a) => causal_predict(a),
        Command::Bench(a) => run_bench(a),
        Command::Version => {
            println!(
                "leafgp {} (model schema {}, causal schema {})",
                env!("CARGO_PKG_VERSION"),
                ensemble::MODEL_SCHEMA_VERSION,
                causal::CAUSAL_SCHEMA_VERSION
            );
            Ok(())
        }
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind as K;
            if matches!(e.kind(), K::DisplayHelp | K::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("leafgp: usage error: {}", one_line(first));
            return ExitCode::from(1);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (label, code) = match e.kind() {
                ErrorKind::Usage => ("usage error", 1),
                ErrorKind::Data => ("data error", 2),
                ErrorKind::Numerical => ("numerical failure", 3),
            };
            eprintln!("leafgp: {label}: {}", one_line(&e.to_string()));
            ExitCode::from(code)
        }
    }
}
