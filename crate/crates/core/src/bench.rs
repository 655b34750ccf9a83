//! Simulation studies: data-generating processes, interior/exterior
//! classification, scoring and the experiment runner.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::causal::{self, CausalConfig, CausalDataset};
use crate::conformal::{self, EnsembleRegressor};
use crate::data::{mean_var, Dataset};
use crate::ensemble::{self, FitConfig};
use crate::error::{Error, Result};
use crate::gpx::{self, GPConfig};
use crate::interval::Interval;
use crate::rng::{Purpose, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegressionFn {
    Linear,
    SingleIndex,
    TrigPoly,
    Max,
}

impl RegressionFn {
    pub fn min_arity(self) -> usize {
        match self {
            RegressionFn::Linear | RegressionFn::SingleIndex => 1,
            RegressionFn::TrigPoly => 4,
            RegressionFn::Max => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RegressionFn::Linear => "linear",
            RegressionFn::SingleIndex => "single_index",
            RegressionFn::TrigPoly => "trig_poly",
            RegressionFn::Max => "max",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionDGP {
    pub name: RegressionFn,
    pub n_train: usize,
    pub n_test: usize,
    pub d: usize,
    pub train_sd: f64,
    pub test_sd: f64,
    pub noise_sd: f64,
}

impl RegressionDGP {
    pub fn new(name: RegressionFn, n_train: usize, n_test: usize, d: usize) -> Self {
        Self {
            name,
            n_train,
            n_test,
            d,
            train_sd: 1.0,
            test_sd: 1.5,
            noise_sd: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < self.name.min_arity() {
            return Err(Error::InvalidConfig(format!(
                "{} needs d >= {}, got {}",
                self.name.name(),
                self.name.min_arity(),
                self.d
            )));
        }
        if self.n_train < 2 || self.n_test < 1 {
            return Err(Error::InvalidConfig("need n_train >= 2 and n_test >= 1".into()));
        }
        Ok(())
    }

    /// Coefficients of the linear function.
    pub fn linear_gamma(d: usize) -> Vec<f64> {
        if d == 1 {
            return vec![-2.0];
        }
        (0..d).map(|j| -2.0 + 4.0 * j as f64 / (d - 1) as f64).collect()
    }

    /// Centre of the single-index function.
    pub fn single_index_gamma(d: usize) -> Vec<f64> {
        (0..d).map(|j| -1.5 + j as f64 / 3.0).collect()
    }

    pub fn f(&self, x: &[f64]) -> f64 {
        match self.name {
            RegressionFn::Linear => x.iter().zip(Self::linear_gamma(x.len())).map(|(a, g)| a * g).sum(),
            RegressionFn::SingleIndex => {
                let a: f64 = x
                    .iter()
                    .zip(Self::single_index_gamma(x.len()))
                    .map(|(v, g)| (v - g) * (v - g))
                    .sum();
                10.0 * a.sqrt() + (5.0 * a).sin()
            }
            RegressionFn::TrigPoly => 5.0 * (3.0 * x[0]).sin() + 2.0 * x[1] * x[1] + 3.0 * x[2] * x[3],
            RegressionFn::Max => x[0].max(x[1]).max(x[2]),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RegressionData {
    pub train: Dataset,
    /// Test covariates with the noisy response attached.
    pub test: Dataset,
    pub f_test: Vec<f64>,
}

fn normal_rows(n: usize, d: usize, sd: f64, rng: &mut RngStream) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| sd * rng.std_normal()).collect()).collect()
}

pub fn gen_regression(dgp: &RegressionDGP, seed: u64) -> Result<RegressionData> {
    dgp.validate()?;
    let mut rng = RngStream::for_purpose(seed, Purpose::Dgp, &[0]);
    let xtr = normal_rows(dgp.n_train, dgp.d, dgp.train_sd, &mut rng);
    let xte = normal_rows(dgp.n_test, dgp.d, dgp.test_sd, &mut rng);
    let ytr: Vec<f64> = xtr.iter().map(|x| dgp.f(x) + dgp.noise_sd * rng.std_normal()).collect();
    let f_test: Vec<f64> = xte.iter().map(|x| dgp.f(x)).collect();
    let yte: Vec<f64> = f_test.iter().map(|f| f + dgp.noise_sd * rng.std_normal()).collect();
    Ok(RegressionData {
        train: Dataset::from_rows(&xtr, Some(ytr))?,
        test: Dataset::from_rows(&xte, Some(yte))?,
        f_test,
    })
}

/// A test row is exterior when it leaves the training range on any column.
pub fn classify_exterior(train: &Dataset, test: &Dataset) -> Vec<bool> {
    let ranges = train.ranges();
    (0..test.n())
        .map(|i| {
            ranges
                .iter()
                .enumerate()
                .any(|(j, &(lo, hi))| test.get(i, j) < lo || test.get(i, j) > hi)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Interior,
    Exterior,
    All,
}

impl Region {
    pub fn name(self) -> &'static str {
        match self {
            Region::Interior => "interior",
            Region::Exterior => "exterior",
            Region::All => "all",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: String,
    pub region: Region,
    pub rmse: f64,
    pub coverage: f64,
    pub interval_length: f64,
    pub wall_time_s: f64,
    /// Points in the slice.
    pub count: usize,
}

/// Metrics for all, interior and exterior slices. An empty slice yields
/// `NaN` metrics and `count = 0`.
pub fn score(preds: &[f64], intervals: &[Interval], truth: &[f64], exterior: &[bool]) -> Vec<MetricsRow> {
    assert!(preds.len() == truth.len() && intervals.len() == truth.len() && exterior.len() == truth.len());
    [Region::All, Region::Interior, Region::Exterior]
        .into_iter()
        .map(|region| {
            let idx: Vec<usize> = (0..truth.len())
                .filter(|&i| match region {
                    Region::All => true,
                    Region::Interior => !exterior[i],
                    Region::Exterior => exterior[i],
                })
                .collect();
            let m = idx.len() as f64;
            let mse = idx.iter().map(|&i| (preds[i] - truth[i]).powi(2)).sum::<f64>() / m;
            let cov = idx.iter().filter(|&&i| intervals[i].contains(truth[i])).count() as f64 / m;
            let il = idx.iter().map(|&i| intervals[i].width()).sum::<f64>() / m;
            MetricsRow {
                method: String::new(),
                region,
                rmse: mse.sqrt(),
                coverage: cov,
                interval_length: il,
                wall_time_s: 0.0,
                count: idx.len(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MuType {
    Linear,
    Nonlinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauType {
    Homogeneous,
    Heterogeneous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalDGP {
    pub mu_type: MuType,
    pub tau_type: TauType,
    pub n: usize,
}

impl CausalDGP {
    pub fn new(mu_type: MuType, tau_type: TauType, n: usize) -> Self {
        Self { mu_type, tau_type, n }
    }

    /// Propensity offset.
    pub fn c(&self) -> f64 {
        match self.mu_type {
            MuType::Linear => 0.0,
            MuType::Nonlinear => 3.0,
        }
    }

    /// `g` on the binary covariate: 0 maps to level 1, 1 to level 2.
    pub fn g(x4: f64) -> f64 {
        if x4 < 0.5 {
            2.0
        } else {
            -1.0
        }
    }

    pub fn mu(&self, x: &[f64]) -> f64 {
        match self.mu_type {
            MuType::Linear => 1.0 + Self::g(x[3]) + x[0] * x[2],
            MuType::Nonlinear => -6.0 + Self::g(x[3]) + 6.0 * (x[2] - 1.0).abs(),
        }
    }

    pub fn tau(&self, x: &[f64]) -> f64 {
        match self.tau_type {
            TauType::Homogeneous => 3.0,
            TauType::Heterogeneous => 1.0 + 2.0 * x[1] * x[4],
        }
    }
}

#[derive(Debug, Clone)]
pub struct CausalData {
    pub data: CausalDataset,
    pub cate: Vec<f64>,
    pub pi: Vec<f64>,
}

fn std_normal_cdf(x: f64) -> f64 {
    Normal::new(0.0, 1.0).expect("standard normal").cdf(x)
}

fn sample_sd(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let (_, var) = mean_var(v);
    if n > 1.0 {
        (var * n / (n - 1.0)).sqrt()
    } else {
        0.0
    }
}

/// Five covariates: three standard normals, a fair coin and a uniform
/// three-level categorical. The true propensity is `1` or `0` on a sizeable
/// share of rows, so overlap fails there.
pub fn gen_causal(dgp: &CausalDGP, seed: u64) -> Result<CausalData> {
    if dgp.n < 2 {
        return Err(Error::InvalidConfig("causal dgp needs n >= 2".into()));
    }
    let mut rng = RngStream::for_purpose(seed, Purpose::Dgp, &[1]);
    let rows: Vec<Vec<f64>> = (0..dgp.n)
        .map(|_| {
            let x1 = rng.std_normal();
            let x2 = rng.std_normal();
            let x3 = rng.std_normal();
            let x4 = f64::from(u8::from(rng.uniform() < 0.5));
            let x5 = (rng.below(3) + 1) as f64;
            vec![x1, x2, x3, x4, x5]
        })
        .collect();
    let mu: Vec<f64> = rows.iter().map(|x| dgp.mu(x)).collect();
    let cate: Vec<f64> = rows.iter().map(|x| dgp.tau(x)).collect();
    let s = sample_sd(&mu);
    let s = if s > 0.0 { s } else { 1.0 };
    let pi: Vec<f64> = rows
        .iter()
        .zip(&mu)
        .map(|(x, &m)| {
            let u = rng.uniform();
            let h = 1.1 * std_normal_cdf(3.0 * m / s - 0.5 * x[0] - dgp.c()) - 0.15 + u / 10.0;
            h.clamp(0.0, 1.0)
        })
        .collect();
    let z: Vec<bool> = pi.iter().map(|&p| rng.uniform() < p).collect();
    let signal: Vec<f64> = (0..dgp.n).map(|i| mu[i] + cate[i] * f64::from(u8::from(z[i]))).collect();
    let noise_sd = 0.5 * sample_sd(&signal);
    let y: Vec<f64> = signal.iter().map(|v| v + noise_sd * rng.std_normal()).collect();
    let x = Dataset::from_rows(&rows, None)?;
    Ok(CausalData {
        data: CausalDataset::new(x, z, y, None)?,
        cate,
        pi,
    })
}

/// One-dimensional demonstration: `y = sin(x) + 0.25 x z` on `x ~ U(-10, 10)`
/// with `pi(x) = clamp(0.08 x + 0.5, 0, 1)`, so treatment is certain for
/// `x > 6.25` and absent for `x < -6.25`.
pub fn gen_causal_toy(n: usize, seed: u64) -> Result<CausalData> {
    let mut rng = RngStream::for_purpose(seed, Purpose::Dgp, &[2]);
    let xs: Vec<f64> = (0..n).map(|_| 20.0 * rng.uniform() - 10.0).collect();
    let pi: Vec<f64> = xs.iter().map(|x| (0.08 * x + 0.5).clamp(0.0, 1.0)).collect();
    let z: Vec<bool> = pi.iter().map(|&p| rng.uniform() < p).collect();
    let f: Vec<f64> = xs
        .iter()
        .zip(&z)
        .map(|(x, &t)| x.sin() + 0.25 * x * f64::from(u8::from(t)))
        .collect();
    let noise_sd = 0.2 * sample_sd(&f);
    let y: Vec<f64> = f.iter().map(|v| v + noise_sd * rng.std_normal()).collect();
    let rows: Vec<Vec<f64>> = xs.iter().map(|&x| vec![x]).collect();
    Ok(CausalData {
        data: CausalDataset::new(Dataset::from_rows(&rows, None)?, z, y, None)?,
        cate: xs.iter().map(|x| 0.25 * x).collect(),
        pi,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DgpSpec {
    Regression {
        name: RegressionFn,
        #[serde(default = "default_n")]
        n_train: usize,
        #[serde(default = "default_n")]
        n_test: usize,
        #[serde(default = "default_d")]
        d: usize,
        #[serde(default = "one")]
        noise_sd: f64,
    },
    Causal {
        mu_type: MuType,
        tau_type: TauType,
        #[serde(default = "default_causal_n")]
        n: usize,
    },
    CausalToy {
        #[serde(default = "default_causal_n")]
        n: usize,
    },
}

fn default_n() -> usize {
    200
}
fn default_d() -> usize {
    10
}
fn default_causal_n() -> usize {
    500
}
fn one() -> f64 {
    1.0
}

/// Model settings shared by the methods of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentParams {
    pub num_trees: usize,
    pub num_sweeps: usize,
    pub burn_in: usize,
    pub theta: f64,
    pub tau_gp: Option<f64>,
    pub gp_subsample: usize,
    pub cube_coverage: f64,
    pub folds: usize,
    pub l_mu: usize,
    pub l_tau: usize,
    pub n_min_arm: usize,
}

impl Default for ExperimentParams {
    fn default() -> Self {
        Self {
            num_trees: 20,
            num_sweeps: 100,
            burn_in: 15,
            theta: GPConfig::DEFAULT_THETA,
            tau_gp: None,
            gp_subsample: 100,
            cube_coverage: 0.95,
            folds: 10,
            l_mu: 30,
            l_tau: 20,
            n_min_arm: 20,
        }
    }
}

/// Experiment file. `sizes` repeats the whole study at each training size
/// (regression: `n_train`, causal: `n`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub dgp: DgpSpec,
    #[serde(default)]
    pub params: ExperimentParams,
    pub methods: Vec<String>,
    #[serde(default = "default_reps")]
    pub reps: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output: Option<String>,
    #[serde(default)]
    pub sizes: Option<Vec<usize>>,
}

fn default_reps() -> usize {
    10
}
fn default_alpha() -> f64 {
    0.1
}

pub const REGRESSION_METHODS: [&str; 4] = ["xbart", "xbart-gp", "jackknife+", "cv+"];
pub const CAUSAL_METHODS: [&str; 2] = ["xbcf", "xbcf-gp"];

impl ExperimentSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text).map_err(|e| Error::InvalidConfig(format!("experiment spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let allowed: &[&str] = match self.dgp {
            DgpSpec::Regression { .. } => &REGRESSION_METHODS,
            _ => &CAUSAL_METHODS,
        };
        if self.methods.is_empty() {
            return Err(Error::InvalidConfig("experiment lists no methods".into()));
        }
        if let Some(m) = self.methods.iter().find(|m| !allowed.contains(&m.as_str())) {
            return Err(Error::InvalidConfig(format!("unknown method {m:?}; expected one of {allowed:?}")));
        }
        if self.reps < 1 {
            return Err(Error::InvalidConfig("reps must be >= 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidConfig("alpha must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// One report line. `rep` is the replicate index, or `mean` / `sd` for
/// aggregates over replicates.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub method: String,
    pub region: Region,
    pub rep: String,
    pub rmse: f64,
    pub coverage: f64,
    pub il: f64,
    pub time_s: f64,
    pub n: usize,
    pub error: String,
}

pub const REPORT_COLUMNS: [&str; 9] = ["method", "region", "rep", "rmse", "coverage", "il", "time_s", "n", "error"];

/// Predictions of one method on one replicate.
struct MethodOutput {
    mean: Vec<f64>,
    intervals: Vec<Interval>,
}

fn rep_seed(seed: u64, n: usize, rep: usize) -> u64 {
    use rand::RngCore;
    RngStream::for_purpose(seed, Purpose::Experiment, &[n as u64, rep as u64]).next_u64()
}

fn run_regression_method(
    method: &str,
    data: &RegressionData,
    p: &ExperimentParams,
    alpha: f64,
    seed: u64,
) -> Result<MethodOutput> {
    let y = data.train.require_y()?;
    let test = data.test.without_y();
    let mut cfg = FitConfig::for_response(y, p.num_trees, p.num_sweeps, p.burn_in);
    cfg.tree_prior.n_min = cfg.tree_prior.n_min.min(data.train.n());
    match method {
        "xbart" => {
            let draws = ensemble::fit(&data.train, &cfg, seed)?;
            let pr = ensemble::predict(&draws, &test, alpha, seed)?;
            Ok(MethodOutput {
                mean: pr.mean,
                intervals: pr.intervals,
            })
        }
        "xbart-gp" => {
            let draws = ensemble::fit(&data.train, &cfg, seed)?;
            let mut g = GPConfig::for_response(y, p.num_trees);
            g.theta = p.theta;
            g.subsample = p.gp_subsample;
            g.hypercube_coverage = p.cube_coverage;
            if let Some(t) = p.tau_gp {
                g.tau_gp = t;
            }
            let pr = gpx::predict_gp(&draws, &data.train, &test, alpha, &g, seed)?;
            Ok(MethodOutput {
                mean: pr.prediction.mean,
                intervals: pr.prediction.intervals,
            })
        }
        "jackknife+" | "cv+" => {
            let reg = EnsembleRegressor {
                num_trees: p.num_trees,
                num_sweeps: p.num_sweeps,
                burn_in: p.burn_in,
            };
            let pr = if method == "cv+" {
                conformal::cv_plus(&reg, &data.train, &test, p.folds.min(data.train.n()), alpha, seed)?
            } else {
                conformal::jackknife_plus(&reg, &data.train, &test, alpha, seed)?
            };
            Ok(MethodOutput {
                mean: pr.mean,
                intervals: pr.intervals,
            })
        }
        m => Err(Error::InvalidConfig(format!("unknown method {m:?}"))),
    }
}

fn run_causal_method(method: &str, data: &CausalData, p: &ExperimentParams, alpha: f64, seed: u64) -> Result<MethodOutput> {
    let mut cfg = CausalConfig::new(p.l_mu, p.l_tau);
    cfg.num_sweeps = p.num_sweeps;
    cfg.burn_in = p.burn_in;
    cfg.n_min_arm = p.n_min_arm;
    let draws = causal::fit_xbcf(&data.data, &cfg, seed)?;
    let pr = match method {
        "xbcf" => causal::predict_cate(&draws, &data.data.x, alpha)?,
        "xbcf-gp" => {
            let opts = causal::CausalGpOptions {
                theta: p.theta,
                tau_gp: p.tau_gp,
                subsample: p.gp_subsample,
                hypercube_coverage: p.cube_coverage,
                ..Default::default()
            };
            causal::predict_cate_gp(&draws, &data.data, &data.data.x, alpha, &opts, seed)?.prediction
        }
        m => return Err(Error::InvalidConfig(format!("unknown method {m:?}"))),
    };
    Ok(MethodOutput {
        mean: pr.mean,
        intervals: pr.intervals,
    })
}

fn failed_rows(method: &str, rep: usize, n: usize, err: &Error, secs: f64) -> Vec<ReportRow> {
    [Region::All, Region::Interior, Region::Exterior]
        .into_iter()
        .map(|region| ReportRow {
            method: method.to_owned(),
            region,
            rep: rep.to_string(),
            rmse: f64::NAN,
            coverage: f64::NAN,
            il: f64::NAN,
            time_s: secs,
            n,
            error: err.to_string().replace(['\n', ','], " "),
        })
        .collect()
}

/// Runs one replicate of every method at training size `n`.
fn run_rep(spec: &ExperimentSpec, n: usize, rep: usize) -> Vec<ReportRow> {
    let seed = rep_seed(spec.seed, n, rep);
    enum Generated {
        Reg(RegressionData),
        Causal(CausalData),
    }
    let generated = match &spec.dgp {
        DgpSpec::Regression {
            name,
            n_test,
            d,
            noise_sd,
            ..
        } => {
            let mut dgp = RegressionDGP::new(*name, n, *n_test, *d);
            dgp.noise_sd = *noise_sd;
            gen_regression(&dgp, seed).map(Generated::Reg)
        }
        DgpSpec::Causal { mu_type, tau_type, .. } => {
            gen_causal(&CausalDGP::new(*mu_type, *tau_type, n), seed).map(Generated::Causal)
        }
        DgpSpec::CausalToy { .. } => gen_causal_toy(n, seed).map(Generated::Causal),
    };
    let generated = match generated {
        Ok(g) => g,
        Err(e) => return spec.methods.iter().flat_map(|m| failed_rows(m, rep, n, &e, 0.0)).collect(),
    };
    let mut rows = Vec::new();
    for method in &spec.methods {
        let start = Instant::now();
        let (out, truth, exterior) = match &generated {
            Generated::Reg(d) => (
                run_regression_method(method, d, &spec.params, spec.alpha, seed),
                d.test.y().expect("generated test response").to_vec(),
                classify_exterior(&d.train, &d.test),
            ),
            Generated::Causal(d) => (
                run_causal_method(method, d, &spec.params, spec.alpha, seed),
                d.cate.clone(),
                d.pi.iter().map(|&p| p == 0.0 || p == 1.0).collect(),
            ),
        };
        let secs = start.elapsed().as_secs_f64();
        match out {
            Ok(o) => rows.extend(score(&o.mean, &o.intervals, &truth, &exterior).into_iter().map(|m| ReportRow {
                method: method.clone(),
                region: m.region,
                rep: rep.to_string(),
                rmse: m.rmse,
                coverage: m.coverage,
                il: m.interval_length,
                time_s: secs,
                n,
                error: String::new(),
            })),
            Err(e) => rows.extend(failed_rows(method, rep, n, &e, secs)),
        }
    }
    rows
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let m = v.len() as f64;
    let mean = v.iter().sum::<f64>() / m;
    let sd = if v.len() > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

/// Mean and standard deviation over replicates for every
/// (size, method, region), skipping failed replicates and empty slices.
pub fn aggregate(rows: &[ReportRow]) -> Vec<ReportRow> {
    let mut keys: Vec<(usize, String, Region)> = Vec::new();
    for r in rows {
        let k = (r.n, r.method.clone(), r.region);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    let mut out = Vec::new();
    for (n, method, region) in keys {
        let group: Vec<&ReportRow> = rows
            .iter()
            .filter(|r| r.n == n && r.method == method && r.region == region && r.error.is_empty() && !r.rmse.is_nan())
            .collect();
        if group.is_empty() {
            continue;
        }
        let col = |f: fn(&ReportRow) -> f64| mean_sd(&group.iter().map(|r| f(r)).collect::<Vec<_>>());
        let rmse = col(|r| r.rmse);
        let cov = col(|r| r.coverage);
        let il = col(|r| r.il);
        let t = col(|r| r.time_s);
        for (label, pick) in [("mean", 0usize), ("sd", 1)] {
            let g = |v: (f64, f64)| if pick == 0 { v.0 } else { v.1 };
            out.push(ReportRow {
                method: method.clone(),
                region,
                rep: label.to_owned(),
                rmse: g(rmse),
                coverage: g(cov),
                il: g(il),
                time_s: g(t),
                n,
                error: String::new(),
            });
        }
    }
    out
}

/// Runs every (size, replicate) and returns the per-replicate rows followed
/// by the aggregates.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<Vec<ReportRow>> {
    spec.validate()?;
    let base_n = match spec.dgp {
        DgpSpec::Regression { n_train, .. } => n_train,
        DgpSpec::Causal { n, .. } | DgpSpec::CausalToy { n } => n,
    };
    let sizes = spec.sizes.clone().unwrap_or_else(|| vec![base_n]);
    let jobs: Vec<(usize, usize)> = sizes.iter().flat_map(|&n| (0..spec.reps).map(move |r| (n, r))).collect();
    let mut rows: Vec<ReportRow> = jobs.par_iter().flat_map_iter(|&(n, rep)| run_rep(spec, n, rep)).collect();
    let agg = aggregate(&rows);
    rows.extend(agg);
    Ok(rows)
}

pub fn write_report(path: impl AsRef<std::path::Path>, rows: &[ReportRow]) -> Result<()> {
    let path = path.as_ref();
    let text = report_to_string(rows)?;
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn report_to_string(rows: &[ReportRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::InvalidData(format!("report: {e}"));
    w.write_record(REPORT_COLUMNS).map_err(err)?;
    for r in rows {
        w.write_record([
            r.method.clone(),
            r.region.name().to_owned(),
            r.rep.clone(),
            format!("{}", r.rmse),
            format!("{}", r.coverage),
            format!("{}", r.il),
            format!("{}", r.time_s),
            r.n.to_string(),
            r.error.clone(),
        ])
        .map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidData(format!("report: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_coefficients() {
        let g = RegressionDGP::linear_gamma(10);
        assert_eq!(g[0], -2.0);
        assert_eq!(g[9], 2.0);
        assert!((g[1] + 1.555_555_555_555_555_6).abs() < 1e-12);
        let dgp = RegressionDGP::new(RegressionFn::Linear, 10, 10, 10);
        assert_eq!(dgp.f(&[0.0; 10]), 0.0);
    }

    #[test]
    fn max_and_single_index_values() {
        let m = RegressionDGP::new(RegressionFn::Max, 10, 10, 5);
        assert_eq!(m.f(&[1.0, 0.0, -1.0, 7.0, 7.0]), 1.0);
        let si = RegressionDGP::new(RegressionFn::SingleIndex, 10, 10, 4);
        assert_eq!(si.f(&RegressionDGP::single_index_gamma(4)), 0.0);
    }

    #[test]
    fn arity_is_checked() {
        assert!(RegressionDGP::new(RegressionFn::TrigPoly, 10, 10, 3).validate().is_err());
        assert!(RegressionDGP::new(RegressionFn::Max, 10, 10, 2).validate().is_err());
        assert!(RegressionDGP::new(RegressionFn::TrigPoly, 10, 10, 4).validate().is_ok());
    }

    #[test]
    fn hand_scored_case() {
        let iv = |lo, hi| Interval { lo, hi, level: 0.9 };
        let rows = score(&[1.0, 1.0], &[iv(-1.0, 1.0), iv(0.0, 1.0)], &[0.0, 2.0], &[false, true]);
        let all = &rows[0];
        assert_eq!(all.region, Region::All);
        assert!((all.rmse - 1.0).abs() < 1e-15);
        assert_eq!(all.coverage, 0.5);
        assert_eq!(all.interval_length, 1.5);
        assert_eq!((rows[1].coverage, rows[2].coverage), (1.0, 0.0));
    }

    #[test]
    fn exact_predictions_score_perfectly() {
        let t = [0.5, -2.0, 3.0];
        let ivs: Vec<Interval> = t.iter().map(|&v| Interval { lo: v, hi: v, level: 0.9 }).collect();
        let r = &score(&t, &ivs, &t, &[false; 3])[0];
        assert_eq!((r.rmse, r.coverage, r.interval_length), (0.0, 1.0, 0.0));
    }

    #[test]
    fn causal_truths() {
        let homo = CausalDGP::new(MuType::Linear, TauType::Homogeneous, 10);
        assert_eq!(homo.tau(&[0.3, 1.0, 0.0, 1.0, 2.0]), 3.0);
        let het = CausalDGP::new(MuType::Linear, TauType::Heterogeneous, 10);
        for x5 in [1.0, 2.0, 3.0] {
            assert_eq!(het.tau(&[0.3, 0.0, 0.0, 1.0, x5]), 1.0);
        }
        assert_eq!(CausalDGP::g(0.0), 2.0);
        assert_eq!(CausalDGP::g(1.0), -1.0);
    }

    #[test]
    fn spec_parses_with_defaults() {
        let s = ExperimentSpec::from_json(
            r#"{"dgp": {"kind": "regression", "name": "linear"}, "methods": ["xbart", "xbart-gp"], "reps": 2}"#,
        )
        .unwrap();
        assert_eq!(s.alpha, 0.1);
        assert_eq!(s.params.num_trees, 20);
        assert!(ExperimentSpec::from_json(r#"{"dgp": {"kind": "regression", "name": "linear"}, "methods": ["rf"]}"#).is_err());
    }
}
