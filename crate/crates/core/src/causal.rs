//! Two-forest causal model with GP extrapolation of treatment effects.
//!
//! The standardized response follows
//! `y = a mu(x, pihat) + b_z tau(x) + e`, `e ~ N(0, sigma_z^2)`, where `mu`
//! is a prognostic forest, `tau` a treatment forest and `b_0, b_1`
//! arm-specific scalars. The conditional average treatment effect is
//! `(b_1 - b_0) tau(x)`, reported on the original response scale.
//!
//! Treatment-tree splits must leave enough treated and control rows in
//! each child. At prediction time each treatment-tree leaf's overlap box
//! (intersection of the treated and control boxes) separates test rows that
//! keep the leaf value from those extrapolated by a GP conditioned on the
//! overlap training rows only.

use std::fs;
use std::path::Path;

use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{mean_var, Dataset};
use crate::ensemble::{self, FitConfig, SigmaPrior};
use crate::error::{Error, Result};
use crate::gpx::{self, GPConfig, Hypercube, Noise, StreamCoords};
use crate::interval::{empirical_interval, Interval};
use crate::rng::{Purpose, RngStream};
use crate::tree::{
    grow_from_root_with, sample_leaf_params_with, ArmConstraint, NodeKind, Precision, Tree, TreePrior,
};

pub const CAUSAL_SCHEMA_VERSION: u32 = 1;

const FOREST_MU: u64 = 1;
const FOREST_TAU: u64 = 2;

/// Starting values of `(a, b_0, b_1, sigma_0^2, sigma_1^2)`.
const INITIAL: Scalars = Scalars {
    a: 1.0,
    b0: -0.5,
    b1: 0.5,
    sigma2_0: 1.0,
    sigma2_1: 1.0,
};

#[derive(Debug, Clone, PartialEq)]
pub struct CausalDataset {
    pub x: Dataset,
    pub z: Vec<bool>,
    pub y: Vec<f64>,
    pub pihat: Option<Vec<f64>>,
}

impl CausalDataset {
    pub fn new(x: Dataset, z: Vec<bool>, y: Vec<f64>, pihat: Option<Vec<f64>>) -> Result<Self> {
        let n = x.n();
        if z.len() != n || y.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{n} rows but {} treatments and {} responses",
                z.len(),
                y.len()
            )));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("non-finite response".into()));
        }
        let treated = z.iter().filter(|&&t| t).count();
        if treated == 0 || treated == n {
            return Err(Error::InvalidData("both treatment arms must be present".into()));
        }
        if let Some(p) = &pihat {
            if p.len() != n || p.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::InvalidData("propensities must lie in [0, 1], one per row".into()));
            }
        }
        Ok(Self { x, z, y, pihat })
    }

    pub fn n(&self) -> usize {
        self.x.n()
    }

    /// Hex SHA-256 over covariates, treatments and responses.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.x.fingerprint().as_bytes());
        h.update(self.z.iter().map(|&t| u8::from(t)).collect::<Vec<u8>>());
        for v in &self.y {
            h.update(v.to_bits().to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalConfig {
    pub l_mu: usize,
    pub l_tau: usize,
    pub num_sweeps: usize,
    pub burn_in: usize,
    pub prior_mu: TreePrior,
    pub prior_tau: TreePrior,
    /// Minimum treated and control rows in each child of a treatment-tree split.
    pub n_min_arm: usize,
    pub sigma_prior: SigmaPrior,
}

impl Default for CausalConfig {
    fn default() -> Self {
        Self::new(30, 20)
    }
}

impl CausalConfig {
    /// Defaults on the standardized scale: prognostic trees `alpha = 0.95`,
    /// `beta = 1.25`, `tau = 0.6 / l_mu`; treatment trees `alpha = 0.25`,
    /// `beta = 3`, `tau = 0.1 / l_tau`; 60 sweeps with 20 burn-in.
    pub fn new(l_mu: usize, l_tau: usize) -> Self {
        let base = TreePrior::default();
        Self {
            l_mu,
            l_tau,
            num_sweeps: 60,
            burn_in: 20,
            prior_mu: TreePrior {
                alpha: 0.95,
                beta: 1.25,
                tau: 0.6 / l_mu.max(1) as f64,
                n_min: 20,
                ..base
            },
            prior_tau: TreePrior {
                alpha: 0.25,
                beta: 3.0,
                tau: 0.1 / l_tau.max(1) as f64,
                n_min: 20,
                ..base
            },
            n_min_arm: 20,
            sigma_prior: SigmaPrior { a: 3.0, b: 2.0 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.l_mu < 1 || self.l_tau < 1 {
            return Err(Error::InvalidConfig("both forests need at least one tree".into()));
        }
        if self.num_sweeps <= self.burn_in {
            return Err(Error::InvalidConfig(format!(
                "num_sweeps ({}) must exceed burn_in ({})",
                self.num_sweeps, self.burn_in
            )));
        }
        if self.n_min_arm < 1 {
            return Err(Error::InvalidConfig("n_min_arm must be >= 1".into()));
        }
        if !(self.sigma_prior.a > 0.0 && self.sigma_prior.b > 0.0) {
            return Err(Error::InvalidConfig("sigma prior a and b must be > 0".into()));
        }
        self.prior_mu.validate()?;
        self.prior_tau.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scalars {
    pub a: f64,
    pub b0: f64,
    pub b1: f64,
    pub sigma2_0: f64,
    pub sigma2_1: f64,
}

impl Scalars {
    #[inline]
    pub fn b(&self, treated: bool) -> f64 {
        if treated {
            self.b1
        } else {
            self.b0
        }
    }

    #[inline]
    pub fn sigma2(&self, treated: bool) -> f64 {
        if treated {
            self.sigma2_1
        } else {
            self.sigma2_0
        }
    }

    /// Row-count weighted average of the two arm variances.
    pub fn pooled_sigma2(&self, n_treated: usize, n: usize) -> f64 {
        let t = n_treated as f64;
        (t * self.sigma2_1 + (n as f64 - t) * self.sigma2_0) / n as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalDraws {
    pub config: CausalConfig,
    /// Prognostic forests, fitted on the covariates plus the propensity column.
    pub mu_forests: Vec<Vec<Tree>>,
    pub tau_forests: Vec<Vec<Tree>>,
    /// End-of-sweep scalar draws.
    pub scalars: Vec<Scalars>,
    pub y_mean: f64,
    pub y_sd: f64,
    /// Propensities used for the prognostic features of the training rows.
    pub pihat: Vec<f64>,
    pub n_features: usize,
    pub fingerprint: String,
}

impl CausalDraws {
    pub fn retained(&self) -> std::ops::Range<usize> {
        self.config.burn_in..self.scalars.len()
    }

    fn before(&self, s: usize) -> Scalars {
        if s == 0 {
            INITIAL
        } else {
            self.scalars[s - 1]
        }
    }

    /// Effect multiplier `y_sd (b_1 - b_0)` of sweep `s`.
    fn effect_scale(&self, s: usize) -> f64 {
        let sc = &self.scalars[s];
        self.y_sd * (sc.b1 - sc.b0)
    }
}

/// Propensity estimate from the regression ensemble on the 0/1 treatment
/// (20 trees, 50 sweeps, 10 burn-in), clamped to `[0.025, 0.975]`.
pub fn estimate_propensity(x: &Dataset, z: &[bool], seed: u64) -> Result<Vec<f64>> {
    let treated = z.iter().filter(|&&t| t).count();
    if z.len() != x.n() || treated == 0 || treated == z.len() {
        return Err(Error::InvalidData("propensity estimation needs both arms present".into()));
    }
    let zf: Vec<f64> = z.iter().map(|&t| f64::from(u8::from(t))).collect();
    let data = x.with_y(zf.clone())?;
    let cfg = FitConfig::for_response(&zf, 20, 50, 10);
    let draws = ensemble::fit(&data, &cfg, RngStream::for_purpose(seed, Purpose::Propensity, &[]).next_u64())?;
    let mean = ensemble::posterior_mean(&draws, x)?;
    Ok(mean.into_iter().map(|p| p.clamp(0.025, 0.975)).collect())
}

fn draw_normal(prec: f64, num: f64, rng: &mut RngStream) -> f64 {
    rng.normal(num / prec, prec.recip().sqrt())
}

fn sample_sigma2_arm(resid: &[f64], z: &[bool], arm: bool, prior: &SigmaPrior, rng: &mut RngStream) -> f64 {
    let r: Vec<f64> = resid.iter().zip(z).filter(|(_, &t)| t == arm).map(|(r, _)| *r).collect();
    let mut d = ensemble::sample_sigma2(&r, prior, rng);
    if !d.is_finite() {
        d = f64::MAX;
    }
    d
}

/// Row-wise working quantities for one sweep.
struct Backfit<'a> {
    ys: &'a [f64],
    z: &'a [bool],
    n: usize,
}

impl Backfit<'_> {
    /// Prognostic partial-target base and precision: `(y - b_z tau) / a`
    /// with precision `a^2 / sigma_z^2`.
    fn mu_target(&self, sc: &Scalars, tau_sum: &[f64]) -> (Vec<f64>, Vec<f64>) {
        (0..self.n)
            .map(|i| {
                let t = self.z[i];
                ((self.ys[i] - sc.b(t) * tau_sum[i]) / sc.a, sc.a * sc.a / sc.sigma2(t))
            })
            .unzip()
    }

    /// Treatment partial-target base and precision: `(y - a mu) / b_z`
    /// with precision `b_z^2 / sigma_z^2`.
    fn tau_target(&self, sc: &Scalars, a: f64, mu_sum: &[f64]) -> (Vec<f64>, Vec<f64>) {
        (0..self.n)
            .map(|i| {
                let t = self.z[i];
                let b = sc.b(t);
                ((self.ys[i] - a * mu_sum[i]) / b, b * b / sc.sigma2(t))
            })
            .unzip()
    }
}

/// Fits the two-forest model. Propensities are estimated when the dataset
/// carries none.
pub fn fit_xbcf(data: &CausalDataset, cfg: &CausalConfig, seed: u64) -> Result<CausalDraws> {
    cfg.validate()?;
    let n = data.n();
    let pihat = match &data.pihat {
        Some(p) => p.clone(),
        None => estimate_propensity(&data.x, &data.z, seed)?,
    };
    let x_mu = data.x.with_extra_column(&pihat)?;
    let x_tau = &data.x;
    let (y_mean, var) = mean_var(&data.y);
    let y_sd = if var > 0.0 { var.sqrt() } else { 1.0 };
    let ys: Vec<f64> = data.y.iter().map(|v| (v - y_mean) / y_sd).collect();
    let bf = Backfit {
        ys: &ys,
        z: &data.z,
        n,
    };
    let arms = ArmConstraint {
        treated: &data.z,
        min_per_arm: cfg.n_min_arm,
    };

    let mut sc = INITIAL;
    let mut mu_fits = vec![vec![0.0; n]; cfg.l_mu];
    let mut tau_fits = vec![vec![0.0; n]; cfg.l_tau];
    let mut mu_sum = vec![0.0; n];
    let mut tau_sum = vec![0.0; n];
    let mut partial = vec![0.0; n];
    let mut mu_forests = Vec::with_capacity(cfg.num_sweeps);
    let mut tau_forests = Vec::with_capacity(cfg.num_sweeps);
    let mut scalars = Vec::with_capacity(cfg.num_sweeps);

    for s in 0..cfg.num_sweeps {
        let (base, prec) = bf.mu_target(&sc, &tau_sum);
        let mut mus = Vec::with_capacity(cfg.l_mu);
        for l in 0..cfg.l_mu {
            for i in 0..n {
                partial[i] = base[i] - (mu_sum[i] - mu_fits[l][i]);
            }
            let coords = [FOREST_MU, s as u64, l as u64];
            let mut g = RngStream::for_purpose(seed, Purpose::Grow, &coords);
            let grown = grow_from_root_with(&partial, &x_mu, &cfg.prior_mu, Precision::PerRow(&prec), None, &mut g)?;
            let mut lr = RngStream::for_purpose(seed, Purpose::Leaf, &coords);
            let tree = sample_leaf_params_with(&grown, &partial, &x_mu, Precision::PerRow(&prec), cfg.prior_mu.tau, &mut lr);
            let fit = tree.predict_all(&x_mu);
            for i in 0..n {
                mu_sum[i] += fit[i] - mu_fits[l][i];
            }
            mu_fits[l] = fit;
            mus.push(tree);
        }

        let mut srng = RngStream::for_purpose(seed, Purpose::Scalars, &[s as u64]);
        let (mut pa, mut na) = (1.0, 0.0);
        for i in 0..n {
            let t = data.z[i];
            let w = 1.0 / sc.sigma2(t);
            pa += w * mu_sum[i] * mu_sum[i];
            na += w * mu_sum[i] * (ys[i] - sc.b(t) * tau_sum[i]);
        }
        let a = draw_normal(pa, na, &mut srng);

        let (base, prec) = bf.tau_target(&sc, a, &mu_sum);
        let mut taus = Vec::with_capacity(cfg.l_tau);
        for l in 0..cfg.l_tau {
            for i in 0..n {
                partial[i] = base[i] - (tau_sum[i] - tau_fits[l][i]);
            }
            let coords = [FOREST_TAU, s as u64, l as u64];
            let mut g = RngStream::for_purpose(seed, Purpose::Grow, &coords);
            let grown =
                grow_from_root_with(&partial, x_tau, &cfg.prior_tau, Precision::PerRow(&prec), Some(arms), &mut g)?;
            let mut lr = RngStream::for_purpose(seed, Purpose::Leaf, &coords);
            let tree = sample_leaf_params_with(&grown, &partial, x_tau, Precision::PerRow(&prec), cfg.prior_tau.tau, &mut lr);
            let fit = tree.predict_all(x_tau);
            for i in 0..n {
                tau_sum[i] += fit[i] - tau_fits[l][i];
            }
            tau_fits[l] = fit;
            taus.push(tree);
        }

        // b_0, b_1 ~ N(0, 1/2) a priori.
        let (mut p0, mut n0, mut p1, mut n1) = (2.0, 0.0, 2.0, 0.0);
        for i in 0..n {
            let t = data.z[i];
            let w = 1.0 / sc.sigma2(t);
            let (p, m) = (w * tau_sum[i] * tau_sum[i], w * tau_sum[i] * (ys[i] - a * mu_sum[i]));
            if t {
                p1 += p;
                n1 += m;
            } else {
                p0 += p;
                n0 += m;
            }
        }
        let b0 = draw_normal(p0, n0, &mut srng);
        let b1 = draw_normal(p1, n1, &mut srng);

        let resid: Vec<f64> = (0..n)
            .map(|i| ys[i] - a * mu_sum[i] - if data.z[i] { b1 } else { b0 } * tau_sum[i])
            .collect();
        let sigma2_0 = sample_sigma2_arm(&resid, &data.z, false, &cfg.sigma_prior, &mut srng);
        let sigma2_1 = sample_sigma2_arm(&resid, &data.z, true, &cfg.sigma_prior, &mut srng);
        sc = Scalars {
            a,
            b0,
            b1,
            sigma2_0,
            sigma2_1,
        };
        mu_forests.push(mus);
        tau_forests.push(taus);
        scalars.push(sc);
    }

    Ok(CausalDraws {
        config: cfg.clone(),
        mu_forests,
        tau_forests,
        scalars,
        y_mean,
        y_sd,
        pihat,
        n_features: data.x.p(),
        fingerprint: data.fingerprint(),
    })
}

/// Treated, control and overlap boxes of one leaf over its split variables.
#[derive(Debug, Clone, PartialEq)]
pub struct OverlapRegion {
    pub treated: Option<Hypercube>,
    pub control: Option<Hypercube>,
    /// Per-variable intersection; meaningful only where `empty` is false.
    pub overlap: Hypercube,
    pub empty: Vec<bool>,
}

impl OverlapRegion {
    pub fn is_empty(&self) -> bool {
        self.empty.iter().any(|&e| e)
    }

    /// Whether a row lies inside the overlap box (never, if it is empty).
    pub fn contains(&self, x: impl Fn(usize) -> f64) -> bool {
        !self.is_empty() && !self.overlap.excludes(x)
    }
}

pub fn overlap_region(data: &Dataset, rows: &[usize], z: &[bool], vars: &[usize], coverage: f64) -> OverlapRegion {
    let (t, c): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| z[i]);
    let treated = (!t.is_empty()).then(|| gpx::leaf_hypercube(data, &t, vars, coverage));
    let control = (!c.is_empty()).then(|| gpx::leaf_hypercube(data, &c, vars, coverage));
    let k = vars.len();
    let (lo, hi, empty) = match (&treated, &control) {
        (Some(bt), Some(bc)) => {
            let lo: Vec<f64> = (0..k).map(|j| bt.lo[j].max(bc.lo[j])).collect();
            let hi: Vec<f64> = (0..k).map(|j| bt.hi[j].min(bc.hi[j])).collect();
            let empty = (0..k).map(|j| lo[j] > hi[j]).collect();
            (lo, hi, empty)
        }
        _ => (vec![f64::NAN; k], vec![f64::NAN; k], vec![true; k]),
    };
    // With no split variables there is nothing to intersect; a one-armed
    // leaf is still empty.
    let empty = if k == 0 && (treated.is_none() || control.is_none()) {
        vec![true]
    } else {
        empty
    };
    OverlapRegion {
        treated,
        control,
        overlap: Hypercube {
            vars: vars.to_vec(),
            lo,
            hi,
        },
        empty,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AteSummary {
    pub mean: f64,
    pub interval: Interval,
    /// One draw per retained sweep.
    pub draws: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CatePrediction {
    pub mean: Vec<f64>,
    pub intervals: Vec<Interval>,
    /// `draws[i]` holds one CATE draw per retained sweep for test point `i`.
    pub draws: Vec<Vec<f64>>,
    pub ate: AteSummary,
}

fn summarize(draws: Vec<Vec<f64>>, alpha: f64) -> Result<CatePrediction> {
    let m = draws.first().map_or(0, Vec::len);
    if m == 0 {
        return Err(Error::NoDraws);
    }
    let mut mean = Vec::with_capacity(draws.len());
    let mut intervals = Vec::with_capacity(draws.len());
    for d in &draws {
        mean.push(d.iter().sum::<f64>() / m as f64);
        intervals.push(empirical_interval(d, alpha)?);
    }
    let ate_draws: Vec<f64> = (0..m)
        .map(|s| draws.iter().map(|d| d[s]).sum::<f64>() / draws.len() as f64)
        .collect();
    let ate = AteSummary {
        mean: ate_draws.iter().sum::<f64>() / m as f64,
        interval: empirical_interval(&ate_draws, alpha)?,
        draws: ate_draws,
    };
    Ok(CatePrediction {
        mean,
        intervals,
        draws,
        ate,
    })
}

fn check_test(draws: &CausalDraws, xte: &Dataset) -> Result<()> {
    if xte.p() != draws.n_features {
        return Err(Error::DimensionMismatch(format!(
            "model has {} features, test data has {}",
            draws.n_features,
            xte.p()
        )));
    }
    Ok(())
}

/// Constant-leaf CATE posterior.
pub fn predict_cate(draws: &CausalDraws, xte: &Dataset, alpha: f64) -> Result<CatePrediction> {
    check_test(draws, xte)?;
    let sweeps = draws.retained();
    let cate: Vec<Vec<f64>> = (0..xte.n())
        .into_par_iter()
        .map(|i| {
            sweeps
                .clone()
                .map(|s| {
                    let sum = draws.tau_forests[s].iter().fold(0.0, |acc, t| acc + t.predict_at(xte, i));
                    draws.effect_scale(s) * sum
                })
                .collect()
        })
        .collect();
    summarize(cate, alpha)
}

/// Settings of the treatment-effect GP. `tau_gp = None` uses the sweep's
/// pooled standardized noise variance over `l_tau`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CausalGpOptions {
    pub theta: f64,
    pub tau_gp: Option<f64>,
    pub subsample: usize,
    pub hypercube_coverage: f64,
    pub jitter: f64,
}

impl Default for CausalGpOptions {
    fn default() -> Self {
        Self {
            theta: GPConfig::DEFAULT_THETA,
            tau_gp: None,
            subsample: 100,
            hypercube_coverage: 0.95,
            jitter: 1e-8,
        }
    }
}

impl CausalGpOptions {
    fn config(&self, tau_gp: f64) -> GPConfig {
        GPConfig {
            theta: self.theta,
            tau_gp: self.tau_gp.unwrap_or(tau_gp),
            subsample: self.subsample,
            hypercube_coverage: self.hypercube_coverage,
            jitter: self.jitter,
        }
    }
}

/// What one extrapolating treatment-tree leaf conditioned on.
#[derive(Debug)]
pub struct LeafGpEvent<'a> {
    pub sweep: usize,
    pub tree: usize,
    pub region: &'a OverlapRegion,
    /// Training rows the GP conditioned on.
    pub conditioning: &'a [usize],
    /// Test rows that received GP draws.
    pub extrapolated: &'a [usize],
}

pub type LeafGpObserver<'a> = dyn Fn(&LeafGpEvent<'_>) + Sync + 'a;

#[derive(Debug, Clone, PartialEq)]
pub struct CateGpPrediction {
    pub prediction: CatePrediction,
    /// Per test row: fraction of retained (sweep, tree) pairs that extrapolated it.
    pub exterior_fraction: Vec<f64>,
    /// Leaves that kept the constant because the overlap box was empty, held
    /// fewer than two training rows, or the GP solve failed.
    pub fallback_leaves: usize,
}

/// Partial targets and noise variances of every treatment tree in every
/// retained sweep, replayed from the stored draws.
struct TauReplay {
    partial: Vec<Vec<f64>>,
    noise: Vec<Vec<f64>>,
}

fn replay_tau(draws: &CausalDraws, train: &CausalDataset, x_mu: &Dataset) -> Vec<TauReplay> {
    let n = train.n();
    let cfg = &draws.config;
    let ys: Vec<f64> = train.y.iter().map(|v| (v - draws.y_mean) / draws.y_sd).collect();
    let bf = Backfit {
        ys: &ys,
        z: &train.z,
        n,
    };
    let l_total = (cfg.l_mu + cfg.l_tau) as f64;
    let mut tau_fits = vec![vec![0.0; n]; cfg.l_tau];
    let mut tau_sum = vec![0.0; n];
    let mut out = Vec::new();
    for s in 0..draws.scalars.len() {
        let keep = s >= cfg.burn_in;
        if keep {
            out.push(TauReplay {
                partial: Vec::with_capacity(cfg.l_tau),
                noise: Vec::with_capacity(cfg.l_tau),
            });
        }
        let prev = draws.before(s);
        let mut mu_sum = vec![0.0; n];
        for t in &draws.mu_forests[s] {
            for (i, v) in t.predict_all(x_mu).into_iter().enumerate() {
                mu_sum[i] += v;
            }
        }
        let (base, prec) = bf.tau_target(&prev, draws.scalars[s].a, &mu_sum);
        for (l, tree) in draws.tau_forests[s].iter().enumerate() {
            let partial: Vec<f64> = (0..n).map(|i| base[i] - (tau_sum[i] - tau_fits[l][i])).collect();
            let fit = tree.predict_all(&train.x);
            for i in 0..n {
                tau_sum[i] += fit[i] - tau_fits[l][i];
            }
            tau_fits[l] = fit;
            if keep {
                let r = out.last_mut().expect("retained sweep");
                r.partial.push(partial);
                r.noise.push(prec.iter().map(|p| 1.0 / (p * l_total)).collect());
            }
        }
    }
    out
}

struct OverlapPass<'a> {
    tree: &'a Tree,
    partial: &'a [f64],
    noise: &'a [f64],
    xtr: &'a Dataset,
    z: &'a [bool],
    xte: &'a Dataset,
    global_width: &'a [f64],
    cfg: GPConfig,
    coords: StreamCoords,
    observer: Option<&'a LeafGpObserver<'a>>,
    rte: Vec<f64>,
    extrapolated: Vec<bool>,
    fallback: usize,
}

impl OverlapPass<'_> {
    fn visit(&mut self, node: usize, train: Vec<usize>, test: Vec<usize>, path: &mut Vec<usize>) {
        match self.tree.nodes()[node].kind {
            NodeKind::Split {
                var,
                cut,
                left,
                right,
            } => {
                let (tl, tr): (Vec<usize>, Vec<usize>) =
                    train.into_iter().partition(|&i| self.xtr.get(i, var) <= cut);
                let (el, er): (Vec<usize>, Vec<usize>) =
                    test.into_iter().partition(|&i| self.xte.get(i, var) <= cut);
                let fresh = !path.contains(&var);
                if fresh {
                    path.push(var);
                }
                self.visit(left, tl, el, path);
                self.visit(right, tr, er, path);
                if fresh {
                    path.pop();
                }
            }
            NodeKind::Leaf { mu } => self.leaf(node, mu, &train, &test, path),
        }
    }

    fn leaf(&mut self, node: usize, mu: f64, train: &[usize], test: &[usize], path: &[usize]) {
        for &i in test {
            self.rte[i] = mu;
        }
        if test.is_empty() || train.is_empty() || path.is_empty() {
            return;
        }
        let region = overlap_region(self.xtr, train, self.z, path, self.cfg.hypercube_coverage);
        let outside: Vec<usize> = test
            .iter()
            .copied()
            .filter(|&i| !region.contains(|j| self.xte.get(i, j)))
            .collect();
        if outside.is_empty() {
            return;
        }
        let inside: Vec<usize> = if region.is_empty() {
            Vec::new()
        } else {
            train
                .iter()
                .copied()
                .filter(|&i| region.contains(|j| self.xtr.get(i, j)))
                .collect()
        };
        if inside.len() < 2 {
            self.fallback += 1;
            return;
        }
        let active = gpx::active_variables(self.xte, &outside, &region.overlap);
        let (vars, widths) = gpx::kernel_widths(&region.overlap, &active, self.global_width);
        let picked: Vec<usize> = if inside.len() > self.cfg.subsample {
            let mut rng = self.coords.rng(Purpose::Subsample, node);
            rng.sample_without_replacement(inside.len(), self.cfg.subsample)
                .into_iter()
                .map(|k| inside[k])
                .collect()
        } else {
            inside
        };
        let xtr_b = gpx::project(self.xtr, &picked, &vars);
        let rtr_b: Vec<f64> = picked.iter().map(|&i| self.partial[i]).collect();
        let noise_b: Vec<f64> = picked.iter().map(|&i| self.noise[i]).collect();
        let xte_b = gpx::project(self.xte, &outside, &vars);
        match gpx::gp_conditional(&xte_b, &xtr_b, &rtr_b, mu, Noise::PerRow(&noise_b), &widths, &self.cfg) {
            Ok(cond) => {
                if let Some(obs) = self.observer {
                    obs(&LeafGpEvent {
                        sweep: self.coords.sweep,
                        tree: self.coords.tree,
                        region: &region,
                        conditioning: &picked,
                        extrapolated: &outside,
                    });
                }
                let mut rng = self.coords.rng(Purpose::GpDraw, node);
                let draw = gpx::draw_conditional(&cond, &self.cfg, &mut rng);
                for (&i, v) in outside.iter().zip(draw) {
                    self.rte[i] = v;
                    self.extrapolated[i] = true;
                }
            }
            Err(_) => self.fallback += 1,
        }
    }
}

/// CATE posterior with GP extrapolation of the treatment forest outside
/// each leaf's overlap box.
pub fn predict_cate_gp(
    draws: &CausalDraws,
    train: &CausalDataset,
    xte: &Dataset,
    alpha: f64,
    opts: &CausalGpOptions,
    seed: u64,
) -> Result<CateGpPrediction> {
    predict_cate_gp_observed(draws, train, xte, alpha, opts, seed, None)
}

pub fn predict_cate_gp_observed(
    draws: &CausalDraws,
    train: &CausalDataset,
    xte: &Dataset,
    alpha: f64,
    opts: &CausalGpOptions,
    seed: u64,
    observer: Option<&LeafGpObserver<'_>>,
) -> Result<CateGpPrediction> {
    check_test(draws, xte)?;
    let fp = train.fingerprint();
    if fp != draws.fingerprint {
        return Err(Error::FingerprintMismatch {
            expected: draws.fingerprint.clone(),
            found: fp,
        });
    }
    opts.config(1.0).validate()?;
    let x_mu = train.x.with_extra_column(&draws.pihat)?;
    let replay = replay_tau(draws, train, &x_mu);
    let global_width: Vec<f64> = train.x.ranges().iter().map(|(lo, hi)| hi - lo).collect();
    let n_treated = train.z.iter().filter(|&&t| t).count();
    let l_tau = draws.config.l_tau;

    let per_sweep: Vec<(Vec<f64>, Vec<usize>, usize)> = draws
        .retained()
        .into_par_iter()
        .zip(replay.into_par_iter())
        .map(|(s, rep)| {
            let tau_gp = draws.scalars[s].pooled_sigma2(n_treated, train.n()) / l_tau as f64;
            let cfg = opts.config(tau_gp);
            let mut sums = vec![0.0; xte.n()];
            let mut counts = vec![0usize; xte.n()];
            let mut fallback = 0;
            for (l, tree) in draws.tau_forests[s].iter().enumerate() {
                let mut pass = OverlapPass {
                    tree,
                    partial: &rep.partial[l],
                    noise: &rep.noise[l],
                    xtr: &train.x,
                    z: &train.z,
                    xte,
                    global_width: &global_width,
                    cfg,
                    coords: StreamCoords {
                        seed,
                        forest: FOREST_TAU,
                        sweep: s,
                        tree: l,
                    },
                    observer,
                    rte: vec![0.0; xte.n()],
                    extrapolated: vec![false; xte.n()],
                    fallback: 0,
                };
                pass.visit(0, (0..train.n()).collect(), (0..xte.n()).collect(), &mut Vec::new());
                for i in 0..xte.n() {
                    sums[i] += pass.rte[i];
                    counts[i] += usize::from(pass.extrapolated[i]);
                }
                fallback += pass.fallback;
            }
            let k = draws.effect_scale(s);
            (sums.into_iter().map(|v| k * v).collect(), counts, fallback)
        })
        .collect();

    let m = per_sweep.len();
    let mut cate = vec![Vec::with_capacity(m); xte.n()];
    let mut ext = vec![0usize; xte.n()];
    let mut fallback_leaves = 0;
    for (values, counts, fb) in per_sweep {
        for i in 0..xte.n() {
            cate[i].push(values[i]);
            ext[i] += counts[i];
        }
        fallback_leaves += fb;
    }
    let pairs = (m * l_tau) as f64;
    Ok(CateGpPrediction {
        prediction: summarize(cate, alpha)?,
        exterior_fraction: ext.into_iter().map(|c| c as f64 / pairs).collect(),
        fallback_leaves,
    })
}

/// Posterior mean of the prognostic component `y_mean + y_sd a mu(x, pihat)`
/// at test rows whose last column is the propensity. With `gp` set, the
/// prognostic trees extrapolate exterior rows as in [`gpx::predict_gp`].
pub fn predict_prognostic(
    draws: &CausalDraws,
    train: &CausalDataset,
    xte_with_pihat: &Dataset,
    gp: Option<&GPConfig>,
    seed: u64,
) -> Result<Vec<f64>> {
    if xte_with_pihat.p() != draws.n_features + 1 {
        return Err(Error::DimensionMismatch(format!(
            "prognostic prediction needs {} covariates plus a propensity column",
            draws.n_features
        )));
    }
    let sweeps = draws.retained();
    let m = sweeps.len() as f64;
    let nte = xte_with_pihat.n();
    let Some(gcfg) = gp else {
        return Ok((0..nte)
            .map(|i| {
                let tot: f64 = sweeps
                    .clone()
                    .map(|s| {
                        let sum = draws.mu_forests[s].iter().fold(0.0, |acc, t| acc + t.predict_at(xte_with_pihat, i));
                        draws.y_mean + draws.y_sd * draws.scalars[s].a * sum
                    })
                    .sum();
                tot / m
            })
            .collect());
    };
    let fp = train.fingerprint();
    if fp != draws.fingerprint {
        return Err(Error::FingerprintMismatch {
            expected: draws.fingerprint.clone(),
            found: fp,
        });
    }
    gcfg.validate()?;
    let n = train.n();
    let cfg = &draws.config;
    let x_mu = train.x.with_extra_column(&draws.pihat)?;
    let ys: Vec<f64> = train.y.iter().map(|v| (v - draws.y_mean) / draws.y_sd).collect();
    let bf = Backfit {
        ys: &ys,
        z: &train.z,
        n,
    };
    let l_total = (cfg.l_mu + cfg.l_tau) as f64;
    let mut mu_fits = vec![vec![0.0; n]; cfg.l_mu];
    let mut mu_sum = vec![0.0; n];
    let mut tau_sum = vec![0.0; n];
    let mut total = vec![0.0; nte];
    for s in 0..draws.scalars.len() {
        let prev = draws.before(s);
        let (base, prec) = bf.mu_target(&prev, &tau_sum);
        let noise: Vec<f64> = prec.iter().map(|p| 1.0 / (p * l_total)).collect();
        let mut sweep_sum = vec![0.0; nte];
        for (l, tree) in draws.mu_forests[s].iter().enumerate() {
            let partial: Vec<f64> = (0..n).map(|i| base[i] - (mu_sum[i] - mu_fits[l][i])).collect();
            if s >= cfg.burn_in {
                let coords = StreamCoords {
                    seed,
                    forest: FOREST_MU,
                    sweep: s,
                    tree: l,
                };
                let ex = gpx::predict_from_root_weighted(tree, &partial, &noise, &x_mu, xte_with_pihat, gcfg, coords)?;
                for i in 0..nte {
                    sweep_sum[i] += ex.rte[i];
                }
            }
            let fit = tree.predict_all(&x_mu);
            for i in 0..n {
                mu_sum[i] += fit[i] - mu_fits[l][i];
            }
            mu_fits[l] = fit;
        }
        tau_sum = vec![0.0; n];
        for t in &draws.tau_forests[s] {
            for (i, v) in t.predict_all(&train.x).into_iter().enumerate() {
                tau_sum[i] += v;
            }
        }
        if s >= cfg.burn_in {
            for i in 0..nte {
                total[i] += draws.y_mean + draws.y_sd * draws.scalars[s].a * sweep_sum[i];
            }
        }
    }
    Ok(total.into_iter().map(|v| v / m).collect())
}

#[derive(Serialize, Deserialize)]
struct CausalModelFile {
    schema_version: u32,
    #[serde(flatten)]
    draws: CausalDraws,
}

pub fn to_json(draws: &CausalDraws) -> Result<String> {
    serde_json::to_string(&CausalModelFile {
        schema_version: CAUSAL_SCHEMA_VERSION,
        draws: draws.clone(),
    })
    .map_err(|e| Error::Schema(e.to_string()))
}

pub fn from_json(text: &str) -> Result<CausalDraws> {
    let v: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
    match v.get("schema_version").and_then(serde_json::Value::as_u64) {
        Some(ver) if ver == u64::from(CAUSAL_SCHEMA_VERSION) => {}
        Some(ver) => {
            return Err(Error::Schema(format!(
                "causal model schema version {ver}, expected {CAUSAL_SCHEMA_VERSION}"
            )))
        }
        None => return Err(Error::Schema("missing schema_version".into())),
    }
    let file: CausalModelFile = serde_json::from_value(v).map_err(|e| Error::Schema(e.to_string()))?;
    let d = file.draws;
    let s = d.scalars.len();
    if d.mu_forests.len() != s
        || d.tau_forests.len() != s
        || d.mu_forests.iter().any(|f| f.len() != d.config.l_mu)
        || d.tau_forests.iter().any(|f| f.len() != d.config.l_tau)
    {
        return Err(Error::Schema("forest shapes disagree with the config".into()));
    }
    d.config.validate().map_err(|e| Error::Schema(e.to_string()))?;
    Ok(d)
}

pub fn save(draws: &CausalDraws, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_json(draws)?).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load(path: impl AsRef<Path>) -> Result<CausalDraws> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    from_json(&text)
}
