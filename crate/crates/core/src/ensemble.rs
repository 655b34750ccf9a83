//! Sum-of-trees fitting by Bayesian backfitting sweeps.

use std::fs;
use std::path::Path;

use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{mean_var, Dataset};
use crate::error::{Error, Result};
use crate::interval::{empirical_interval, Interval};
use crate::rng::{Purpose, RngStream};
use crate::tree::{grow_from_root, sample_leaf_params, Tree, TreePrior};

pub const MODEL_SCHEMA_VERSION: u32 = 1;

/// Inverse-Gamma(shape `a`, rate `b`) prior on the noise variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaPrior {
    pub a: f64,
    pub b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub num_trees: usize,
    pub num_sweeps: usize,
    pub burn_in: usize,
    pub tree_prior: TreePrior,
    pub sigma_prior: SigmaPrior,
    /// Training mean of the response; set by [`fit`].
    pub y_center: f64,
}

impl FitConfig {
    /// Data-scaled defaults: leaf prior variance `Var(y)/L` and a shape-3
    /// inverse-Gamma prior whose mean equals `Var(y)`.
    pub fn for_response(y: &[f64], num_trees: usize, num_sweeps: usize, burn_in: usize) -> Self {
        let (_, var) = mean_var(y);
        let var = if var > 0.0 && var.is_finite() { var } else { 1.0 };
        let a = 3.0;
        Self {
            num_trees,
            num_sweeps,
            burn_in,
            tree_prior: TreePrior {
                tau: var / num_trees.max(1) as f64,
                n_min: 20,
                ..TreePrior::default()
            },
            sigma_prior: SigmaPrior { a, b: var * (a - 1.0) },
            y_center: 0.0,
        }
    }

    /// The settings used throughout the simulation studies: 20 trees, 100
    /// sweeps, 15 of them burn-in.
    pub fn standard(y: &[f64]) -> Self {
        Self::for_response(y, 20, 100, 15)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_trees < 1 {
            return Err(Error::InvalidConfig("num_trees must be >= 1".into()));
        }
        if self.num_sweeps <= self.burn_in {
            return Err(Error::InvalidConfig(format!(
                "num_sweeps ({}) must exceed burn_in ({})",
                self.num_sweeps, self.burn_in
            )));
        }
        if !(self.sigma_prior.a > 0.0 && self.sigma_prior.b > 0.0) {
            return Err(Error::InvalidConfig("sigma prior a and b must be > 0".into()));
        }
        self.tree_prior.validate()
    }
}

/// All sweeps of a fitted forest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorDraws {
    pub config: FitConfig,
    /// `forests[s][l]` is tree `l` after sweep `s`.
    pub forests: Vec<Vec<Tree>>,
    pub sigma2: Vec<f64>,
    pub n_features: usize,
    pub fingerprint: String,
}

impl PosteriorDraws {
    /// Indices of the sweeps used for prediction.
    pub fn retained(&self) -> std::ops::Range<usize> {
        self.config.burn_in..self.forests.len()
    }

    pub fn num_trees(&self) -> usize {
        self.config.num_trees
    }

    /// Same draws, different burn-in.
    pub fn with_burn_in(&self, burn_in: usize) -> Result<Self> {
        let mut d = self.clone();
        d.config.burn_in = burn_in;
        d.config.validate()?;
        Ok(d)
    }

    /// Noiseless forest value `y_center + sum_l g_l(x)` for sweep `s` at row `i`.
    pub fn forest_value(&self, s: usize, data: &Dataset, i: usize) -> f64 {
        let sum = self.forests[s].iter().fold(0.0, |acc, t| acc + t.predict_at(data, i));
        self.config.y_center + sum
    }

    fn check_columns(&self, data: &Dataset) -> Result<()> {
        if data.p() != self.n_features {
            return Err(Error::DimensionMismatch(format!(
                "model has {} features, data has {}",
                self.n_features,
                data.p()
            )));
        }
        Ok(())
    }
}

/// Draws `sigma^2 ~ InvGamma(a + n/2, b + sum r^2 / 2)`.
pub fn sample_sigma2(full_resid: &[f64], prior: &SigmaPrior, rng: &mut RngStream) -> f64 {
    let ssr: f64 = full_resid.iter().map(|r| r * r).sum();
    let shape = prior.a + full_resid.len() as f64 / 2.0;
    let rate = prior.b + ssr / 2.0;
    let g = Gamma::new(shape, 1.0 / rate)
        .expect("positive shape and rate")
        .sample(rng);
    // Guard the (practically impossible) underflow to keep the support positive.
    (1.0 / g).max(f64::MIN_POSITIVE)
}

/// Hook invoked after each tree update with the maintained full residual and
/// the current per-tree fits; used by tests to check the backfitting identity.
pub type SweepObserver<'a> = dyn FnMut(usize, usize, &[f64], &[Vec<f64>]) + 'a;

/// Fits the forest by `num_sweeps` backfitting sweeps.
pub fn fit(data: &Dataset, config: &FitConfig, seed: u64) -> Result<PosteriorDraws> {
    fit_observed(data, config, seed, None)
}

pub fn fit_observed(
    data: &Dataset,
    config: &FitConfig,
    seed: u64,
    mut observer: Option<&mut SweepObserver<'_>>,
) -> Result<PosteriorDraws> {
    let y = data.require_y()?;
    let n = data.n();
    if n < 2 {
        return Err(Error::InvalidData(format!("need at least 2 training rows, got {n}")));
    }
    config.validate()?;
    let (y_center, _) = mean_var(y);
    let mut config = config.clone();
    config.y_center = y_center;
    let l_trees = config.num_trees;

    // Centered response; every tree starts at zero so r = y - y_center.
    let mut resid: Vec<f64> = y.iter().map(|v| v - y_center).collect();
    let mut fits = vec![vec![0.0; n]; l_trees];
    let mut partial = vec![0.0; n];
    let mut sigma2 = config.sigma_prior.b / (config.sigma_prior.a - 1.0).max(1.0);
    let tau = config.tree_prior.tau;

    let mut forests = Vec::with_capacity(config.num_sweeps);
    let mut sigmas = Vec::with_capacity(config.num_sweeps);
    for s in 0..config.num_sweeps {
        let mut trees = Vec::with_capacity(l_trees);
        for l in 0..l_trees {
            for i in 0..n {
                partial[i] = resid[i] + fits[l][i];
            }
            let coords = [s as u64, l as u64];
            let mut grow_rng = RngStream::for_purpose(seed, Purpose::Grow, &coords);
            let grown = grow_from_root(&partial, data, &config.tree_prior, sigma2, &mut grow_rng)?;
            let mut leaf_rng = RngStream::for_purpose(seed, Purpose::Leaf, &coords);
            let tree = sample_leaf_params(&grown, &partial, data, sigma2, tau, &mut leaf_rng);
            let new_fit = tree.predict_all(data);
            for i in 0..n {
                resid[i] = partial[i] - new_fit[i];
            }
            fits[l] = new_fit;
            trees.push(tree);
            if let Some(obs) = observer.as_deref_mut() {
                obs(s, l, &resid, &fits);
            }
        }
        let mut sig_rng = RngStream::for_purpose(seed, Purpose::Sigma, &[s as u64]);
        sigma2 = sample_sigma2(&resid, &config.sigma_prior, &mut sig_rng);
        forests.push(trees);
        sigmas.push(sigma2);
    }

    Ok(PosteriorDraws {
        config,
        forests,
        sigma2: sigmas,
        n_features: data.p(),
        fingerprint: data.fingerprint(),
    })
}

/// Point means, intervals and the per-point draw matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Average of the noiseless sweep values.
    pub mean: Vec<f64>,
    pub intervals: Vec<Interval>,
    /// `draws[i]` holds one draw per retained sweep for test point `i`.
    pub draws: Vec<Vec<f64>>,
}

/// Turns noiseless per-(point, retained sweep) values into predictive draws.
/// Observation noise for point `i` and sweep `s` comes from its own stream,
/// so every prediction path that agrees on the noiseless values agrees on
/// the draws.
pub(crate) fn assemble_prediction(
    noiseless: Vec<Vec<f64>>,
    sigma2: &[f64],
    sweeps: std::ops::Range<usize>,
    alpha: f64,
    seed: u64,
    add_noise: bool,
) -> Result<Prediction> {
    let rows: Vec<(f64, Interval, Vec<f64>)> = noiseless
        .into_par_iter()
        .enumerate()
        .map(|(i, f)| {
            let mean = f.iter().sum::<f64>() / f.len() as f64;
            let draws: Vec<f64> = if add_noise {
                f.iter()
                    .zip(sweeps.clone())
                    .map(|(&fs, s)| {
                        let mut rng = RngStream::for_purpose(seed, Purpose::Noise, &[i as u64, s as u64]);
                        fs + sigma2[s].sqrt() * rng.std_normal()
                    })
                    .collect()
            } else {
                f
            };
            let iv = empirical_interval(&draws, alpha)?;
            Ok((mean, iv, draws))
        })
        .collect::<Result<_>>()?;
    let mut out = Prediction {
        mean: Vec::with_capacity(rows.len()),
        intervals: Vec::with_capacity(rows.len()),
        draws: Vec::with_capacity(rows.len()),
    };
    for (m, iv, d) in rows {
        out.mean.push(m);
        out.intervals.push(iv);
        out.draws.push(d);
    }
    Ok(out)
}

/// Standard constant-leaf posterior predictive.
pub fn predict(draws: &PosteriorDraws, xtest: &Dataset, alpha: f64, seed: u64) -> Result<Prediction> {
    predict_with(draws, xtest, alpha, seed, true)
}

/// As [`predict`]; `add_noise = false` gives intervals for `f` instead of `y`.
pub fn predict_with(
    draws: &PosteriorDraws,
    xtest: &Dataset,
    alpha: f64,
    seed: u64,
    add_noise: bool,
) -> Result<Prediction> {
    draws.check_columns(xtest)?;
    let sweeps = draws.retained();
    let noiseless: Vec<Vec<f64>> = (0..xtest.n())
        .into_par_iter()
        .map(|i| sweeps.clone().map(|s| draws.forest_value(s, xtest, i)).collect())
        .collect();
    assemble_prediction(noiseless, &draws.sigma2, sweeps, alpha, seed, add_noise)
}

/// Posterior mean of the noiseless forest at each row.
pub fn posterior_mean(draws: &PosteriorDraws, xtest: &Dataset) -> Result<Vec<f64>> {
    draws.check_columns(xtest)?;
    let sweeps = draws.retained();
    let m = sweeps.len() as f64;
    Ok((0..xtest.n())
        .map(|i| sweeps.clone().map(|s| draws.forest_value(s, xtest, i)).sum::<f64>() / m)
        .collect())
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    schema_version: u32,
    #[serde(flatten)]
    draws: PosteriorDraws,
}

/// Writes the model as JSON. Reals use shortest round-trip formatting, so a
/// reload reproduces every bit.
pub fn save(draws: &PosteriorDraws, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let json = to_json(draws)?;
    fs::write(path, json).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load(path: impl AsRef<Path>) -> Result<PosteriorDraws> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    from_json(&text)
}

pub fn to_json(draws: &PosteriorDraws) -> Result<String> {
    let file = ModelFile {
        schema_version: MODEL_SCHEMA_VERSION,
        draws: draws.clone(),
    };
    serde_json::to_string(&file).map_err(|e| Error::Schema(e.to_string()))
}

pub fn from_json(text: &str) -> Result<PosteriorDraws> {
    let v: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
    match v.get("schema_version").and_then(serde_json::Value::as_u64) {
        Some(ver) if ver == u64::from(MODEL_SCHEMA_VERSION) => {}
        Some(ver) => {
            return Err(Error::Schema(format!(
                "model schema version {ver}, expected {MODEL_SCHEMA_VERSION}"
            )))
        }
        None => return Err(Error::Schema("missing schema_version".into())),
    }
    let file: ModelFile = serde_json::from_value(v).map_err(|e| Error::Schema(e.to_string()))?;
    let d = file.draws;
    d.config.validate()?;
    if d.forests.len() != d.config.num_sweeps || d.sigma2.len() != d.config.num_sweeps {
        return Err(Error::Schema("sweep count does not match config".into()));
    }
    if d.forests.iter().any(|f| f.len() != d.config.num_trees) {
        return Err(Error::Schema("forest with wrong number of trees".into()));
    }
    if d.sigma2.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
        return Err(Error::Schema("non-positive sigma2 draw".into()));
    }
    Ok(d)
}
