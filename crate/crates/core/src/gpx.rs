//! Gaussian-process extrapolation at the leaves of a fitted forest.
//!
//! For each tree and sweep the training and test rows are pushed down the
//! tree together. In every leaf the training rows define a hypercube over the
//! split variables on the root-to-leaf path; test rows outside it are
//! exterior for that leaf. Exterior rows receive a joint draw from a GP
//! conditioned on (a subsample of) the leaf's training rows and their
//! partial residuals, with the leaf value as prior mean. Everything else
//! keeps the constant leaf value.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{mean_var, Dataset};
use crate::ensemble::{assemble_prediction, PosteriorDraws, Prediction};
use crate::error::{Error, Result};
use crate::rng::{Purpose, RngStream};
use crate::tree::{NodeKind, Tree};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GPConfig {
    /// Kernel smoothness.
    pub theta: f64,
    /// Kernel scale (prior variance of an extrapolated leaf residual).
    pub tau_gp: f64,
    /// Maximum training rows per leaf GP.
    pub subsample: usize,
    /// Central quantile coverage of the leaf hypercube.
    pub hypercube_coverage: f64,
    /// Initial diagonal jitter, relative to `tau_gp`.
    pub jitter: f64,
}

impl GPConfig {
    pub const DEFAULT_THETA: f64 = 0.1;

    /// `theta = 0.1`, `tau_gp = Var(y) / num_trees`, 100-row subsamples and a
    /// 95% hypercube.
    pub fn for_response(y: &[f64], num_trees: usize) -> Self {
        let (_, var) = mean_var(y);
        let var = if var > 0.0 && var.is_finite() { var } else { 1.0 };
        Self {
            theta: Self::DEFAULT_THETA,
            tau_gp: var / num_trees.max(1) as f64,
            subsample: 100,
            hypercube_coverage: 0.95,
            jitter: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.theta > 0.0 && self.tau_gp > 0.0) {
            return Err(Error::InvalidConfig("theta and tau_gp must be > 0".into()));
        }
        if self.subsample < 1 {
            return Err(Error::InvalidConfig("gp subsample must be >= 1".into()));
        }
        if !(self.hypercube_coverage > 0.0 && self.hypercube_coverage <= 1.0) {
            return Err(Error::InvalidConfig("hypercube coverage must lie in (0, 1]".into()));
        }
        if !(self.jitter >= 0.0) {
            return Err(Error::InvalidConfig("jitter must be >= 0".into()));
        }
        Ok(())
    }
}

/// Per-variable closed ranges over a subset of the covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypercube {
    pub vars: Vec<usize>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Hypercube {
    /// Whether value `x` of the `k`-th stored variable lies outside.
    #[inline]
    pub fn outside(&self, k: usize, x: f64) -> bool {
        x < self.lo[k] || x > self.hi[k]
    }

    /// Whether a row (accessed by column) lies outside on any stored variable.
    pub fn excludes(&self, x: impl Fn(usize) -> f64) -> bool {
        self.vars
            .iter()
            .enumerate()
            .any(|(k, &j)| self.outside(k, x(j)))
    }

    pub fn width(&self, k: usize) -> f64 {
        self.hi[k] - self.lo[k]
    }
}

/// Linear-interpolation quantile of sorted values.
pub(crate) fn quantile_sorted(v: &[f64], q: f64) -> f64 {
    let h = (v.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

/// Central `coverage` quantile box of `rows` over `vars`
/// (`coverage = 1` gives the exact min/max).
pub fn leaf_hypercube(data: &Dataset, rows: &[usize], vars: &[usize], coverage: f64) -> Hypercube {
    assert!(!rows.is_empty(), "hypercube of an empty row set");
    let tail = (1.0 - coverage) / 2.0;
    let mut lo = Vec::with_capacity(vars.len());
    let mut hi = Vec::with_capacity(vars.len());
    let mut buf = Vec::with_capacity(rows.len());
    for &j in vars {
        buf.clear();
        buf.extend(rows.iter().map(|&i| data.get(i, j)));
        buf.sort_by(f64::total_cmp);
        if coverage >= 1.0 {
            lo.push(buf[0]);
            hi.push(buf[buf.len() - 1]);
        } else {
            lo.push(quantile_sorted(&buf, tail));
            hi.push(quantile_sorted(&buf, 1.0 - tail));
        }
    }
    Hypercube {
        vars: vars.to_vec(),
        lo,
        hi,
    }
}

/// Cube variables on which at least one of the test rows is outside.
pub fn active_variables(test: &Dataset, rows: &[usize], cube: &Hypercube) -> Vec<usize> {
    cube.vars
        .iter()
        .enumerate()
        .filter(|&(k, &j)| rows.iter().any(|&i| cube.outside(k, test.get(i, j))))
        .map(|(_, &j)| j)
        .collect()
}

/// Squared-exponential kernel over already-projected coordinates:
/// `tau_gp * exp(-theta * sum_i (x_i - x'_i)^2 / (2 delta_i^2))`.
#[inline]
pub fn sq_exp_kernel(x: &[f64], x2: &[f64], delta: &[f64], cfg: &GPConfig) -> f64 {
    let d2: f64 = x
        .iter()
        .zip(x2)
        .zip(delta)
        .map(|((a, b), d)| {
            let u = (a - b) / d;
            u * u
        })
        .sum();
    cfg.tau_gp * (-cfg.theta * d2 / 2.0).exp()
}

/// Gram matrix `k(a_i, b_j)`.
pub fn kernel_matrix(a: &[Vec<f64>], b: &[Vec<f64>], delta: &[f64], cfg: &GPConfig) -> DMatrix<f64> {
    DMatrix::from_fn(a.len(), b.len(), |i, j| sq_exp_kernel(&a[i], &b[j], delta, cfg))
}

/// Conditional mean and covariance of the test residuals.
#[derive(Debug, Clone, PartialEq)]
pub struct GpConditional {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Noise on the training block of the leaf GP: one shared variance or one
/// per training row.
#[derive(Debug, Clone, Copy)]
pub enum Noise<'a> {
    Shared(f64),
    PerRow(&'a [f64]),
}

/// Cholesky with jitter escalation from `cfg.jitter * tau_gp` by factors of
/// ten up to `1e-2 * tau_gp`.
fn cholesky_with_jitter(m: &DMatrix<f64>, cfg: &GPConfig) -> Option<Cholesky<f64, Dyn>> {
    let cap = 1e-2 * cfg.tau_gp;
    let mut jitter = cfg.jitter * cfg.tau_gp;
    loop {
        let mut a = m.clone();
        for i in 0..a.nrows() {
            a[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(a) {
            return Some(c);
        }
        if jitter >= cap {
            return None;
        }
        jitter = if jitter == 0.0 { 1e-8 * cfg.tau_gp } else { (jitter * 10.0).min(cap) };
    }
}

/// GP conditioning of exterior test rows on leaf training rows.
///
/// `mean = mu + K_te,tr [K_tr,tr + noise]^-1 (r_tr - mu)`,
/// `cov = K_te,te - K_te,tr [K_tr,tr + noise]^-1 K_tr,te`.
/// Coordinates must already be restricted to the active variables.
pub fn gp_conditional(
    xte: &[Vec<f64>],
    xtr: &[Vec<f64>],
    rtr: &[f64],
    mu: f64,
    noise: Noise<'_>,
    delta: &[f64],
    cfg: &GPConfig,
) -> Result<GpConditional> {
    if xtr.is_empty() || xtr.len() != rtr.len() {
        return Err(Error::DimensionMismatch(
            "gp conditioning needs one residual per training row and at least one row".into(),
        ));
    }
    if xte.is_empty() {
        return Ok(GpConditional {
            mean: DVector::zeros(0),
            cov: DMatrix::zeros(0, 0),
        });
    }
    let mut ktr = kernel_matrix(xtr, xtr, delta, cfg);
    for i in 0..xtr.len() {
        ktr[(i, i)] += match noise {
            Noise::Shared(v) => v,
            Noise::PerRow(v) => v[i],
        };
    }
    let chol = cholesky_with_jitter(&ktr, cfg).ok_or(Error::GpSingular)?;
    let kte_tr = kernel_matrix(xte, xtr, delta, cfg);
    let centered = DVector::from_iterator(rtr.len(), rtr.iter().map(|r| r - mu));
    let weights = chol.solve(&centered);
    let mean = (&kte_tr * weights).add_scalar(mu);
    // K_te,tr K^-1 K_tr,te = V^T V with V = L^-1 K_tr,te.
    let l = chol.l();
    let mut v2 = kte_tr.transpose();
    if !l.solve_lower_triangular_mut(&mut v2) {
        return Err(Error::GpSingular);
    }
    let mut cov = kernel_matrix(xte, xte, delta, cfg) - v2.transpose() * &v2;
    // Symmetrize away rounding.
    for i in 0..cov.nrows() {
        for j in 0..i {
            let a = 0.5 * (cov[(i, j)] + cov[(j, i)]);
            cov[(i, j)] = a;
            cov[(j, i)] = a;
        }
    }
    Ok(GpConditional { mean, cov })
}

/// A factor `F` with `F F^T ~= cov`, used to draw correlated normals.
fn covariance_factor(cov: &DMatrix<f64>, cfg: &GPConfig) -> DMatrix<f64> {
    let mut scaled = *cfg;
    scaled.jitter = scaled.jitter.max(1e-12);
    if let Some(c) = cholesky_with_jitter(cov, &scaled) {
        return c.unpack();
    }
    let eig = SymmetricEigen::new(cov.clone());
    let mut f = eig.eigenvectors.clone();
    for (k, lam) in eig.eigenvalues.iter().enumerate() {
        let s = lam.max(0.0).sqrt();
        f.column_mut(k).scale_mut(s);
    }
    f
}

/// Draws `mean + F z` with `z` standard normal from `rng`.
pub fn draw_conditional(cond: &GpConditional, cfg: &GPConfig, rng: &mut RngStream) -> Vec<f64> {
    let m = cond.mean.len();
    if m == 0 {
        return Vec::new();
    }
    let f = covariance_factor(&cond.cov, cfg);
    let z = DVector::from_iterator(m, (0..m).map(|_| rng.std_normal()));
    (&cond.mean + f * z).iter().copied().collect()
}

/// Output of [`predict_from_root`] for one tree.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeExtrapolation {
    /// Leaf value at every training row.
    pub rtr: Vec<f64>,
    /// Leaf value or GP draw at every test row.
    pub rte: Vec<f64>,
    /// Which test rows received a GP draw.
    pub extrapolated: Vec<bool>,
    /// Leaves whose GP solve failed and fell back to the constant.
    pub singular_leaves: usize,
}

/// Identifies the random streams of one tree within one sweep.
#[derive(Debug, Clone, Copy)]
pub struct StreamCoords {
    pub seed: u64,
    /// 0 for a regression forest; the causal model numbers its two forests 1 and 2.
    pub forest: u64,
    pub sweep: usize,
    pub tree: usize,
}

impl StreamCoords {
    pub fn new(seed: u64, sweep: usize, tree: usize) -> Self {
        Self {
            seed,
            forest: 0,
            sweep,
            tree,
        }
    }

    pub(crate) fn rng(&self, purpose: Purpose, leaf: usize) -> RngStream {
        RngStream::for_purpose(
            self.seed,
            purpose,
            &[self.forest, self.sweep as u64, self.tree as u64, leaf as u64],
        )
    }
}

/// Shared state for one recursive pass down a tree.
struct LeafPass<'a> {
    tree: &'a Tree,
    resid: &'a [f64],
    xtr: &'a Dataset,
    xte: &'a Dataset,
    noise: &'a [f64],
    /// Fallback kernel widths for variables that are constant in a leaf.
    global_width: Vec<f64>,
    cfg: &'a GPConfig,
    coords: StreamCoords,
    out: TreeExtrapolation,
}

/// Co-partitions training and test rows down `tree` and extrapolates the
/// exterior test rows of each leaf. `resid` holds the partial residuals of
/// this tree at the training rows, `sigma2` the sweep's noise variance and
/// `num_trees` the forest size (each tree carries `sigma2 / num_trees`).
pub fn predict_from_root(
    tree: &Tree,
    resid: &[f64],
    xtr: &Dataset,
    xte: &Dataset,
    sigma2: f64,
    num_trees: usize,
    cfg: &GPConfig,
    coords: StreamCoords,
) -> Result<TreeExtrapolation> {
    let noise = vec![sigma2 / num_trees as f64; xtr.n()];
    predict_from_root_weighted(tree, resid, &noise, xtr, xte, cfg, coords)
}

/// As [`predict_from_root`] with a separate noise variance per training row.
pub fn predict_from_root_weighted(
    tree: &Tree,
    resid: &[f64],
    noise: &[f64],
    xtr: &Dataset,
    xte: &Dataset,
    cfg: &GPConfig,
    coords: StreamCoords,
) -> Result<TreeExtrapolation> {
    if resid.len() != xtr.n() || noise.len() != xtr.n() {
        return Err(Error::DimensionMismatch("one partial residual and noise variance per training row".into()));
    }
    if xtr.p() != xte.p() {
        return Err(Error::DimensionMismatch(format!(
            "training data has {} columns, test data {}",
            xtr.p(),
            xte.p()
        )));
    }
    let global_width = xtr.ranges().iter().map(|(lo, hi)| hi - lo).collect();
    let mut pass = LeafPass {
        tree,
        resid,
        xtr,
        xte,
        noise,
        global_width,
        cfg,
        coords,
        out: TreeExtrapolation {
            rtr: vec![0.0; xtr.n()],
            rte: vec![0.0; xte.n()],
            extrapolated: vec![false; xte.n()],
            singular_leaves: 0,
        },
    };
    let train: Vec<usize> = (0..xtr.n()).collect();
    let test: Vec<usize> = (0..xte.n()).collect();
    pass.visit(0, train, test, &mut Vec::new());
    Ok(pass.out)
}

/// Kernel widths for the active variables: the cube width, else the global
/// training range; variables with neither are dropped.
pub(crate) fn kernel_widths(cube: &Hypercube, active: &[usize], global_width: &[f64]) -> (Vec<usize>, Vec<f64>) {
    let mut vars = Vec::with_capacity(active.len());
    let mut widths = Vec::with_capacity(active.len());
    for &j in active {
        let k = cube.vars.iter().position(|&v| v == j).expect("active variable in cube");
        let mut d = cube.width(k);
        if !(d > 0.0) {
            d = global_width[j];
        }
        if d > 0.0 {
            vars.push(j);
            widths.push(d);
        }
    }
    (vars, widths)
}

pub(crate) fn project(data: &Dataset, rows: &[usize], vars: &[usize]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|&i| vars.iter().map(|&j| data.get(i, j)).collect())
        .collect()
}

impl LeafPass<'_> {
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
        for &i in train {
            self.out.rtr[i] = mu;
        }
        for &i in test {
            self.out.rte[i] = mu;
        }
        if test.is_empty() || train.is_empty() || path.is_empty() {
            return;
        }
        let cube = leaf_hypercube(self.xtr, train, path, self.cfg.hypercube_coverage);
        let active = active_variables(self.xte, test, &cube);
        if active.is_empty() {
            return;
        }
        let exterior: Vec<usize> = test
            .iter()
            .copied()
            .filter(|&i| cube.excludes(|j| self.xte.get(i, j)))
            .collect();
        let (vars, widths) = kernel_widths(&cube, &active, &self.global_width);

        let picked: Vec<usize> = if train.len() > self.cfg.subsample {
            let mut rng = self.coords.rng(Purpose::Subsample, node);
            rng.sample_without_replacement(train.len(), self.cfg.subsample)
                .into_iter()
                .map(|k| train[k])
                .collect()
        } else {
            train.to_vec()
        };
        let xtr_b = project(self.xtr, &picked, &vars);
        let rtr_b: Vec<f64> = picked.iter().map(|&i| self.resid[i]).collect();
        let noise_b: Vec<f64> = picked.iter().map(|&i| self.noise[i]).collect();
        let xte_b = project(self.xte, &exterior, &vars);
        match gp_conditional(&xte_b, &xtr_b, &rtr_b, mu, Noise::PerRow(&noise_b), &widths, self.cfg) {
            Ok(cond) => {
                let mut rng = self.coords.rng(Purpose::GpDraw, node);
                let draw = draw_conditional(&cond, self.cfg, &mut rng);
                for (&i, v) in exterior.iter().zip(draw) {
                    self.out.rte[i] = v;
                    self.out.extrapolated[i] = true;
                }
            }
            Err(_) => self.out.singular_leaves += 1,
        }
    }
}

/// GP-extrapolated posterior predictive.
#[derive(Debug, Clone, PartialEq)]
pub struct GpPrediction {
    pub prediction: Prediction,
    /// Per test row: fraction of retained (sweep, tree) pairs that extrapolated it.
    pub exterior_fraction: Vec<f64>,
    /// Total leaf GP solves that fell back to the constant.
    pub singular_leaves: usize,
}

/// Partial residuals of every tree in every retained sweep, replayed from
/// the stored forests exactly as they were formed during fitting.
pub(crate) fn replay_partials(draws: &PosteriorDraws, train: &Dataset, y: &[f64]) -> Vec<Vec<Vec<f64>>> {
    let n = train.n();
    let l_trees = draws.num_trees();
    let y_center = draws.config.y_center;
    let mut resid: Vec<f64> = y.iter().map(|v| v - y_center).collect();
    let mut fits = vec![vec![0.0; n]; l_trees];
    let mut out = Vec::with_capacity(draws.retained().len());
    for (s, forest) in draws.forests.iter().enumerate() {
        let keep = s >= draws.config.burn_in;
        let mut sweep = Vec::with_capacity(if keep { l_trees } else { 0 });
        for (l, tree) in forest.iter().enumerate() {
            let partial: Vec<f64> = resid.iter().zip(&fits[l]).map(|(r, f)| r + f).collect();
            let new_fit = tree.predict_all(train);
            for i in 0..n {
                resid[i] = partial[i] - new_fit[i];
            }
            fits[l] = new_fit;
            if keep {
                sweep.push(partial);
            }
        }
        if keep {
            out.push(sweep);
        }
    }
    out
}

/// Posterior predictive with per-leaf GP extrapolation. `train` must be the
/// labelled data the forest was fitted on.
pub fn predict_gp(
    draws: &PosteriorDraws,
    train: &Dataset,
    test: &Dataset,
    alpha: f64,
    cfg: &GPConfig,
    seed: u64,
) -> Result<GpPrediction> {
    predict_gp_with(draws, train, test, alpha, cfg, seed, true)
}

pub fn predict_gp_with(
    draws: &PosteriorDraws,
    train: &Dataset,
    test: &Dataset,
    alpha: f64,
    cfg: &GPConfig,
    seed: u64,
    add_noise: bool,
) -> Result<GpPrediction> {
    cfg.validate()?;
    let fp = train.fingerprint();
    if fp != draws.fingerprint {
        return Err(Error::FingerprintMismatch {
            expected: draws.fingerprint.clone(),
            found: fp,
        });
    }
    if test.p() != draws.n_features {
        return Err(Error::DimensionMismatch(format!(
            "model has {} features, test data has {}",
            draws.n_features,
            test.p()
        )));
    }
    let y = train.require_y()?;
    let partials = replay_partials(draws, train, y);
    let sweeps = draws.retained();
    let l_trees = draws.num_trees();
    let y_center = draws.config.y_center;

    let per_sweep: Vec<(Vec<f64>, Vec<usize>, usize)> = sweeps
        .clone()
        .into_par_iter()
        .zip(partials.into_par_iter())
        .map(|(s, sweep_partials)| {
            let mut sums = vec![0.0; test.n()];
            let mut ext_counts = vec![0usize; test.n()];
            let mut singular = 0;
            for (l, (tree, partial)) in draws.forests[s].iter().zip(&sweep_partials).enumerate() {
                let coords = StreamCoords::new(seed, s, l);
                let ex = predict_from_root(tree, partial, train, test, draws.sigma2[s], l_trees, cfg, coords)?;
                for i in 0..test.n() {
                    sums[i] += ex.rte[i];
                    ext_counts[i] += usize::from(ex.extrapolated[i]);
                }
                singular += ex.singular_leaves;
            }
            let values = sums.into_iter().map(|v| y_center + v).collect();
            Ok((values, ext_counts, singular))
        })
        .collect::<Result<_>>()?;

    let m = per_sweep.len();
    let mut noiseless = vec![Vec::with_capacity(m); test.n()];
    let mut ext = vec![0usize; test.n()];
    let mut singular_leaves = 0;
    for (values, counts, sing) in per_sweep {
        for i in 0..test.n() {
            noiseless[i].push(values[i]);
            ext[i] += counts[i];
        }
        singular_leaves += sing;
    }
    let prediction = assemble_prediction(noiseless, &draws.sigma2, sweeps, alpha, seed, add_noise)?;
    let pairs = (m * l_trees) as f64;
    Ok(GpPrediction {
        prediction,
        exterior_fraction: ext.into_iter().map(|c| c as f64 / pairs).collect(),
        singular_leaves,
    })
}
