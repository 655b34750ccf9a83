//! Jackknife+ and CV+ intervals around any point regressor.

use rand::RngCore;
use rayon::prelude::*;

use crate::data::Dataset;
use crate::ensemble::{self, FitConfig};
use crate::error::{Error, Result};
use crate::interval::{kth_smallest, lower_rank, upper_rank, Interval};
use crate::rng::{Purpose, RngStream};

/// A fit-then-predict procedure. Must be deterministic given `seed`.
pub trait Regressor: Sync {
    /// Fits on `train` (which carries a response) and predicts `test`.
    fn fit_predict(&self, train: &Dataset, test: &Dataset, seed: u64) -> Result<Vec<f64>>;
}

impl<F> Regressor for F
where
    F: Fn(&Dataset, &Dataset, u64) -> Result<Vec<f64>> + Sync,
{
    fn fit_predict(&self, train: &Dataset, test: &Dataset, seed: u64) -> Result<Vec<f64>> {
        self(train, test, seed)
    }
}

/// Posterior-mean prediction of the tree ensemble.
#[derive(Debug, Clone, Copy)]
pub struct EnsembleRegressor {
    pub num_trees: usize,
    pub num_sweeps: usize,
    pub burn_in: usize,
}

impl Default for EnsembleRegressor {
    fn default() -> Self {
        Self {
            num_trees: 20,
            num_sweeps: 100,
            burn_in: 15,
        }
    }
}

impl Regressor for EnsembleRegressor {
    fn fit_predict(&self, train: &Dataset, test: &Dataset, seed: u64) -> Result<Vec<f64>> {
        let cfg = FitConfig::for_response(train.require_y()?, self.num_trees, self.num_sweeps, self.burn_in);
        let draws = ensemble::fit(train, &cfg, seed)?;
        ensemble::posterior_mean(&draws, test)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConformalPrediction {
    pub intervals: Vec<Interval>,
    /// Average over the held-out models of their test predictions.
    pub mean: Vec<f64>,
}

/// Seed handed to the model that leaves out the fold whose smallest row is `fold_id`.
pub fn fold_seed(seed: u64, fold_id: usize) -> u64 {
    RngStream::for_purpose(seed, Purpose::Fold, &[fold_id as u64]).next_u64()
}

/// Fits one model per held-out set; returns, per training row, the
/// held-out-model residual and, per test point, that model's predictions
/// indexed by training row.
fn held_out<R: Regressor + ?Sized>(
    reg: &R,
    data: &Dataset,
    xte: &Dataset,
    folds: &[Vec<usize>],
    seed: u64,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let n = data.n();
    let y = data.require_y()?;
    if xte.p() != data.p() {
        return Err(Error::DimensionMismatch(format!(
            "training data has {} columns, test data {}",
            data.p(),
            xte.p()
        )));
    }
    let fits: Vec<(usize, Vec<f64>)> = folds
        .par_iter()
        .map(|fold| {
            let id = fold[0];
            let keep: Vec<usize> = (0..n).filter(|i| fold.binary_search(i).is_err()).collect();
            let run = || -> Result<Vec<f64>> {
                let train = data.select_rows(&keep)?;
                let eval = data.select_rows(fold)?.stack(xte)?;
                let pred = reg.fit_predict(&train, &eval, fold_seed(seed, id))?;
                if pred.len() != eval.n() {
                    return Err(Error::DimensionMismatch(format!(
                        "regressor returned {} predictions for {} rows",
                        pred.len(),
                        eval.n()
                    )));
                }
                Ok(pred)
            };
            run().map(|p| (id, p)).map_err(|e| Error::Fold {
                fold: id,
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;

    let mut resid = vec![0.0; n];
    let mut test_preds = vec![vec![0.0; n]; xte.n()];
    for (fold, (_, pred)) in folds.iter().zip(&fits) {
        let (own, test) = pred.split_at(fold.len());
        for (&i, &p) in fold.iter().zip(own) {
            resid[i] = (y[i] - p).abs();
            for (t, &pt) in test.iter().enumerate() {
                test_preds[t][i] = pt;
            }
        }
    }
    Ok((resid, test_preds))
}

fn plus_intervals(resid: &[f64], test_preds: Vec<Vec<f64>>, alpha: f64) -> ConformalPrediction {
    let n = resid.len();
    let lo_k = lower_rank(alpha, n);
    let hi_k = upper_rank(alpha, n);
    let (intervals, mean) = test_preds
        .into_iter()
        .map(|preds| {
            let mut lo: Vec<f64> = preds.iter().zip(resid).map(|(p, r)| p - r).collect();
            let mut hi: Vec<f64> = preds.iter().zip(resid).map(|(p, r)| p + r).collect();
            let iv = Interval {
                lo: kth_smallest(&mut lo, lo_k),
                hi: kth_smallest(&mut hi, hi_k),
                level: 1.0 - alpha,
            };
            let m = preds.iter().sum::<f64>() / n as f64;
            (iv, m)
        })
        .unzip();
    ConformalPrediction { intervals, mean }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("alpha must lie in (0, 1), got {alpha}")))
    }
}

/// Jackknife+ intervals from the `n` leave-one-out refits.
pub fn jackknife_plus<R: Regressor + ?Sized>(
    reg: &R,
    data: &Dataset,
    xte: &Dataset,
    alpha: f64,
    seed: u64,
) -> Result<ConformalPrediction> {
    check_alpha(alpha)?;
    if data.n() < 2 {
        return Err(Error::InvalidData("jackknife+ needs n >= 2".into()));
    }
    let folds: Vec<Vec<usize>> = (0..data.n()).map(|i| vec![i]).collect();
    let (resid, preds) = held_out(reg, data, xte, &folds, seed)?;
    Ok(plus_intervals(&resid, preds, alpha))
}

/// Seeded assignment of rows to `k` folds of near-equal size. Each fold is
/// sorted; folds are ordered by their smallest row.
pub fn fold_assignment(n: usize, k: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut perm: Vec<usize> = (0..n).collect();
    RngStream::for_purpose(seed, Purpose::Fold, &[u64::MAX]).shuffle(&mut perm);
    let mut folds = vec![Vec::new(); k];
    for (pos, &i) in perm.iter().enumerate() {
        folds[pos % k].push(i);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    folds.sort_by_key(|f| f[0]);
    folds
}

/// CV+ intervals from `k` fold refits.
pub fn cv_plus<R: Regressor + ?Sized>(
    reg: &R,
    data: &Dataset,
    xte: &Dataset,
    k: usize,
    alpha: f64,
    seed: u64,
) -> Result<ConformalPrediction> {
    check_alpha(alpha)?;
    if k < 2 || k > data.n() {
        return Err(Error::InvalidConfig(format!("need 2 <= K <= n, got K={k}, n={}", data.n())));
    }
    let folds = fold_assignment(data.n(), k, seed);
    let (resid, preds) = held_out(reg, data, xte, &folds, seed)?;
    Ok(plus_intervals(&resid, preds, alpha))
}
