//! Single regression trees grown recursively from the root.
//!
//! At every node the sampler enumerates candidate cutpoints, scores each by
//! the integrated (leaf mean marginalized) likelihood of the two children and
//! draws one option, including "no split", proportionally to its weight.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreePrior {
    /// Base split probability.
    pub alpha: f64,
    /// Depth penalty exponent.
    pub beta: f64,
    /// Prior variance of a leaf mean.
    pub tau: f64,
    pub max_depth: usize,
    /// Nodes with fewer rows are never split.
    pub n_min: usize,
    /// Maximum candidate cutpoints per variable and node.
    pub n_cutpoints: usize,
    /// Each child of a split keeps at least this many rows.
    pub min_child: usize,
}

impl Default for TreePrior {
    fn default() -> Self {
        Self {
            alpha: 0.95,
            beta: 2.0,
            tau: 1.0,
            max_depth: 250,
            n_min: 1,
            n_cutpoints: 100,
            min_child: 1,
        }
    }
}

impl TreePrior {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidConfig(format!("alpha must lie in (0,1), got {}", self.alpha)));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::InvalidConfig(format!("beta must be >= 0, got {}", self.beta)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidConfig(format!("tau must be > 0, got {}", self.tau)));
        }
        if self.n_min < 1 || self.min_child < 1 || self.n_cutpoints < 1 {
            return Err(Error::InvalidConfig(
                "n_min, min_child and n_cutpoints must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Prior probability that a node at `depth` splits.
pub fn split_prob(depth: usize, prior: &TreePrior) -> f64 {
    prior.alpha * (1.0 + depth as f64).powf(-prior.beta)
}

/// Count and residual sum of a node.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SuffStats {
    pub n: usize,
    pub s: f64,
}

/// Data-dependent part of the log integrated likelihood of one node under
/// `r_i ~ N(mu, sigma2)`, `mu ~ N(0, tau)`.
pub fn log_marginal(node: SuffStats, sigma2: f64, tau: f64) -> f64 {
    let denom = sigma2 + tau * node.n as f64;
    0.5 * (sigma2 / denom).ln() + tau * node.s * node.s / (2.0 * sigma2 * denom)
}

/// Same quantity for heteroscedastic rows, in terms of the precision sum
/// `w = sum 1/v_i` and the precision-weighted residual sum `ws = sum r_i/v_i`.
#[inline]
pub fn log_marginal_weighted(w: f64, ws: f64, tau: f64) -> f64 {
    let d = 1.0 + tau * w;
    -0.5 * d.ln() + tau * ws * ws / (2.0 * d)
}

/// Per-row noise precision used by the likelihood.
#[derive(Debug, Clone, Copy)]
pub enum Precision<'a> {
    /// Every row has noise variance `sigma2`.
    Uniform(f64),
    /// Row `i` has precision `w[i]`.
    PerRow(&'a [f64]),
}

impl Precision<'_> {
    #[inline]
    fn at(&self, i: usize) -> f64 {
        match self {
            Precision::Uniform(s2) => 1.0 / s2,
            Precision::PerRow(w) => w[i],
        }
    }
}

/// Split constraint requiring both treatment arms in every child.
#[derive(Debug, Clone, Copy)]
pub struct ArmConstraint<'a> {
    pub treated: &'a [bool],
    pub min_per_arm: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeKind {
    Split {
        var: usize,
        cut: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        mu: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub kind: NodeKind,
    pub depth: usize,
}

/// A full binary tree stored as a node array with the root at index 0.
/// Rows go left iff `x[var] <= cut`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "Vec<NodeRecord>", try_from = "Vec<NodeRecord>")]
pub struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    pub fn leaf(mu: f64) -> Self {
        Self {
            nodes: vec![Node {
                kind: NodeKind::Leaf { mu },
                depth: 0,
            }],
        }
    }

    /// Builds a tree from a node array, checking the structure.
    pub fn from_nodes(nodes: Vec<Node>) -> Result<Self> {
        let t = Self { nodes };
        t.check()?;
        Ok(t)
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n.kind, NodeKind::Leaf { .. }))
            .count()
    }

    /// Index of the leaf reached by a row accessor.
    #[inline]
    pub fn leaf_index_by(&self, x: impl Fn(usize) -> f64) -> usize {
        let mut i = 0;
        loop {
            match self.nodes[i].kind {
                NodeKind::Split {
                    var,
                    cut,
                    left,
                    right,
                } => i = if x(var) <= cut { left } else { right },
                NodeKind::Leaf { .. } => return i,
            }
        }
    }

    #[inline]
    pub fn leaf_mu(&self, leaf: usize) -> f64 {
        match self.nodes[leaf].kind {
            NodeKind::Leaf { mu } => mu,
            NodeKind::Split { .. } => panic!("node {leaf} is not a leaf"),
        }
    }

    /// Leaf value at row `i` of `data`.
    #[inline]
    pub fn predict_at(&self, data: &Dataset, i: usize) -> f64 {
        self.leaf_mu(self.leaf_index_by(|j| data.get(i, j)))
    }

    /// Leaf value at every row of `data`.
    pub fn predict_all(&self, data: &Dataset) -> Vec<f64> {
        (0..data.n()).map(|i| self.predict_at(data, i)).collect()
    }

    /// Leaf index of every row of `data`.
    pub fn route(&self, data: &Dataset) -> Vec<usize> {
        (0..data.n())
            .map(|i| self.leaf_index_by(|j| data.get(i, j)))
            .collect()
    }

    fn set_mu(&mut self, leaf: usize, value: f64) {
        if let NodeKind::Leaf { mu } = &mut self.nodes[leaf].kind {
            *mu = value;
        }
    }

    /// Verifies that the array is a rooted full binary tree with consistent depths.
    fn check(&self) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Schema("tree has no nodes".into()));
        }
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![(0usize, 0usize)];
        while let Some((i, d)) = stack.pop() {
            if i >= self.nodes.len() || seen[i] {
                return Err(Error::Schema(format!("node {i} is missing or reached twice")));
            }
            seen[i] = true;
            if self.nodes[i].depth != d {
                return Err(Error::Schema(format!("node {i} has depth {}, expected {d}", self.nodes[i].depth)));
            }
            match &self.nodes[i].kind {
                NodeKind::Split { left, right, cut, .. } => {
                    if !cut.is_finite() {
                        return Err(Error::Schema(format!("node {i} has a non-finite cutpoint")));
                    }
                    stack.push((*left, d + 1));
                    stack.push((*right, d + 1));
                }
                NodeKind::Leaf { mu } => {
                    if !mu.is_finite() {
                        return Err(Error::Schema(format!("leaf {i} has a non-finite value")));
                    }
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Schema("tree has unreachable nodes".into()));
        }
        Ok(())
    }
}

/// Serialized form of one node.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeRecord {
    pub id: usize,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub var: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cut: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub left: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub right: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    pub depth: usize,
}

impl From<Tree> for Vec<NodeRecord> {
    fn from(t: Tree) -> Self {
        t.nodes
            .into_iter()
            .enumerate()
            .map(|(id, n)| match n.kind {
                NodeKind::Split {
                    var,
                    cut,
                    left,
                    right,
                } => NodeRecord {
                    id,
                    kind: "split".into(),
                    var: Some(var),
                    cut: Some(cut),
                    left: Some(left),
                    right: Some(right),
                    mu: None,
                    depth: n.depth,
                },
                NodeKind::Leaf { mu } => NodeRecord {
                    id,
                    kind: "leaf".into(),
                    var: None,
                    cut: None,
                    left: None,
                    right: None,
                    mu: Some(mu),
                    depth: n.depth,
                },
            })
            .collect()
    }
}

impl TryFrom<Vec<NodeRecord>> for Tree {
    type Error = Error;

    fn try_from(recs: Vec<NodeRecord>) -> Result<Self> {
        let mut nodes = Vec::with_capacity(recs.len());
        for (pos, r) in recs.into_iter().enumerate() {
            if r.id != pos {
                return Err(Error::Schema(format!("node id {} at position {pos}", r.id)));
            }
            let missing = |f: &str| Error::Schema(format!("node {pos}: missing field {f}"));
            let kind = match r.kind.as_str() {
                "split" => NodeKind::Split {
                    var: r.var.ok_or_else(|| missing("var"))?,
                    cut: r.cut.ok_or_else(|| missing("cut"))?,
                    left: r.left.ok_or_else(|| missing("left"))?,
                    right: r.right.ok_or_else(|| missing("right"))?,
                },
                "leaf" => NodeKind::Leaf {
                    mu: r.mu.ok_or_else(|| missing("mu"))?,
                },
                other => return Err(Error::Schema(format!("node {pos}: unknown kind {other:?}"))),
            };
            nodes.push(Node { kind, depth: r.depth });
        }
        Tree::from_nodes(nodes)
    }
}

/// Prediction of a single tree at a row.
pub fn tree_predict(tree: &Tree, x: &[f64]) -> f64 {
    tree.leaf_mu(tree.leaf_index_by(|j| x[j]))
}

/// Grows a new tree for residuals with common noise variance `sigma2`.
/// Leaf values are left at zero; see [`sample_leaf_params`].
pub fn grow_from_root(
    resid: &[f64],
    data: &Dataset,
    prior: &TreePrior,
    sigma2: f64,
    rng: &mut RngStream,
) -> Result<Tree> {
    if !(sigma2 > 0.0 && sigma2.is_finite()) {
        return Err(Error::InvalidConfig(format!("sigma2 must be > 0, got {sigma2}")));
    }
    grow_from_root_with(resid, data, prior, Precision::Uniform(sigma2), None, rng)
}

/// General form of [`grow_from_root`] with per-row precisions and an optional
/// treatment-arm constraint on every split.
pub fn grow_from_root_with(
    resid: &[f64],
    data: &Dataset,
    prior: &TreePrior,
    precision: Precision<'_>,
    arms: Option<ArmConstraint<'_>>,
    rng: &mut RngStream,
) -> Result<Tree> {
    let n = data.n();
    if resid.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} residuals for {n} rows",
            resid.len()
        )));
    }
    if resid.iter().any(|r| !r.is_finite()) {
        return Err(Error::InvalidData("non-finite residual".into()));
    }
    if let Precision::PerRow(w) = precision {
        if w.len() != n || w.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidData("precision weights must be positive and one per row".into()));
        }
    }
    if let Some(a) = arms {
        if a.treated.len() != n {
            return Err(Error::DimensionMismatch("treatment vector length".into()));
        }
    }
    prior.validate()?;

    let mut g = Grower {
        data,
        resid,
        prior,
        precision,
        arms,
        rng,
        nodes: Vec::new(),
        goes_left: vec![false; n],
    };
    let sorted: Vec<Vec<usize>> = (0..data.p()).map(|j| data.sorted_idx(j).to_vec()).collect();
    g.grow(sorted, 0);
    Ok(Tree { nodes: g.nodes })
}

struct Candidate {
    var: usize,
    pos: usize,
    log_weight: f64,
}

struct Grower<'a, 'r> {
    data: &'a Dataset,
    resid: &'a [f64],
    prior: &'a TreePrior,
    precision: Precision<'a>,
    arms: Option<ArmConstraint<'a>>,
    rng: &'r mut RngStream,
    nodes: Vec<Node>,
    goes_left: Vec<bool>,
}

impl Grower<'_, '_> {
    fn grow(&mut self, sorted: Vec<Vec<usize>>, depth: usize) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node {
            kind: NodeKind::Leaf { mu: 0.0 },
            depth,
        });
        let m = sorted[0].len();
        if m < self.prior.n_min.max(2) || depth >= self.prior.max_depth {
            return id;
        }

        let tau = self.prior.tau;
        let (w_all, ws_all) = sorted[0].iter().fold((0.0, 0.0), |(w, ws), &i| {
            let pi = self.precision.at(i);
            (w + pi, ws + pi * self.resid[i])
        });
        let mut cands = Vec::new();
        for (var, rows) in sorted.iter().enumerate() {
            self.candidates_for(var, rows, &mut cands);
        }
        if cands.is_empty() {
            return id;
        }

        let p_split = split_prob(depth, self.prior);
        let no_split = (cands.len() as f64).ln() + (1.0 / p_split - 1.0).ln()
            + log_marginal_weighted(w_all, ws_all, tau);
        let max_lw = cands
            .iter()
            .map(|c| c.log_weight)
            .fold(no_split, f64::max);
        let mut total = (no_split - max_lw).exp();
        let weights: Vec<f64> = cands
            .iter()
            .map(|c| {
                let w = (c.log_weight - max_lw).exp();
                total += w;
                w
            })
            .collect();
        let target = self.rng.uniform() * total;
        let mut acc = (no_split - max_lw).exp();
        if target < acc {
            return id;
        }
        let mut chosen = cands.len() - 1;
        for (k, w) in weights.iter().enumerate() {
            acc += w;
            if target < acc {
                chosen = k;
                break;
            }
        }
        let Candidate { var, pos, .. } = cands[chosen];

        let rows = &sorted[var];
        let lo = self.data.get(rows[pos], var);
        let hi = self.data.get(rows[pos + 1], var);
        let mid = 0.5 * (lo + hi);
        let cut = if mid >= lo && mid < hi { mid } else { lo };

        for (k, &i) in rows.iter().enumerate() {
            self.goes_left[i] = k <= pos;
        }
        let mut left_sorted = Vec::with_capacity(sorted.len());
        let mut right_sorted = Vec::with_capacity(sorted.len());
        for list in &sorted {
            let (l, r): (Vec<usize>, Vec<usize>) = list.iter().partition(|&&i| self.goes_left[i]);
            left_sorted.push(l);
            right_sorted.push(r);
        }
        drop(sorted);
        let left = self.grow(left_sorted, depth + 1);
        let right = self.grow(right_sorted, depth + 1);
        self.nodes[id].kind = NodeKind::Split {
            var,
            cut,
            left,
            right,
        };
        id
    }

    /// Appends the admissible cutpoints of one variable. A cutpoint at
    /// position `k` sends the first `k + 1` sorted rows left.
    fn candidates_for(&self, var: usize, rows: &[usize], out: &mut Vec<Candidate>) {
        let m = rows.len();
        let col = self.data.column(var);
        let tau = self.prior.tau;
        let cmax = self.prior.n_cutpoints;

        // next_break[k]: first k' >= k with a strict increase after it.
        let mut next_break = vec![usize::MAX; m];
        let mut nb = usize::MAX;
        for k in (0..m - 1).rev() {
            if col[rows[k]] < col[rows[k + 1]] {
                nb = k;
            }
            next_break[k] = nb;
        }
        let mut positions: Vec<usize> = if m - 1 <= cmax {
            (0..m - 1).filter(|&k| next_break[k] == k).collect()
        } else {
            let mut v: Vec<usize> = (0..cmax)
                .map(|i| ((i + 1) * m) / (cmax + 1) - 1)
                .map(|k| next_break[k])
                .filter(|&k| k != usize::MAX)
                .collect();
            v.dedup();
            v
        };
        positions.retain(|&k| k + 1 >= self.prior.min_child && m - k - 1 >= self.prior.min_child);
        if positions.is_empty() {
            return;
        }

        let mut cum_w = 0.0;
        let mut cum_ws = 0.0;
        let mut cum_t = 0usize;
        let (total_w, total_ws, total_t) = rows.iter().fold((0.0, 0.0, 0usize), |(w, ws, t), &i| {
            let pi = self.precision.at(i);
            let ti = self.arms.map_or(0, |a| usize::from(a.treated[i]));
            (w + pi, ws + pi * self.resid[i], t + ti)
        });
        let mut next = 0;
        for (k, &i) in rows.iter().enumerate() {
            if next == positions.len() {
                break;
            }
            let pi = self.precision.at(i);
            cum_w += pi;
            cum_ws += pi * self.resid[i];
            if let Some(a) = self.arms {
                cum_t += usize::from(a.treated[i]);
            }
            if positions[next] != k {
                continue;
            }
            next += 1;
            if let Some(a) = self.arms {
                let left_n = k + 1;
                let right_n = m - left_n;
                let (lt, rt) = (cum_t, total_t - cum_t);
                let (lc, rc) = (left_n - lt, right_n - rt);
                if lt.min(rt).min(lc).min(rc) < a.min_per_arm {
                    continue;
                }
            }
            let lw = log_marginal_weighted(cum_w, cum_ws, tau)
                + log_marginal_weighted(total_w - cum_w, total_ws - cum_ws, tau);
            out.push(Candidate {
                var,
                pos: k,
                log_weight: lw,
            });
        }
    }
}

/// Draws every leaf value from its conjugate normal posterior given the
/// residuals routed to it.
pub fn sample_leaf_params(
    tree: &Tree,
    resid: &[f64],
    data: &Dataset,
    sigma2: f64,
    tau: f64,
    rng: &mut RngStream,
) -> Tree {
    sample_leaf_params_with(tree, resid, data, Precision::Uniform(sigma2), tau, rng)
}

pub fn sample_leaf_params_with(
    tree: &Tree,
    resid: &[f64],
    data: &Dataset,
    precision: Precision<'_>,
    tau: f64,
    rng: &mut RngStream,
) -> Tree {
    let mut w = vec![0.0; tree.nodes.len()];
    let mut ws = vec![0.0; tree.nodes.len()];
    for (i, leaf) in tree.route(data).into_iter().enumerate() {
        let pi = precision.at(i);
        w[leaf] += pi;
        ws[leaf] += pi * resid[i];
    }
    let mut out = tree.clone();
    for id in 0..out.nodes.len() {
        if let NodeKind::Leaf { .. } = out.nodes[id].kind {
            let (mean, var) = leaf_posterior(w[id], ws[id], tau);
            let mu = rng.normal(mean, var.sqrt());
            out.set_mu(id, mu);
        }
    }
    out
}

/// Posterior mean and variance of a leaf value.
#[inline]
pub fn leaf_posterior(w: f64, ws: f64, tau: f64) -> (f64, f64) {
    let d = 1.0 + tau * w;
    (tau * ws / d, tau / d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fig2_tree() -> Tree {
        // x1 <= 0.8 ("yes") leads to the x2 split, otherwise mu1.
        Tree::from_nodes(vec![
            Node {
                kind: NodeKind::Split { var: 0, cut: 0.8, left: 1, right: 2 },
                depth: 0,
            },
            Node {
                kind: NodeKind::Split { var: 1, cut: 0.4, left: 3, right: 4 },
                depth: 1,
            },
            Node { kind: NodeKind::Leaf { mu: 1.0 }, depth: 1 },
            Node { kind: NodeKind::Leaf { mu: 3.0 }, depth: 2 },
            Node { kind: NodeKind::Leaf { mu: 2.0 }, depth: 2 },
        ])
        .unwrap()
    }

    #[test]
    fn split_prob_values() {
        let p = TreePrior::default();
        assert!((split_prob(0, &p) - 0.95).abs() < 1e-15);
        assert!((split_prob(1, &p) - 0.2375).abs() < 1e-15);
        let flat = TreePrior { beta: 0.0, ..p };
        for d in 0..10 {
            assert_eq!(split_prob(d, &flat), 0.95);
        }
    }

    #[test]
    fn log_marginal_empty_node() {
        assert_eq!(log_marginal(SuffStats { n: 0, s: 0.0 }, 1.3, 0.7), 0.0);
    }

    #[test]
    fn log_marginal_mirrored_halves() {
        let a = log_marginal(SuffStats { n: 4, s: 2.5 }, 1.0, 0.5);
        let b = log_marginal(SuffStats { n: 4, s: -2.5 }, 1.0, 0.5);
        assert_eq!(a, b);
    }

    #[test]
    fn weighted_marginal_matches_uniform_form() {
        let (n, s, sigma2, tau) = (7usize, -1.75, 0.6, 0.3);
        let a = log_marginal(SuffStats { n, s }, sigma2, tau);
        let b = log_marginal_weighted(n as f64 / sigma2, s / sigma2, tau);
        assert!((a - b).abs() < 1e-13);
    }

    #[test]
    fn fig2_routing() {
        let t = fig2_tree();
        assert_eq!(tree_predict(&t, &[0.9, 0.5]), 1.0);
        assert_eq!(tree_predict(&t, &[0.4, 0.2]), 3.0);
        assert_eq!(tree_predict(&t, &[0.4, 0.5]), 2.0);
        assert_eq!(t.n_leaves(), 3);
    }

    #[test]
    fn single_leaf_predicts_constant() {
        let t = Tree::leaf(4.25);
        for x in [[0.0, 0.0], [-1e9, 3.0], [7.0, 1e9]] {
            assert_eq!(tree_predict(&t, &x), 4.25);
        }
    }

    #[test]
    fn malformed_trees_rejected() {
        let bad = vec![Node {
            kind: NodeKind::Split { var: 0, cut: 0.0, left: 1, right: 1 },
            depth: 0,
        }];
        assert!(Tree::from_nodes(bad).is_err());
        assert!(Tree::from_nodes(vec![]).is_err());
    }

    #[test]
    fn json_round_trip() {
        let t = fig2_tree();
        let s = serde_json::to_string(&t).unwrap();
        assert!(s.contains("\"kind\":\"split\""));
        let back: Tree = serde_json::from_str(&s).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn one_row_is_a_single_leaf() {
        let d = Dataset::from_rows(&[vec![1.0, 2.0]], None).unwrap();
        for seed in 0..50 {
            let mut rng = RngStream::new(seed, 0);
            let t = grow_from_root(&[3.0], &d, &TreePrior::default(), 1.0, &mut rng).unwrap();
            assert_eq!(t.nodes().len(), 1);
        }
    }

    #[test]
    fn non_finite_residuals_rejected() {
        let d = Dataset::from_rows(&[vec![1.0], vec![2.0]], None).unwrap();
        let mut rng = RngStream::new(0, 0);
        assert!(grow_from_root(&[0.0, f64::NAN], &d, &TreePrior::default(), 1.0, &mut rng).is_err());
    }

    #[test]
    fn leaf_posterior_limits() {
        let (m, v) = leaf_posterior(10.0, 5.0, 0.5);
        assert!((m - 5.0 * 0.5 / 6.0).abs() < 1e-15);
        assert!((v - 0.5 / 6.0).abs() < 1e-15);
        // Flat prior: mean -> s / n.
        let (m, _) = leaf_posterior(10.0, 5.0, 1e8);
        assert!((m - 0.5).abs() < 1e-3);
        assert_eq!(leaf_posterior(0.0, 0.0, 0.7), (0.0, 0.7));
    }

    fn random_data(n: usize, p: usize, seed: u64) -> Dataset {
        let mut rng = RngStream::new(seed, 99);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..p).map(|_| (rng.std_normal() * 4.0).round() / 4.0).collect())
            .collect();
        Dataset::from_rows(&rows, None).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn grown_trees_partition_rows(seed in 0u64..10_000, n in 2usize..120, min_child in 1usize..6) {
            let d = random_data(n, 3, seed);
            let mut rng = RngStream::new(seed, 1);
            let resid: Vec<f64> = (0..n).map(|_| rng.std_normal()).collect();
            let prior = TreePrior { tau: 0.5, min_child, ..TreePrior::default() };
            let t = grow_from_root(&resid, &d, &prior, 0.5, &mut rng).unwrap();
            prop_assert!(Tree::from_nodes(t.nodes().to_vec()).is_ok());
            let mut counts = vec![0usize; t.nodes().len()];
            for leaf in t.route(&d) {
                let is_leaf = matches!(t.nodes()[leaf].kind, NodeKind::Leaf { .. });
                prop_assert!(is_leaf);
                counts[leaf] += 1;
            }
            prop_assert_eq!(counts.iter().sum::<usize>(), n);
            if t.nodes().len() > 1 {
                for (id, node) in t.nodes().iter().enumerate() {
                    let is_leaf = matches!(node.kind, NodeKind::Leaf { .. });
                    prop_assert!(!is_leaf || counts[id] >= min_child);
                }
            }
        }

        #[test]
        fn log_marginal_permutation_invariant(mut r in prop::collection::vec(-5f64..5.0, 1..30), sigma2 in 0.1f64..4.0, tau in 0.01f64..3.0) {
            let s1: f64 = r.iter().sum();
            let a = log_marginal(SuffStats { n: r.len(), s: s1 }, sigma2, tau);
            r.reverse();
            let s2: f64 = r.iter().rev().sum();
            prop_assert_eq!(a, log_marginal(SuffStats { n: r.len(), s: s2 }, sigma2, tau));
        }

        #[test]
        fn split_weights_scale_consistent(ws in -20f64..20.0, n in 0usize..50, sigma2 in 0.1f64..4.0, tau in 0.01f64..3.0, k in 0i32..4) {
            // c = 2^k keeps every rescaling exact in floating point.
            let c = 2f64.powi(k);
            let a = log_marginal(SuffStats { n, s: ws }, sigma2, tau);
            let b = log_marginal(SuffStats { n, s: ws * c }, sigma2 * c * c, tau * c * c);
            prop_assert_eq!(a, b);
        }
    }
}
