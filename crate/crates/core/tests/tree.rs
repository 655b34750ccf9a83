use leafgp::rng::{Purpose, RngStream};
use leafgp::tree::{
    grow_from_root, leaf_posterior, log_marginal, log_marginal_weighted, sample_leaf_params, split_prob, Node, NodeKind,
    SuffStats, Tree, TreePrior,
};
use leafgp::Dataset;

fn normal_data(n: usize, p: usize, seed: u64) -> Dataset {
    let mut rng = RngStream::new(seed, 99);
    let cols: Vec<f64> = (0..n * p).map(|_| rng.std_normal()).collect();
    Dataset::from_columns(n, p, cols, None).unwrap()
}

#[test]
fn log_marginal_matches_quadrature() {
    let r = [0.9, -0.3, 0.7, 0.4, 0.8];
    let (sigma2, tau) = (1.0, 0.5);
    let s: f64 = r.iter().sum();
    assert!((s - 2.5).abs() < 1e-12);
    let n = r.len() as f64;

    // Trapezoid rule on a Gaussian integrand converges geometrically.
    let ln_norm = |x: f64, m: f64, v: f64| -0.5 * (2.0 * std::f64::consts::PI * v).ln() - (x - m).powi(2) / (2.0 * v);
    let (a, b, m) = (-12.0, 12.0, 200_000);
    let h = (b - a) / m as f64;
    let mut integral = 0.0;
    for k in 0..=m {
        let mu = a + k as f64 * h;
        let lf: f64 = r.iter().map(|&ri| ln_norm(ri, mu, sigma2)).sum::<f64>() + ln_norm(mu, 0.0, tau);
        let wgt = if k == 0 || k == m { 0.5 } else { 1.0 };
        integral += wgt * lf.exp();
    }
    integral *= h;

    let ss: f64 = r.iter().map(|v| v * v).sum();
    let data_part = integral.ln() + 0.5 * n * (2.0 * std::f64::consts::PI * sigma2).ln() + ss / (2.0 * sigma2);
    let got = log_marginal(SuffStats { n: 5, s: 2.5 }, sigma2, tau);
    assert!((got - data_part).abs() < 1e-8, "{got} vs {data_part}");
}

// With tau tiny every data term vanishes, so the root keeps the prior
// no-split mass |C|(1/p - 1) / (|C|(1/p - 1) + |C|) = 1 - p.
#[test]
fn no_split_frequency_matches_prior_mass() {
    let data = normal_data(30, 2, 1);
    let resid = vec![0.0; 30];
    let prior = TreePrior {
        tau: 1e-12,
        ..TreePrior::default()
    };
    let trials = 10_000;
    let stops = (0..trials)
        .filter(|&t| {
            let mut rng = RngStream::for_purpose(t, Purpose::Grow, &[0, 0]);
            grow_from_root(&resid, &data, &prior, 1.0, &mut rng).unwrap().nodes().len() == 1
        })
        .count();
    let freq = stops as f64 / trials as f64;
    let expected = 1.0 - split_prob(0, &prior);
    assert!((freq - expected).abs() < 0.02, "{freq} vs {expected}");
}

// Same check with informative data terms against the analytic weights.
#[test]
fn no_split_frequency_matches_weights() {
    let n = 10;
    let data = Dataset::from_columns(n, 1, (0..n).map(|i| i as f64).collect(), None).unwrap();
    let resid = vec![0.0; n];
    let prior = TreePrior {
        tau: 0.5,
        ..TreePrior::default()
    };
    let sigma2 = 1.0;
    let w = 1.0 / sigma2;
    let cands: Vec<f64> = (1..n)
        .map(|k| {
            log_marginal_weighted(k as f64 * w, 0.0, prior.tau) + log_marginal_weighted((n - k) as f64 * w, 0.0, prior.tau)
        })
        .collect();
    let p = split_prob(0, &prior);
    let ns = (cands.len() as f64).ln() + (1.0 / p - 1.0).ln() + log_marginal_weighted(n as f64 * w, 0.0, prior.tau);
    let expected = ns.exp() / (ns.exp() + cands.iter().map(|c| c.exp()).sum::<f64>());

    let trials = 10_000;
    let stops = (0..trials)
        .filter(|&t| {
            let mut rng = RngStream::for_purpose(t, Purpose::Grow, &[1, 0]);
            grow_from_root(&resid, &data, &prior, sigma2, &mut rng).unwrap().nodes().len() == 1
        })
        .count();
    let freq = stops as f64 / trials as f64;
    assert!((freq - expected).abs() < 0.02, "{freq} vs {expected}");
}

#[test]
fn single_row_never_splits() {
    let data = Dataset::from_rows(&[vec![0.3, 2.0]], None).unwrap();
    for seed in 0..50 {
        let mut rng = RngStream::new(seed, 0);
        let t = grow_from_root(&[4.0], &data, &TreePrior::default(), 1.0, &mut rng).unwrap();
        assert_eq!(t.n_leaves(), 1);
    }
}

#[test]
fn step_function_is_found() {
    let n = 200;
    let prior = TreePrior {
        n_cutpoints: n,
        ..TreePrior::default()
    };
    let mut good = 0;
    let seeds = 200;
    for seed in 0..seeds {
        let data = normal_data(n, 3, seed);
        let x1 = data.column(0);
        let resid: Vec<f64> = x1.iter().map(|&v| if v > 0.0 { 5.0 } else { -5.0 }).collect();
        let lo = x1.iter().copied().filter(|&v| v <= 0.0).fold(f64::MIN, f64::max);
        let hi = x1.iter().copied().filter(|&v| v > 0.0).fold(f64::MAX, f64::min);
        let mut rng = RngStream::for_purpose(seed, Purpose::Grow, &[7]);
        let t = grow_from_root(&resid, &data, &prior, 0.01, &mut rng).unwrap();
        if let NodeKind::Split { var: 0, cut, .. } = t.nodes()[0].kind {
            if cut >= lo && cut < hi {
                good += 1;
            }
        }
    }
    assert!(good as f64 >= 0.99 * seeds as f64, "{good}/{seeds}");
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64)
}

#[test]
fn leaf_draws_match_closed_form() {
    let data = normal_data(10, 1, 3);
    let resid = vec![0.5; 10];
    let tree = Tree::leaf(0.0);
    let mut rng = RngStream::new(11, 0);
    let k = 100_000;
    let draws: Vec<f64> = (0..k)
        .map(|_| sample_leaf_params(&tree, &resid, &data, 1.0, 0.5, &mut rng).leaf_mu(0))
        .collect();
    let (m, v) = mean_var(&draws);
    let (em, ev): (f64, f64) = (5.0 * 0.5 / 6.0, 0.5 / 6.0);
    assert!((em - 0.416_666_666).abs() < 1e-8 && (ev - 0.083_333_333).abs() < 1e-8);
    let se_m = (ev / k as f64).sqrt();
    let se_v = ev * (2.0 / (k as f64 - 1.0)).sqrt();
    assert!((m - em).abs() < 3.0 * se_m, "mean {m}");
    assert!((v - ev).abs() < 3.0 * se_v, "var {v}");
}

#[test]
fn flat_prior_limit() {
    let (n, s, sigma2): (f64, f64, f64) = (8.0, 3.2, 0.7);
    let (mean, _) = leaf_posterior(n / sigma2, s / sigma2, 1e8);
    assert!((mean - s / n).abs() < 1e-3);
}

#[test]
fn empty_leaf_draws_from_prior() {
    let tree = Tree::from_nodes(vec![
        Node {
            kind: NodeKind::Split { var: 0, cut: 100.0, left: 1, right: 2 },
            depth: 0,
        },
        Node { kind: NodeKind::Leaf { mu: 0.0 }, depth: 1 },
        Node { kind: NodeKind::Leaf { mu: 0.0 }, depth: 1 },
    ])
    .unwrap();
    let data = normal_data(5, 1, 4);
    let resid = vec![1.0; 5];
    let tau = 0.3;
    let mut rng = RngStream::new(5, 0);
    let k = 50_000;
    let draws: Vec<f64> = (0..k)
        .map(|_| sample_leaf_params(&tree, &resid, &data, 1.0, tau, &mut rng).leaf_mu(2))
        .collect();
    let (m, v) = mean_var(&draws);
    assert!(m.abs() < 3.0 * (tau / k as f64).sqrt(), "mean {m}");
    assert!((v - tau).abs() < 3.0 * tau * (2.0 / k as f64).sqrt(), "var {v}");
}

#[test]
fn min_child_is_respected() {
    let prior = TreePrior {
        min_child: 7,
        ..TreePrior::default()
    };
    for seed in 0..40 {
        let data = normal_data(60, 2, seed);
        let resid: Vec<f64> = data.column(0).iter().map(|v| 3.0 * v).collect();
        let mut rng = RngStream::new(seed, 1);
        let t = grow_from_root(&resid, &data, &prior, 0.1, &mut rng).unwrap();
        let mut counts = vec![0usize; t.nodes().len()];
        for leaf in t.route(&data) {
            counts[leaf] += 1;
        }
        for (id, node) in t.nodes().iter().enumerate() {
            if let NodeKind::Leaf { .. } = node.kind {
                if id != 0 {
                    assert!(counts[id] >= 7, "leaf {id} has {}", counts[id]);
                }
            }
        }
    }
}
