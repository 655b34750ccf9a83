use leafgp::bench::{classify_exterior, gen_regression, RegressionDGP, RegressionFn};
use leafgp::ensemble::{self, FitConfig, PosteriorDraws, SigmaPrior};
use leafgp::rng::RngStream;
use leafgp::tree::Tree;
use leafgp::{Dataset, Error};

fn linear(seed: u64) -> leafgp::bench::RegressionData {
    gen_regression(&RegressionDGP::new(RegressionFn::Linear, 200, 200, 10), seed).unwrap()
}

fn quick_fit(data: &Dataset, seed: u64) -> PosteriorDraws {
    let cfg = FitConfig::for_response(data.require_y().unwrap(), 10, 30, 5);
    ensemble::fit(data, &cfg, seed).unwrap()
}

#[test]
fn zero_response_stays_near_zero() {
    let d = linear(1);
    let train = d.train.with_y(vec![0.0; 200]).unwrap();
    let cfg = FitConfig::standard(train.require_y().unwrap());
    let draws = ensemble::fit(&train, &cfg, 2).unwrap();
    let mean = ensemble::posterior_mean(&draws, &train).unwrap();
    let s2 = draws.sigma2[draws.retained()].iter().sum::<f64>() / draws.retained().len() as f64;
    let tau = cfg.tree_prior.tau;
    let bound = 3.0 * (s2 * tau / (s2 + tau)).sqrt() * (cfg.num_trees as f64).sqrt();
    assert!(mean.iter().all(|m| m.abs() <= bound), "bound {bound}");
    let prior_mean = cfg.sigma_prior.b / (cfg.sigma_prior.a - 1.0);
    assert!(s2 < prior_mean, "{s2} vs {prior_mean}");
}

#[test]
fn linear_in_sample_fit() {
    let d = linear(3);
    let dgp = RegressionDGP::new(RegressionFn::Linear, 200, 200, 10);
    let draws = ensemble::fit(&d.train, &FitConfig::standard(d.train.require_y().unwrap()), 4).unwrap();
    let mean = ensemble::posterior_mean(&draws, &d.train).unwrap();
    let mse = (0..200)
        .map(|i| (mean[i] - dgp.f(&d.train.row(i))).powi(2))
        .sum::<f64>()
        / 200.0;
    assert!(mse.sqrt() < 1.5, "rmse {}", mse.sqrt());
}

#[test]
fn backfitting_conserves_residuals() {
    let d = linear(5);
    let y = d.train.require_y().unwrap().to_vec();
    let center = y.iter().sum::<f64>() / y.len() as f64;
    let cfg = FitConfig::for_response(&y, 10, 20, 5);
    let mut worst = 0.0f64;
    let mut obs = |_s: usize, _l: usize, resid: &[f64], fits: &[Vec<f64>]| {
        for i in 0..resid.len() {
            let total: f64 = fits.iter().map(|f| f[i]).sum();
            worst = worst.max((resid[i] - (y[i] - center - total)).abs());
        }
    };
    ensemble::fit_observed(&d.train, &cfg, 6, Some(&mut obs)).unwrap();
    assert!(worst < 1e-10, "{worst}");
}

#[test]
fn sigma2_posterior_mean() {
    // sum r^2 = 10 over 20 rows.
    let r = vec![(0.5f64).sqrt(); 20];
    let prior = SigmaPrior { a: 3.0, b: 2.0 };
    let mut rng = RngStream::new(8, 0);
    let k = 100_000;
    let draws: Vec<f64> = (0..k).map(|_| ensemble::sample_sigma2(&r, &prior, &mut rng)).collect();
    assert!(draws.iter().all(|&v| v > 0.0));
    let mean = draws.iter().sum::<f64>() / k as f64;
    let (a, b): (f64, f64) = (13.0, 7.0);
    let expect = b / (a - 1.0);
    let sd = (b * b / ((a - 1.0) * (a - 1.0) * (a - 2.0))).sqrt();
    assert!((expect - 7.0 / 12.0f64).abs() < 1e-15);
    assert!((mean - expect).abs() < 3.0 * sd / (k as f64).sqrt(), "{mean}");

    let prior_only: Vec<f64> = (0..1000).map(|_| ensemble::sample_sigma2(&[], &prior, &mut rng)).collect();
    assert!(prior_only.iter().all(|&v| v > 0.0));
}

#[test]
fn training_coverage() {
    let d = linear(9);
    let draws = ensemble::fit(&d.train, &FitConfig::standard(d.train.require_y().unwrap()), 10).unwrap();
    let p = ensemble::predict(&draws, &d.train, 0.1, 11).unwrap();
    let y = d.train.require_y().unwrap();
    let cov = (0..200).filter(|&i| p.intervals[i].contains(y[i])).count() as f64 / 200.0;
    assert!((0.80..=0.98).contains(&cov), "{cov}");
    assert!(p.draws.iter().all(|row| row.len() == 85));
}

#[test]
fn constant_forest_gives_point_interval() {
    let c = 2.5;
    let l = 4;
    let d = linear(1);
    let mut cfg = FitConfig::for_response(d.train.require_y().unwrap(), l, 3, 1);
    cfg.y_center = 0.0;
    let draws = PosteriorDraws {
        config: cfg,
        forests: vec![vec![Tree::leaf(c / l as f64); l]; 3],
        sigma2: vec![1e-300; 3],
        n_features: 10,
        fingerprint: String::new(),
    };
    let p = ensemble::predict(&draws, &d.test, 0.1, 0).unwrap();
    for (m, iv) in p.mean.iter().zip(&p.intervals) {
        assert_eq!(*m, c);
        assert_eq!((iv.lo, iv.hi), (c, c));
    }
}

#[test]
fn burn_in_only_selects_sweeps() {
    let d = linear(12);
    let draws = quick_fit(&d.train, 13);
    let later = draws.with_burn_in(12).unwrap();
    let a = ensemble::predict(&draws, &d.test, 0.1, 1).unwrap();
    let b = ensemble::predict(&later, &d.test, 0.1, 1).unwrap();
    for (ra, rb) in a.draws.iter().zip(&b.draws) {
        assert_eq!(ra.len(), 25);
        assert_eq!(rb.len(), 18);
        assert_eq!(&ra[7..], &rb[..]);
    }
    assert!(draws.with_burn_in(30).is_err());
}

#[test]
fn same_seed_same_model() {
    let d = linear(14);
    let a = ensemble::to_json(&quick_fit(&d.train, 15)).unwrap();
    let b = ensemble::to_json(&quick_fit(&d.train, 15)).unwrap();
    let c = ensemble::to_json(&quick_fit(&d.train, 16)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn save_load_round_trip() {
    let d = linear(17);
    let draws = quick_fit(&d.train, 18);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    ensemble::save(&draws, &path).unwrap();
    let back = ensemble::load(&path).unwrap();
    assert_eq!(back, draws);
    let p1 = ensemble::predict(&draws, &d.test, 0.1, 3).unwrap();
    let p2 = ensemble::predict(&back, &d.test, 0.1, 3).unwrap();
    assert_eq!(p1, p2);

    let text = std::fs::read_to_string(&path).unwrap();
    std::fs::write(&path, &text[..text.len() / 2]).unwrap();
    assert!(matches!(ensemble::load(&path), Err(Error::Schema(_))));
}

#[test]
fn wrong_width_test_rejected() {
    let d = linear(19);
    let draws = quick_fit(&d.train, 20);
    let narrow = Dataset::from_rows(&[vec![0.0; 3]], None).unwrap();
    assert!(matches!(
        ensemble::predict(&draws, &narrow, 0.1, 0),
        Err(Error::DimensionMismatch(_))
    ));
}

#[test]
fn max_dgp_interior_calibration() {
    let dgp = RegressionDGP::new(RegressionFn::Max, 200, 200, 10);
    let mut covered = 0usize;
    let mut total = 0usize;
    for seed in 0..10 {
        let d = gen_regression(&dgp, 100 + seed).unwrap();
        let draws = ensemble::fit(&d.train, &FitConfig::standard(d.train.require_y().unwrap()), seed).unwrap();
        let p = ensemble::predict(&draws, &d.test, 0.1, seed).unwrap();
        let ext = classify_exterior(&d.train, &d.test);
        let y = d.test.require_y().unwrap();
        for i in (0..200).filter(|&i| !ext[i]) {
            total += 1;
            covered += usize::from(p.intervals[i].contains(y[i]));
        }
    }
    let cov = covered as f64 / total as f64;
    assert!((0.75..=0.95).contains(&cov), "{cov}");
}
