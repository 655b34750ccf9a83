use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn leafgp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_leafgp"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

// Small deterministic LCG so the fixtures do not depend on a RNG crate.
fn fixtures(dir: &Path) {
    let mut state = 12345u64;
    let mut next = || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (state >> 11) as f64 / (1u64 << 53) as f64
    };
    let mut a = String::from("x1,x2,y\n");
    for _ in 0..80 {
        let (x1, x2, e) = (next() * 4.0 - 2.0, next() * 4.0 - 2.0, next() - 0.5);
        a.push_str(&format!("{x1},{x2},{}\n", x1 + 2.0 * x2 + e));
    }
    fs::write(dir.join("a.csv"), a).unwrap();
    let mut b = String::from("x1,x2\n");
    for _ in 0..12 {
        b.push_str(&format!("{},{}\n", next() * 8.0 - 4.0, next() * 8.0 - 4.0));
    }
    fs::write(dir.join("b.csv"), b).unwrap();
    let mut c = String::from("x1,z,y\n");
    for i in 0..200 {
        let x = next() * 10.0;
        let z = i % 2;
        c.push_str(&format!("{x},{z},{}\n", x.sin() + 0.5 * z as f64 + 0.1 * next()));
    }
    fs::write(dir.join("c.csv"), c).unwrap();
}

fn setup() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    fixtures(dir.path());
    dir
}

const FIT: [&str; 9] = ["fit", "--train", "a.csv", "--response-col", "y", "--seed", "1", "--sweeps", "30"];

#[test]
fn fit_is_deterministic() {
    let dir = setup();
    let p = dir.path();
    assert!(leafgp(p, &[&FIT[..], &["--model", "m.json"]].concat()).status.success());
    assert!(leafgp(p, &[&FIT[..], &["--model", "m2.json", "--threads", "1"]].concat()).status.success());
    assert_eq!(fs::read(p.join("m.json")).unwrap(), fs::read(p.join("m2.json")).unwrap());
}

#[test]
fn gp_predict_writes_contract_columns() {
    let dir = setup();
    let p = dir.path();
    assert!(leafgp(p, &[&FIT[..], &["--model", "m.json"]].concat()).status.success());
    let args = [
        "gp-predict", "--model", "m.json", "--train", "a.csv", "--response-col", "y", "--test", "b.csv", "--alpha",
        "0.1", "--out", "p.csv",
    ];
    let out = leafgp(p, &args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(p.join("p.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("point_id,mean,lo,hi,exterior_any_leaf"));
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 12);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r[0], i as f64);
        assert!(r[2] <= r[3]);
        assert!((0.0..=1.0).contains(&r[4]));
    }

    let again = [&args[..11], &["--out", "p2.csv", "--threads", "2"]].concat();
    assert!(leafgp(p, &again).status.success());
    assert_eq!(text, fs::read_to_string(p.join("p2.csv")).unwrap());
}

#[test]
fn gp_predict_without_train_is_usage_error() {
    let dir = setup();
    let p = dir.path();
    assert!(leafgp(p, &[&FIT[..], &["--model", "m.json"]].concat()).status.success());
    let out = leafgp(p, &["gp-predict", "--model", "m.json", "--test", "b.csv", "--out", "p.csv"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.trim_end().lines().count(), 1);
    assert!(err.contains("--train") && err.contains("training"));
}

#[test]
fn error_codes() {
    let dir = setup();
    let p = dir.path();
    assert_eq!(leafgp(p, &["nonsense"]).status.code(), Some(1));
    let missing = leafgp(p, &["predict", "--model", "none.json", "--test", "b.csv", "--out", "q.csv"]);
    assert_eq!(missing.status.code(), Some(2));
    assert_eq!(String::from_utf8_lossy(&missing.stderr).trim_end().lines().count(), 1);
    fs::write(p.join("bad.csv"), "x1,y\n1,2\n3,NaN\n").unwrap();
    let bad = leafgp(p, &["fit", "--train", "bad.csv", "--response-col", "y", "--model", "m.json"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("NaN"));
    assert!(leafgp(p, &["version"]).status.success());
}

#[test]
fn causal_round_trip() {
    let dir = setup();
    let p = dir.path();
    let fit = [
        "causal-fit", "--train", "c.csv", "--response-col", "y", "--treatment-col", "z", "--sweeps", "20", "--burnin",
        "5", "--model", "cm.json",
    ];
    let out = leafgp(p, &fit);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let base = ["causal-predict", "--model", "cm.json", "--test", "c.csv", "--response-col", "y", "--treatment-col", "z"];
    assert!(leafgp(p, &[&base[..], &["--out", "plain.csv"]].concat()).status.success());
    let gp = leafgp(p, &[&base[..], &["--gp", "--train", "c.csv", "--out", "gp.csv"]].concat());
    assert!(gp.status.success(), "{}", String::from_utf8_lossy(&gp.stderr));
    let no_train = leafgp(p, &[&base[..], &["--gp", "--out", "gp.csv"]].concat());
    assert_eq!(no_train.status.code(), Some(1));
    let text = fs::read_to_string(p.join("gp.csv")).unwrap();
    assert_eq!(text.lines().count(), 201);
}

#[test]
fn bench_writes_report() {
    let dir = setup();
    let p = dir.path();
    let spec = r#"{"dgp":{"kind":"regression","name":"linear","n_train":40,"n_test":20,"d":2},
        "methods":["xbart","xbart-gp"],"reps":2,"seed":3,"params":{"num_sweeps":20,"burn_in":5}}"#;
    fs::write(p.join("exp.json"), spec).unwrap();
    let out = leafgp(p, &["bench", "--spec", "exp.json", "--out", "r.csv"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(p.join("r.csv")).unwrap();
    assert!(text.starts_with("method,region,rep,rmse,coverage,il,time_s"));
    let per_rep = text.lines().skip(1).filter(|l| l.split(',').nth(2).is_some_and(|r| r.parse::<usize>().is_ok()));
    assert_eq!(per_rep.count(), 12);
}

#[test]
fn conformal_baselines_and_noiseless() {
    let dir = setup();
    let p = dir.path();
    let fit = ["fit", "--train", "a.csv", "--response-col", "y", "--sweeps", "12", "--burnin", "2", "--trees", "4"];
    assert!(leafgp(p, &[&fit[..], &["--model", "m.json"]].concat()).status.success());
    let base = ["predict", "--model", "m.json", "--test", "b.csv", "--response-col", "y"];
    let cv = leafgp(p, &[&base[..], &["--baseline", "cv+", "--folds", "4", "--train", "a.csv", "--out", "cv.csv"]].concat());
    assert!(cv.status.success(), "{}", String::from_utf8_lossy(&cv.stderr));
    assert_eq!(fs::read_to_string(p.join("cv.csv")).unwrap().lines().count(), 13);
    let no_train = leafgp(p, &[&base[..], &["--baseline", "jackknife+", "--out", "jk.csv"]].concat());
    assert_eq!(no_train.status.code(), Some(1));

    let gp = ["gp-predict", "--model", "m.json", "--train", "a.csv", "--response-col", "y", "--test", "b.csv"];
    assert!(leafgp(p, &[&gp[..], &["--out", "y.csv"]].concat()).status.success());
    assert!(leafgp(p, &[&gp[..], &["--noiseless", "--out", "f.csv"]].concat()).status.success());
    let width = |f: &str| -> f64 {
        let text = fs::read_to_string(p.join(f)).unwrap();
        text.lines()
            .skip(1)
            .map(|l| {
                let v: Vec<f64> = l.split(',').map(|x| x.parse().unwrap()).collect();
                v[3] - v[2]
            })
            .sum()
    };
    assert!(width("f.csv") < width("y.csv"));
}
