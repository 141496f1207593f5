mod common;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use vqa_core::evaluation::*;

fn small_values(r: &mut impl Rng, n: usize, levels: i32) -> Vec<f64> {
    (0..n).map(|_| r.random_range(0..levels) as f64).collect()
}

#[test]
fn krocc_matches_brute_force_with_ties() {
    let mut r = rng(3);
    let mut checked = 0;
    for _ in 0..2000 {
        let n = r.random_range(2..=10);
        let levels = r.random_range(2..6);
        let x = small_values(&mut r, n, levels);
        let y = small_values(&mut r, n, levels);
        let want = krocc_brute(&x, &y);
        match krocc(&x, &y) {
            Ok(got) => {
                assert!((got - want).abs() <= 1e-12, "{x:?} {y:?}: {got} vs {want}");
                checked += 1;
            }
            Err(_) => assert!(!want.is_finite(), "{x:?} {y:?}"),
        }
    }
    assert!(checked > 1500);
}

#[test]
fn srocc_with_ties_is_pearson_of_average_ranks() {
    let x = [1.0, 2.0, 2.0, 3.0, 5.0];
    let y = [2.0, 1.0, 4.0, 4.0, 9.0];
    let rx = [1.0, 2.5, 2.5, 4.0, 5.0];
    let ry = [2.0, 1.0, 3.5, 3.5, 5.0];
    assert_eq!(average_ranks(&x), rx.to_vec());
    assert!((srocc(&x, &y).unwrap() - pearson(&rx, &ry)).abs() < 1e-12);
}

#[test]
fn perfect_orderings() {
    let x: Vec<f64> = (0..12).map(f64::from).collect();
    let rev: Vec<f64> = x.iter().rev().copied().collect();
    assert_eq!(srocc(&x, &x).unwrap(), 1.0);
    assert_eq!(srocc(&x, &rev).unwrap(), -1.0);
    assert_eq!(krocc(&x, &rev).unwrap(), -1.0);
    assert!(srocc(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
    assert!(plcc(&[1.0], &[1.0]).is_err());
}

#[test]
fn logistic_fit_recovers_a_logistic_curve() {
    let truth = Logistic4 { b1: 5.0, b2: 1.0, b3: 0.4, b4: 0.1 };
    let x: Vec<f64> = (0..40).map(|i| i as f64 / 39.0).collect();
    let y: Vec<f64> = x.iter().map(|&v| truth.eval(v)).collect();
    let fit = Logistic4::fit(&x, &y).unwrap();
    let err = x.iter().map(|&v| (fit.eval(v) - truth.eval(v)).abs()).fold(0.0, f64::max);
    assert!(err < 1e-3, "{fit:?}");
    let m = compute_metrics(&x, &y, true).unwrap();
    assert!(m.plcc > 0.9999 && m.rmse < 1e-3);
}

#[test]
fn split_protocol_sizes_and_determinism() {
    let s = make_split(32, 0.8, 4).unwrap();
    assert_eq!((s.train.len(), s.test.len()), (26, 6));
    let mut all = [s.train.clone(), s.test.clone()].concat();
    all.sort_unstable();
    assert_eq!(all, (0..32).collect::<Vec<_>>());
    assert_eq!(make_split(32, 0.8, 4).unwrap(), s);
    assert_ne!(make_split(32, 0.8, 5).unwrap().test, s.test);
}

#[test]
fn protocol_reports_sample_std_over_splits() {
    let protocol = SplitProtocol { num_splits: 4, ..Default::default() };
    let report = run_split_protocol(20, &protocol, |split| {
        let mos: Vec<f64> = split.test.iter().map(|&i| i as f64).collect();
        let noise = split.seed as f64;
        let pred: Vec<f64> = mos.iter().enumerate().map(|(k, m)| m + noise * (k % 2) as f64 * 3.0).collect();
        Ok((pred, mos))
    })
    .unwrap();
    assert_eq!(report.splits.len(), 4);
    let v: Vec<f64> = report.splits.iter().map(|s| s.srocc).collect();
    let m = v.iter().sum::<f64>() / 4.0;
    let sd = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 3.0).sqrt();
    assert!((report.mean.srocc - m).abs() < 1e-12);
    assert!((report.std.srocc - sd).abs() < 1e-12);
}

fn distinct_vec() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-100.0..100.0f64, 3..30)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn srocc_is_invariant_under_monotone_maps(x in distinct_vec(), seed in any::<u64>()) {
        let mut r = rng(seed);
        let y: Vec<f64> = x.iter().map(|v| v * 0.3 + randn(&mut r) * 20.0).collect();
        prop_assume!(srocc(&x, &y).is_ok());
        let base = srocc(&x, &y).unwrap();
        let maps: [fn(f64) -> f64; 3] = [|v| v.powi(3), |v| (v / 40.0).exp(), |v| 7.0 * v - 2.0];
        for f in maps {
            let fx: Vec<f64> = x.iter().map(|&v| f(v)).collect();
            prop_assert!((srocc(&fx, &y).unwrap() - base).abs() < 1e-12);
            prop_assert!((krocc(&fx, &y).unwrap() - krocc(&x, &y).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn plcc_is_invariant_under_positive_affine_maps(
        x in distinct_vec(),
        a in 0.01..50.0f64,
        b in -100.0..100.0f64,
        seed in any::<u64>(),
    ) {
        let mut r = rng(seed);
        let y: Vec<f64> = x.iter().map(|v| v + randn(&mut r) * 30.0).collect();
        prop_assume!(plcc(&x, &y).is_ok());
        let ax: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        let base = plcc(&x, &y).unwrap();
        prop_assert!((plcc(&ax, &y).unwrap() - base).abs() < 1e-9);
        let neg: Vec<f64> = x.iter().map(|v| -a * v + b).collect();
        prop_assert!((plcc(&neg, &y).unwrap() + base).abs() < 1e-9);
    }

    #[test]
    fn metrics_are_bounded(x in distinct_vec(), seed in any::<u64>()) {
        let mut r = rng(seed);
        let y: Vec<f64> = x.iter().map(|_| randn(&mut r)).collect();
        let m = compute_metrics(&x, &y, false).unwrap();
        for v in [m.srocc, m.plcc, m.krocc] {
            prop_assert!((-1.0..=1.0).contains(&v));
        }
        prop_assert!(m.rmse >= 0.0);
    }
}
