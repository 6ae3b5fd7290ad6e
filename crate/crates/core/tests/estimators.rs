//! Estimators against independent closed forms and least-squares fits.

use flowgnn::causality::{analyze, estimate_information_flow, flow_by_cofactors, granger_causality, SignificanceConfig};
use flowgnn::data::{generate_var, VarSystemSpec};
use flowgnn::{Matrix, TimeSeriesSet};
use nalgebra::{DMatrix, DVector};

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn cov(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (a.len() - 1) as f64
}

/// Two-variable information flow `T_{2→1}` written out from sample
/// covariances, with `Ẋ` the forward difference.
fn bivariate_flow(x1: &[f64], x2: &[f64], dt: f64) -> f64 {
    let n = x1.len() - 1;
    let d1: Vec<f64> = (0..n).map(|t| (x1[t + 1] - x1[t]) / dt).collect();
    let (a, b) = (&x1[..n], &x2[..n]);
    let (c11, c12, c22) = (cov(a, a), cov(a, b), cov(b, b));
    let (c1d1, c2d1) = (cov(a, &d1), cov(b, &d1));
    (c11 * c12 * c2d1 - c12 * c12 * c1d1) / (c11 * c11 * c22 - c11 * c12 * c12)
}

fn var_pair(strength: f64, len: usize, seed: u64) -> TimeSeriesSet {
    generate_var(&VarSystemSpec::driven_pair(strength, len, seed)).unwrap().series
}

#[test]
fn two_channel_flow_matches_closed_form() {
    for seed in 0..10 {
        let x = var_pair(0.3 + 0.05 * seed as f64, 4000, seed);
        let f = estimate_information_flow(&x).unwrap();
        let (x1, x2) = (x.channel(0), x.channel(1));
        let t21 = bivariate_flow(x1, x2, x.dt());
        let t12 = bivariate_flow(x2, x1, x.dt());
        assert!((f.flow[(1, 0)] - t21).abs() <= 1e-9 * t21.abs().max(1e-12), "seed {seed}");
        assert!((f.flow[(0, 1)] - t12).abs() <= 1e-9 * t12.abs().max(1e-3), "seed {seed}");
    }
}

#[test]
fn cofactor_and_regression_routes_agree_on_larger_systems() {
    let coupling = Matrix::from_rows(&[
        vec![0.4, 0.0, 0.0, 0.1],
        vec![0.3, 0.3, 0.0, 0.0],
        vec![0.0, 0.25, 0.2, 0.0],
        vec![0.0, 0.0, -0.2, 0.5],
    ])
    .unwrap();
    let x = generate_var(&VarSystemSpec::new(coupling, 1.0, 3000, 11)).unwrap().series;
    let reg = estimate_information_flow(&x).unwrap().flow;
    let cof = flow_by_cofactors(&x).unwrap();
    for (a, b) in reg.data().iter().zip(cof.data()) {
        assert!((a - b).abs() <= 1e-8 * a.abs().max(b.abs()).max(1e-10));
    }
}

/// Residual sum of squares of `y` on `[1, columns...]`.
fn ols_rss(y: &[f64], columns: &[Vec<f64>]) -> f64 {
    let rows = y.len();
    let design = DMatrix::from_fn(rows, columns.len() + 1, |r, c| if c == 0 { 1.0 } else { columns[c - 1][r] });
    let target = DVector::from_column_slice(y);
    let beta = design.clone().svd(true, true).solve(&target, 1e-14).unwrap();
    (target - design * beta).norm_squared()
}

#[test]
fn granger_f_matches_least_squares() {
    let x = var_pair(0.4, 600, 3);
    for order in [1, 3, 5] {
        let g = granger_causality(&x, order).unwrap();
        let len = x.len();
        let lags = |c: usize| -> Vec<Vec<f64>> {
            (1..=order).map(|l| x.channel(c)[order - l..len - l].to_vec()).collect()
        };
        for (src, dst) in [(0, 1), (1, 0)] {
            let y = &x.channel(dst)[order..];
            let restricted = ols_rss(y, &lags(dst));
            let mut both = lags(dst);
            both.extend(lags(src));
            let full = ols_rss(y, &both);
            let df = (len - order - 2 * order - 1) as f64;
            let f = ((restricted - full) / order as f64) / (full / df);
            let got = g.f_stat[(src, dst)];
            assert!((got - f).abs() <= 1e-7 * f.abs().max(1.0), "order {order} {src}->{dst}: {got} vs {f}");
        }
        assert!(g.p_values[(0, 1)] < 1e-6);
    }
}

#[test]
fn chain_edges_are_recovered() {
    let coupling = Matrix::from_rows(&[
        vec![0.5, 0.0, 0.0],
        vec![0.5, 0.4, 0.0],
        vec![0.0, 0.5, 0.3],
    ])
    .unwrap();
    let spec = VarSystemSpec::new(coupling, 1.0, 20_000, 5);
    let r = generate_var(&spec).unwrap();
    let cfg = SignificanceConfig {
        surrogate_count: 200,
        ..SignificanceConfig::default()
    };
    let f = analyze(&r.series, &cfg).unwrap();
    let p = f.p_values.unwrap();
    for &(src, dst) in &r.true_edges {
        assert!(p[(src, dst)] < 0.01, "{src}->{dst} missed");
    }
    assert!(p[(1, 0)] >= 0.01 && p[(2, 1)] >= 0.01);
}
