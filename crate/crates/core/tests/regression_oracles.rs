mod common;

use aesprobe::regression::{
    AlphaGrid, apply_scaler, fit_multioutput, fit_scaler, loo_residuals, ridge_cv_fit, ridge_solve,
};
use aesprobe::synth::{brute_force_loo, brute_force_ridge};
use common::*;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;

fn standardized(x: &DMatrix<f64>) -> DMatrix<f64> {
    apply_scaler(&fit_scaler(x).unwrap(), x).unwrap()
}

#[test]
fn svd_solution_matches_normal_equations() {
    let grid = AlphaGrid::default();
    let mut r = rng(1);
    for trial in 0..40 {
        let n = r.random_range(5..=120);
        let d = r.random_range(1..=120);
        let x = standardized(&gaussian_matrix(&mut r, n, d));
        let y = gaussian_vec(&mut r, n);
        let alpha = grid.values()[trial % 13];
        let (w, b) = ridge_solve(&x, &y, alpha).unwrap();
        let oracle = brute_force_ridge(&x, &y, alpha).unwrap();
        let rel = rel_diff(&w, &oracle);
        assert!(rel <= 1e-8, "trial {trial} ({n}×{d}, α={alpha}): rel {rel:e}");
        assert!((b - y.iter().sum::<f64>() / n as f64).abs() < 1e-12);
    }
}

#[test]
fn alpha_zero_is_least_squares() {
    let mut r = rng(2);
    for _ in 0..10 {
        let n = r.random_range(30..=60);
        let d = r.random_range(2..=20);
        let x = standardized(&gaussian_matrix(&mut r, n, d));
        let y = gaussian_vec(&mut r, n);
        let (w, _) = ridge_solve(&x, &y, 0.0).unwrap();
        // Independent route: QR least squares on [1 | X].
        let mut design = DMatrix::from_element(n, d + 1, 1.0);
        design.view_mut((0, 1), (n, d)).copy_from(&x);
        let qr = design.qr();
        let qty = qr.q().transpose() * nalgebra::DVector::from_column_slice(&y);
        let beta = qr.r().solve_upper_triangular(&qty).unwrap();
        let ols: Vec<f64> = beta.iter().skip(1).copied().collect();
        assert!(rel_diff(&w, &ols) <= 1e-8);
    }
}

#[test]
fn hat_identity_matches_explicit_refits() {
    let mut r = rng(3);
    for _ in 0..20 {
        let n = r.random_range(4..=30);
        let d = r.random_range(1..=12);
        let x = standardized(&gaussian_matrix(&mut r, n, d));
        let y = gaussian_vec(&mut r, n);
        for &alpha in &[1e-3, 0.1, 10.0, 1e3] {
            let fast = loo_residuals(&x, &y, alpha).unwrap().unwrap();
            for i in 0..n {
                let keep: Vec<usize> = (0..n).filter(|&j| j != i).collect();
                let xr = x.select_rows(&keep);
                let yr: Vec<f64> = keep.iter().map(|&j| y[j]).collect();
                // Refit with a free intercept on the remaining rows.
                let means: Vec<f64> = xr.column_iter().map(|c| c.mean()).collect();
                let mut xc = xr.clone();
                for (j, mut c) in xc.column_iter_mut().enumerate() {
                    c.add_scalar_mut(-means[j]);
                }
                let w = brute_force_ridge(&xc, &yr, alpha).unwrap();
                let ybar = yr.iter().sum::<f64>() / yr.len() as f64;
                let pred = ybar + (0..d).map(|j| (x[(i, j)] - means[j]) * w[j]).sum::<f64>();
                let explicit = y[i] - pred;
                assert!(
                    (fast[i] - explicit).abs() <= 1e-8 * explicit.abs().max(1.0),
                    "row {i}: {} vs {explicit}",
                    fast[i]
                );
            }
        }
    }
}

#[test]
fn loo_choice_matches_brute_force() {
    let grid = AlphaGrid::default();
    let mut r = rng(4);
    for trial in 0..25 {
        let n = r.random_range(5..=30);
        let d = r.random_range(1..=8);
        let x = gaussian_matrix(&mut r, n, d);
        let w = gaussian_vec(&mut r, d);
        let noise = [0.0, 0.3, 1.0, 3.0][trial % 4];
        let y: Vec<f64> = matvec(&x, &w)
            .into_iter()
            .zip(gaussian_vec(&mut r, n))
            .map(|(s, e)| s + noise * e)
            .collect();
        let chosen = ridge_cv_fit(&x, &y, &grid).unwrap().alpha;
        assert_eq!(chosen, brute_force_loo(&x, &y, &grid), "trial {trial}");
    }
}

#[test]
fn noiseless_target_picks_least_shrinkage() {
    let mut r = rng(5);
    let x = gaussian_matrix(&mut r, 30, 4);
    let y = matvec(&x, &[1.0, -2.0, 0.5, 3.0]);
    let model = ridge_cv_fit(&x, &y, &AlphaGrid::default()).unwrap();
    assert_eq!(model.alpha, 1e-3);
    assert_eq!(brute_force_loo(&x, &y, &AlphaGrid::default()), 1e-3);
    let pred = model.predict(&x).unwrap();
    let max_err = pred.iter().zip(&y).map(|(p, t)| (p - t).abs()).fold(0.0, f64::max);
    assert!(max_err <= 1e-3, "max error {max_err}");
}

#[test]
fn multioutput_matches_columnwise_fits() {
    let mut r = rng(6);
    let x = gaussian_matrix(&mut r, 60, 10);
    let y = DMatrix::from_fn(60, 11, |i, k| {
        (0..10).map(|j| x[(i, j)] * ((j + k) % 5) as f64).sum::<f64>() * 0.1 + (i * k % 7) as f64 * 0.05
    });
    let names: Vec<String> = (0..11).map(|k| format!("a{k}")).collect();
    let grid = AlphaGrid::default();
    let probe = fit_multioutput(&x, &y, &names, &grid).unwrap();
    for k in 0..11 {
        let col: Vec<f64> = y.column(k).iter().copied().collect();
        assert_eq!(probe.models[k], ridge_cv_fit(&x, &col, &grid).unwrap());
    }
}

#[test]
fn fits_are_bit_identical_across_runs() {
    let mut r = rng(7);
    let x = gaussian_matrix(&mut r, 40, 70);
    let y = gaussian_vec(&mut r, 40);
    let a = ridge_cv_fit(&x, &y, &AlphaGrid::default()).unwrap();
    let b = ridge_cv_fit(&x, &y, &AlphaGrid::default()).unwrap();
    assert_eq!(
        a.weights.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.weights.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn shrinkage_is_monotone(seed in any::<u64>(), n in 3usize..25, d in 1usize..15) {
        let mut r = rng(seed);
        let x = standardized(&gaussian_matrix(&mut r, n, d));
        let y = gaussian_vec(&mut r, n);
        let grid = AlphaGrid::default();
        let norms: Vec<f64> = grid
            .values()
            .iter()
            .map(|&a| norm(&ridge_solve(&x, &y, a).unwrap().0))
            .collect();
        for w in norms.windows(2) {
            prop_assert!(w[0] >= w[1] * (1.0 - 1e-12));
        }
    }

    #[test]
    fn rescaling_a_feature_leaves_predictions_unchanged(
        seed in any::<u64>(),
        col in 0usize..5,
        factor in 0.01f64..100.0,
    ) {
        let mut r = rng(seed);
        let x = gaussian_matrix(&mut r, 25, 5);
        let y = gaussian_vec(&mut r, 25);
        let mut scaled = x.clone();
        scaled.column_mut(col).scale_mut(factor);
        let grid = AlphaGrid::default();
        let p1 = ridge_cv_fit(&x, &y, &grid).unwrap().predict(&x).unwrap();
        let p2 = ridge_cv_fit(&scaled, &y, &grid).unwrap().predict(&scaled).unwrap();
        for (a, b) in p1.iter().zip(p2.iter()) {
            prop_assert!((a - b).abs() <= 1e-8 * a.abs().max(1.0));
        }
    }
}

#[test]
fn probe_model_json_round_trip_is_exact() {
    let mut r = rng(8);
    let x = gaussian_matrix(&mut r, 30, 6);
    let y = gaussian_matrix(&mut r, 30, 3);
    let names: Vec<String> = ["a", "b", "c"].map(String::from).to_vec();
    let probe = fit_multioutput(&x, &y, &names, &AlphaGrid::default()).unwrap();
    let back = aesprobe::regression::ProbeModel::from_json(&probe.to_json()).unwrap();
    assert_eq!(back, probe);
}
