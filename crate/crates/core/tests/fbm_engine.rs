#![allow(clippy::excessive_precision)]

use fbm_smp::fbm::*;
use fbm_smp::stats::correlation;
use fbm_smp::Error;
use proptest::prelude::*;

fn hp(h: f64) -> HurstParam {
    HurstParam::new(h).unwrap()
}

// 30-digit evaluations of the Gamma-function closed form.
const C_H: [(f64, f64); 3] = [
    (0.25, 0.645998003740751967612507765661),
    (0.1, 0.357685773422335148133546803296),
    (0.4, 0.880725683363726910613801359827),
];

// Kernel at t = 1 from the regularized incomplete beta form of the inner
// integral, evaluated at 25 digits.
const KERNEL: [(f64, f64, f64); 9] = [
    (0.25, 0.5, 0.8203226237647528230045531),
    (0.25, 0.01, 1.326365182383530767926938),
    (0.25, 0.99, 2.044539975286772099319709),
    (0.3, 0.5, 0.8730141143386680547687435),
    (0.3, 0.01, 1.177749211685915064631949),
    (0.3, 0.99, 1.835311768061857061725839),
    (0.1, 0.5, 0.575062237786205845926483),
    (0.1, 0.01, 1.792521420303301343437781),
    (0.1, 0.99, 2.262907661404879585328513),
];

#[test]
fn kernel_constant_matches_high_precision_values() {
    for (h, want) in C_H {
        let got = kernel_constant(hp(h)).unwrap();
        assert!((got - want).abs() < 1e-12, "h={h}: {got} vs {want}");
    }
}

#[test]
fn kernel_constant_rejects_the_brownian_case() {
    assert!(matches!(kernel_constant(hp(0.5)), Err(Error::ClassicalKernel)));
}

#[test]
fn kernel_values_match_high_precision_values() {
    for (h, s, want) in KERNEL {
        let got = kernel_value(hp(h), 1.0, s).unwrap();
        assert!((got - want).abs() < 1e-9 * want, "h={h} s={s}: {got} vs {want}");
    }
}

#[test]
fn kernel_scales_like_h_minus_half() {
    // K(ct, cs) = c^{H-1/2} K(t, s)
    let h = hp(0.3);
    let a = kernel_value(h, 2.0, 1.0).unwrap();
    let b = kernel_value(h, 1.0, 0.5).unwrap();
    assert!((a - 2f64.powf(-0.2) * b).abs() < 1e-12);
}

#[test]
fn kernel_is_one_in_the_brownian_case() {
    for (t, s) in [(1.0, 0.3), (2.0, 1.99), (0.1, 1e-6)] {
        assert_eq!(kernel_value(hp(0.5), t, s).unwrap(), 1.0);
    }
}

#[test]
fn kernel_domain_is_enforced() {
    let h = hp(0.3);
    for (t, s) in [(0.5, 1.0), (1.0, 1.0), (1.0, 0.0), (1.0, -0.1)] {
        assert!(matches!(kernel_value(h, t, s), Err(Error::Domain(_))), "t={t} s={s}");
    }
}

#[test]
fn kernel_squared_integrates_to_the_variance() {
    let table = KernelTable::build(hp(0.3), TimeGrid::new(1.0, 256).unwrap());
    assert!((table.row_quadrature(256) - 1.0).abs() < 1e-3);
}

#[test]
fn kernel_rows_reproduce_the_variance_at_every_node() {
    for h in [0.1, 0.25, 0.4] {
        let grid = TimeGrid::new(1.0, 256).unwrap();
        let table = KernelTable::build(hp(h), grid);
        for i in 1..grid.n_nodes() {
            let err = (table.row_quadrature(i) - grid.t(i).powf(2.0 * h)).abs();
            assert!(err <= 1e-2, "h={h} i={i}: {err}");
        }
    }
}

#[test]
fn kernel_cross_products_reproduce_the_covariance() {
    let grid = TimeGrid::new(1.0, 256).unwrap();
    for (h, tol) in [(0.25, 0.03), (0.4, 0.01)] {
        let table = KernelTable::build(hp(h), grid);
        for (i, l) in [(256, 128), (256, 32), (200, 100)] {
            let got = table.cross_quadrature(i, l);
            let want = covariance(hp(h), grid.t(i), grid.t(l)).unwrap();
            assert!((got - want).abs() < tol, "h={h} ({i},{l}): {got} vs {want}");
        }
    }
}

#[test]
fn covariance_closed_form() {
    assert!((covariance(hp(0.25), 1.0, 4.0).unwrap() - 0.633974596215561353236276829247).abs() < 1e-15);
    assert_eq!(covariance(hp(0.5), 1.0, 2.0).unwrap(), 1.0);
    assert_eq!(covariance(hp(0.37), 1.0, 1.0).unwrap(), 1.0);
    assert!(matches!(covariance(hp(0.3), -1.0, 1.0), Err(Error::Domain(_))));
}

#[test]
fn hurst_range_is_enforced() {
    assert!(HurstParam::new(0.04).is_err());
    assert!(HurstParam::new(0.51).is_err());
    assert!(HurstParam::new(f64::NAN).is_err());
    assert!(hp(0.5).is_classical());
    assert!(!hp(0.4999).is_classical());
}

#[test]
fn grid_nodes_are_exact_at_the_ends() {
    let g = TimeGrid::new(2.0, 7).unwrap();
    assert_eq!(g.t(0), 0.0);
    assert_eq!(g.t(7), 2.0);
    assert!(g.nodes().windows(2).all(|w| w[1] > w[0]));
    assert!(TimeGrid::new(1.0, 1).is_err());
    assert!(TimeGrid::new(0.0, 4).is_err());
}

#[test]
fn single_path_starts_at_zero() {
    let e = sample_paths(hp(0.3), TimeGrid::new(1.0, 8).unwrap(), 1, 77).unwrap();
    assert_eq!(e.w_path(0)[0], 0.0);
    assert_eq!(e.bh_path(0)[0], 0.0);
    assert!(sample_paths(hp(0.3), TimeGrid::new(1.0, 8).unwrap(), 0, 77).is_err());
}

#[test]
fn sampling_is_deterministic_and_path_local() {
    let grid = TimeGrid::new(1.0, 32).unwrap();
    let a = sample_paths(hp(0.2), grid, 50, 3).unwrap();
    let b = sample_paths(hp(0.2), grid, 50, 3).unwrap();
    assert_eq!(a.w_matrix(), b.w_matrix());
    assert_eq!(a.bh_matrix(), b.bh_matrix());
    let c = sample_paths(hp(0.2), grid, 10, 3).unwrap();
    assert_eq!(c.bh_path(7), a.bh_path(7));
    let d = sample_paths(hp(0.2), grid, 10, 4).unwrap();
    assert_ne!(d.bh_path(7), a.bh_path(7));
}

#[test]
fn cholesky_sampler_reproduces_the_law() {
    let grid = TimeGrid::new(1.0, 64).unwrap();
    let m = 20_000;
    let e = sample_paths(hp(0.3), grid, m, 11).unwrap();
    let var = e.empirical_covariance(64, 64);
    assert!((var - 1.0).abs() < 0.05, "{var}");
    let bound = |i: usize, j: usize| 5.0 * grid.t(i.max(j)).powf(0.6) / (m as f64).sqrt();
    for (i, j) in [(64, 32), (16, 48), (8, 8), (63, 64), (1, 64)] {
        let err = (e.empirical_covariance(i, j) - covariance(hp(0.3), grid.t(i), grid.t(j)).unwrap()).abs();
        assert!(err <= bound(i, j), "({i},{j}): {err}");
    }
    let corr = correlation(&e.w_column(64), &e.bh_column(64));
    assert!(corr.abs() <= 4.0 / (m as f64).sqrt(), "{corr}");
}

#[test]
fn brownian_volterra_sampler_is_a_random_walk() {
    let grid = TimeGrid::new(1.0, 16).unwrap();
    let e = sample_paths_volterra(hp(0.5), grid, 3, 5).unwrap();
    for p in 0..3 {
        let bh = e.bh_path(p);
        let incr: Vec<f64> = bh.windows(2).map(|w| w[1] - w[0]).collect();
        let sd = grid.dt().sqrt();
        assert!(incr.iter().all(|d| d.abs() < 8.0 * sd));
    }
    let w = volterra_weights(hp(0.5), &grid);
    assert!(w.iter().flatten().all(|&k| k == 1.0));
}

#[test]
fn volterra_sampler_matches_the_covariance() {
    let grid = TimeGrid::new(1.0, 256).unwrap();
    let e = sample_paths_volterra(hp(0.3), grid, 20_000, 21).unwrap();
    let got = e.empirical_covariance(128, 256);
    let want = covariance(hp(0.3), 0.5, 1.0).unwrap();
    assert!((got - want).abs() < 0.05, "{got} vs {want}");
}

#[test]
fn volterra_discretization_error_shrinks_under_refinement() {
    let errs: Vec<f64> = [64, 128, 256]
        .iter()
        .map(|&n| {
            let grid = TimeGrid::new(1.0, n).unwrap();
            let w = volterra_weights(hp(0.3), &grid);
            let got = volterra_covariance(&w, grid.dt(), n / 2, n);
            (got - covariance(hp(0.3), 0.5, 1.0).unwrap()).abs()
        })
        .collect();
    assert!(errs.windows(2).all(|p| p[1] < p[0]), "{errs:?}");
}

#[test]
fn cholesky_factor_reconstructs_the_matrix() {
    let grid = TimeGrid::new(1.0, 32).unwrap();
    let f = CovarianceFactor::new(hp(0.1), &grid).unwrap();
    assert!(f.jitter <= 1e-10);
    for (i, j) in [(0, 0), (31, 31), (5, 20), (20, 5)] {
        let want = covariance(hp(0.1), grid.t(i + 1), grid.t(j + 1)).unwrap();
        assert!((f.reconstructed(i, j) - want).abs() < 1e-12);
    }
}

#[test]
fn terminal_forecast_ends_at_the_terminal_value() {
    let grid = TimeGrid::new(1.0, 16).unwrap();
    let e = sample_paths(hp(0.3), grid, 4, 2).unwrap();
    let f = CovarianceFactor::new(hp(0.3), &grid).unwrap();
    for p in 0..4 {
        let m = f.terminal_forecast(e.bh_path(p));
        assert_eq!(m[0], 0.0);
        assert!((m[16] - e.bh_path(p)[16]).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn covariance_is_symmetric_and_bounded(h in 0.05f64..=0.5, t in 0.0f64..5.0, s in 0.0f64..5.0) {
        let h = hp(h);
        let a = covariance(h, t, s).unwrap();
        prop_assert_eq!(a, covariance(h, s, t).unwrap());
        let vt = covariance(h, t, t).unwrap();
        let vs = covariance(h, s, s).unwrap();
        prop_assert!(a.abs() <= (vt * vs).sqrt() + 1e-12);
    }

    #[test]
    fn kernel_is_positive_and_finite(h in 0.05f64..0.5, t in 0.01f64..3.0, frac in 0.001f64..0.999) {
        let k = kernel_value(hp(h), t, t * frac).unwrap();
        prop_assert!(k.is_finite() && k > 0.0);
    }
}
