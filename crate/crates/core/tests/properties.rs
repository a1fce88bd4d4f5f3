use std::sync::Arc;

use gprg_core::riemannian::retract;
use gprg_core::{Field, OperatorSet, PolarGrid, ProblemParams};
use num_complex::Complex64;
use proptest::prelude::*;

fn ops(omega: f64, eta: f64) -> OperatorSet {
    let grid = Arc::new(PolarGrid::new(12, 24, 5.0).unwrap());
    OperatorSet::new(grid, ProblemParams::harmonic(omega, eta)).unwrap()
}

/// Gaussian times a few seeded angular modes, normalized.
fn state(ops: &OperatorSet, coeffs: &[(f64, f64)]) -> Field {
    Field::from_fn(ops.grid(), |r, theta| {
        let g = (-r * r / 2.0).exp();
        coeffs
            .iter()
            .enumerate()
            .map(|(m, &(a, b))| Complex64::new(a, b) * Complex64::from_polar(g * r.powi(m as i32), m as f64 * theta))
            .sum()
    })
    .normalized()
    .unwrap()
}

fn coeffs() -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((-1.0..1.0f64, -1.0..1.0f64), 3).prop_filter("nonzero", |c| c[0].0.abs() > 0.1)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn energy_and_lambda_ignore_global_phase(c in coeffs(), alpha in 0.0..6.3f64, omega in 0.0..0.9f64, eta in 0.0..50.0f64) {
        let ops = ops(omega, eta);
        let phi = state(&ops, &c);
        let turned = phi.with_phase(alpha);
        let e = ops.energy(&phi);
        prop_assert!((ops.energy(&turned) - e).abs() <= 1e-12 * e.abs().max(1.0));
        let l = ops.lambda_tilde(&phi);
        prop_assert!((ops.lambda_tilde(&turned) - l).abs() <= 1e-12 * l.abs().max(1.0));
    }

    #[test]
    fn energy_ignores_grid_rotation(c in coeffs(), k in -24i64..24, omega in 0.0..0.9f64, eta in 0.0..50.0f64) {
        let ops = ops(omega, eta);
        let phi = state(&ops, &c);
        let e = ops.energy(&phi);
        prop_assert!((ops.energy(&phi.rotate_by_index(k)) - e).abs() <= 1e-12 * e.abs().max(1.0));
    }

    #[test]
    fn h0_is_symmetric_in_the_weighted_product(a in coeffs(), b in coeffs(), omega in 0.0..0.9f64) {
        let ops = ops(omega, 0.0);
        let (u, v) = (state(&ops, &a), state(&ops, &b));
        let lhs = ops.apply_h0(&u).inner_l2(&v);
        let rhs = u.inner_l2(&ops.apply_h0(&v));
        prop_assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn retraction_stays_on_the_sphere(a in coeffs(), b in coeffs(), tau in 0.0..10.0f64) {
        let ops = ops(0.5, 10.0);
        let phi = state(&ops, &a);
        let w = state(&ops, &b);
        let v = w.lin_comb(1.0, &phi, -phi.inner_l2(&w));
        let next = retract(&phi, &v, tau).unwrap();
        prop_assert!((next.norm_l2() - 1.0).abs() <= 1e-13);
    }
}
