//! Dense linear algebra checked against nalgebra.

use approx::assert_relative_eq;
use grwlab_core::linalg::{
    extreme_eigenvalues, gram, jacobi_eigenvalues, min_norm_span_solve, project_onto_span,
    solve_general, solve_spd, Matrix,
};
use grwlab_core::oracles::{min_norm_interpolator, ridge_closed_form};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.data())
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-1.0f64..1.0, rows * cols)
        .prop_map(move |d| Matrix::new(rows, cols, d).unwrap())
}

/// Tall matrix plus right-hand side with one entry per column.
fn tall() -> impl Strategy<Value = (Matrix, Vec<f64>)> {
    (1usize..6, 0usize..8)
        .prop_flat_map(|(n, extra)| (matrix(n + extra, n), prop::collection::vec(-1.0f64..1.0, n)))
}

fn well_conditioned(x: &Matrix) -> bool {
    let g = to_na(&gram(x).unwrap());
    let ev = g.symmetric_eigenvalues();
    let (lo, hi) = (ev.min(), ev.max());
    lo > 1e-6 * hi.max(1e-300)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn eigenvalues_match(m in (1usize..12).prop_flat_map(|n| matrix(n, n))) {
        let s = Matrix::new(m.rows(), m.cols(), {
            let t = m.transpose();
            m.data().iter().zip(t.data()).map(|(a, b)| 0.5 * (a + b)).collect()
        }).unwrap();
        let ours = jacobi_eigenvalues(&s).unwrap();
        let mut theirs: Vec<f64> = to_na(&s).symmetric_eigenvalues().iter().copied().collect();
        theirs.sort_by(f64::total_cmp);
        for (a, b) in ours.iter().zip(&theirs) {
            assert_relative_eq!(a, b, epsilon = 1e-10, max_relative = 1e-10);
        }
        let (hi, lo) = extreme_eigenvalues(&s, 1e-13).unwrap();
        assert_relative_eq!(hi, theirs[theirs.len() - 1], epsilon = 1e-9);
        assert_relative_eq!(lo, theirs[0], epsilon = 1e-9);
    }

    #[test]
    fn solvers_match((a, b) in (1usize..10).prop_flat_map(|n| (matrix(n, n), prop::collection::vec(-1.0f64..1.0, n)))) {
        let na = to_na(&a);
        prop_assume!(na.clone().svd(false, false).singular_values.min() > 1e-3);
        let x = solve_general(&a, &b).unwrap();
        let expect = na.lu().solve(&DVector::from_vec(b.clone())).unwrap();
        for (u, v) in x.iter().zip(expect.iter()) {
            assert_relative_eq!(u, v, epsilon = 1e-8, max_relative = 1e-8);
        }
        // AᵀA + I is SPD
        let spd = a.transpose().matmul(&a).unwrap();
        let spd = Matrix::new(spd.rows(), spd.cols(), spd.data().iter().enumerate()
            .map(|(k, v)| if k / spd.cols() == k % spd.cols() { v + 1.0 } else { *v }).collect()).unwrap();
        let x = solve_spd(&spd, &b).unwrap();
        let expect = to_na(&spd).cholesky().unwrap().solve(&DVector::from_vec(b.clone()));
        for (u, v) in x.iter().zip(expect.iter()) {
            assert_relative_eq!(u, v, epsilon = 1e-10, max_relative = 1e-10);
        }
    }

    #[test]
    fn min_norm_solution_matches_pseudoinverse((x, r) in tall()) {
        prop_assume!(well_conditioned(&x));
        let ours = min_norm_span_solve(&x, &r).unwrap();
        // θ with Xᵀθ = r of least norm is (Xᵀ)⁺ r
        let xt = to_na(&x).transpose();
        let pinv = xt.pseudo_inverse(1e-12).unwrap();
        let theirs = pinv * DVector::from_vec(r.clone());
        for (u, v) in ours.iter().zip(theirs.iter()) {
            assert_relative_eq!(u, v, epsilon = 1e-8);
        }
        let theta0 = vec![0.0; x.rows()];
        let f0 = vec![0.0; x.cols()];
        let interp = min_norm_interpolator(&x, &r, &theta0, &f0).unwrap();
        for (u, v) in interp.iter().zip(&ours) {
            assert_relative_eq!(u, v, epsilon = 1e-12);
        }
    }

    #[test]
    fn projection_is_idempotent((x, _r) in tall(), seed in 0u64..1000) {
        prop_assume!(well_conditioned(&x));
        let v: Vec<f64> = (0..x.rows()).map(|i| ((i as u64 * 7919 + seed) % 97) as f64 / 97.0 - 0.5).collect();
        let p = project_onto_span(&v, &x).unwrap();
        let pp = project_onto_span(&p, &x).unwrap();
        for (a, b) in p.iter().zip(&pp) {
            assert_relative_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn ridge_matches_primal_normal_equations((x, y) in tall(), mu in 0.01f64..10.0) {
        let n = x.cols();
        let q = vec![1.0 / n as f64; n];
        let theta0 = vec![0.0; x.rows()];
        let f0 = vec![0.0; n];
        let ours = ridge_closed_form(&x, &y, &q, mu, &theta0, &f0).unwrap();
        // (X Q Xᵀ + μI) θ = X Q y
        let nx = to_na(&x);
        let nq = DMatrix::from_diagonal(&DVector::from_vec(q.clone()));
        let lhs = &nx * &nq * nx.transpose() + DMatrix::identity(x.rows(), x.rows()) * mu;
        let rhs = &nx * &nq * DVector::from_vec(y.clone());
        let theirs = lhs.lu().solve(&rhs).unwrap();
        for (u, v) in ours.iter().zip(theirs.iter()) {
            assert_relative_eq!(u, v, epsilon = 1e-9, max_relative = 1e-9);
        }
    }
}
