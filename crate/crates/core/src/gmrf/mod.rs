//! Sparse Gaussian Markov random field engine: factorization, sampling,
//! densities and selected inverses, with optional hard linear constraints.

mod cholesky;
mod constraints;
pub mod ordering;

pub use cholesky::{FactoredPrecision, OrderingMethod, PartialInverse, SymbolicCholesky};
pub use constraints::{ConstrainedGmrf, ConstraintSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic per-task RNG: `base ⊕ task`.
pub fn task_rng(base_seed: u64, task: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(base_seed ^ task.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

#[cfg(test)]
pub(crate) mod testing {
    use nalgebra::DMatrix;
    use rand::Rng;
    use sprs::{CsMat, TriMat};

    /// Random sparse SPD matrix: a banded-plus-random pattern made strictly
    /// diagonally dominant.
    pub fn random_spd<R: Rng>(n: usize, extra: usize, rng: &mut R) -> CsMat<f64> {
        let mut dense = DMatrix::<f64>::zeros(n, n);
        for i in 0..n.saturating_sub(1) {
            let v = rng.random_range(-1.0..1.0);
            dense[(i, i + 1)] = v;
            dense[(i + 1, i)] = v;
        }
        for _ in 0..extra {
            let (i, j) = (rng.random_range(0..n), rng.random_range(0..n));
            if i != j {
                let v = rng.random_range(-1.0..1.0);
                dense[(i, j)] = v;
                dense[(j, i)] = v;
            }
        }
        for i in 0..n {
            let off: f64 = (0..n).filter(|&j| j != i).map(|j| dense[(i, j)].abs()).sum();
            dense[(i, i)] = off + rng.random_range(0.1..2.0);
        }
        to_sparse(&dense)
    }

    pub fn to_sparse(d: &DMatrix<f64>) -> CsMat<f64> {
        let mut t = TriMat::new((d.nrows(), d.ncols()));
        for i in 0..d.nrows() {
            for j in 0..d.ncols() {
                if d[(i, j)] != 0.0 {
                    t.add_triplet(i, j, d[(i, j)]);
                }
            }
        }
        t.to_csc()
    }

    pub fn to_dense(s: &CsMat<f64>) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(s.rows(), s.cols());
        for (&v, (i, j)) in s.iter() {
            d[(i, j)] += v;
        }
        d
    }
}

#[cfg(test)]
mod tests {
    use super::testing::*;
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::{DMatrix, DVector};
    use rand::Rng;
    use sprs::CsMat;
    use std::sync::Arc;

    #[test]
    fn identity_factor_is_identity() {
        let q: CsMat<f64> = CsMat::eye(5);
        let f = FactoredPrecision::new(&q).unwrap();
        assert_eq!(f.log_det(), 0.0);
        for (i, j, v) in f.factor_entries() {
            assert_eq!(i, j);
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn two_by_two_log_det() {
        let q = to_sparse(&DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]));
        let f = FactoredPrecision::new(&q).unwrap();
        assert_abs_diff_eq!(f.log_det(), 3f64.ln(), epsilon = 1e-14);
    }

    #[test]
    fn non_positive_definite_reports_pivot() {
        let q = to_sparse(&DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]));
        assert!(matches!(
            FactoredPrecision::new(&q),
            Err(crate::Error::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn pattern_outside_analysis_is_rejected() {
        let q: CsMat<f64> = CsMat::eye(3);
        let sym = Arc::new(SymbolicCholesky::analyze(&q, OrderingMethod::Natural).unwrap());
        let full = to_sparse(&DMatrix::from_row_slice(
            3,
            3,
            &[2.0, 1.0, 0.0, 1.0, 2.0, 0.0, 0.0, 0.0, 1.0],
        ));
        assert!(matches!(sym.factor(&full), Err(crate::Error::PatternMismatch { .. })));
    }

    #[test]
    fn reconstruction_solve_and_partial_inverse_match_dense() {
        let mut rng = task_rng(7, 0);
        for trial in 0..10 {
            let n = 8 + trial * 4;
            let q = random_spd(n, n, &mut rng);
            let dense = to_dense(&q);
            let f = FactoredPrecision::new(&q).unwrap();

            // P Q Pᵀ = L Lᵀ
            let perm = f.symbolic().perm().to_vec();
            let mut l = DMatrix::zeros(n, n);
            for (i, j, v) in f.factor_entries() {
                l[(i, j)] = v;
            }
            let pq = DMatrix::from_fn(n, n, |i, j| dense[(perm[i], perm[j])]);
            let err = (&l * l.transpose() - &pq).amax();
            assert!(err < 1e-8 * dense.amax(), "reconstruction error {err}");
            let ldiag: f64 = (0..n).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0;
            assert_abs_diff_eq!(f.log_det(), ldiag, epsilon = 1e-12);

            let eig = dense.clone().symmetric_eigen();
            let logdet: f64 = eig.eigenvalues.iter().map(|v| v.ln()).sum();
            assert_abs_diff_eq!(f.log_det(), logdet, epsilon = 1e-8);

            let inv = dense.clone().try_inverse().unwrap();
            let inv_f = FactoredPrecision::new(&to_sparse(&inv)).unwrap();
            assert_abs_diff_eq!(f.log_det() + inv_f.log_det(), 0.0, epsilon = 1e-8);

            let b: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
            let x = f.solve(&b);
            let xd = &inv * DVector::from_vec(b.clone());
            for i in 0..n {
                assert_abs_diff_eq!(x[i], xd[i], epsilon = 1e-10);
            }
            let quad = f.quadratic_form(&b);
            let bd = DVector::from_vec(b);
            assert_abs_diff_eq!(quad, bd.dot(&(&dense * &bd)), epsilon = 1e-9 * quad.abs().max(1.0));

            let pinv = f.partial_inverse();
            for (i, j, _) in f.factor_entries() {
                let (oi, oj) = (perm[i], perm[j]);
                assert_abs_diff_eq!(pinv.get(oi, oj).unwrap(), inv[(oi, oj)], epsilon = 1e-10);
            }
            let idx: Vec<usize> = (0..n).step_by(3).collect();
            for (k, v) in f.selected_variances(&idx).into_iter().enumerate() {
                assert_abs_diff_eq!(v, inv[(idx[k], idx[k])], epsilon = 1e-10);
                assert_abs_diff_eq!(pinv.variance(idx[k]), v, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn two_times_identity_variances() {
        let q: CsMat<f64> = CsMat::<f64>::eye(4).map(|v: &f64| 2.0 * v);
        let f = FactoredPrecision::new(&q).unwrap();
        for v in f.selected_variances(&[0, 1, 2, 3]) {
            assert_abs_diff_eq!(v, 0.5, epsilon = 1e-15);
        }
    }

    #[test]
    fn block_diagonal_matches_direct_factorization() {
        let mut rng = task_rng(3, 1);
        let a = random_spd(6, 4, &mut rng);
        let b = random_spd(4, 2, &mut rng);
        let fa = FactoredPrecision::new(&a).unwrap();
        let fb = FactoredPrecision::new(&b).unwrap();
        let fd = FactoredPrecision::diagonal(&[2.0, 3.0]).unwrap();
        let blk = FactoredPrecision::block_diagonal(&[&fa, &fb, &fd]);
        let mut dense = DMatrix::zeros(12, 12);
        dense.view_mut((0, 0), (6, 6)).copy_from(&to_dense(&a));
        dense.view_mut((6, 6), (4, 4)).copy_from(&to_dense(&b));
        dense[(10, 10)] = 2.0;
        dense[(11, 11)] = 3.0;
        let direct = FactoredPrecision::new(&to_sparse(&dense)).unwrap();
        assert_abs_diff_eq!(blk.log_det(), direct.log_det(), epsilon = 1e-12);
        let rhs: Vec<f64> = (0..12).map(|i| i as f64 - 5.0).collect();
        for (x, y) in blk.solve(&rhs).iter().zip(direct.solve(&rhs)) {
            assert_abs_diff_eq!(*x, y, epsilon = 1e-12);
        }
        let pinv = blk.partial_inverse();
        let inv = dense.try_inverse().unwrap();
        for i in 0..12 {
            assert_abs_diff_eq!(pinv.variance(i), inv[(i, i)], epsilon = 1e-12);
        }
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let mut rng = task_rng(1, 1);
        let q = random_spd(10, 5, &mut rng);
        let f = FactoredPrecision::new(&q).unwrap();
        let mean = vec![0.5; 10];
        let a = f.sample(&mean, &mut task_rng(42, 3));
        let b = f.sample(&mean, &mut task_rng(42, 3));
        assert_eq!(a, b);
    }

    #[test]
    fn identity_sample_covariance() {
        let q: CsMat<f64> = CsMat::eye(3);
        let f = FactoredPrecision::new(&q).unwrap();
        let mut rng = task_rng(11, 0);
        let n = 100_000;
        let mut cov = DMatrix::<f64>::zeros(3, 3);
        for _ in 0..n {
            let x = DVector::from_vec(f.sample(&[0.0; 3], &mut rng));
            cov += &x * x.transpose();
        }
        cov /= n as f64;
        let tol = 3.0 * 2f64.sqrt() / (n as f64).sqrt();
        for i in 0..3 {
            for j in 0..3 {
                let target = if i == j { 1.0 } else { 0.0 };
                assert!((cov[(i, j)] - target).abs() < tol, "{i},{j}: {}", cov[(i, j)]);
            }
        }
    }

    fn empirical_covariance(samples: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
        let n = samples[0].len();
        let m = samples.len() as f64;
        let mut mean = DVector::zeros(n);
        for s in samples {
            mean += DVector::from_column_slice(s);
        }
        mean /= m;
        let mut cov = DMatrix::zeros(n, n);
        for s in samples {
            let d = DVector::from_column_slice(s) - &mean;
            cov += &d * d.transpose();
        }
        (mean, cov / (m - 1.0))
    }

    fn assert_cov_within_se(cov: &DMatrix<f64>, truth: &DMatrix<f64>, draws: usize) {
        let n = truth.nrows();
        for i in 0..n {
            for j in 0..n {
                // Var of sample covariance ≈ (Σ_ij² + Σ_ii Σ_jj) / m.
                let se = ((truth[(i, j)].powi(2) + truth[(i, i)] * truth[(j, j)]) / draws as f64).sqrt();
                assert!(
                    (cov[(i, j)] - truth[(i, j)]).abs() < 5.0 * se + 1e-12,
                    "entry ({i},{j}): {} vs {}",
                    cov[(i, j)],
                    truth[(i, j)]
                );
            }
        }
    }

    #[test]
    fn small_sample_covariance_matches_dense_inverse() {
        let mut rng = task_rng(5, 5);
        let q = random_spd(5, 3, &mut rng);
        let f = FactoredPrecision::new(&q).unwrap();
        let draws = 100_000;
        let samples: Vec<Vec<f64>> = (0..draws).map(|_| f.sample(&[0.0; 5], &mut rng)).collect();
        let (_, cov) = empirical_covariance(&samples);
        let inv = to_dense(&q).try_inverse().unwrap();
        assert_cov_within_se(&cov, &inv, draws);
    }

    fn dense_constrained_cov(inv: &DMatrix<f64>, a: &DMatrix<f64>) -> DMatrix<f64> {
        let w = inv * a.transpose();
        let s = a * &w;
        inv - &w * s.try_inverse().unwrap() * w.transpose()
    }

    #[test]
    fn sum_to_zero_conditioning() {
        let mut rng = task_rng(9, 0);
        let q = random_spd(7, 4, &mut rng);
        let f = FactoredPrecision::new(&q).unwrap();
        let c = ConstraintSet::new(DMatrix::from_element(1, 7, 1.0), DVector::zeros(1)).unwrap();
        let g = ConstrainedGmrf::new(&f, vec![0.3; 7], &c).unwrap();
        let x = g.sample(&mut rng);
        assert!(x.iter().sum::<f64>().abs() < 1e-10);
        // Already feasible points are fixed.
        let again = g.condition(&x);
        for (a, b) in x.iter().zip(&again) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn conditioning_matches_dense_gaussian_conditioning() {
        let mut rng = task_rng(21, 0);
        let n = 9;
        let q = random_spd(n, 6, &mut rng);
        let inv = to_dense(&q).try_inverse().unwrap();
        let a = DMatrix::from_fn(2, n, |_, _| rng.random_range(-1.0..1.0));
        let e = DVector::from_vec(vec![0.4, -1.2]);
        let mu = DVector::from_fn(n, |i, _| (i as f64) * 0.1);
        let f = FactoredPrecision::new(&q).unwrap();
        let c = ConstraintSet::new(a.clone(), e.clone()).unwrap();
        let g = ConstrainedGmrf::new(&f, mu.iter().copied().collect(), &c).unwrap();

        let w = &inv * a.transpose();
        let s_inv = (&a * &w).try_inverse().unwrap();
        let dense_mean = &mu - &w * &s_inv * (&a * &mu - &e);
        let m = g.constrained_mean();
        for i in 0..n {
            assert_abs_diff_eq!(m[i], dense_mean[i], epsilon = 1e-10);
        }
        let x = g.sample(&mut rng);
        assert!(c.residual(&x).amax() < 1e-10);

        let cov = dense_constrained_cov(&inv, &a);
        let vars = g.selected_variances(&(0..n).collect::<Vec<_>>());
        let pinv = f.partial_inverse();
        for i in 0..n {
            assert_abs_diff_eq!(vars[i], cov[(i, i)], epsilon = 1e-10);
            assert!(vars[i] <= inv[(i, i)] + 1e-12);
            let lv = g.linear_variance(&pinv, &[(i, 1.0)]).unwrap();
            assert_abs_diff_eq!(lv, cov[(i, i)], epsilon = 1e-10);
        }
    }

    #[test]
    fn constrained_sample_covariance_matches_dense() {
        let mut rng = task_rng(33, 0);
        let n = 5;
        let q = random_spd(n, 3, &mut rng);
        let inv = to_dense(&q).try_inverse().unwrap();
        let a = DMatrix::from_row_slice(1, n, &[1.0, 2.0, 0.0, -1.0, 0.5]);
        let f = FactoredPrecision::new(&q).unwrap();
        let c = ConstraintSet::new(a.clone(), DVector::from_vec(vec![0.7])).unwrap();
        let g = ConstrainedGmrf::new(&f, vec![0.0; n], &c).unwrap();
        let draws = 100_000;
        let samples: Vec<Vec<f64>> = (0..draws).map(|_| g.sample(&mut rng)).collect();
        let (_, cov) = empirical_covariance(&samples);
        let truth = dense_constrained_cov(&inv, &a);
        assert_cov_within_se(&cov, &truth, draws);
    }

    #[test]
    fn unconstrained_density_when_no_constraints() {
        let mut rng = task_rng(2, 2);
        let q = random_spd(6, 2, &mut rng);
        let f = FactoredPrecision::new(&q).unwrap();
        let c = ConstraintSet::empty(6);
        let mean = vec![0.1; 6];
        let g = ConstrainedGmrf::new(&f, mean.clone(), &c).unwrap();
        let x: Vec<f64> = (0..6).map(|i| i as f64 * 0.2).collect();
        let dense = to_dense(&q);
        let d = DVector::from_vec(x.iter().zip(&mean).map(|(a, b)| a - b).collect());
        let expected =
            -3.0 * (2.0 * std::f64::consts::PI).ln() + 0.5 * dense.determinant().ln() - 0.5 * d.dot(&(&dense * &d));
        assert_abs_diff_eq!(g.log_density(&x).unwrap(), expected, epsilon = 1e-10);
    }

    /// Density on the plane `a·x = e` in 3-D, checked against the 2-D density of
    /// `(x0, x1)` with `x2` eliminated (the surface element is `|a| / |a2|`).
    #[test]
    fn constrained_density_matches_reparametrization() {
        let q = to_sparse(&DMatrix::from_row_slice(
            3,
            3,
            &[2.0, 0.5, 0.2, 0.5, 1.5, -0.3, 0.2, -0.3, 1.2],
        ));
        let cov = to_dense(&q).try_inverse().unwrap();
        let mu = DVector::from_vec(vec![0.3, -0.2, 0.1]);
        let a = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let e = 0.4;
        let f = FactoredPrecision::new(&q).unwrap();
        let c = ConstraintSet::new(DMatrix::from_row_slice(1, 3, a.as_slice()), DVector::from_vec(vec![e])).unwrap();
        let g = ConstrainedGmrf::new(&f, mu.iter().copied().collect(), &c).unwrap();

        // Joint Gaussian of (x0, x1, a·x); condition on a·x = e to get (x0, x1).
        let t = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, a[0], a[1], a[2]]);
        let tc = &t * &cov * t.transpose();
        let tm = &t * &mu;
        let s11 = tc.view((0, 0), (2, 2)).into_owned();
        let s12 = tc.view((0, 2), (2, 1)).into_owned();
        let s22 = tc[(2, 2)];
        let cm = tm.rows(0, 2) + &s12 * ((e - tm[2]) / s22);
        let cc = &s11 - &s12 * s12.transpose() / s22;
        let cinv = cc.clone().try_inverse().unwrap();
        for (x0, x1) in [(0.0, 0.0), (0.7, -0.4), (-1.1, 0.9)] {
            let x2 = (e - a[0] * x0 - a[1] * x1) / a[2];
            let d = DVector::from_vec(vec![x0 - cm[0], x1 - cm[1]]);
            let log2d = -(2.0 * std::f64::consts::PI).ln() - 0.5 * cc.determinant().ln() - 0.5 * d.dot(&(&cinv * &d));
            let jac = (a.norm() / a[2].abs()).ln();
            let got = g.log_density(&[x0, x1, x2]).unwrap();
            assert_abs_diff_eq!(got, log2d - jac, epsilon = 1e-10);
        }
        assert!(g.log_density(&[0.0, 0.0, 0.0]).is_err());
    }

    /// Monte Carlo integral of the constrained density over its plane.
    #[test]
    fn constrained_density_integrates_to_one() {
        let q = to_sparse(&DMatrix::from_row_slice(
            3,
            3,
            &[1.5, 0.3, 0.0, 0.3, 1.0, 0.2, 0.0, 0.2, 2.0],
        ));
        let a = DVector::from_vec(vec![1.0, 1.0, 1.0]);
        let f = FactoredPrecision::new(&q).unwrap();
        let c = ConstraintSet::new(
            DMatrix::from_row_slice(1, 3, a.as_slice()),
            DVector::from_vec(vec![0.0]),
        )
        .unwrap();
        let g = ConstrainedGmrf::new(&f, vec![0.2, -0.1, 0.0], &c).unwrap();
        // Orthonormal basis of the plane.
        let u = DVector::from_vec(vec![1.0, -1.0, 0.0]).normalize();
        let v = DVector::from_vec(vec![1.0, 1.0, -2.0]).normalize();
        // Importance sampling with a wide Gaussian proposal on the plane.
        let mut rng = task_rng(77, 0);
        let sp = 1.5f64;
        let draws = 100_000;
        let mut sum = 0.0;
        for _ in 0..draws {
            let s: f64 = sp * rng.sample::<f64, _>(rand_distr::StandardNormal);
            let t: f64 = sp * rng.sample::<f64, _>(rand_distr::StandardNormal);
            let x = &u * s + &v * t;
            let log_q = -(2.0 * std::f64::consts::PI * sp * sp).ln() - 0.5 * (s * s + t * t) / (sp * sp);
            sum += (g.log_density(x.as_slice()).unwrap() - log_q).exp();
        }
        let integral = sum / draws as f64;
        assert!((integral - 1.0).abs() < 0.01, "integral {integral}");
    }
}
