//! Hard linear constraints `A x = e` on a GMRF.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;

use super::cholesky::{FactoredPrecision, PartialInverse};
use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `k` linear equality constraints on an `N`-vector.
#[derive(Debug, Clone)]
pub struct ConstraintSet {
    /// `k x N`.
    pub a: DMatrix<f64>,
    pub e: DVector<f64>,
}

impl ConstraintSet {
    pub fn new(a: DMatrix<f64>, e: DVector<f64>) -> Result<Self> {
        if a.nrows() != e.len() {
            return Err(Error::DimensionMismatch {
                context: "constraint right-hand side",
                expected: a.nrows(),
                got: e.len(),
            });
        }
        Ok(Self { a, e })
    }

    pub fn empty(n: usize) -> Self {
        Self {
            a: DMatrix::zeros(0, n),
            e: DVector::zeros(0),
        }
    }

    pub fn count(&self) -> usize {
        self.a.nrows()
    }

    pub fn dim(&self) -> usize {
        self.a.ncols()
    }

    pub fn residual(&self, x: &[f64]) -> DVector<f64> {
        &self.a * DVector::from_column_slice(x) - &self.e
    }

    /// `½ log det(A Aᵀ)`, the measure correction for densities on the plane.
    pub fn half_log_det_aat(&self) -> Result<f64> {
        if self.count() == 0 {
            return Ok(0.0);
        }
        let aat = &self.a * self.a.transpose();
        let chol = Cholesky::new(aat).ok_or(Error::RankDeficientConstraints)?;
        Ok(chol.l().diagonal().iter().map(|v| v.ln()).sum())
    }
}

/// A GMRF `N(mean, Q⁻¹)` together with a constraint set, with `W = Q⁻¹Aᵀ` and
/// the Cholesky factor of `A Q⁻¹ Aᵀ` precomputed.
#[derive(Debug, Clone)]
pub struct ConstrainedGmrf<'a> {
    pub factor: &'a FactoredPrecision,
    pub mean: Vec<f64>,
    pub constraints: &'a ConstraintSet,
    /// `N x k`.
    w: DMatrix<f64>,
    s_chol: Option<Cholesky<f64, Dyn>>,
}

impl<'a> ConstrainedGmrf<'a> {
    pub fn new(factor: &'a FactoredPrecision, mean: Vec<f64>, constraints: &'a ConstraintSet) -> Result<Self> {
        let n = factor.size();
        if mean.len() != n {
            return Err(Error::DimensionMismatch {
                context: "GMRF mean",
                expected: n,
                got: mean.len(),
            });
        }
        if constraints.dim() != n {
            return Err(Error::DimensionMismatch {
                context: "constraint columns",
                expected: n,
                got: constraints.dim(),
            });
        }
        let k = constraints.count();
        let mut w = DMatrix::zeros(n, k);
        for r in 0..k {
            let row: Vec<f64> = constraints.a.row(r).iter().copied().collect();
            let col = factor.solve(&row);
            w.set_column(r, &DVector::from_vec(col));
        }
        let s_chol = if k == 0 {
            None
        } else {
            let s = &constraints.a * &w;
            let s = (&s + s.transpose()) * 0.5;
            Some(Cholesky::new(s).ok_or(Error::RankDeficientConstraints)?)
        };
        Ok(Self {
            factor,
            mean,
            constraints,
            w,
            s_chol,
        })
    }

    pub fn w(&self) -> &DMatrix<f64> {
        &self.w
    }

    /// Conditioning by kriging: `x − W S⁻¹ (A x − e)`.
    pub fn condition(&self, x: &[f64]) -> Vec<f64> {
        let Some(chol) = &self.s_chol else {
            return x.to_vec();
        };
        let mut out = x.to_vec();
        // One refinement pass recovers the digits lost when A Q⁻¹ Aᵀ is
        // ill-conditioned (long ranges).
        for _ in 0..2 {
            let r = self.constraints.residual(&out);
            let corr = &self.w * chol.solve(&r);
            for (a, b) in out.iter_mut().zip(corr.iter()) {
                *a -= b;
            }
        }
        out
    }

    pub fn constrained_mean(&self) -> Vec<f64> {
        self.condition(&self.mean)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let x = self.factor.sample(&self.mean, rng);
        self.condition(&x)
    }

    /// Log-density of `x` on the plane `A x = e` with respect to its surface
    /// measure: `log π(x) − ½ log|AAᵀ| − log π_{Ax}(e)`.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        let base = self.factor.log_density(x, &self.mean);
        let Some(chol) = &self.s_chol else {
            return Ok(base);
        };
        let scale = 1.0 + x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let row_norm = (0..self.constraints.count())
            .map(|r| self.constraints.a.row(r).iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0f64, f64::max);
        let resid = self.constraints.residual(x).amax();
        if resid > 1e-10 * scale * row_norm.max(1.0) {
            return Err(Error::ConstraintViolation { residual: resid });
        }
        let k = self.constraints.count() as f64;
        let mu = DVector::from_column_slice(&self.mean);
        let d = &self.constraints.e - &self.constraints.a * mu;
        let sol = chol.solve(&d);
        let half_logdet_s: f64 = chol.l().diagonal().iter().map(|v| v.ln()).sum();
        let log_p_ax = -0.5 * k * LN_2PI - half_logdet_s - 0.5 * d.dot(&sol);
        Ok(base - self.constraints.half_log_det_aat()? - log_p_ax)
    }

    /// Removes the constraint correction from a covariance entry given the
    /// unconstrained covariance `Σ_ij`: `Σ_ij − W_i S⁻¹ W_jᵀ`.
    pub fn corrected(&self, sparse_a: &[(usize, f64)], unconstrained_quad: f64) -> f64 {
        let Some(chol) = &self.s_chol else {
            return unconstrained_quad;
        };
        let k = self.constraints.count();
        let mut wa = DVector::zeros(k);
        for &(i, ai) in sparse_a {
            for c in 0..k {
                wa[c] += ai * self.w[(i, c)];
            }
        }
        unconstrained_quad - wa.dot(&chol.solve(&wa))
    }

    /// Constrained variance of `aᵀx` using covariance entries from a partial
    /// inverse of the same factor.
    pub fn linear_variance(&self, pinv: &PartialInverse, a: &[(usize, f64)]) -> Option<f64> {
        Some(self.corrected(a, pinv.quadratic(a)?))
    }

    /// Constrained marginal variances at `indices` via column solves.
    pub fn selected_variances(&self, indices: &[usize]) -> Vec<f64> {
        let raw = self.factor.selected_variances(indices);
        indices
            .iter()
            .zip(raw)
            .map(|(&i, v)| self.corrected(&[(i, 1.0)], v))
            .collect()
    }
}
