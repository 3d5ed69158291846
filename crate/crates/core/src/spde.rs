//! SPDE dependence structure: log-linear local parameters, the GMRF
//! precision matrix of the α = 2 operator and stationary Matérn references.

use serde::{Deserialize, Serialize};
use sprs::{CsMat, TriMat};
use statrs::function::gamma::gamma;

use crate::error::{Error, Result};
use crate::fem::FemMatrices;

/// √8: the range at which a ν = 1 Matérn correlation has dropped to ≈ 0.13.
pub const SQRT_8: f64 = 2.828_427_124_746_190_3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelMode {
    Stationary,
    #[serde(alias = "non-stationary")]
    Nonstationary,
}

/// Basis vectors for `log τ` and `log κ`. The constant basis is implicit; the
/// listed vectors are the additional covariate bases, each of length `m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpdeConfig {
    pub node_count: usize,
    pub tau_basis: Vec<Vec<f64>>,
    pub kappa_basis: Vec<Vec<f64>>,
}

impl SpdeConfig {
    pub fn stationary(node_count: usize) -> Self {
        Self {
            node_count,
            tau_basis: Vec::new(),
            kappa_basis: Vec::new(),
        }
    }

    /// One covariate (elevation) entering both `log τ` and `log κ`.
    pub fn with_covariate(covariate: &CovariateField) -> Self {
        Self {
            node_count: covariate.values.len(),
            tau_basis: vec![covariate.values.clone()],
            kappa_basis: vec![covariate.values.clone()],
        }
    }

    pub fn for_mode(mode: ModelMode, covariate: &CovariateField) -> Self {
        match mode {
            ModelMode::Stationary => Self::stationary(covariate.values.len()),
            ModelMode::Nonstationary => Self::with_covariate(covariate),
        }
    }

    pub fn mode(&self) -> ModelMode {
        if self.tau_basis.is_empty() && self.kappa_basis.is_empty() {
            ModelMode::Stationary
        } else {
            ModelMode::Nonstationary
        }
    }

    /// Number of τ weights (including the intercept).
    pub fn n_tau(&self) -> usize {
        1 + self.tau_basis.len()
    }

    pub fn n_kappa(&self) -> usize {
        1 + self.kappa_basis.len()
    }

    pub fn validate(&self) -> Result<()> {
        for b in self.tau_basis.iter().chain(&self.kappa_basis) {
            if b.len() != self.node_count {
                return Err(Error::DimensionMismatch {
                    context: "basis vector length",
                    expected: self.node_count,
                    got: b.len(),
                });
            }
            if b.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput("basis vector has non-finite entries".into()));
            }
        }
        Ok(())
    }
}

/// A point in hyperparameter space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub theta_tau: Vec<f64>,
    pub theta_kappa: Vec<f64>,
    /// `log τ_ε`.
    pub log_noise_precision: f64,
}

impl HyperParams {
    pub fn new(theta_tau: Vec<f64>, theta_kappa: Vec<f64>, log_noise_precision: f64) -> Self {
        Self {
            theta_tau,
            theta_kappa,
            log_noise_precision,
        }
    }

    /// Flattened `[θ_τ…, θ_κ…, log τ_ε]`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.theta_tau.clone();
        v.extend_from_slice(&self.theta_kappa);
        v.push(self.log_noise_precision);
        v
    }

    pub fn from_slice(config: &SpdeConfig, v: &[f64]) -> Result<Self> {
        let (nt, nk) = (config.n_tau(), config.n_kappa());
        if v.len() != nt + nk + 1 {
            return Err(Error::DimensionMismatch {
                context: "hyperparameter vector",
                expected: nt + nk + 1,
                got: v.len(),
            });
        }
        Ok(Self {
            theta_tau: v[..nt].to_vec(),
            theta_kappa: v[nt..nt + nk].to_vec(),
            log_noise_precision: v[nt + nk],
        })
    }

    pub fn noise_precision(&self) -> f64 {
        self.log_noise_precision.exp()
    }
}

/// A covariate stored at the mesh nodes (elevation in km).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateField {
    pub values: Vec<f64>,
}

impl CovariateField {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("covariate has non-finite values".into()));
        }
        Ok(Self { values })
    }

    /// Reads `node_index,value` rows; every node must be assigned exactly once.
    pub fn read_csv(path: &std::path::Path, node_count: usize) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
        let mut values = vec![f64::NAN; node_count];
        for (k, rec) in rdr.records().enumerate() {
            let line = k + 2;
            let rec = rec?;
            let parse_err = |what: &str| Error::Parse {
                line,
                message: format!("invalid {what}"),
            };
            let idx: usize = rec
                .get(0)
                .ok_or_else(|| parse_err("node_index"))?
                .trim()
                .parse()
                .map_err(|_| parse_err("node_index"))?;
            let val: f64 = rec
                .get(1)
                .ok_or_else(|| parse_err("value"))?
                .trim()
                .parse()
                .map_err(|_| parse_err("value"))?;
            if idx >= node_count {
                return Err(Error::Parse {
                    line,
                    message: format!("node_index {idx} out of range (mesh has {node_count} nodes)"),
                });
            }
            if !val.is_finite() {
                return Err(parse_err("value"));
            }
            values[idx] = val;
        }
        if let Some(missing) = values.iter().position(|v| v.is_nan()) {
            return Err(Error::InvalidInput(format!(
                "covariate file has no value for node {missing}"
            )));
        }
        Ok(Self { values })
    }
}

/// `τ_i = exp(θ_τ,1 + Σ_j b_τ,j(s_i) θ_τ,j)` and likewise for `κ`.
pub fn local_params(config: &SpdeConfig, theta: &HyperParams) -> Result<(Vec<f64>, Vec<f64>)> {
    let eval = |weights: &[f64], basis: &[Vec<f64>], what: &'static str| -> Result<Vec<f64>> {
        if weights.len() != basis.len() + 1 {
            return Err(Error::DimensionMismatch {
                context: what,
                expected: basis.len() + 1,
                got: weights.len(),
            });
        }
        Ok((0..config.node_count)
            .map(|i| {
                let log_v = weights[0] + basis.iter().zip(&weights[1..]).map(|(b, w)| b[i] * w).sum::<f64>();
                log_v.exp()
            })
            .collect())
    };
    Ok((
        eval(&theta.theta_tau, &config.tau_basis, "tau weights")?,
        eval(&theta.theta_kappa, &config.kappa_basis, "kappa weights")?,
    ))
}

/// Precomputed sparsity pattern and θ-independent parts of
/// `Q = T(K²CK² + K²G + GK² + GC⁻¹G)T`.
#[derive(Debug, Clone)]
pub struct PrecisionTemplate {
    pattern: CsMat<f64>,
    c_diag: Vec<f64>,
    // Values aligned with `pattern.data()`.
    g: Vec<f64>,
    gcg: Vec<f64>,
    rows: Vec<usize>,
    cols: Vec<usize>,
}

impl PrecisionTemplate {
    pub fn new(fem: &FemMatrices) -> Result<Self> {
        let m = fem.size();
        if let Some((i, &c)) = fem.c.iter().enumerate().find(|(_, &c)| !(c > 0.0)) {
            return Err(Error::NonPositive {
                name: "lumped mass C_ii",
                index: i,
                value: c,
            });
        }
        // G C⁻¹ G, column by column.
        let g = &fem.g;
        let mut gcg = TriMat::new((m, m));
        let g_csc = g.to_csc();
        for j in 0..m {
            let col = g_csc.outer_view(j).unwrap();
            let mut acc: std::collections::BTreeMap<usize, f64> = Default::default();
            for (k, &gkj) in col.iter() {
                let scale = gkj / fem.c[k];
                for (i, &gik) in g_csc.outer_view(k).unwrap().iter() {
                    *acc.entry(i).or_default() += gik * scale;
                }
            }
            for (i, v) in acc {
                gcg.add_triplet(i, j, v);
            }
        }
        let gcg: CsMat<f64> = gcg.to_csc();

        // Union pattern (diagonal, G, GC⁻¹G) with aligned value arrays.
        let mut union = TriMat::new((m, m));
        for i in 0..m {
            union.add_triplet(i, i, 0.0);
        }
        for (_, (i, j)) in g_csc.iter().chain(gcg.iter()) {
            union.add_triplet(i, j, 0.0);
        }
        let pattern: CsMat<f64> = union.to_csc();
        let nnz = pattern.nnz();
        let mut rows = Vec::with_capacity(nnz);
        let mut cols = Vec::with_capacity(nnz);
        for (j, col) in pattern.outer_iterator().enumerate() {
            for (i, _) in col.iter() {
                rows.push(i);
                cols.push(j);
            }
        }
        let lookup = |mat: &CsMat<f64>| -> Vec<f64> {
            rows.iter()
                .zip(&cols)
                .map(|(&i, &j)| mat.get(i, j).copied().unwrap_or(0.0))
                .collect()
        };
        let gv = lookup(&g_csc);
        let gcgv = lookup(&gcg);
        Ok(Self {
            c_diag: fem.c.clone(),
            g: gv,
            gcg: gcgv,
            rows,
            cols,
            pattern,
        })
    }

    pub fn size(&self) -> usize {
        self.c_diag.len()
    }

    /// Sparsity pattern of every assembled precision (CSC, zero values).
    pub fn pattern(&self) -> &CsMat<f64> {
        &self.pattern
    }

    pub fn assemble(&self, tau: &[f64], kappa: &[f64]) -> Result<CsMat<f64>> {
        let m = self.size();
        for (name, v) in [("tau", tau), ("kappa", kappa)] {
            if v.len() != m {
                return Err(Error::DimensionMismatch {
                    context: "local parameter vector",
                    expected: m,
                    got: v.len(),
                });
            }
            if let Some((i, &x)) = v.iter().enumerate().find(|(_, &x)| !(x > 0.0) || !x.is_finite()) {
                return Err(Error::NonPositive {
                    name,
                    index: i,
                    value: x,
                });
            }
        }
        let k2: Vec<f64> = kappa.iter().map(|k| k * k).collect();
        let data: Vec<f64> = (0..self.rows.len())
            .map(|p| {
                let (i, j) = (self.rows[p], self.cols[p]);
                let mut v = (k2[i] + k2[j]) * self.g[p] + self.gcg[p];
                if i == j {
                    v += k2[i] * k2[i] * self.c_diag[i];
                }
                tau[i] * tau[j] * v
            })
            .collect();
        let (indptr, indices, _) = self.pattern.clone().into_raw_storage();
        Ok(CsMat::new_csc((m, m), indptr, indices, data))
    }
}

/// One-shot assembly of the GMRF precision for given local parameters.
pub fn assemble_precision(fem: &FemMatrices, tau: &[f64], kappa: &[f64]) -> Result<CsMat<f64>> {
    PrecisionTemplate::new(fem)?.assemble(tau, kappa)
}

/// Modified Bessel function of the second kind, `K_ν(x)` for `x > 0`, from
/// `K_ν(x) = ∫₀^∞ exp(−x cosh t) cosh(νt) dt` by the trapezoidal rule, which
/// converges geometrically for this analytic integrand.
pub fn bessel_k(nu: f64, x: f64) -> f64 {
    assert!(x > 0.0, "bessel_k requires x > 0");
    let h: f64 = 0.02;
    // exp(−x) is factored out to avoid underflow for large x.
    let mut sum = 0.5;
    let mut t = h;
    loop {
        let term = (-x * (t.cosh() - 1.0)).exp() * (nu * t).cosh();
        sum += term;
        if term < 1e-18 * sum {
            break;
        }
        t += h;
    }
    sum * h * (-x).exp()
}

/// Matérn covariance at distance `d`.
pub fn matern_covariance(d: f64, kappa: f64, sigma2: f64, nu: f64) -> f64 {
    assert!(d >= 0.0 && kappa > 0.0 && sigma2 > 0.0 && nu > 0.0);
    if d == 0.0 {
        return sigma2;
    }
    let u = kappa * d;
    sigma2 / (2f64.powf(nu - 1.0) * gamma(nu)) * u.powf(nu) * bessel_k(nu, u)
}

/// Marginal variance of the stationary SPDE solution in `R^d`.
pub fn matern_marginal_variance(kappa: f64, tau: f64, alpha: f64, dim: f64) -> f64 {
    let nu = alpha - dim / 2.0;
    gamma(nu) / (gamma(alpha) * (4.0 * std::f64::consts::PI).powf(dim / 2.0) * kappa.powf(2.0 * nu) * tau * tau)
}

/// `σ = 1/(√(4π) τ κ)` and `ρ = √8/κ` for the ν = 1 field.
pub fn summary_from_local(tau: f64, kappa: f64) -> (f64, f64) {
    (
        1.0 / ((4.0 * std::f64::consts::PI).sqrt() * tau * kappa),
        SQRT_8 / kappa,
    )
}

/// Marginal sd and range of a stationary parametrisation (intercepts only).
pub fn stationary_summary(theta: &HyperParams) -> (f64, f64) {
    summary_from_local(theta.theta_tau[0].exp(), theta.theta_kappa[0].exp())
}

/// Nominal sd and range at covariate value `h` for the single-covariate
/// non-stationary parametrisation. Missing slope weights count as zero.
pub fn nominal_summary(theta: &HyperParams, h: f64) -> (f64, f64) {
    let slope = |w: &[f64]| w.get(1).copied().unwrap_or(0.0);
    let log_tau = theta.theta_tau[0] + h * slope(&theta.theta_tau);
    let log_kappa = theta.theta_kappa[0] + h * slope(&theta.theta_kappa);
    summary_from_local(log_tau.exp(), log_kappa.exp())
}
