//! The replicate latent Gaussian model
//! `y_ij = β_j + β_h h(s_i) + x_j(s_i) + ε_ij` with latent vector
//! `z = (x_1, …, x_r, β_1, …, β_r, β_h)`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sprs::CsMat;

use super::data::{Observation, ObservationSet};
use crate::error::{Error, Result};
use crate::fem::{assemble_fem, FemMatrices};
use crate::gmrf::{ConstrainedGmrf, ConstraintSet, FactoredPrecision, OrderingMethod, SymbolicCholesky};
use crate::mesh::{project_with, PointLocator, Projector, TriangleMesh};
use crate::prior::GaussianPrior;
use crate::spde::{local_params, CovariateField, HyperParams, PrecisionTemplate, SpdeConfig};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Mesh-level quantities shared by every model on the same triangulation.
#[derive(Debug)]
pub struct SpatialSetup {
    pub mesh: TriangleMesh,
    pub fem: FemMatrices,
    pub template: PrecisionTemplate,
    pub elevation: CovariateField,
    locator: PointLocator,
    field_symbolic: Arc<SymbolicCholesky>,
}

impl SpatialSetup {
    pub fn new(mesh: TriangleMesh, elevation: CovariateField) -> Result<Arc<Self>> {
        mesh.validate()?;
        if elevation.values.len() != mesh.node_count() {
            return Err(Error::DimensionMismatch {
                context: "covariate length vs mesh nodes",
                expected: mesh.node_count(),
                got: elevation.values.len(),
            });
        }
        let fem = assemble_fem(&mesh)?;
        let template = PrecisionTemplate::new(&fem)?;
        let field_symbolic = Arc::new(SymbolicCholesky::analyze(
            template.pattern(),
            OrderingMethod::MinimumDegree,
        )?);
        let locator = PointLocator::new(&mesh);
        Ok(Arc::new(Self {
            mesh,
            fem,
            template,
            elevation,
            locator,
            field_symbolic,
        }))
    }

    pub fn node_count(&self) -> usize {
        self.mesh.node_count()
    }

    pub fn project(&self, locations: &[[f64; 2]]) -> Projector {
        project_with(&self.mesh, &self.locator, locations)
    }

    /// Factorization of the field precision `Q(θ)`.
    pub fn field_factor(&self, config: &SpdeConfig, theta: &HyperParams) -> Result<(CsMat<f64>, FactoredPrecision)> {
        let (tau, kappa) = local_params(config, theta)?;
        let q = self.template.assemble(&tau, &kappa)?;
        let f = self.field_symbolic.factor(&q)?;
        Ok((q, f))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelOptions {
    /// Impose the zero-integral and elevation-orthogonality constraints.
    pub constrained: bool,
}

impl Default for ModelOptions {
    fn default() -> Self {
        Self { constrained: true }
    }
}

/// A linear predictor `η = β_year + β_h h + Σ w_i x_year,i` to evaluate.
#[derive(Debug, Clone, PartialEq)]
pub struct Target {
    pub year: usize,
    pub weights: Vec<(usize, f64)>,
    pub elevation: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: f64,
    pub var: f64,
}

/// Gaussian conditional summaries at one hyperparameter point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointStats {
    pub theta: Vec<f64>,
    pub log_post: f64,
    /// `β_1..β_r, β_h`.
    pub beta: Vec<Moments>,
    /// Mean of the year intercepts.
    pub beta_pooled: Moments,
    /// Linear predictor at each observation, in model order.
    pub obs_eta: Vec<Moments>,
    pub targets: Vec<Moments>,
}

#[derive(Debug, Clone)]
pub struct ReplicateModel {
    setup: Arc<SpatialSetup>,
    pub config: SpdeConfig,
    pub prior: GaussianPrior,
    pub options: ModelOptions,
    r: usize,
    observations: Vec<Observation>,
    station_elevation: Vec<f64>,
    station_rows: Vec<Vec<(usize, f64)>>,
    y: Vec<f64>,
    /// Sparse rows of the design `B` in latent numbering.
    design: Vec<Vec<(usize, f64)>>,
    constraints: ConstraintSet,
    // Posterior precision structure (CSC, full symmetric).
    post_symbolic: Arc<SymbolicCholesky>,
    post_indptr: Vec<usize>,
    post_indices: Vec<usize>,
    // Per entry: index into the field precision data, or NONE.
    post_field_src: Vec<usize>,
    post_is_beta_diag: Vec<bool>,
    post_btb: Vec<f64>,
    // Bᵀy.
    bty: Vec<f64>,
}

const NONE: usize = usize::MAX;

impl ReplicateModel {
    pub fn new(
        setup: Arc<SpatialSetup>,
        config: SpdeConfig,
        prior: GaussianPrior,
        data: &ObservationSet,
        options: ModelOptions,
    ) -> Result<Self> {
        config.validate()?;
        prior.validate()?;
        let m = setup.node_count();
        if config.node_count != m {
            return Err(Error::DimensionMismatch {
                context: "SPDE config vs mesh nodes",
                expected: m,
                got: config.node_count,
            });
        }
        if prior.theta_tau.len() != config.n_tau() || prior.theta_kappa.len() != config.n_kappa() {
            return Err(Error::DimensionMismatch {
                context: "prior weights vs SPDE bases",
                expected: config.n_tau() + config.n_kappa(),
                got: prior.theta_tau.len() + prior.theta_kappa.len(),
            });
        }
        let r = data.year_count();
        if r == 0 {
            return Err(Error::InvalidInput("observation set has no years".into()));
        }
        let locs: Vec<[f64; 2]> = data.stations.iter().map(|s| s.location).collect();
        let proj = setup.project(&locs);
        proj.require_complete(&locs)?;
        let station_rows: Vec<Vec<(usize, f64)>> = (0..locs.len()).map(|i| proj.row(i)).collect();
        let station_elevation: Vec<f64> = data.stations.iter().map(|s| s.elevation).collect();

        let n_lat = r * m + r + 1;
        let beta_h = r * m + r;
        let design: Vec<Vec<(usize, f64)>> = data
            .observations
            .iter()
            .map(|o| {
                let mut row: Vec<(usize, f64)> = station_rows[o.station]
                    .iter()
                    .map(|&(i, w)| (o.year * m + i, w))
                    .collect();
                row.push((r * m + o.year, 1.0));
                row.push((beta_h, station_elevation[o.station]));
                row
            })
            .collect();
        let y: Vec<f64> = data.observations.iter().map(|o| o.value).collect();

        let constraints = if options.constrained {
            let mut a = DMatrix::zeros(r + 1, n_lat);
            for j in 0..r {
                for i in 0..m {
                    let c = setup.fem.c[i];
                    a[(j, j * m + i)] = c;
                    a[(r, j * m + i)] = c * setup.elevation.values[i];
                }
            }
            let cs = ConstraintSet::new(a, DVector::zeros(r + 1))?;
            cs.half_log_det_aat()?;
            cs
        } else {
            ConstraintSet::empty(n_lat)
        };

        // Posterior precision pattern: field blocks, dense fixed-effect
        // block, every (x_j, β_j) and (x_j, β_h) pair, and BᵀB.
        let field = setup.template.pattern();
        let mut cols: Vec<Vec<usize>> = vec![Vec::new(); n_lat];
        for j in 0..r {
            for (col, colv) in field.outer_iterator().enumerate() {
                for (row, _) in colv.iter() {
                    cols[j * m + col].push(j * m + row);
                }
            }
            for i in 0..m {
                for b in [r * m + j, beta_h] {
                    cols[j * m + i].push(b);
                    cols[b].push(j * m + i);
                }
            }
        }
        for a in r * m..n_lat {
            for b in r * m..n_lat {
                cols[a].push(b);
            }
        }
        for row in &design {
            for &(i, _) in row {
                for &(k, _) in row {
                    cols[k].push(i);
                }
            }
        }
        let mut post_indptr = vec![0];
        let mut post_indices = Vec::new();
        for mut c in cols {
            c.sort_unstable();
            c.dedup();
            post_indices.extend(c);
            post_indptr.push(post_indices.len());
        }
        let nnz = post_indices.len();
        let mut post_field_src = vec![NONE; nnz];
        let mut post_is_beta_diag = vec![false; nnz];
        let mut post_btb = vec![0.0; nnz];
        let field_csc = field.to_csc();
        let find = |row: usize, col: usize| -> usize {
            let range = post_indptr[col]..post_indptr[col + 1];
            range.start
                + post_indices[range]
                    .binary_search(&row)
                    .expect("entry in posterior pattern")
        };
        for j in 0..r {
            let mut p = 0;
            for (col, colv) in field_csc.outer_iterator().enumerate() {
                for (row, _) in colv.iter() {
                    post_field_src[find(j * m + row, j * m + col)] = p;
                    p += 1;
                }
            }
        }
        for b in r * m..n_lat {
            post_is_beta_diag[find(b, b)] = true;
        }
        for row in &design {
            for &(i, vi) in row {
                for &(k, vk) in row {
                    post_btb[find(i, k)] += vi * vk;
                }
            }
        }
        let mut bty = vec![0.0; n_lat];
        for (row, &yv) in design.iter().zip(&y) {
            for &(i, v) in row {
                bty[i] += v * yv;
            }
        }

        let block_perm = setup.field_symbolic.perm();
        let mut perm: Vec<usize> = Vec::with_capacity(n_lat);
        for j in 0..r {
            perm.extend(block_perm.iter().map(|&p| j * m + p));
        }
        perm.extend(r * m..n_lat);
        let pattern = CsMat::new_csc(
            (n_lat, n_lat),
            post_indptr.clone(),
            post_indices.clone(),
            vec![0.0; nnz],
        );
        let post_symbolic = Arc::new(SymbolicCholesky::analyze(&pattern, OrderingMethod::Given(perm))?);

        Ok(Self {
            setup,
            config,
            prior,
            options,
            r,
            observations: data.observations.clone(),
            station_elevation,
            station_rows,
            y,
            design,
            constraints,
            post_symbolic,
            post_indptr,
            post_indices,
            post_field_src,
            post_is_beta_diag,
            post_btb,
            bty,
        })
    }

    pub fn setup(&self) -> &Arc<SpatialSetup> {
        &self.setup
    }

    pub fn replicates(&self) -> usize {
        self.r
    }

    pub fn node_count(&self) -> usize {
        self.setup.node_count()
    }

    pub fn latent_dim(&self) -> usize {
        self.r * self.node_count() + self.r + 1
    }

    pub fn constraint_count(&self) -> usize {
        self.constraints.count()
    }

    pub fn constraints(&self) -> &ConstraintSet {
        &self.constraints
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn design_rows(&self) -> &[Vec<(usize, f64)>] {
        &self.design
    }

    /// Number of hyperparameters (SPDE weights plus `log τ_ε`).
    pub fn theta_dim(&self) -> usize {
        self.config.n_tau() + self.config.n_kappa() + 1
    }

    pub fn theta_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        let stationary = self.config.n_tau() == 1 && self.config.n_kappa() == 1;
        for (base, n) in [
            ("theta_tau", self.config.n_tau()),
            ("theta_kappa", self.config.n_kappa()),
        ] {
            for k in 0..n {
                names.push(match (stationary, k) {
                    (true, _) => base.to_string(),
                    (false, 0) => format!("{base}_1"),
                    (false, 1) => format!("{base}_h"),
                    (false, k) => format!("{base}_{}", k + 1),
                });
            }
        }
        names.push("log_tau_eps".into());
        names
    }

    pub fn beta_index(&self, j: usize) -> usize {
        self.r * self.node_count() + j
    }

    pub fn beta_h_index(&self) -> usize {
        self.r * self.node_count() + self.r
    }

    /// `η` target for a station location in a given year.
    pub fn station_target(&self, station: usize, year: usize) -> Target {
        Target {
            year,
            weights: self.station_rows[station].clone(),
            elevation: self.station_elevation[station],
        }
    }

    /// Targets at every mesh node for every year (year-major).
    pub fn node_targets(&self) -> Vec<Target> {
        let m = self.node_count();
        (0..self.r)
            .flat_map(|j| {
                (0..m).map(move |i| Target {
                    year: j,
                    weights: vec![(i, 1.0)],
                    elevation: self.setup.elevation.values[i],
                })
            })
            .collect()
    }

    fn target_functional(&self, t: &Target) -> Vec<(usize, f64)> {
        let m = self.node_count();
        let mut a: Vec<(usize, f64)> = t.weights.iter().map(|&(i, w)| (t.year * m + i, w)).collect();
        a.push((self.beta_index(t.year), 1.0));
        a.push((self.beta_h_index(), t.elevation));
        a
    }

    fn prior_latent_precision(&self) -> f64 {
        1.0 / self.prior.beta.variance
    }

    fn posterior_precision(&self, q_field: &CsMat<f64>, tau_eps: f64) -> CsMat<f64> {
        let fd = q_field.data();
        let beta_prec = self.prior_latent_precision();
        let data: Vec<f64> = (0..self.post_indices.len())
            .map(|p| {
                let mut v = tau_eps * self.post_btb[p];
                if self.post_field_src[p] != NONE {
                    v += fd[self.post_field_src[p]];
                }
                if self.post_is_beta_diag[p] {
                    v += beta_prec;
                }
                v
            })
            .collect();
        let n = self.latent_dim();
        CsMat::new_csc((n, n), self.post_indptr.clone(), self.post_indices.clone(), data)
    }

    fn check_theta(&self, theta: &HyperParams) -> Result<()> {
        if theta.theta_tau.len() != self.config.n_tau() || theta.theta_kappa.len() != self.config.n_kappa() {
            return Err(Error::DimensionMismatch {
                context: "hyperparameter point",
                expected: self.theta_dim(),
                got: theta.theta_tau.len() + theta.theta_kappa.len() + 1,
            });
        }
        if !theta.to_vec().iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("non-finite hyperparameter".into()));
        }
        Ok(())
    }

    /// Posterior factor and (unconstrained) conditional mean at `θ`.
    fn conditional(&self, theta: &HyperParams) -> Result<Conditional> {
        self.check_theta(theta)?;
        let (q_field, f_field) = self.setup.field_factor(&self.config, theta)?;
        let tau_eps = theta.noise_precision();
        let q_post = self.posterior_precision(&q_field, tau_eps);
        let f_post = self.post_symbolic.factor(&q_post)?;
        let mut b: Vec<f64> = self.bty.iter().map(|v| tau_eps * v).collect();
        let beta_prec = self.prior_latent_precision();
        for bi in self.beta_index(0)..self.latent_dim() {
            b[bi] += beta_prec * self.prior.beta.mean;
        }
        let mean = f_post.solve(&b);
        Ok(Conditional {
            q_field,
            f_field,
            f_post,
            mean,
            tau_eps,
        })
    }

    /// `log π(y | θ)`, with the constrained latent densities when the model
    /// carries constraints.
    pub fn log_marginal_likelihood(&self, theta: &HyperParams) -> Result<f64> {
        let cond = self.conditional(theta)?;
        let post = ConstrainedGmrf::new(&cond.f_post, cond.mean.clone(), &self.constraints)?;
        let x = post.constrained_mean();
        self.log_marginal_at(&cond, &post, &x)
    }

    /// The Gaussian identity evaluated at an arbitrary point `x` on the
    /// constraint plane. Exposed so the identity can be checked away from
    /// the conditional mean.
    pub fn log_marginal_likelihood_at(&self, theta: &HyperParams, x: &[f64]) -> Result<f64> {
        let cond = self.conditional(theta)?;
        let post = ConstrainedGmrf::new(&cond.f_post, cond.mean.clone(), &self.constraints)?;
        self.log_marginal_at(&cond, &post, x)
    }

    fn log_marginal_at(&self, cond: &Conditional, post: &ConstrainedGmrf<'_>, x: &[f64]) -> Result<f64> {
        let log_post = post.log_density(x)?;
        let log_prior = self.log_prior_latent(cond, x)?;
        let tau = cond.tau_eps;
        let mut ss = 0.0;
        for (row, &yv) in self.design.iter().zip(&self.y) {
            let eta: f64 = row.iter().map(|&(i, v)| v * x[i]).sum();
            ss += (yv - eta) * (yv - eta);
        }
        let n = self.y.len() as f64;
        let log_lik = 0.5 * n * (tau.ln() - LN_2PI) - 0.5 * tau * ss;
        Ok(log_lik + log_prior - log_post)
    }

    /// Prior latent log-density of `x` restricted to the constraint plane.
    fn log_prior_latent(&self, cond: &Conditional, x: &[f64]) -> Result<f64> {
        let m = self.node_count();
        let r = self.r;
        let q = &cond.q_field;
        let mut quad = 0.0;
        for j in 0..r {
            let xj = &x[j * m..(j + 1) * m];
            for (col, colv) in q.outer_iterator().enumerate() {
                for (row, &v) in colv.iter() {
                    quad += xj[row] * v * xj[col];
                }
            }
        }
        let beta_prec = self.prior_latent_precision();
        let beta_quad: f64 = x[r * m..]
            .iter()
            .map(|b| (b - self.prior.beta.mean).powi(2))
            .sum::<f64>()
            * beta_prec;
        let n_lat = self.latent_dim() as f64;
        let log_det = r as f64 * cond.f_field.log_det() + (r + 1) as f64 * beta_prec.ln();
        let base = -0.5 * n_lat * LN_2PI + 0.5 * log_det - 0.5 * (quad + beta_quad);
        if self.constraints.count() == 0 {
            return Ok(base);
        }
        // A Q⁻¹ Aᵀ for the block-diagonal prior: the zero-integral rows are
        // c on one block each, the last row is c∘h on every block.
        let c = &self.setup.fem.c;
        let g: Vec<f64> = c.iter().zip(&self.setup.elevation.values).map(|(a, b)| a * b).collect();
        let u = cond.f_field.solve(c);
        let v = cond.f_field.solve(&g);
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let (cu, cv, gv) = (dot(c, &u), dot(c, &v), dot(&g, &v));
        let mut s = DMatrix::zeros(r + 1, r + 1);
        for j in 0..r {
            s[(j, j)] = cu;
            s[(j, r)] = cv;
            s[(r, j)] = cv;
        }
        s[(r, r)] = r as f64 * gv;
        // The prior mean of Ax is zero except through a non-zero β mean,
        // which does not enter the constraint rows.
        let chol = nalgebra::Cholesky::new(s).ok_or(Error::RankDeficientConstraints)?;
        let half_log_det_s: f64 = chol.l().diagonal().iter().map(|d| d.ln()).sum();
        let log_p_ax = -0.5 * (r + 1) as f64 * LN_2PI - half_log_det_s;
        Ok(base - self.constraints.half_log_det_aat()? - log_p_ax)
    }

    /// `log π(θ | y)` up to a constant.
    pub fn log_marginal_posterior(&self, theta: &HyperParams) -> Result<f64> {
        Ok(self.prior.log_density(theta)? + self.log_marginal_likelihood(theta)?)
    }

    /// Constrained conditional mean `E[z | y, θ]`.
    pub fn conditional_mean(&self, theta: &HyperParams) -> Result<Vec<f64>> {
        let cond = self.conditional(theta)?;
        let post = ConstrainedGmrf::new(&cond.f_post, cond.mean.clone(), &self.constraints)?;
        Ok(post.constrained_mean())
    }

    /// Conditional means and variances of the fixed effects, the linear
    /// predictor at the observations, and the requested targets.
    pub fn point_statistics(&self, theta: &HyperParams, targets: &[Target]) -> Result<PointStats> {
        let cond = self.conditional(theta)?;
        let post = ConstrainedGmrf::new(&cond.f_post, cond.mean.clone(), &self.constraints)?;
        let x = post.constrained_mean();
        let log_post = self.prior.log_density(theta)? + self.log_marginal_at(&cond, &post, &x)?;
        let pinv = cond.f_post.partial_inverse();
        let moments = |a: &[(usize, f64)]| -> Result<Moments> {
            let mean = a.iter().map(|&(i, v)| v * x[i]).sum();
            let var = post
                .linear_variance(&pinv, a)
                .ok_or_else(|| Error::InvalidInput("functional outside the factor pattern".into()))?;
            Ok(Moments {
                mean,
                var: var.max(0.0),
            })
        };
        let beta: Vec<Moments> = (0..=self.r)
            .map(|j| moments(&[(self.beta_index(0) + j, 1.0)]))
            .collect::<Result<_>>()?;
        let pooled: Vec<(usize, f64)> = (0..self.r).map(|j| (self.beta_index(j), 1.0 / self.r as f64)).collect();
        let beta_pooled = moments(&pooled)?;
        let obs_eta = self.design.iter().map(|row| moments(row)).collect::<Result<_>>()?;
        let targets = targets
            .iter()
            .map(|t| {
                if t.year >= self.r {
                    return Err(Error::InvalidInput(format!("target year {} out of range", t.year)));
                }
                moments(&self.target_functional(t))
            })
            .collect::<Result<_>>()?;
        Ok(PointStats {
            theta: theta.to_vec(),
            log_post,
            beta,
            beta_pooled,
            obs_eta,
            targets,
        })
    }
}

struct Conditional {
    q_field: CsMat<f64>,
    f_field: FactoredPrecision,
    f_post: FactoredPrecision,
    mean: Vec<f64>,
    tau_eps: f64,
}
