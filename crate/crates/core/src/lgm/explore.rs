//! Hyperparameter posterior exploration: mode search, curvature, and an
//! integration design (regular grid or central composite design) in
//! eigen-standardized coordinates.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{PointStats, ReplicateModel, Target};
use crate::error::{Error, Result};
use crate::spde::HyperParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Regular grid for up to three hyperparameters, CCD otherwise.
    Auto,
    Grid,
    Ccd,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExploreOptions {
    pub strategy: Strategy,
    /// Grid spacing in standardized units.
    pub grid_step: f64,
    /// Points are kept while the log-posterior is within this of the mode.
    pub grid_drop: f64,
    pub ccd_f0: f64,
    pub max_iterations: usize,
    /// Convergence threshold on the max-norm of the gradient.
    pub gradient_tolerance: f64,
    pub gradient_step: f64,
    pub hessian_step: f64,
    /// Half-width (in posterior sd) and spacing of the θ marginal lines.
    pub marginal_half_width: f64,
    pub marginal_spacing: f64,
    pub start: Option<Vec<f64>>,
}

impl Default for ExploreOptions {
    fn default() -> Self {
        Self {
            strategy: Strategy::Auto,
            grid_step: 1.0,
            grid_drop: 5.0,
            ccd_f0: 1.1,
            max_iterations: 200,
            gradient_tolerance: 5e-3,
            gradient_step: 1e-3,
            hessian_step: 2e-2,
            marginal_half_width: 4.5,
            marginal_spacing: 0.75,
            start: None,
        }
    }
}

/// Posterior marginal summary of one scalar quantity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Marginal {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    /// `(probability, value)` pairs.
    pub quantiles: Vec<(f64, f64)>,
    /// `(value, density)` trace.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub density: Vec<(f64, f64)>,
}

pub const QUANTILE_LEVELS: [f64; 5] = [0.025, 0.25, 0.5, 0.75, 0.975];

impl Marginal {
    pub fn quantile(&self, p: f64) -> Option<f64> {
        self.quantiles
            .iter()
            .find(|(q, _)| (q - p).abs() < 1e-12)
            .map(|&(_, v)| v)
    }

    pub fn interval(&self) -> (f64, f64) {
        (
            self.quantile(0.025).unwrap_or(f64::NAN),
            self.quantile(0.975).unwrap_or(f64::NAN),
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridPoint {
    pub z: Vec<f64>,
    pub weight: f64,
    pub stats: PointStats,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HyperPosterior {
    pub names: Vec<String>,
    pub mode: Vec<f64>,
    pub mode_log_post: f64,
    /// Inverse of the negative Hessian at the mode.
    pub covariance: Vec<Vec<f64>>,
    pub strategy: Strategy,
    pub points: Vec<GridPoint>,
    pub theta_marginals: Vec<Marginal>,
    pub iterations: usize,
    pub evaluations: usize,
    /// Points dropped because the model could not be evaluated there.
    pub failed_points: usize,
}

impl HyperPosterior {
    pub fn weights(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.weight).collect()
    }

    /// Posterior expectation of `1/τ_ε`.
    pub fn expected_noise_variance(&self) -> f64 {
        self.points
            .iter()
            .map(|p| p.weight * (-p.stats.theta.last().copied().unwrap_or(0.0)).exp())
            .sum()
    }

    pub fn expected_noise_precision(&self) -> f64 {
        self.points
            .iter()
            .map(|p| p.weight * p.stats.theta.last().copied().unwrap_or(0.0).exp())
            .sum()
    }
}

/// Counts objective evaluations; non-finite values count as `-∞`.
struct Objective<'a> {
    f: &'a (dyn Fn(&[f64]) -> f64 + Sync),
    evaluations: AtomicUsize,
}

impl Objective<'_> {
    fn log_post(&self, theta: &[f64]) -> f64 {
        self.evaluations.fetch_add(1, Ordering::Relaxed);
        let v = (self.f)(theta);
        if v.is_finite() {
            v
        } else {
            f64::NEG_INFINITY
        }
    }

    fn many(&self, points: &[Vec<f64>]) -> Vec<f64> {
        points.par_iter().map(|p| self.log_post(p)).collect()
    }

    fn gradient(&self, x: &[f64], h: f64) -> Option<Vec<f64>> {
        let pts: Vec<Vec<f64>> = (0..x.len())
            .flat_map(|i| {
                [h, -h].into_iter().map(move |s| {
                    let mut p = x.to_vec();
                    p[i] += s;
                    p
                })
            })
            .collect();
        let v = self.many(&pts);
        if v.iter().any(|f| !f.is_finite()) {
            return None;
        }
        Some((0..x.len()).map(|i| (v[2 * i] - v[2 * i + 1]) / (2.0 * h)).collect())
    }
}

struct ModeResult {
    x: Vec<f64>,
    f: f64,
    iterations: usize,
}

/// Maximises the log-posterior by BFGS with central-difference gradients
/// and a backtracking line search.
fn find_mode(obj: &Objective<'_>, start: Vec<f64>, opts: &ExploreOptions) -> Result<ModeResult> {
    let d = start.len();
    let mut x = start;
    let mut f = obj.log_post(&x);
    if !f.is_finite() {
        return Err(Error::InvalidInput(
            "log-posterior is not finite at the starting point".into(),
        ));
    }
    let h = opts.gradient_step;
    let mut g = obj.gradient(&x, h).ok_or(Error::Optimizer {
        iterations: 0,
        grad_norm: f64::NAN,
    })?;
    // Inverse Hessian of the negative log-posterior.
    let mut hinv = DMatrix::<f64>::identity(d, d);
    let max_step = 1.0;
    for iter in 1..=opts.max_iterations {
        let gnorm = g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if gnorm < opts.gradient_tolerance {
            return Ok(ModeResult {
                x,
                f,
                iterations: iter - 1,
            });
        }
        // Ascent direction for f (descent for −f): p = H⁻¹ g.
        let gv = DVector::from_column_slice(&g);
        let mut p = &hinv * &gv;
        if p.dot(&gv) <= 0.0 {
            hinv = DMatrix::identity(d, d);
            p = gv.clone();
        }
        let norm = p.norm();
        if norm > max_step {
            p *= max_step / norm;
        }
        let mut t = 1.0;
        let slope = p.dot(&gv);
        let mut accepted = None;
        for _ in 0..30 {
            let xn: Vec<f64> = x.iter().zip(p.iter()).map(|(a, b)| a + t * b).collect();
            let fnew = obj.log_post(&xn);
            if fnew.is_finite() && fnew >= f + 1e-4 * t * slope {
                accepted = Some((xn, fnew));
                break;
            }
            t *= 0.5;
        }
        let Some((xn, fnew)) = accepted else {
            // No progress possible at the gradient's resolution.
            if gnorm < 50.0 * opts.gradient_tolerance {
                return Ok(ModeResult { x, f, iterations: iter });
            }
            return Err(Error::Optimizer {
                iterations: iter,
                grad_norm: gnorm,
            });
        };
        let gn = obj.gradient(&xn, h).ok_or(Error::Optimizer {
            iterations: iter,
            grad_norm: gnorm,
        })?;
        // BFGS update on the negative log-posterior.
        let s = DVector::from_iterator(d, xn.iter().zip(&x).map(|(a, b)| a - b));
        let yv = DVector::from_iterator(d, g.iter().zip(&gn).map(|(a, b)| a - b));
        let sy = s.dot(&yv);
        if sy > 1e-12 {
            if iter == 1 {
                hinv = DMatrix::identity(d, d) * (sy / yv.dot(&yv));
            }
            let rho = 1.0 / sy;
            let i = DMatrix::<f64>::identity(d, d);
            let a = &i - &s * yv.transpose() * rho;
            let b = &i - &yv * s.transpose() * rho;
            hinv = &a * &hinv * &b + &s * s.transpose() * rho;
        }
        let small_change = (fnew - f).abs() < 1e-10 * (1.0 + f.abs());
        x = xn;
        f = fnew;
        g = gn;
        if small_change {
            let gnorm = g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            if gnorm < 50.0 * opts.gradient_tolerance {
                return Ok(ModeResult { x, f, iterations: iter });
            }
        }
    }
    Err(Error::Optimizer {
        iterations: opts.max_iterations,
        grad_norm: g.iter().fold(0.0f64, |a, v| a.max(v.abs())),
    })
}

/// Negative Hessian of the log-posterior by central differences.
fn negative_hessian(obj: &Objective<'_>, x: &[f64], f0: f64, h: f64) -> DMatrix<f64> {
    let d = x.len();
    let shift = |pairs: &[(usize, f64)]| {
        let mut p = x.to_vec();
        for &(i, s) in pairs {
            p[i] += s;
        }
        p
    };
    let mut pts = Vec::new();
    for i in 0..d {
        pts.push(shift(&[(i, h)]));
        pts.push(shift(&[(i, -h)]));
    }
    for i in 0..d {
        for j in i + 1..d {
            for (a, b) in [(h, h), (h, -h), (-h, h), (-h, -h)] {
                pts.push(shift(&[(i, a), (j, b)]));
            }
        }
    }
    let v = obj.many(&pts);
    let mut hm = DMatrix::zeros(d, d);
    for i in 0..d {
        hm[(i, i)] = -(v[2 * i] - 2.0 * f0 + v[2 * i + 1]) / (h * h);
    }
    let mut k = 2 * d;
    for i in 0..d {
        for j in i + 1..d {
            let val = -(v[k] - v[k + 1] - v[k + 2] + v[k + 3]) / (4.0 * h * h);
            hm[(i, j)] = val;
            hm[(j, i)] = val;
            k += 4;
        }
    }
    hm
}

/// Eigen-standardization: `θ(z) = mode + V Λ^{-1/2} z` where `V Λ Vᵀ` is the
/// negative Hessian. Non-positive curvature is floored.
struct Standardization {
    mode: Vec<f64>,
    map: DMatrix<f64>,
    covariance: DMatrix<f64>,
}

impl Standardization {
    fn new(mode: Vec<f64>, neg_hessian: DMatrix<f64>) -> Self {
        let eig = SymmetricEigen::new(neg_hessian);
        let floor = 1e-6 * eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-8);
        let lam: Vec<f64> = eig.eigenvalues.iter().map(|&v| v.max(floor)).collect();
        let d = lam.len();
        let mut map = DMatrix::zeros(d, d);
        let mut covariance = DMatrix::zeros(d, d);
        for k in 0..d {
            let vk = eig.eigenvectors.column(k);
            map.set_column(k, &(vk * (1.0 / lam[k].sqrt())));
            covariance += vk * vk.transpose() / lam[k];
        }
        Self { mode, map, covariance }
    }

    fn theta(&self, z: &[f64]) -> Vec<f64> {
        let t = &self.map * DVector::from_column_slice(z);
        self.mode.iter().zip(t.iter()).map(|(m, v)| m + v).collect()
    }
}

/// Lattice points reached from the origin while within `drop` of the mode.
fn grid_design(obj: &Objective<'_>, st: &Standardization, f_mode: f64, opts: &ExploreOptions) -> Vec<(Vec<f64>, f64)> {
    let d = st.mode.len();
    let mut values: BTreeMap<Vec<i64>, f64> = BTreeMap::new();
    values.insert(vec![0; d], f_mode);
    let mut frontier: VecDeque<Vec<i64>> = VecDeque::from([vec![0; d]]);
    let max_radius = 12;
    while !frontier.is_empty() {
        let layer: Vec<Vec<i64>> = frontier.drain(..).collect();
        let mut next: BTreeSet<Vec<i64>> = BTreeSet::new();
        for k in &layer {
            for i in 0..d {
                for s in [-1i64, 1] {
                    let mut n = k.clone();
                    n[i] += s;
                    if n[i].abs() <= max_radius && !values.contains_key(&n) {
                        next.insert(n);
                    }
                }
            }
        }
        let pts: Vec<Vec<i64>> = next.into_iter().collect();
        let thetas: Vec<Vec<f64>> = pts
            .iter()
            .map(|k| st.theta(&k.iter().map(|&v| v as f64 * opts.grid_step).collect::<Vec<_>>()))
            .collect();
        let vals = obj.many(&thetas);
        for (k, v) in pts.into_iter().zip(vals) {
            values.insert(k.clone(), v);
            if v.is_finite() && f_mode - v < opts.grid_drop {
                frontier.push_back(k);
            }
        }
    }
    values
        .into_iter()
        .filter(|(_, v)| v.is_finite() && f_mode - v < opts.grid_drop)
        .map(|(k, v)| (k.iter().map(|&i| i as f64 * opts.grid_step).collect(), v))
        .collect()
}

/// Design points of a central composite design on the sphere of radius
/// `f0 √d`, with their integration weights `δ_k`.
pub fn ccd_points(d: usize, f0: f64) -> Vec<(Vec<f64>, f64)> {
    let radius = f0 * (d as f64).sqrt();
    let mut corners: Vec<Vec<f64>> = Vec::new();
    // Two-level factorial (half fraction with the last factor aliased to the
    // product of the others when d = 5).
    let free = if d == 5 { 4 } else { d };
    for bits in 0..(1usize << free) {
        let mut c: Vec<f64> = (0..free).map(|k| if bits >> k & 1 == 1 { 1.0 } else { -1.0 }).collect();
        if d == 5 {
            c.push(c.iter().product());
        }
        let scale = radius / (d as f64).sqrt();
        corners.push(c.into_iter().map(|v| v * scale).collect());
    }
    let mut pts = vec![vec![0.0; d]];
    for i in 0..d {
        for s in [1.0, -1.0] {
            let mut p = vec![0.0; d];
            p[i] = s * radius;
            pts.push(p);
        }
    }
    pts.extend(corners);
    let np = pts.len() as f64;
    let delta = 1.0 / ((np - 1.0) * (f0 * f0 - 1.0) * (1.0 + (-(d as f64) * f0 * f0 / 2.0).exp()));
    pts.into_iter()
        .enumerate()
        .map(|(k, p)| (p, if k == 0 { 1.0 } else { delta }))
        .collect()
}

/// Marginal of `θ_i` from the log-posterior along the line of conditional
/// means, `θ(t) = mode + Σ_{:,i} (t − mode_i)/Σ_ii`.
fn line_marginal(
    obj: &Objective<'_>,
    name: &str,
    mode: &[f64],
    f_mode: f64,
    cov: &DMatrix<f64>,
    i: usize,
    opts: &ExploreOptions,
) -> Marginal {
    let sd = cov[(i, i)].sqrt();
    let n_side = (opts.marginal_half_width / opts.marginal_spacing).round() as i64;
    let offsets: Vec<f64> = (-n_side..=n_side)
        .map(|k| k as f64 * opts.marginal_spacing * sd)
        .collect();
    let pts: Vec<Vec<f64>> = offsets
        .iter()
        .map(|&dt| {
            (0..mode.len())
                .map(|k| mode[k] + cov[(k, i)] / cov[(i, i)] * dt)
                .collect()
        })
        .collect();
    let mut vals = obj.many(
        &pts.iter()
            .zip(&offsets)
            .filter(|(_, &o)| o != 0.0)
            .map(|(p, _)| p.clone())
            .collect::<Vec<_>>(),
    );
    vals.insert(n_side as usize, f_mode);
    let t: Vec<f64> = offsets.iter().map(|o| mode[i] + o).collect();
    // Keep the contiguous run of evaluable points around the mode.
    let c = n_side as usize;
    let lo = (0..c).rev().take_while(|&k| vals[k].is_finite()).last().unwrap_or(c);
    let hi = (c + 1..vals.len())
        .take_while(|&k| vals[k].is_finite())
        .last()
        .unwrap_or(c);
    if hi == lo {
        return density_summary(
            name,
            &[t[c] - 1e-6 * sd.max(1e-12), t[c] + 1e-6 * sd.max(1e-12)],
            &[0.0, 0.0],
        );
    }
    density_summary(name, &t[lo..=hi], &vals[lo..=hi])
}

/// Marginal of `θ_i` by summing grid weights. Each point is spread over
/// its cell with a Gaussian of the cell's variance along `θ_i`,
/// `step² Σ_ii / 12`.
fn grid_marginal(name: &str, points: &[DesignPoint], i: usize, step: f64, var_ii: f64) -> Marginal {
    let h = step * (var_ii / 12.0).sqrt();
    let lo = points.iter().map(|p| p.theta[i]).fold(f64::INFINITY, f64::min) - 4.0 * h;
    let hi = points.iter().map(|p| p.theta[i]).fold(f64::NEG_INFINITY, f64::max) + 4.0 * h;
    let n = 400;
    let t: Vec<f64> = (0..=n).map(|k| lo + (hi - lo) * k as f64 / n as f64).collect();
    let logd: Vec<f64> = t
        .iter()
        .map(|&x| {
            let dens: f64 = points
                .iter()
                .map(|p| p.weight * (-0.5 * ((x - p.theta[i]) / h).powi(2)).exp())
                .sum();
            dens.ln()
        })
        .collect();
    density_summary(name, &t, &logd)
}

/// Summaries from log-density values on an increasing grid, using monotone
/// cubic (Fritsch-Butland) interpolation of the log-density on a refined
/// grid.
pub fn density_summary(name: &str, t: &[f64], logd: &[f64]) -> Marginal {
    let refine = 20;
    let top = logd.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ld: Vec<f64> = logd
        .iter()
        .map(|&v| if v.is_finite() { v - top } else { -1e3 })
        .collect();
    let n = t.len();
    let secant: Vec<f64> = (0..n - 1).map(|k| (ld[k + 1] - ld[k]) / (t[k + 1] - t[k])).collect();
    let slope = |k: usize| -> f64 {
        if k == 0 {
            secant[0]
        } else if k == n - 1 {
            secant[n - 2]
        } else {
            let (d0, d1) = (secant[k - 1], secant[k]);
            if d0 * d1 <= 0.0 {
                0.0
            } else {
                let (h0, h1) = (t[k] - t[k - 1], t[k + 1] - t[k]);
                3.0 * (h0 + h1) / ((2.0 * h1 + h0) / d0 + (h1 + 2.0 * h0) / d1)
            }
        }
    };
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for k in 0..n - 1 {
        let (h, m0, m1) = (t[k + 1] - t[k], slope(k), slope(k + 1));
        for s in 0..refine {
            let u = s as f64 / refine as f64;
            let (h00, h10, h01, h11) = (
                2.0 * u.powi(3) - 3.0 * u * u + 1.0,
                u.powi(3) - 2.0 * u * u + u,
                -2.0 * u.powi(3) + 3.0 * u * u,
                u.powi(3) - u * u,
            );
            xs.push(t[k] + u * h);
            ys.push((h00 * ld[k] + h10 * h * m0 + h01 * ld[k + 1] + h11 * h * m1).exp());
        }
    }
    xs.push(t[n - 1]);
    ys.push(ld[n - 1].exp());
    // Trapezoid CDF.
    let mut cdf = vec![0.0; xs.len()];
    for k in 1..xs.len() {
        cdf[k] = cdf[k - 1] + 0.5 * (ys[k] + ys[k - 1]) * (xs[k] - xs[k - 1]);
    }
    let total = *cdf.last().unwrap();
    let dens: Vec<f64> = ys.iter().map(|y| y / total).collect();
    let mut mean = 0.0;
    let mut second = 0.0;
    for k in 1..xs.len() {
        let dx = xs[k] - xs[k - 1];
        mean += 0.5 * (xs[k] * dens[k] + xs[k - 1] * dens[k - 1]) * dx;
        second += 0.5 * (xs[k] * xs[k] * dens[k] + xs[k - 1] * xs[k - 1] * dens[k - 1]) * dx;
    }
    let quantiles = QUANTILE_LEVELS
        .iter()
        .map(|&p| {
            let target = p * total;
            let k = cdf.partition_point(|&c| c < target).clamp(1, xs.len() - 1);
            let (c0, c1) = (cdf[k - 1], cdf[k]);
            let w = if c1 > c0 { (target - c0) / (c1 - c0) } else { 0.5 };
            (p, xs[k - 1] + w * (xs[k] - xs[k - 1]))
        })
        .collect();
    let step = (xs.len() / 60).max(1);
    let density = xs.iter().zip(&dens).step_by(step).map(|(&x, &d)| (x, d)).collect();
    Marginal {
        name: name.to_string(),
        mean,
        sd: (second - mean * mean).max(0.0).sqrt(),
        quantiles,
        density,
    }
}

/// A point of the integration design with its normalized weight.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignPoint {
    pub z: Vec<f64>,
    pub theta: Vec<f64>,
    pub log_post: f64,
    pub weight: f64,
}

#[derive(Debug, Clone)]
pub struct Design {
    pub mode: Vec<f64>,
    pub mode_log_post: f64,
    pub covariance: DMatrix<f64>,
    pub strategy: Strategy,
    pub points: Vec<DesignPoint>,
    pub marginals: Vec<Marginal>,
    pub iterations: usize,
    pub evaluations: usize,
}

/// Mode, curvature, integration design and line marginals of an arbitrary
/// unnormalized log-density.
pub fn explore_density(
    log_density: &(dyn Fn(&[f64]) -> f64 + Sync),
    names: &[String],
    start: Vec<f64>,
    opts: &ExploreOptions,
) -> Result<Design> {
    let obj = Objective {
        f: log_density,
        evaluations: AtomicUsize::new(0),
    };
    let d = start.len();
    let mode = find_mode(&obj, start, opts)?;
    let neg_h = negative_hessian(&obj, &mode.x, mode.f, opts.hessian_step);
    let st = Standardization::new(mode.x.clone(), neg_h);

    let strategy = match opts.strategy {
        Strategy::Auto if d <= 3 => Strategy::Grid,
        Strategy::Auto => Strategy::Ccd,
        s => s,
    };
    // (z, log-density, design weight)
    let design: Vec<(Vec<f64>, f64, f64)> = match strategy {
        Strategy::Grid => grid_design(&obj, &st, mode.f, opts)
            .into_iter()
            .map(|(z, v)| (z, v, 1.0))
            .collect(),
        _ => {
            let pts = ccd_points(d, opts.ccd_f0);
            let thetas: Vec<Vec<f64>> = pts.iter().skip(1).map(|(z, _)| st.theta(z)).collect();
            let mut vals = vec![mode.f];
            vals.extend(obj.many(&thetas));
            pts.into_iter()
                .zip(vals)
                .filter(|(_, v)| v.is_finite())
                .map(|((z, w), v)| (z, v, w))
                .collect()
        }
    };
    let mut points: Vec<DesignPoint> = design
        .into_iter()
        .map(|(z, v, w)| DesignPoint {
            theta: st.theta(&z),
            z,
            log_post: v,
            weight: w,
        })
        .collect();
    normalize_weights(&mut points);

    let marginals: Vec<Marginal> = (0..d)
        .map(|i| match strategy {
            Strategy::Grid if points.len() > 1 => {
                grid_marginal(&names[i], &points, i, opts.grid_step, st.covariance[(i, i)])
            }
            _ => line_marginal(&obj, &names[i], &mode.x, mode.f, &st.covariance, i, opts),
        })
        .collect();
    Ok(Design {
        mode: mode.x,
        mode_log_post: mode.f,
        covariance: st.covariance,
        strategy,
        points,
        marginals,
        iterations: mode.iterations,
        evaluations: obj.evaluations.load(Ordering::Relaxed),
    })
}

/// Turns design weights `δ_k` into `δ_k exp(lp_k − max lp)`, normalized.
fn normalize_weights(points: &mut [DesignPoint]) {
    let top = points.iter().map(|p| p.log_post).fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for p in points.iter_mut() {
        p.weight *= (p.log_post - top).exp();
        total += p.weight;
    }
    for p in points.iter_mut() {
        p.weight /= total;
    }
}

/// Finds the posterior mode, builds the integration design, and computes
/// Gaussian conditional statistics (including `targets`) at every design
/// point.
pub fn explore_hyperposterior(
    model: &ReplicateModel,
    targets: &[Target],
    opts: &ExploreOptions,
) -> Result<HyperPosterior> {
    let d = model.theta_dim();
    let start = match &opts.start {
        Some(s) if s.len() == d => s.clone(),
        Some(s) => {
            return Err(Error::DimensionMismatch {
                context: "optimizer start",
                expected: d,
                got: s.len(),
            })
        }
        None => model.prior.center().to_vec(),
    };
    let f = |theta: &[f64]| -> f64 {
        HyperParams::from_slice(&model.config, theta)
            .and_then(|t| model.log_marginal_posterior(&t))
            .unwrap_or(f64::NEG_INFINITY)
    };
    let names = model.theta_names();
    let design = explore_density(&f, &names, start, opts)?;

    let stats: Vec<Option<PointStats>> = design
        .points
        .par_iter()
        .map(|p| {
            let theta = HyperParams::from_slice(&model.config, &p.theta).ok()?;
            model.point_statistics(&theta, targets).ok()
        })
        .collect();
    let total = design.points.len();
    let mut points: Vec<GridPoint> = design
        .points
        .into_iter()
        .zip(stats)
        .filter_map(|(p, s)| {
            s.map(|stats| GridPoint {
                z: p.z,
                weight: p.weight,
                stats,
            })
        })
        .collect();
    let failed = total - points.len();
    let mass: f64 = points.iter().map(|p| p.weight).sum();
    if points.is_empty() || mass <= 0.0 {
        return Err(Error::InvalidInput("no integration point could be evaluated".into()));
    }
    for p in &mut points {
        p.weight /= mass;
    }
    let covariance = (0..d)
        .map(|i| (0..d).map(|j| design.covariance[(i, j)]).collect())
        .collect();
    Ok(HyperPosterior {
        names,
        mode: design.mode,
        mode_log_post: design.mode_log_post,
        covariance,
        strategy: design.strategy,
        points,
        theta_marginals: design.marginals,
        iterations: design.iterations,
        evaluations: design.evaluations,
        failed_points: failed,
    })
}

/// Re-evaluates the conditional statistics of an existing design on another
/// model (same hyperparameter space), keeping the design weights.
pub fn restat(hp: &HyperPosterior, model: &ReplicateModel, targets: &[Target]) -> Result<HyperPosterior> {
    let stats: Vec<PointStats> = hp
        .points
        .par_iter()
        .map(|p| model.point_statistics(&HyperParams::from_slice(&model.config, &p.stats.theta)?, targets))
        .collect::<Result<_>>()?;
    let mut out = hp.clone();
    for (p, s) in out.points.iter_mut().zip(stats) {
        p.stats = s;
    }
    Ok(out)
}
