//! Posterior summaries and predictions from an explored hyperposterior.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use super::explore::{restat, HyperPosterior, Marginal, Strategy, QUANTILE_LEVELS};
use super::model::{Moments, ReplicateModel, Target};
use crate::error::Result;

pub const SCHEMA_VERSION: u32 = 1;

fn norm_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

fn norm_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Summary of a weighted Gaussian mixture.
pub fn mixture_marginal(name: &str, weights: &[f64], components: &[Moments]) -> Marginal {
    let mean: f64 = weights.iter().zip(components).map(|(w, c)| w * c.mean).sum();
    let second: f64 = weights
        .iter()
        .zip(components)
        .map(|(w, c)| w * (c.var + c.mean * c.mean))
        .sum();
    let sd = (second - mean * mean).max(0.0).sqrt();
    let sds: Vec<f64> = components.iter().map(|c| c.var.max(0.0).sqrt()).collect();
    let cdf = |x: f64| -> f64 {
        weights
            .iter()
            .zip(components.iter().zip(&sds))
            .map(|(w, (c, &s))| {
                w * if s > 0.0 {
                    norm_cdf((x - c.mean) / s)
                } else if x >= c.mean {
                    1.0
                } else {
                    0.0
                }
            })
            .sum()
    };
    let lo0 = components
        .iter()
        .zip(&sds)
        .map(|(c, s)| c.mean - 10.0 * s)
        .fold(f64::INFINITY, f64::min);
    let hi0 = components
        .iter()
        .zip(&sds)
        .map(|(c, s)| c.mean + 10.0 * s)
        .fold(f64::NEG_INFINITY, f64::max);
    let quantiles = QUANTILE_LEVELS
        .iter()
        .map(|&p| {
            let (mut lo, mut hi) = (lo0, hi0);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if cdf(mid) < p {
                    lo = mid;
                } else {
                    hi = mid;
                }
                if hi - lo <= 1e-13 * (1.0 + mid.abs()) {
                    break;
                }
            }
            (p, 0.5 * (lo + hi))
        })
        .collect();
    let density = if sd > 0.0 {
        (0..=60)
            .map(|k| {
                let x = mean - 4.5 * sd + 9.0 * sd * k as f64 / 60.0;
                let d = weights
                    .iter()
                    .zip(components.iter().zip(&sds))
                    .filter(|(_, (_, &s))| s > 0.0)
                    .map(|(w, (c, &s))| w * norm_pdf((x - c.mean) / s) / s)
                    .sum();
                (x, d)
            })
            .collect()
    } else {
        Vec::new()
    };
    Marginal {
        name: name.to_string(),
        mean,
        sd,
        quantiles,
        density,
    }
}

/// `τ_ε` marginal from the marginal of `log τ_ε`.
fn exp_marginal(name: &str, log_marginal: &Marginal) -> Marginal {
    let tr = &log_marginal.density;
    let (mut z, mut m1, mut m2) = (0.0, 0.0, 0.0);
    for k in 1..tr.len() {
        let dx = tr[k].0 - tr[k - 1].0;
        let f = |(t, d): (f64, f64)| (d, d * t.exp(), d * (2.0 * t).exp());
        let (a0, a1, a2) = f(tr[k - 1]);
        let (b0, b1, b2) = f(tr[k]);
        z += 0.5 * (a0 + b0) * dx;
        m1 += 0.5 * (a1 + b1) * dx;
        m2 += 0.5 * (a2 + b2) * dx;
    }
    let mean = m1 / z;
    Marginal {
        name: name.to_string(),
        mean,
        sd: (m2 / z - mean * mean).max(0.0).sqrt(),
        quantiles: log_marginal.quantiles.iter().map(|&(p, v)| (p, v.exp())).collect(),
        density: tr.iter().map(|&(t, d)| (t.exp(), d * (-t).exp() / z)).collect(),
    }
}

/// Marginal summaries of every hyperparameter, `τ_ε`, the year intercepts,
/// their mean `beta_0`, and `beta_h`.
pub fn posterior_marginals(hp: &HyperPosterior) -> Vec<Marginal> {
    let w = hp.weights();
    let mut out = hp.theta_marginals.clone();
    if let Some(last) = hp.theta_marginals.last() {
        out.push(exp_marginal("tau_eps", last));
    }
    let r = hp.points[0].stats.beta.len() - 1;
    for j in 0..r {
        let comps: Vec<Moments> = hp.points.iter().map(|p| p.stats.beta[j]).collect();
        out.push(mixture_marginal(&format!("beta_{}", j + 1), &w, &comps));
    }
    let pooled: Vec<Moments> = hp.points.iter().map(|p| p.stats.beta_pooled).collect();
    out.push(mixture_marginal("beta_0", &w, &pooled));
    let bh: Vec<Moments> = hp.points.iter().map(|p| p.stats.beta[r]).collect();
    out.push(mixture_marginal("beta_h", &w, &bh));
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub mean: f64,
    /// Posterior sd of the linear predictor.
    pub sd_eta: f64,
    /// Predictive sd of a new observation (adds `E[1/τ_ε]`).
    pub sd_y: f64,
}

fn mix(hp: &HyperPosterior, noise_var: f64, get: impl Fn(&super::model::PointStats) -> Moments) -> Prediction {
    let (mut m1, mut m2) = (0.0, 0.0);
    for p in &hp.points {
        let c = get(&p.stats);
        m1 += p.weight * c.mean;
        m2 += p.weight * (c.var + c.mean * c.mean);
    }
    let var = (m2 - m1 * m1).max(0.0);
    Prediction {
        mean: m1,
        sd_eta: var.sqrt(),
        sd_y: (var + noise_var).sqrt(),
    }
}

/// Predictions for the targets cached at every design point.
pub fn cached_predictions(hp: &HyperPosterior) -> Vec<Prediction> {
    let nv = hp.expected_noise_variance();
    let n = hp.points[0].stats.targets.len();
    (0..n).map(|k| mix(hp, nv, |s| s.targets[k])).collect()
}

/// Fitted linear predictor at each observation (model order).
pub fn fitted_observations(hp: &HyperPosterior) -> Vec<Prediction> {
    let nv = hp.expected_noise_variance();
    let n = hp.points[0].stats.obs_eta.len();
    (0..n).map(|k| mix(hp, nv, |s| s.obs_eta[k])).collect()
}

/// Mixture-over-design predictions for new targets.
pub fn predict(hp: &HyperPosterior, model: &ReplicateModel, targets: &[Target]) -> Result<Vec<Prediction>> {
    let re = restat(hp, model, targets)?;
    Ok(cached_predictions(&re))
}

/// Parameter summary document written by `fit`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitSummary {
    pub schema_version: u32,
    pub strategy: Strategy,
    pub theta_names: Vec<String>,
    pub mode: Vec<f64>,
    pub mode_log_post: f64,
    pub design_points: usize,
    pub failed_points: usize,
    pub evaluations: usize,
    pub parameters: Vec<Marginal>,
}

impl FitSummary {
    pub fn new(hp: &HyperPosterior) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            strategy: hp.strategy,
            theta_names: hp.names.clone(),
            mode: hp.mode.clone(),
            mode_log_post: hp.mode_log_post,
            design_points: hp.points.len(),
            failed_points: hp.failed_points,
            evaluations: hp.evaluations,
            parameters: posterior_marginals(hp),
        }
    }

    pub fn parameter(&self, name: &str) -> Option<&Marginal> {
        self.parameters.iter().find(|m| m.name == name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_component_mixture_is_the_component() {
        let m = mixture_marginal("b", &[1.0], &[Moments { mean: 2.0, var: 0.25 }]);
        assert!((m.mean - 2.0).abs() < 1e-14);
        assert!((m.sd - 0.5).abs() < 1e-14);
        assert!((m.quantile(0.975).unwrap() - (2.0 + 0.5 * 1.959_963_984_540_054)).abs() < 1e-9);
        assert!((m.quantile(0.25).unwrap() - (2.0 - 0.5 * 0.674_489_750_196_081_7)).abs() < 1e-9);
    }

    #[test]
    fn two_component_mixture_moments() {
        let m = mixture_marginal(
            "b",
            &[0.5, 0.5],
            &[Moments { mean: -1.0, var: 1.0 }, Moments { mean: 1.0, var: 1.0 }],
        );
        assert!(m.mean.abs() < 1e-14);
        assert!((m.sd - 2f64.sqrt()).abs() < 1e-12);
        assert!(m.quantile(0.5).unwrap().abs() < 1e-9);
        let mass: f64 = m
            .density
            .windows(2)
            .map(|w| 0.5 * (w[0].1 + w[1].1) * (w[1].0 - w[0].0))
            .sum();
        assert!((mass - 1.0).abs() < 2e-3, "{mass}");
    }
}
