//! Gaussian hyperpriors for the SPDE weights, elicited from quantiles of the
//! range and marginal standard deviation, plus the fixed-effect and noise
//! priors.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::spde::{HyperParams, SQRT_8};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

fn default_q_level() -> f64 {
    0.9
}

/// Two quantiles (median and `q_level`) of the stationary range and sd.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantileTargets {
    pub rho_median: f64,
    pub rho_q: f64,
    pub sigma_median: f64,
    pub sigma_q: f64,
    #[serde(default = "default_q_level")]
    pub q_level: f64,
}

impl QuantileTargets {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho_median > 0.0 && self.rho_q > self.rho_median) {
            return Err(Error::Elicitation(format!(
                "range quantiles must satisfy rho_q > rho_median > 0 (got {} and {})",
                self.rho_q, self.rho_median
            )));
        }
        if !(self.sigma_median > 0.0 && self.sigma_q > self.sigma_median) {
            return Err(Error::Elicitation(format!(
                "sd quantiles must satisfy sigma_q > sigma_median > 0 (got {} and {})",
                self.sigma_q, self.sigma_median
            )));
        }
        if !(self.q_level > 0.5 && self.q_level < 1.0) {
            return Err(Error::Elicitation(format!(
                "q_level must lie in (0.5, 1), got {}",
                self.q_level
            )));
        }
        Ok(())
    }
}

/// Reference elevation and coefficients of variation of the ratios
/// `ρ_NS(h0)/ρ_NS(0)` and `σ_NS(h0)/σ_NS(0)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoherenceInputs {
    pub h0: f64,
    pub c_rho: f64,
    pub c_sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalPrior {
    pub mean: f64,
    pub variance: f64,
}

impl NormalPrior {
    pub fn new(mean: f64, variance: f64) -> Self {
        Self { mean, variance }
    }

    pub fn sd(&self) -> f64 {
        self.variance.sqrt()
    }

    pub fn log_pdf(&self, x: f64) -> f64 {
        let d = x - self.mean;
        -0.5 * (LN_2PI + self.variance.ln() + d * d / self.variance)
    }
}

/// Gamma(shape, rate) prior on the noise precision `τ_ε`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaPrior {
    pub shape: f64,
    pub rate: f64,
}

impl GammaPrior {
    /// Log density of `u = log τ_ε`, including the Jacobian `e^u`.
    pub fn log_pdf_log_scale(&self, u: f64) -> f64 {
        self.shape * self.rate.ln() - ln_gamma(self.shape) + self.shape * u - self.rate * u.exp()
    }
}

/// Stationary prior parameters `(μ_τ, σ_τ²)` and `(μ_κ, σ_κ²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StationaryPrior {
    pub mu_tau: f64,
    pub sigma2_tau: f64,
    pub mu_kappa: f64,
    pub sigma2_kappa: f64,
}

/// Independent Gaussian priors on the SPDE weights, a common Gaussian prior
/// on every fixed effect, and a Gamma prior on the noise precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrior {
    /// Intercept first, then one entry per covariate basis.
    pub theta_tau: Vec<NormalPrior>,
    pub theta_kappa: Vec<NormalPrior>,
    #[serde(default = "default_beta")]
    pub beta: NormalPrior,
    #[serde(default = "default_noise")]
    pub noise_precision: GammaPrior,
}

fn default_beta() -> NormalPrior {
    NormalPrior::new(0.0, 100.0 * 100.0)
}

fn default_noise() -> GammaPrior {
    GammaPrior { shape: 2.0, rate: 0.02 }
}

impl GaussianPrior {
    pub fn stationary(st: &StationaryPrior) -> Self {
        Self {
            theta_tau: vec![NormalPrior::new(st.mu_tau, st.sigma2_tau)],
            theta_kappa: vec![NormalPrior::new(st.mu_kappa, st.sigma2_kappa)],
            beta: default_beta(),
            noise_precision: default_noise(),
        }
    }

    pub fn is_stationary(&self) -> bool {
        self.theta_tau.len() == 1 && self.theta_kappa.len() == 1
    }

    /// Drops the covariate weights, leaving the sea-level (intercept) prior.
    pub fn to_stationary(&self) -> Self {
        Self {
            theta_tau: self.theta_tau[..1].to_vec(),
            theta_kappa: self.theta_kappa[..1].to_vec(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.theta_tau.is_empty() || self.theta_kappa.is_empty() {
            return Err(Error::Elicitation("prior needs at least the intercept weights".into()));
        }
        let all = self
            .theta_tau
            .iter()
            .chain(&self.theta_kappa)
            .chain(std::iter::once(&self.beta));
        for p in all {
            if !(p.variance > 0.0) || !p.mean.is_finite() || !p.variance.is_finite() {
                return Err(Error::Elicitation(format!(
                    "prior variances must be positive and finite (got mean {}, variance {})",
                    p.mean, p.variance
                )));
            }
        }
        if !(self.noise_precision.shape > 0.0 && self.noise_precision.rate > 0.0) {
            return Err(Error::Elicitation(
                "noise Gamma prior needs positive shape and rate".into(),
            ));
        }
        Ok(())
    }

    /// Log prior density of the hyperparameters on their working scale.
    pub fn log_density(&self, theta: &HyperParams) -> Result<f64> {
        if theta.theta_tau.len() != self.theta_tau.len() || theta.theta_kappa.len() != self.theta_kappa.len() {
            return Err(Error::DimensionMismatch {
                context: "hyperparameters vs prior",
                expected: self.theta_tau.len() + self.theta_kappa.len(),
                got: theta.theta_tau.len() + theta.theta_kappa.len(),
            });
        }
        let lp: f64 = self
            .theta_tau
            .iter()
            .zip(&theta.theta_tau)
            .chain(self.theta_kappa.iter().zip(&theta.theta_kappa))
            .map(|(p, &x)| p.log_pdf(x))
            .sum();
        Ok(lp + self.noise_precision.log_pdf_log_scale(theta.log_noise_precision))
    }

    /// Prior means as a hyperparameter point; `log τ_ε` at the log of the
    /// Gamma mode.
    pub fn center(&self) -> HyperParams {
        let g = &self.noise_precision;
        let mode = ((g.shape - 1.0).max(0.5)) / g.rate;
        HyperParams::new(
            self.theta_tau.iter().map(|p| p.mean).collect(),
            self.theta_kappa.iter().map(|p| p.mean).collect(),
            mode.ln(),
        )
    }
}

fn probit(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

/// Solves the four log-normal quantile equations for the stationary prior.
pub fn solve_stationary_prior(t: &QuantileTargets) -> Result<StationaryPrior> {
    t.validate()?;
    let z = probit(t.q_level);
    let mu_kappa = SQRT_8.ln() - t.rho_median.ln();
    let sigma_kappa = (t.rho_q / t.rho_median).ln() / z;
    let log_sqrt_4pi = 0.5 * (4.0 * std::f64::consts::PI).ln();
    let mu_tau = -log_sqrt_4pi - t.sigma_median.ln() - mu_kappa;
    let sigma_total = (t.sigma_q / t.sigma_median).ln() / z;
    let sigma2_kappa = sigma_kappa * sigma_kappa;
    let sigma2_tau = sigma_total * sigma_total - sigma2_kappa;
    if !(sigma2_tau > 0.0) {
        return Err(Error::Elicitation(format!(
            "sigma targets too tight for the range targets: need log(sigma_q/sigma_median) > log(rho_q/rho_median), \
             i.e. sigma_tau^2 = {sigma2_tau:.4} must be > 0"
        )));
    }
    Ok(StationaryPrior {
        mu_tau,
        sigma2_tau,
        mu_kappa,
        sigma2_kappa,
    })
}

/// Extends a stationary prior with elevation weights using the coherence
/// conditions: equal priors at sea level, zero-mean slopes, and prescribed
/// coefficients of variation for the ratios at `h0`.
pub fn solve_nonstationary_prior(st: &StationaryPrior, c: &CoherenceInputs) -> Result<GaussianPrior> {
    if !(c.h0 > 0.0) || !c.h0.is_finite() {
        return Err(Error::Elicitation(format!(
            "reference elevation h0 must be > 0, got {}",
            c.h0
        )));
    }
    if !(c.c_rho > 0.0) {
        return Err(Error::Elicitation(format!("c_rho must be > 0, got {}", c.c_rho)));
    }
    if !(c.c_sigma > c.c_rho) {
        return Err(Error::Elicitation(format!(
            "positive variance requires c_sigma > c_rho (got c_sigma = {}, c_rho = {})",
            c.c_sigma, c.c_rho
        )));
    }
    let h2 = c.h0 * c.h0;
    let l_rho = (c.c_rho * c.c_rho + 1.0).ln();
    let l_sigma = (c.c_sigma * c.c_sigma + 1.0).ln();
    let mut prior = GaussianPrior::stationary(st);
    prior.theta_tau.push(NormalPrior::new(0.0, (l_sigma - l_rho) / h2));
    prior.theta_kappa.push(NormalPrior::new(0.0, l_rho / h2));
    Ok(prior)
}

/// Default elicitation inputs: range quantiles 150/500 km, sd quantiles
/// 0.2/2 m at level 0.9, and coherence at 0.4 km with `c_ρ = 0.8`,
/// `c_σ = 1.3`.
pub fn reference_inputs() -> (QuantileTargets, CoherenceInputs) {
    (
        QuantileTargets {
            rho_median: 150.0,
            rho_q: 500.0,
            sigma_median: 0.2,
            sigma_q: 2.0,
            q_level: 0.9,
        },
        CoherenceInputs {
            h0: 0.4,
            c_rho: 0.8,
            c_sigma: 1.3,
        },
    )
}

/// The non-stationary prior elicited from [`reference_inputs`].
pub fn reference_prior() -> GaussianPrior {
    let (t, c) = reference_inputs();
    let st = solve_stationary_prior(&t).expect("reference targets are valid");
    solve_nonstationary_prior(&st, &c).expect("reference coherence inputs are valid")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Nominal {
    Rho,
    Sigma,
}

/// Log-normal location and variance of the nominal range or sd at `h`.
pub fn nominal_log_params(prior: &GaussianPrior, h: f64, which: Nominal) -> (f64, f64) {
    let slope = |v: &[NormalPrior]| v.get(1).copied().unwrap_or(NormalPrior::new(0.0, 0.0));
    let (t1, th) = (prior.theta_tau[0], slope(&prior.theta_tau));
    let (k1, kh) = (prior.theta_kappa[0], slope(&prior.theta_kappa));
    match which {
        Nominal::Rho => (SQRT_8.ln() - k1.mean - h * kh.mean, k1.variance + h * h * kh.variance),
        Nominal::Sigma => (
            -0.5 * (4.0 * std::f64::consts::PI).ln() - t1.mean - k1.mean - h * (th.mean + kh.mean),
            t1.variance + k1.variance + h * h * (th.variance + kh.variance),
        ),
    }
}

/// `p`-quantile of the nominal range or sd prior at elevation `h`.
pub fn nominal_prior_quantile(prior: &GaussianPrior, h: f64, p: f64, which: Nominal) -> f64 {
    let (loc, var) = nominal_log_params(prior, h, which);
    (loc + var.sqrt() * probit(p)).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn reference_targets() -> QuantileTargets {
        QuantileTargets {
            rho_median: 150.0,
            rho_q: 500.0,
            sigma_median: 0.2,
            sigma_q: 2.0,
            q_level: 0.9,
        }
    }

    #[test]
    fn reference_stationary_prior() {
        let st = solve_stationary_prior(&reference_targets()).unwrap();
        assert!((st.mu_kappa - -3.97).abs() < 0.01, "{st:?}");
        assert!((st.sigma2_kappa - 0.88).abs() < 0.01);
        assert!((st.mu_tau - 4.31).abs() < 0.01);
        assert!((st.sigma2_tau - 2.35).abs() < 0.01);
    }

    #[test]
    fn median_range_sqrt8_gives_zero_mu_kappa() {
        let t = QuantileTargets {
            rho_median: SQRT_8,
            rho_q: 3.0 * SQRT_8,
            ..reference_targets()
        };
        assert!(solve_stationary_prior(&t).unwrap().mu_kappa.abs() < 1e-15);
    }

    #[test]
    fn quantile_round_trip() {
        let t = reference_targets();
        let p = GaussianPrior::stationary(&solve_stationary_prior(&t).unwrap());
        for (q, rho, sigma) in [(0.5, t.rho_median, t.sigma_median), (t.q_level, t.rho_q, t.sigma_q)] {
            assert_relative_eq!(
                nominal_prior_quantile(&p, 0.0, q, Nominal::Rho),
                rho,
                max_relative = 1e-10
            );
            assert_relative_eq!(
                nominal_prior_quantile(&p, 0.0, q, Nominal::Sigma),
                sigma,
                max_relative = 1e-10
            );
        }
    }

    #[test]
    fn tight_sigma_targets_rejected() {
        let t = QuantileTargets {
            sigma_q: 0.4,
            ..reference_targets()
        };
        let err = solve_stationary_prior(&t).unwrap_err().to_string();
        assert!(err.contains("sigma_tau^2"), "{err}");
        let bad = QuantileTargets {
            rho_q: 100.0,
            ..reference_targets()
        };
        assert!(solve_stationary_prior(&bad).is_err());
    }

    #[test]
    fn sensitivity_slope_variances() {
        let st = solve_stationary_prior(&reference_targets()).unwrap();
        let rows = [
            (0.4, 0.6, 0.99, 0.93),
            (0.8, 1.3, 3.09, 3.09),
            (1.6, 3.4, 7.88, 7.94),
            (0.8, 1.0, 1.24, 3.09),
            (0.8, 2.0, 6.97, 3.09),
            (3.5, 13.0, 15.95, 16.15),
        ];
        for (c_rho, c_sigma, tau_h, kappa_h) in rows {
            let p = solve_nonstationary_prior(
                &st,
                &CoherenceInputs {
                    h0: 0.4,
                    c_rho,
                    c_sigma,
                },
            )
            .unwrap();
            assert!(
                (p.theta_tau[1].variance - tau_h).abs() < 0.01,
                "{c_rho} {c_sigma}: {:?}",
                p.theta_tau[1]
            );
            assert!((p.theta_kappa[1].variance - kappa_h).abs() < 0.01);
            assert_eq!(p.theta_tau[1].mean, 0.0);
            assert_eq!(p.theta_kappa[1].mean, 0.0);
        }
    }

    #[test]
    fn equal_coefficients_rejected() {
        let st = solve_stationary_prior(&reference_targets()).unwrap();
        let err = solve_nonstationary_prior(
            &st,
            &CoherenceInputs {
                h0: 0.4,
                c_rho: 0.8,
                c_sigma: 0.8,
            },
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("c_sigma > c_rho"), "{err}");
    }

    #[test]
    fn nominal_quantiles() {
        let st = solve_stationary_prior(&reference_targets()).unwrap();
        let p = solve_nonstationary_prior(
            &st,
            &CoherenceInputs {
                h0: 0.4,
                c_rho: 0.8,
                c_sigma: 1.3,
            },
        )
        .unwrap();
        let q = nominal_prior_quantile(&p, 0.8, 0.9, Nominal::Rho);
        assert!((q - 1300.0).abs() < 20.0, "{q}");
        let s = GaussianPrior::stationary(&st);
        for which in [Nominal::Rho, Nominal::Sigma] {
            assert_relative_eq!(
                nominal_prior_quantile(&p, 0.0, 0.9, which),
                nominal_prior_quantile(&s, 0.0, 0.9, which),
                max_relative = 1e-14
            );
            // Medians do not move with elevation.
            assert_relative_eq!(
                nominal_prior_quantile(&p, 1.2, 0.5, which),
                nominal_prior_quantile(&p, 0.0, 0.5, which),
                max_relative = 1e-12
            );
        }
    }

    #[test]
    fn coefficient_of_variation_recovered() {
        // CV of a log-normal ratio with log-variance s² is sqrt(exp(s²) − 1).
        let st = solve_stationary_prior(&reference_targets()).unwrap();
        let c = CoherenceInputs {
            h0: 0.4,
            c_rho: 0.8,
            c_sigma: 1.3,
        };
        let p = solve_nonstationary_prior(&st, &c).unwrap();
        let s2_rho = c.h0 * c.h0 * p.theta_kappa[1].variance;
        let s2_sigma = c.h0 * c.h0 * (p.theta_kappa[1].variance + p.theta_tau[1].variance);
        assert_relative_eq!((s2_rho.exp() - 1.0).sqrt(), c.c_rho, max_relative = 1e-12);
        assert_relative_eq!((s2_sigma.exp() - 1.0).sqrt(), c.c_sigma, max_relative = 1e-12);
    }

    #[test]
    fn noise_prior_on_log_scale_integrates_to_one() {
        let g = default_noise();
        let h = 1e-3;
        let total: f64 = (0..30_000)
            .map(|i| -10.0 + i as f64 * h)
            .map(|u| g.log_pdf_log_scale(u).exp() * h)
            .sum();
        assert!((total - 1.0).abs() < 1e-6, "{total}");
    }

    #[test]
    fn prior_json_round_trip() {
        let st = solve_stationary_prior(&reference_targets()).unwrap();
        let p = solve_nonstationary_prior(
            &st,
            &CoherenceInputs {
                h0: 0.4,
                c_rho: 0.8,
                c_sigma: 1.3,
            },
        )
        .unwrap();
        let s = serde_json::to_string(&p).unwrap();
        let back: GaussianPrior = serde_json::from_str(&s).unwrap();
        assert_eq!(p, back);
        assert_eq!(back.beta.variance, 1e4);
        assert_eq!(back.noise_precision.shape, 2.0);
    }
}
