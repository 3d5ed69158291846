//! Scores: DIC, RMSE, Gaussian CRPS, leave-one-station-out cross-validation
//! and field recovery against known truth.

use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::lgm::{
    cached_predictions, explore_hyperposterior, restat, ExploreOptions, HyperPosterior, ModelOptions, ObservationSet,
    Prediction, ReplicateModel, SpatialSetup, Target,
};
use crate::prior::GaussianPrior;
use crate::spde::SpdeConfig;

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const FRAC_1_SQRT_PI: f64 = 0.564_189_583_547_756_3;

/// CRPS of a Gaussian predictive distribution.
pub fn crps_gaussian(mean: f64, sd: f64, y: f64) -> Result<f64> {
    if !(sd > 0.0) || !sd.is_finite() {
        return Err(Error::InvalidInput(format!("CRPS needs sd > 0, got {sd}")));
    }
    Ok(crps_unchecked(mean, sd, y))
}

/// As [`crps_gaussian`], with the point-mass limit `|y − mean|` at `sd = 0`.
fn crps_unchecked(mean: f64, sd: f64, y: f64) -> f64 {
    if sd <= 0.0 {
        return (y - mean).abs();
    }
    let z = (y - mean) / sd;
    let cdf = 0.5 * erfc(-z / std::f64::consts::SQRT_2);
    let pdf = (-0.5 * z * z).exp() * 0.5 * FRAC_1_SQRT_PI * std::f64::consts::SQRT_2;
    sd * (z * (2.0 * cdf - 1.0) + 2.0 * pdf - FRAC_1_SQRT_PI)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dic {
    pub dic: f64,
    pub d_bar: f64,
    pub p_d: f64,
}

/// DIC from the design mixture. `D̄` uses the Gaussian expectation of the
/// deviance at each design point; the plug-in deviance uses the posterior
/// means of the linear predictor and of `τ_ε`.
pub fn dic(hp: &HyperPosterior, y: &[f64]) -> Result<Dic> {
    let n = y.len();
    if hp.points.iter().any(|p| p.stats.obs_eta.len() != n) {
        return Err(Error::DimensionMismatch {
            context: "DIC observations",
            expected: n,
            got: hp.points[0].stats.obs_eta.len(),
        });
    }
    let mut d_bar = 0.0;
    for p in &hp.points {
        let log_tau = *p.stats.theta.last().expect("noise precision");
        let tau = log_tau.exp();
        let mut dev = 0.0;
        for (m, &yi) in p.stats.obs_eta.iter().zip(y) {
            dev += LN_2PI - log_tau + tau * ((yi - m.mean).powi(2) + m.var);
        }
        d_bar += p.weight * dev;
    }
    let tau_bar = hp.expected_noise_precision();
    let mut d_hat = 0.0;
    for (i, &yi) in y.iter().enumerate() {
        let m: f64 = hp.points.iter().map(|p| p.weight * p.stats.obs_eta[i].mean).sum();
        d_hat += LN_2PI - tau_bar.ln() + tau_bar * (yi - m).powi(2);
    }
    let p_d = d_bar - d_hat;
    Ok(Dic {
        dic: d_bar + p_d,
        d_bar,
        p_d,
    })
}

/// Everything needed to refit a model on a subset of the data.
#[derive(Debug, Clone)]
pub struct FitSpec {
    pub setup: Arc<SpatialSetup>,
    pub config: SpdeConfig,
    pub prior: GaussianPrior,
    pub model_options: ModelOptions,
    pub explore: ExploreOptions,
}

impl FitSpec {
    pub fn model(&self, data: &ObservationSet) -> Result<ReplicateModel> {
        ReplicateModel::new(
            self.setup.clone(),
            self.config.clone(),
            self.prior.clone(),
            data,
            self.model_options,
        )
    }

    pub fn fit(&self, data: &ObservationSet, targets: &[Target]) -> Result<(ReplicateModel, HyperPosterior)> {
        let model = self.model(data)?;
        let hp = explore_hyperposterior(&model, targets, &self.explore)?;
        Ok((model, hp))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CvMode {
    /// Full refit per fold, warm-started at the full-data mode.
    Refit,
    /// Reuse the full-data design and weights; only the latent
    /// conditionals are recomputed.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub station_id: String,
    pub year: String,
    pub observed: f64,
    pub mean: f64,
    pub sd: f64,
    pub crps: f64,
    pub sq_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub rows: Vec<ScoreRow>,
    /// `(year, RMSE_j)` for every year with at least one held-out value.
    pub rmse_per_year: Vec<(String, f64)>,
    pub rmse_avg: f64,
    pub crps_avg: f64,
    pub dic: Option<Dic>,
    pub folds: usize,
    pub skipped_stations: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub rmse_avg: f64,
    pub crps_avg: f64,
    pub dic: Option<f64>,
    pub d_bar: Option<f64>,
    pub p_d: Option<f64>,
}

impl ScoreReport {
    /// Per-year RMSE and the averages, from the per-unit rows.
    pub fn from_rows(rows: Vec<ScoreRow>, years: &[String]) -> Self {
        let rmse_per_year: Vec<(String, f64)> = years
            .iter()
            .filter_map(|yr| {
                let errs: Vec<f64> = rows.iter().filter(|r| &r.year == yr).map(|r| r.sq_error).collect();
                (!errs.is_empty()).then(|| (yr.clone(), (errs.iter().sum::<f64>() / errs.len() as f64).sqrt()))
            })
            .collect();
        let mean = |v: &[f64]| {
            if v.is_empty() {
                f64::NAN
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        let rmse_avg = mean(&rmse_per_year.iter().map(|r| r.1).collect::<Vec<_>>());
        let crps_avg = mean(&rows.iter().map(|r| r.crps).collect::<Vec<_>>());
        Self {
            rows,
            rmse_per_year,
            rmse_avg,
            crps_avg,
            dic: None,
            folds: 0,
            skipped_stations: Vec::new(),
        }
    }

    pub fn summary(&self) -> ScoreSummary {
        ScoreSummary {
            rmse_avg: self.rmse_avg,
            crps_avg: self.crps_avg,
            dic: self.dic.map(|d| d.dic),
            d_bar: self.dic.map(|d| d.d_bar),
            p_d: self.dic.map(|d| d.p_d),
        }
    }

    /// `station_id,year,crps,sq_error`, preceded by optional `#` lines.
    pub fn write_csv<W: Write>(&self, mut out: W, comments: &[String]) -> Result<()> {
        for c in comments {
            writeln!(out, "# {c}")?;
        }
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["station_id", "year", "crps", "sq_error"])?;
        for r in &self.rows {
            w.write_record([r.station_id.clone(), r.year.clone(), fmt(r.crps), fmt(r.sq_error)])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Shortest round-trip representation.
pub fn fmt(v: f64) -> String {
    format!("{v:?}")
}

/// Leave-one-station-out cross-validation: all values of one station are
/// held out, predicted, and scored with the observation-level predictive.
pub fn loo_cv(spec: &FitSpec, data: &ObservationSet, mode: CvMode) -> Result<ScoreReport> {
    if data.stations.len() < 2 {
        return Err(Error::InvalidInput(
            "cross-validation needs at least two stations".into(),
        ));
    }
    let (full_model, full_hp) = spec.fit(data, &[])?;
    let warm = ExploreOptions {
        start: Some(full_hp.mode.clone()),
        ..spec.explore.clone()
    };
    let folds: Vec<usize> = (0..data.stations.len())
        .filter(|&s| !data.station_observations(s).is_empty())
        .collect();
    let skipped: Vec<String> = (0..data.stations.len())
        .filter(|s| !folds.contains(s))
        .map(|s| data.stations[s].id.clone())
        .collect();
    let per_fold: Vec<Vec<ScoreRow>> = folds
        .par_iter()
        .map(|&s| -> Result<Vec<ScoreRow>> {
            let held = data.station_observations(s);
            let train = data.without_station(s);
            let model = spec.model(&train)?;
            let targets: Vec<Target> = held.iter().map(|o| model.station_target(o.station, o.year)).collect();
            let hp = match mode {
                CvMode::Refit => explore_hyperposterior(&model, &targets, &warm)?,
                CvMode::Fixed => restat(&full_hp, &model, &targets)?,
            };
            let preds = cached_predictions(&hp);
            Ok(held
                .iter()
                .zip(preds)
                .map(|(o, p)| ScoreRow {
                    station_id: data.stations[s].id.clone(),
                    year: data.years[o.year].clone(),
                    observed: o.value,
                    mean: p.mean,
                    sd: p.sd_y,
                    crps: crps_unchecked(p.mean, p.sd_y, o.value),
                    sq_error: (p.mean - o.value).powi(2),
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let mut report = ScoreReport::from_rows(per_fold.into_iter().flatten().collect(), &data.years);
    report.dic = Some(dic(&full_hp, full_model.y())?);
    report.folds = folds.len();
    report.skipped_stations = skipped;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldScores {
    pub sq_error: Vec<f64>,
    pub crps: Vec<f64>,
    pub covered: Vec<bool>,
    pub rmse: f64,
    pub crps_avg: f64,
    pub coverage: f64,
}

/// Per-target scores of η-level predictions against known truth.
pub fn field_recovery_scores(pred: &[Prediction], truth: &[f64]) -> Result<FieldScores> {
    if pred.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            context: "field recovery truth",
            expected: pred.len(),
            got: truth.len(),
        });
    }
    let z = 1.959_963_984_540_054;
    let sq_error: Vec<f64> = pred.iter().zip(truth).map(|(p, t)| (p.mean - t).powi(2)).collect();
    let crps: Vec<f64> = pred
        .iter()
        .zip(truth)
        .map(|(p, &t)| crps_unchecked(p.mean, p.sd_eta, t))
        .collect();
    let covered: Vec<bool> = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (p.mean - t).abs() <= z * p.sd_eta)
        .collect();
    let n = pred.len().max(1) as f64;
    Ok(FieldScores {
        rmse: (sq_error.iter().sum::<f64>() / n).sqrt(),
        crps_avg: crps.iter().sum::<f64>() / n,
        coverage: covered.iter().filter(|&&c| c).count() as f64 / n,
        sq_error,
        crps,
        covered,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lgm::{GridPoint, Moments, PointStats, Strategy};

    #[test]
    fn crps_at_the_mean() {
        assert!((crps_gaussian(0.0, 1.0, 0.0).unwrap() - 0.233_695_2).abs() < 1e-6);
        assert!(crps_gaussian(0.0, 0.0, 1.0).is_err());
        assert!(crps_gaussian(0.0, -1.0, 1.0).is_err());
    }

    #[test]
    fn crps_point_mass_limit() {
        let v = crps_gaussian(1.0, 1e-9, 3.5).unwrap();
        assert!((v - 2.5).abs() < 1e-8);
    }

    fn point(weight: f64, log_tau: f64, eta: Vec<Moments>) -> GridPoint {
        GridPoint {
            z: vec![0.0],
            weight,
            stats: PointStats {
                theta: vec![0.0, 0.0, log_tau],
                log_post: 0.0,
                beta: vec![],
                beta_pooled: Moments { mean: 0.0, var: 0.0 },
                obs_eta: eta,
                targets: vec![],
            },
        }
    }

    fn hp(points: Vec<GridPoint>) -> HyperPosterior {
        HyperPosterior {
            names: vec![],
            mode: vec![],
            mode_log_post: 0.0,
            covariance: vec![],
            strategy: Strategy::Grid,
            points,
            theta_marginals: vec![],
            iterations: 0,
            evaluations: 0,
            failed_points: 0,
        }
    }

    #[test]
    fn point_mass_posterior_has_no_effective_parameters() {
        let y = [0.3, -1.0, 2.0];
        let eta = y
            .iter()
            .map(|&m| Moments {
                mean: m - 0.1,
                var: 0.0,
            })
            .collect();
        let d = dic(&hp(vec![point(1.0, 2.0, eta)]), &y).unwrap();
        assert!(d.p_d.abs() < 1e-8);
        assert!((d.dic - d.d_bar).abs() < 1e-8);
    }

    #[test]
    fn dic_matches_monte_carlo() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let y = [0.3, -1.0, 2.0, 0.5];
        let comps = [
            (0.6, 1.0, [0.2, -0.8, 1.7, 0.4], [0.05, 0.1, 0.2, 0.02]),
            (0.4, 1.5, [0.35, -1.1, 2.1, 0.6], [0.04, 0.08, 0.1, 0.03]),
        ];
        let points = comps
            .iter()
            .map(|(w, lt, m, v)| {
                point(
                    *w,
                    *lt,
                    m.iter().zip(v).map(|(&mean, &var)| Moments { mean, var }).collect(),
                )
            })
            .collect();
        let d = dic(&hp(points), &y).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let n = 100_000;
        let mut total = 0.0;
        let mut total_sq = 0.0;
        for k in 0..n {
            let (_, lt, m, v) = if (k as f64) < 0.6 * n as f64 {
                comps[0]
            } else {
                comps[1]
            };
            let tau = f64::exp(lt);
            let mut dev = 0.0;
            for i in 0..y.len() {
                let eta = Normal::new(m[i], v[i].sqrt()).unwrap().sample(&mut rng);
                dev += LN_2PI - lt + tau * (y[i] - eta).powi(2);
            }
            total += dev;
            total_sq += dev * dev;
        }
        let mc = total / n as f64;
        let se = ((total_sq / n as f64 - mc * mc) / n as f64).sqrt();
        assert!((d.d_bar - mc).abs() < 4.0 * se, "{} vs {mc} ± {se}", d.d_bar);
    }

    #[test]
    fn perfect_predictions_score_zero() {
        let truth = [1.0, 2.0, 3.0];
        let pred: Vec<Prediction> = truth
            .iter()
            .map(|&m| Prediction {
                mean: m,
                sd_eta: 0.3,
                sd_y: 0.5,
            })
            .collect();
        let s = field_recovery_scores(&pred, &truth).unwrap();
        assert_eq!(s.rmse, 0.0);
        assert_eq!(s.coverage, 1.0);
        assert!(field_recovery_scores(&pred, &truth[..2]).is_err());
    }

    #[test]
    fn averages_recompute_from_rows() {
        let rows: Vec<ScoreRow> = [("a", "1", 1.0), ("b", "1", 3.0), ("a", "2", 2.0)]
            .iter()
            .map(|&(s, y, e)| ScoreRow {
                station_id: s.into(),
                year: y.into(),
                observed: 0.0,
                mean: e,
                sd: 1.0,
                crps: e / 10.0,
                sq_error: e * e,
            })
            .collect();
        let r = ScoreReport::from_rows(rows, &["1".into(), "2".into(), "3".into()]);
        assert_eq!(r.rmse_per_year.len(), 2);
        assert!((r.rmse_per_year[0].1 - 5f64.sqrt()).abs() < 1e-15);
        assert!((r.rmse_avg - (5f64.sqrt() + 2.0) / 2.0).abs() < 1e-15);
        assert!((r.crps_avg - 0.2).abs() < 1e-15);
        let mut buf = Vec::new();
        r.write_csv(&mut buf, &[]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 4);
    }
}
