//! Synthetic replicate datasets drawn under the orthogonality constraints,
//! and the factorial simulation study (truth × fitted model × replicates).

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{dic, field_recovery_scores, fmt, Dic};
use crate::gmrf::{task_rng, FactoredPrecision};
use crate::lgm::{
    cached_predictions, explore_hyperposterior, posterior_marginals, ExploreOptions, ModelOptions, Observation,
    ObservationSet, ReplicateModel, SpatialSetup, Station,
};
use crate::mesh::{build_structured_mesh, Extent};
use crate::prior::{reference_prior, GaussianPrior};
use crate::spde::{CovariateField, HyperParams, ModelMode, SpdeConfig};

/// Task id used for the station layout stream.
const STATION_TASK: u64 = u64::MAX;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimScenario {
    pub truth_mode: ModelMode,
    /// Truth SPDE weights; ignored when `truth_from_prior` is set.
    pub theta_tau: Vec<f64>,
    pub theta_kappa: Vec<f64>,
    pub beta0: f64,
    pub beta_h: f64,
    pub tau_eps: f64,
    /// Draw θ, β and τ_ε per dataset from `prior` instead.
    #[serde(default)]
    pub truth_from_prior: bool,
    pub replicates: Vec<usize>,
    pub datasets: usize,
    pub seed: u64,
    pub domain: Extent,
    pub resolution: f64,
    pub stations: usize,
    /// Elevation range of the synthetic ridge, km.
    pub ridge_height: f64,
    /// Fitting prior (non-stationary form; stationary fits use its
    /// intercept part).
    pub prior: GaussianPrior,
    pub fit_modes: Vec<ModelMode>,
    #[serde(default)]
    pub explore: ExploreOptions,
    /// Score node-level predictions against the sampled linear predictor.
    #[serde(default)]
    pub field_scores: bool,
}

impl SimScenario {
    /// Desk-scale study: 500 × 700 km at 25 km, 233 stations, 50 datasets,
    /// r ∈ {1, 2, 5, 10}, both model classes fitted.
    pub fn desk(truth_mode: ModelMode) -> Self {
        let (theta_tau, theta_kappa) = match truth_mode {
            ModelMode::Nonstationary => (vec![3.9, -1.3], vec![-5.9, 3.1]),
            ModelMode::Stationary => (vec![3.5], vec![-4.5]),
        };
        Self {
            truth_mode,
            theta_tau,
            theta_kappa,
            beta0: 0.6,
            beta_h: 0.4,
            tau_eps: 40.0,
            truth_from_prior: false,
            replicates: vec![1, 2, 5, 10],
            datasets: 50,
            seed: 20_140_501,
            domain: Extent::new(0.0, 0.0, 500.0, 700.0),
            resolution: 25.0,
            stations: 233,
            ridge_height: 1.5,
            prior: reference_prior(),
            fit_modes: vec![ModelMode::Stationary, ModelMode::Nonstationary],
            explore: ExploreOptions::default(),
            field_scores: true,
        }
    }

    /// The full design: 250 datasets and every r from 1 to 10.
    pub fn full(truth_mode: ModelMode) -> Self {
        Self {
            replicates: (1..=10).collect(),
            datasets: 250,
            ..Self::desk(truth_mode)
        }
    }

    /// Small on-model scenario: stationary truth drawn from the fitting
    /// prior, 100 × 100 km at 10 km, 60 stations, two replicates.
    pub fn calibration() -> Self {
        Self {
            truth_mode: ModelMode::Stationary,
            theta_tau: vec![],
            theta_kappa: vec![],
            beta0: 0.0,
            beta_h: 0.0,
            tau_eps: 0.0,
            truth_from_prior: true,
            replicates: vec![2],
            datasets: 200,
            seed: 7_001,
            domain: Extent::new(0.0, 0.0, 100.0, 100.0),
            resolution: 10.0,
            stations: 60,
            ridge_height: 1.5,
            prior: reference_prior().to_stationary(),
            fit_modes: vec![ModelMode::Stationary],
            explore: ExploreOptions::default(),
            field_scores: false,
        }
    }

    pub fn max_replicates(&self) -> usize {
        self.replicates.iter().copied().max().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.datasets == 0 {
            return Err(Error::InvalidInput("scenario needs at least one dataset".into()));
        }
        if self.replicates.is_empty() || self.replicates.contains(&0) {
            return Err(Error::InvalidInput("replicate counts must be positive".into()));
        }
        if self.fit_modes.is_empty() {
            return Err(Error::InvalidInput("scenario fits no model".into()));
        }
        let want = match self.truth_mode {
            ModelMode::Stationary => 1,
            ModelMode::Nonstationary => 2,
        };
        if !self.truth_from_prior && (self.theta_tau.len() != want || self.theta_kappa.len() != want) {
            return Err(Error::DimensionMismatch {
                context: "truth θ for the truth mode",
                expected: 2 * want,
                got: self.theta_tau.len() + self.theta_kappa.len(),
            });
        }
        if !self.truth_from_prior && !(self.tau_eps > 0.0 && self.tau_eps.is_finite()) {
            return Err(Error::InvalidInput("truth τ_ε must be positive".into()));
        }
        self.prior.validate()?;
        let need_ns = self.fit_modes.contains(&ModelMode::Nonstationary)
            || (self.truth_from_prior && self.truth_mode == ModelMode::Nonstationary);
        if need_ns && self.prior.is_stationary() {
            return Err(Error::InvalidInput(
                "non-stationary fits need a prior with covariate weights".into(),
            ));
        }
        if !(self.resolution > 0.0) || self.stations == 0 || !(self.ridge_height >= 0.0) {
            return Err(Error::InvalidInput(
                "mesh resolution, station count and ridge height must be positive".into(),
            ));
        }
        Ok(())
    }

    fn prior_for(&self, mode: ModelMode) -> GaussianPrior {
        match mode {
            ModelMode::Stationary => self.prior.to_stationary(),
            ModelMode::Nonstationary => self.prior.clone(),
        }
    }
}

/// Smooth north-south ridge over the rectangle, scaled to `[0, height]`.
pub fn ridge_elevation(extent: &Extent, nodes: &[[f64; 2]], height: f64) -> Vec<f64> {
    let raw: Vec<f64> = nodes
        .iter()
        .map(|p| {
            let u = (p[0] - extent.x_min) / extent.width();
            let v = (p[1] - extent.y_min) / extent.height();
            let centre = 0.6 + 0.08 * (2.0 * std::f64::consts::PI * v).sin();
            (-((u - centre) / 0.16).powi(2)).exp() * (0.55 + 0.45 * v)
        })
        .collect();
    let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    raw.iter()
        .map(|r| if hi > lo { height * (r - lo) / (hi - lo) } else { 0.0 })
        .collect()
}

/// Mesh, covariate and station layout shared by every dataset.
#[derive(Debug, Clone)]
pub struct SimEnvironment {
    pub setup: Arc<SpatialSetup>,
    pub stations: Vec<Station>,
}

impl SimEnvironment {
    pub fn new(scenario: &SimScenario) -> Result<Self> {
        scenario.validate()?;
        let mesh = build_structured_mesh(scenario.domain, scenario.resolution)?;
        let elevation = ridge_elevation(&scenario.domain, &mesh.nodes, scenario.ridge_height);
        let setup = SpatialSetup::new(mesh, CovariateField::new(elevation.clone())?)?;
        // Uniform proposals thinned towards low ground.
        let mut rng = task_rng(scenario.seed, STATION_TASK);
        let d = scenario.domain;
        let mut stations = Vec::with_capacity(scenario.stations);
        while stations.len() < scenario.stations {
            let p = [rng.random_range(d.x_min..d.x_max), rng.random_range(d.y_min..d.y_max)];
            let proj = setup.project(&[p]);
            if !proj.is_complete() {
                continue;
            }
            let h = proj.apply(&elevation)[0];
            let scale = if scenario.ridge_height > 0.0 {
                h / scenario.ridge_height
            } else {
                0.0
            };
            if rng.random::<f64>() < (-1.5 * scale).exp() {
                stations.push(Station {
                    id: format!("S{:03}", stations.len() + 1),
                    location: p,
                    elevation: h,
                });
            }
        }
        Ok(Self { setup, stations })
    }

    pub fn truth_config(&self, mode: ModelMode) -> SpdeConfig {
        SpdeConfig::for_mode(mode, &self.setup.elevation)
    }
}

/// True parameters of one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub theta: HyperParams,
    /// Year intercepts for every replicate drawn.
    pub beta_years: Vec<f64>,
    pub beta_h: f64,
}

impl Truth {
    fn from_scenario(s: &SimScenario, r: usize) -> Self {
        Self {
            theta: HyperParams::new(s.theta_tau.clone(), s.theta_kappa.clone(), s.tau_eps.ln()),
            beta_years: vec![s.beta0; r],
            beta_h: s.beta_h,
        }
    }

    fn from_prior<R: Rng>(s: &SimScenario, r: usize, rng: &mut R) -> Result<Self> {
        let prior = s.prior_for(s.truth_mode);
        let draw = |p: &crate::prior::NormalPrior, rng: &mut R| -> Result<f64> {
            Ok(Normal::new(p.mean, p.sd())
                .map_err(|e| Error::InvalidInput(e.to_string()))?
                .sample(rng))
        };
        let theta_tau = prior
            .theta_tau
            .iter()
            .map(|p| draw(p, rng))
            .collect::<Result<Vec<_>>>()?;
        let theta_kappa = prior
            .theta_kappa
            .iter()
            .map(|p| draw(p, rng))
            .collect::<Result<Vec<_>>>()?;
        let g = &prior.noise_precision;
        let tau = Gamma::new(g.shape, 1.0 / g.rate)
            .map_err(|e| Error::InvalidInput(e.to_string()))?
            .sample(rng);
        let beta_years = (0..r).map(|_| draw(&prior.beta, rng)).collect::<Result<Vec<_>>>()?;
        let beta_h = draw(&prior.beta, rng)?;
        Ok(Self {
            theta: HyperParams::new(theta_tau, theta_kappa, tau.ln()),
            beta_years,
            beta_h,
        })
    }

    /// The value of a named posterior summary under this truth, for a fit of
    /// class `mode` using the first `r` replicates.
    pub fn value_of(&self, name: &str, r: usize) -> Option<f64> {
        let t = &self.theta;
        let weight = |w: &[f64], k: usize| w.get(k).copied().unwrap_or(0.0);
        Some(match name {
            "theta_tau" | "theta_tau_1" => t.theta_tau[0],
            "theta_tau_h" => weight(&t.theta_tau, 1),
            "theta_kappa" | "theta_kappa_1" => t.theta_kappa[0],
            "theta_kappa_h" => weight(&t.theta_kappa, 1),
            "log_tau_eps" => t.log_noise_precision,
            "tau_eps" => t.noise_precision(),
            "beta_0" => self.beta_years[..r].iter().sum::<f64>() / r as f64,
            "beta_h" => self.beta_h,
            other => {
                let j: usize = other.strip_prefix("beta_")?.parse().ok()?;
                *self.beta_years.get(j.checked_sub(1)?)?
            }
        })
    }
}

/// Unconstrained draws for the largest replicate count; smaller `r` reuse
/// the leading fields so that cells share random numbers.
#[derive(Debug, Clone)]
pub struct RawDraw {
    pub truth: Truth,
    fields: Vec<Vec<f64>>,
    noise: Vec<Vec<f64>>,
    factor: Arc<FactoredPrecision>,
}

pub fn draw_raw(scenario: &SimScenario, env: &SimEnvironment, dataset: usize) -> Result<RawDraw> {
    let r_max = scenario.max_replicates();
    let mut rng = task_rng(scenario.seed, dataset as u64);
    let truth = if scenario.truth_from_prior {
        Truth::from_prior(scenario, r_max, &mut rng)?
    } else {
        Truth::from_scenario(scenario, r_max)
    };
    let config = env.truth_config(scenario.truth_mode);
    let (_, factor) = env.setup.field_factor(&config, &truth.theta)?;
    let m = env.setup.node_count();
    let zero = vec![0.0; m];
    let fields: Vec<Vec<f64>> = (0..r_max).map(|_| factor.sample(&zero, &mut rng)).collect();
    let noise: Vec<Vec<f64>> = (0..r_max)
        .map(|_| {
            (0..env.stations.len())
                .map(|_| StandardNormal.sample(&mut rng))
                .collect()
        })
        .collect();
    Ok(RawDraw {
        truth,
        fields,
        noise,
        factor: Arc::new(factor),
    })
}

/// A synthetic dataset with its node-level truth (year-major, `r·m`).
#[derive(Debug, Clone)]
pub struct SimDataset {
    pub observations: ObservationSet,
    pub truth: Truth,
    pub fields: Vec<f64>,
    pub eta: Vec<f64>,
}

/// Conditions `r` stacked fields on the zero-integral constraints (one per
/// field) and the joint elevation-orthogonality constraint.
pub fn condition_replicates(setup: &SpatialSetup, factor: &FactoredPrecision, fields: &mut [Vec<f64>]) -> Result<()> {
    let r = fields.len();
    let c = &setup.fem.c;
    let g: Vec<f64> = c.iter().zip(&setup.elevation.values).map(|(a, b)| a * b).collect();
    let u = factor.solve(c);
    let v = factor.solve(&g);
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let (cu, cv, gv) = (dot(c, &u), dot(c, &v), dot(&g, &v));
    let mut s = DMatrix::zeros(r + 1, r + 1);
    let mut d = nalgebra::DVector::zeros(r + 1);
    for j in 0..r {
        s[(j, j)] = cu;
        s[(j, r)] = cv;
        s[(r, j)] = cv;
        d[j] = dot(c, &fields[j]);
        d[r] += dot(&g, &fields[j]);
    }
    s[(r, r)] = r as f64 * gv;
    let lambda = nalgebra::Cholesky::new(s)
        .ok_or(Error::RankDeficientConstraints)?
        .solve(&d);
    for (j, x) in fields.iter_mut().enumerate() {
        for i in 0..x.len() {
            x[i] -= lambda[j] * u[i] + lambda[r] * v[i];
        }
    }
    Ok(())
}

/// Builds the dataset for the first `r` replicates of a raw draw.
pub fn assemble_dataset(env: &SimEnvironment, raw: &RawDraw, r: usize) -> Result<SimDataset> {
    if r == 0 || r > raw.fields.len() {
        return Err(Error::InvalidInput(format!(
            "replicate count {r} outside 1..={}",
            raw.fields.len()
        )));
    }
    let m = env.setup.node_count();
    let mut fields: Vec<Vec<f64>> = raw.fields[..r].to_vec();
    condition_replicates(&env.setup, &raw.factor, &mut fields)?;
    let locs: Vec<[f64; 2]> = env.stations.iter().map(|s| s.location).collect();
    let proj = env.setup.project(&locs);
    proj.require_complete(&locs)?;
    let noise_sd = (-0.5 * raw.truth.theta.log_noise_precision).exp();
    let mut observations = Vec::with_capacity(r * locs.len());
    for (j, x) in fields.iter().enumerate() {
        let at_stations = proj.apply(x);
        for (i, st) in env.stations.iter().enumerate() {
            observations.push(Observation {
                station: i,
                year: j,
                value: raw.truth.beta_years[j]
                    + raw.truth.beta_h * st.elevation
                    + at_stations[i]
                    + noise_sd * raw.noise[j][i],
            });
        }
    }
    let h = &env.setup.elevation.values;
    let mut eta = Vec::with_capacity(r * m);
    for (j, x) in fields.iter().enumerate() {
        eta.extend((0..m).map(|i| raw.truth.beta_years[j] + raw.truth.beta_h * h[i] + x[i]));
    }
    let years = (1..=r).map(|j| format!("{j}")).collect();
    let truth = Truth {
        beta_years: raw.truth.beta_years[..r].to_vec(),
        ..raw.truth.clone()
    };
    Ok(SimDataset {
        observations: ObservationSet::new(env.stations.clone(), years, observations)?,
        truth,
        fields: fields.concat(),
        eta,
    })
}

pub fn sample_dataset(scenario: &SimScenario, env: &SimEnvironment, r: usize, dataset: usize) -> Result<SimDataset> {
    assemble_dataset(env, &draw_raw(scenario, env, dataset)?, r)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEstimate {
    pub name: String,
    pub truth: f64,
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

impl ParamEstimate {
    pub fn covered(&self) -> bool {
        self.lower <= self.truth && self.truth <= self.upper
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSummary {
    pub rmse: f64,
    pub crps: f64,
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOutcome {
    pub mode: ModelMode,
    pub dic: Dic,
    pub mode_theta: Vec<f64>,
    pub params: Vec<ParamEstimate>,
    pub field: Option<FieldSummary>,
    /// Squared error per node, averaged over replicates.
    #[serde(skip)]
    pub node_sq_error: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetOutcome {
    pub r: usize,
    pub dataset: usize,
    pub fits: Vec<FitOutcome>,
    /// `(model, message)` for fits that failed.
    pub failures: Vec<(ModelMode, String)>,
}

impl DatasetOutcome {
    pub fn fit(&self, mode: ModelMode) -> Option<&FitOutcome> {
        self.fits.iter().find(|f| f.mode == mode)
    }

    /// `DIC_S − DIC_NS` when both fits succeeded.
    pub fn delta_dic(&self) -> Option<f64> {
        Some(self.fit(ModelMode::Stationary)?.dic.dic - self.fit(ModelMode::Nonstationary)?.dic.dic)
    }
}

/// Fits one model class to a synthetic dataset and scores it against truth.
pub fn fit_dataset(
    scenario: &SimScenario,
    env: &SimEnvironment,
    data: &SimDataset,
    mode: ModelMode,
    start: Option<Vec<f64>>,
) -> Result<FitOutcome> {
    let config = SpdeConfig::for_mode(mode, &env.setup.elevation);
    let model = ReplicateModel::new(
        env.setup.clone(),
        config,
        scenario.prior_for(mode),
        &data.observations,
        ModelOptions::default(),
    )?;
    let targets = if scenario.field_scores {
        model.node_targets()
    } else {
        Vec::new()
    };
    let opts = ExploreOptions {
        start,
        ..scenario.explore.clone()
    };
    let hp = explore_hyperposterior(&model, &targets, &opts)?;
    let r = model.replicates();
    let params = posterior_marginals(&hp)
        .into_iter()
        .filter_map(|m| {
            let truth = data.truth.value_of(&m.name, r)?;
            let (lower, upper) = m.interval();
            Some(ParamEstimate {
                name: m.name,
                truth,
                mean: m.mean,
                lower,
                upper,
            })
        })
        .collect();
    let (field, node_sq_error) = if scenario.field_scores {
        let preds = cached_predictions(&hp);
        let s = field_recovery_scores(&preds, &data.eta)?;
        let m = model.node_count();
        let node = (0..m)
            .map(|i| (0..r).map(|j| s.sq_error[j * m + i]).sum::<f64>() / r as f64)
            .collect();
        (
            Some(FieldSummary {
                rmse: s.rmse,
                crps: s.crps_avg,
                coverage: s.coverage,
            }),
            node,
        )
    } else {
        (None, Vec::new())
    };
    Ok(FitOutcome {
        mode,
        dic: dic(&hp, model.y())?,
        mode_theta: hp.mode.clone(),
        params,
        field,
        node_sq_error,
    })
}

/// Fits every requested class to the dataset for `r` replicates. The
/// non-stationary fit is started from the stationary mode when both run.
pub fn run_dataset(
    scenario: &SimScenario,
    env: &SimEnvironment,
    raw: &RawDraw,
    r: usize,
    dataset: usize,
) -> DatasetOutcome {
    let mut out = DatasetOutcome {
        r,
        dataset,
        fits: Vec::new(),
        failures: Vec::new(),
    };
    let data = match assemble_dataset(env, raw, r) {
        Ok(d) => d,
        Err(e) => {
            for &m in &scenario.fit_modes {
                out.failures.push((m, e.to_string()));
            }
            return out;
        }
    };
    let mut order = scenario.fit_modes.clone();
    order.sort_by_key(|m| matches!(m, ModelMode::Nonstationary));
    for mode in order {
        let start = match (mode, out.fit(ModelMode::Stationary)) {
            (ModelMode::Nonstationary, Some(s)) => {
                let t = &s.mode_theta;
                Some(vec![t[0], 0.0, t[1], 0.0, t[2]])
            }
            _ => None,
        };
        match fit_dataset(scenario, env, &data, mode, start) {
            Ok(f) => out.fits.push(f),
            Err(e) => out.failures.push((mode, e.to_string())),
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamCell {
    pub name: String,
    /// Mean of the true values (constant unless truth is drawn).
    pub truth: f64,
    /// Average posterior mean, and its 0.1/0.9 quantiles over datasets.
    pub mean: f64,
    pub q10: f64,
    pub q90: f64,
    /// Fraction of 95% intervals containing the truth.
    pub coverage: f64,
    /// RMSE of the posterior mean about the truth.
    pub rmse: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub r: usize,
    pub model: ModelMode,
    pub fits: usize,
    pub failures: usize,
    pub params: Vec<ParamCell>,
    pub field: Option<FieldSummary>,
}

impl CellSummary {
    pub fn param(&self, name: &str) -> Option<&ParamCell> {
        self.params.iter().find(|p| p.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DicSummary {
    pub r: usize,
    pub n: usize,
    pub mean: f64,
    pub q10: f64,
    pub q50: f64,
    pub q90: f64,
    /// Fraction of datasets where the ΔDIC > 10 rule picks the wrong class.
    pub misclassification: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeMap {
    pub r: usize,
    pub rmse_stationary: Vec<f64>,
    pub rmse_nonstationary: Vec<f64>,
    /// Spearman correlation of `RMSE_S − RMSE_NS` with elevation.
    pub rank_correlation: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyReport {
    pub schema_version: u32,
    pub scenario: SimScenario,
    pub station_count: usize,
    pub node_count: usize,
    pub cells: Vec<CellSummary>,
    pub delta_dic: Vec<DicSummary>,
    pub node_maps: Vec<NodeMap>,
    pub datasets: Vec<DatasetOutcome>,
    #[serde(skip)]
    pub nodes: Vec<([f64; 2], f64)>,
}

/// Empirical quantile with linear interpolation.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut k = 0;
    while k < idx.len() {
        let mut e = k;
        while e + 1 < idx.len() && v[idx[e + 1]] == v[idx[k]] {
            e += 1;
        }
        let avg = (k + e) as f64 / 2.0 + 1.0;
        for &i in &idx[k..=e] {
            r[i] = avg;
        }
        k = e + 1;
    }
    r
}

/// Spearman rank correlation (ties get average ranks).
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

fn summarize(scenario: &SimScenario, env: &SimEnvironment, datasets: Vec<DatasetOutcome>) -> StudyReport {
    let mut cells = Vec::new();
    let mut delta_dic = Vec::new();
    let mut node_maps = Vec::new();
    let m = env.setup.node_count();
    for &r in &scenario.replicates {
        let in_cell: Vec<&DatasetOutcome> = datasets.iter().filter(|d| d.r == r).collect();
        for &mode in &scenario.fit_modes {
            let fits: Vec<&FitOutcome> = in_cell.iter().filter_map(|d| d.fit(mode)).collect();
            let failures = in_cell
                .iter()
                .filter(|d| d.failures.iter().any(|f| f.0 == mode))
                .count();
            let mut names: Vec<String> = Vec::new();
            for f in &fits {
                for p in &f.params {
                    if !names.contains(&p.name) {
                        names.push(p.name.clone());
                    }
                }
            }
            let params = names
                .into_iter()
                .map(|name| {
                    let est: Vec<&ParamEstimate> = fits
                        .iter()
                        .filter_map(|f| f.params.iter().find(|p| p.name == name))
                        .collect();
                    let n = est.len() as f64;
                    let means = sorted(est.iter().map(|e| e.mean).collect());
                    ParamCell {
                        truth: est.iter().map(|e| e.truth).sum::<f64>() / n,
                        mean: means.iter().sum::<f64>() / n,
                        q10: quantile(&means, 0.1),
                        q90: quantile(&means, 0.9),
                        coverage: est.iter().filter(|e| e.covered()).count() as f64 / n,
                        rmse: (est.iter().map(|e| (e.mean - e.truth).powi(2)).sum::<f64>() / n).sqrt(),
                        n: est.len(),
                        name,
                    }
                })
                .collect();
            let field_fits: Vec<&FieldSummary> = fits.iter().filter_map(|f| f.field.as_ref()).collect();
            let field = (!field_fits.is_empty()).then(|| {
                let n = field_fits.len() as f64;
                FieldSummary {
                    rmse: field_fits.iter().map(|f| f.rmse).sum::<f64>() / n,
                    crps: field_fits.iter().map(|f| f.crps).sum::<f64>() / n,
                    coverage: field_fits.iter().map(|f| f.coverage).sum::<f64>() / n,
                }
            });
            cells.push(CellSummary {
                r,
                model: mode,
                fits: fits.len(),
                failures,
                params,
                field,
            });
        }
        let deltas = sorted(in_cell.iter().filter_map(|d| d.delta_dic()).collect());
        if !deltas.is_empty() {
            let wrong = |d: f64| match scenario.truth_mode {
                ModelMode::Nonstationary => d <= 10.0,
                ModelMode::Stationary => d > 10.0,
            };
            let n = deltas.len() as f64;
            delta_dic.push(DicSummary {
                r,
                n: deltas.len(),
                mean: deltas.iter().sum::<f64>() / n,
                q10: quantile(&deltas, 0.1),
                q50: quantile(&deltas, 0.5),
                q90: quantile(&deltas, 0.9),
                misclassification: deltas.iter().filter(|&&d| wrong(d)).count() as f64 / n,
            });
        }
        let both: Vec<(&FitOutcome, &FitOutcome)> = in_cell
            .iter()
            .filter_map(|d| Some((d.fit(ModelMode::Stationary)?, d.fit(ModelMode::Nonstationary)?)))
            .filter(|(s, n)| s.node_sq_error.len() == m && n.node_sq_error.len() == m)
            .collect();
        if !both.is_empty() {
            let k = both.len() as f64;
            let rmse = |second: bool| -> Vec<f64> {
                (0..m)
                    .map(|i| {
                        let total: f64 = both
                            .iter()
                            .map(|p| if second { p.1 } else { p.0 }.node_sq_error[i])
                            .sum();
                        (total / k).sqrt()
                    })
                    .collect()
            };
            let rs = rmse(false);
            let rn = rmse(true);
            let delta: Vec<f64> = rs.iter().zip(&rn).map(|(a, b)| a - b).collect();
            node_maps.push(NodeMap {
                r,
                rank_correlation: spearman(&delta, &env.setup.elevation.values),
                rmse_stationary: rs,
                rmse_nonstationary: rn,
            });
        }
    }
    StudyReport {
        schema_version: crate::lgm::SCHEMA_VERSION,
        scenario: scenario.clone(),
        station_count: env.stations.len(),
        node_count: m,
        cells,
        delta_dic,
        node_maps,
        datasets,
        nodes: env
            .setup
            .mesh
            .nodes
            .iter()
            .zip(&env.setup.elevation.values)
            .map(|(&p, &h)| (p, h))
            .collect(),
    }
}

/// Runs the whole study. `progress` sees every dataset outcome as it
/// completes (in arbitrary order); the report itself is ordered.
pub fn run_study_with(scenario: &SimScenario, progress: &(dyn Fn(&DatasetOutcome) + Sync)) -> Result<StudyReport> {
    let env = SimEnvironment::new(scenario)?;
    let outcomes: Vec<Vec<DatasetOutcome>> = (0..scenario.datasets)
        .into_par_iter()
        .map(|d| match draw_raw(scenario, &env, d) {
            Ok(raw) => scenario
                .replicates
                .iter()
                .map(|&r| {
                    let o = run_dataset(scenario, &env, &raw, r, d);
                    progress(&o);
                    o
                })
                .collect(),
            Err(e) => scenario
                .replicates
                .iter()
                .map(|&r| DatasetOutcome {
                    r,
                    dataset: d,
                    fits: Vec::new(),
                    failures: scenario.fit_modes.iter().map(|&m| (m, e.to_string())).collect(),
                })
                .collect(),
        })
        .collect();
    let mut flat: Vec<DatasetOutcome> = outcomes.into_iter().flatten().collect();
    flat.sort_by_key(|o| (o.r, o.dataset));
    Ok(summarize(scenario, &env, flat))
}

pub fn run_study(scenario: &SimScenario) -> Result<StudyReport> {
    run_study_with(scenario, &|_| {})
}

fn model_name(m: ModelMode) -> &'static str {
    match m {
        ModelMode::Stationary => "stationary",
        ModelMode::Nonstationary => "nonstationary",
    }
}

impl StudyReport {
    pub fn cell(&self, r: usize, model: ModelMode) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.r == r && c.model == model)
    }

    pub fn dic_summary(&self, r: usize) -> Option<&DicSummary> {
        self.delta_dic.iter().find(|d| d.r == r)
    }

    pub fn node_map(&self, r: usize) -> Option<&NodeMap> {
        self.node_maps.iter().find(|d| d.r == r)
    }

    /// Writes `fig8.csv` … `fig12.csv` into `dir`, each preceded by the
    /// comment lines.
    pub fn write_tables(&self, dir: &Path, comments: &[String]) -> Result<Vec<std::path::PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        let mut table = |name: &str, header: &[&str], rows: Vec<Vec<String>>| -> Result<()> {
            let path = dir.join(name);
            let mut f = std::io::BufWriter::new(std::fs::File::create(&path)?);
            for c in comments {
                writeln!(f, "# {c}")?;
            }
            let mut w = csv::Writer::from_writer(f);
            w.write_record(header)?;
            for row in rows {
                w.write_record(row)?;
            }
            w.flush()?;
            written.push(path);
            Ok(())
        };
        table(
            "fig8.csv",
            &[
                "r",
                "n",
                "delta_dic_mean",
                "delta_dic_q10",
                "delta_dic_q50",
                "delta_dic_q90",
                "misclassification",
            ],
            self.delta_dic
                .iter()
                .map(|d| {
                    vec![
                        d.r.to_string(),
                        d.n.to_string(),
                        fmt(d.mean),
                        fmt(d.q10),
                        fmt(d.q50),
                        fmt(d.q90),
                        fmt(d.misclassification),
                    ]
                })
                .collect(),
        )?;
        let param_rows = |f: &dyn Fn(&CellSummary, &ParamCell) -> Vec<String>| -> Vec<Vec<String>> {
            self.cells
                .iter()
                .flat_map(|c| c.params.iter().map(move |p| (c, p)))
                .map(|(c, p)| {
                    let mut row = vec![c.r.to_string(), model_name(c.model).to_string(), p.name.clone()];
                    row.extend(f(c, p));
                    row
                })
                .collect()
        };
        table(
            "fig9.csv",
            &["r", "model", "parameter", "truth", "mean", "q10", "q90", "n"],
            param_rows(&|_, p| vec![fmt(p.truth), fmt(p.mean), fmt(p.q10), fmt(p.q90), p.n.to_string()]),
        )?;
        table(
            "fig10.csv",
            &["r", "model", "parameter", "coverage", "rmse", "n"],
            param_rows(&|_, p| vec![fmt(p.coverage), fmt(p.rmse), p.n.to_string()]),
        )?;
        table(
            "fig11.csv",
            &["r", "model", "rmse", "crps", "coverage", "fits", "failures"],
            self.cells
                .iter()
                .map(|c| {
                    let f = c.field.clone().unwrap_or(FieldSummary {
                        rmse: f64::NAN,
                        crps: f64::NAN,
                        coverage: f64::NAN,
                    });
                    vec![
                        c.r.to_string(),
                        model_name(c.model).to_string(),
                        fmt(f.rmse),
                        fmt(f.crps),
                        fmt(f.coverage),
                        c.fits.to_string(),
                        c.failures.to_string(),
                    ]
                })
                .collect(),
        )?;
        table(
            "fig12.csv",
            &[
                "r",
                "node",
                "x_km",
                "y_km",
                "elevation_km",
                "rmse_stationary",
                "rmse_nonstationary",
                "delta_rmse",
            ],
            self.node_maps
                .iter()
                .flat_map(|map| {
                    self.nodes.iter().enumerate().map(move |(i, (p, h))| {
                        vec![
                            map.r.to_string(),
                            i.to_string(),
                            fmt(p[0]),
                            fmt(p[1]),
                            fmt(*h),
                            fmt(map.rmse_stationary[i]),
                            fmt(map.rmse_nonstationary[i]),
                            fmt(map.rmse_stationary[i] - map.rmse_nonstationary[i]),
                        ]
                    })
                })
                .collect(),
        )?;
        Ok(written)
    }
}
