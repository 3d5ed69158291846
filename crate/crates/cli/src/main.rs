mod manifest;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use spatial_spde::eval::{dic, fmt, loo_cv, CvMode, Dic, FitSpec, ScoreSummary};
use spatial_spde::lgm::{
    fitted_observations, predict, ExploreOptions, FitSummary, HyperPosterior, ModelOptions, ObservationSet, Prediction,
    ReplicateModel, SpatialSetup, Target,
};
use spatial_spde::mesh::MeshFile;
use spatial_spde::prior::{
    reference_inputs, reference_prior, solve_nonstationary_prior, solve_stationary_prior, CoherenceInputs,
    GaussianPrior, QuantileTargets,
};
use spatial_spde::sim::{assemble_dataset, draw_raw, run_study_with, SimEnvironment, SimScenario, StudyReport, Truth};
use spatial_spde::spde::{CovariateField, ModelMode, SpdeConfig};

use manifest::{sha256_hex, InputDigest, Manifest};

#[derive(Parser)]
#[command(
    name = "spde",
    version,
    about = "Replicate SPDE models for spatial data: fit, predict, cross-validate, simulate"
)]
struct Cli {
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, env = "SPDE_JOBS", default_value_t = 0)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Prior elicitation.
    Prior {
        #[command(subcommand)]
        action: PriorAction,
    },
    /// Fit a replicate model and write parameter summaries.
    Fit(FitArgs),
    /// Predict the linear predictor at new locations or at the mesh nodes.
    Predict(PredictArgs),
    /// Leave-one-station-out cross-validation.
    Cv(CvArgs),
    /// Write synthetic datasets drawn from a scenario.
    Simulate(SimulateArgs),
    /// Run a simulation study and write its report and tables.
    Study(StudyArgs),
}

#[derive(Subcommand)]
enum PriorAction {
    /// Solve quantile targets and coherence inputs for prior parameters.
    Solve(PriorSolveArgs),
}

#[derive(Args)]
struct PriorSolveArgs {
    /// Elicitation file; the reference inputs are used when omitted.
    #[arg(long)]
    prior: Option<PathBuf>,
    /// Output directory; JSON goes to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Mode {
    Stationary,
    Nonstationary,
}

impl From<Mode> for ModelMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Stationary => ModelMode::Stationary,
            Mode::Nonstationary => ModelMode::Nonstationary,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum CvModeArg {
    Refit,
    Fixed,
}

#[derive(Args)]
struct ModelArgs {
    /// Mesh JSON (`nodes`, `triangles`, optional `elevation`).
    #[arg(long)]
    mesh: PathBuf,
    /// Observation CSV: station_id,x_km,y_km,elevation_km,year,value_m.
    #[arg(long)]
    obs: PathBuf,
    /// Nodewise covariate CSV (node_index,value); overrides the mesh elevation.
    #[arg(long)]
    covariate: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "nonstationary")]
    mode: Mode,
    /// Explicit prior or elicitation JSON; the reference prior when omitted.
    #[arg(long)]
    prior: Option<PathBuf>,
    /// Recorded in the manifest; inference itself is deterministic.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Hyperposterior written by `fit`; the model is refitted when omitted.
    #[arg(long)]
    fit: Option<PathBuf>,
    /// Target CSV: x_km,y_km,elevation_km,year. Defaults to every node and year.
    #[arg(long)]
    at: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CvArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_enum, default_value = "refit")]
    cv_mode: CvModeArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Preset {
    DeskNs,
    DeskS,
    FullNs,
    FullS,
    Calibration,
}

#[derive(Args)]
struct ScenarioArgs {
    /// Scenario JSON.
    #[arg(long, conflicts_with = "preset")]
    scenario: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the number of datasets.
    #[arg(long)]
    datasets: Option<usize>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    /// Replicates per dataset; the scenario maximum when omitted.
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct StudyArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug)]
struct CliError {
    code: u8,
    message: String,
}

impl From<spatial_spde::Error> for CliError {
    fn from(e: spatial_spde::Error) -> Self {
        let code = if matches!(e, spatial_spde::Error::Elicitation(_)) {
            2
        } else {
            1
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        spatial_spde::Error::from(e).into()
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        spatial_spde::Error::from(e).into()
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        spatial_spde::Error::from(e).into()
    }
}

fn fail(message: impl Into<String>) -> CliError {
    CliError {
        code: 1,
        message: message.into(),
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.jobs > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.jobs).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::Prior {
            action: PriorAction::Solve(a),
        } => prior_solve(&a),
        Command::Fit(a) => fit(&a),
        Command::Predict(a) => predict_cmd(&a),
        Command::Cv(a) => cv(&a),
        Command::Simulate(a) => simulate(&a),
        Command::Study(a) => study(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn read_input(path: &Path, role: &str) -> CliResult<(Vec<u8>, InputDigest)> {
    let bytes = fs::read(path).map_err(|e| fail(format!("cannot read {} ({}): {e}", role, path.display())))?;
    let digest = InputDigest {
        role: role.into(),
        sha256: sha256_hex(&bytes),
    };
    Ok((bytes, digest))
}

fn create_out_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| fail(format!("cannot create output directory {}: {e}", dir.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| fail(format!("cannot write {}: {e}", path.display())))
}

fn csv_file(path: &Path, manifest: &Manifest) -> CliResult<csv::Writer<fs::File>> {
    let mut f = fs::File::create(path).map_err(|e| fail(format!("cannot write {}: {e}", path.display())))?;
    for line in manifest.comment_lines() {
        writeln!(f, "# {line}")?;
    }
    Ok(csv::Writer::from_writer(f))
}

// ---------------------------------------------------------------- prior

/// Elicitation document: shared quantile targets, and either one set of
/// coherence inputs or a list of labelled cases.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct Elicitation {
    targets: QuantileTargets,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    coherence: Option<CoherenceInputs>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    cases: Vec<ElicitationCase>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ElicitationCase {
    label: String,
    coherence: CoherenceInputs,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum PriorInput {
    Explicit(GaussianPrior),
    Elicited(Elicitation),
}

#[derive(Debug, Serialize)]
struct PriorCase {
    label: String,
    mu_kappa: f64,
    sigma2_kappa: f64,
    mu_tau: f64,
    sigma2_tau: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    sigma2_tau_h: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    sigma2_kappa_h: Option<f64>,
    prior: GaussianPrior,
}

fn solve_cases(e: &Elicitation) -> CliResult<Vec<PriorCase>> {
    let st = solve_stationary_prior(&e.targets)?;
    let mut cases: Vec<(String, Option<CoherenceInputs>)> = Vec::new();
    if e.cases.is_empty() {
        cases.push(("default".into(), e.coherence));
    } else {
        if e.coherence.is_some() {
            return Err(fail("elicitation file has both `coherence` and `cases`"));
        }
        cases.extend(e.cases.iter().map(|c| (c.label.clone(), Some(c.coherence))));
    }
    cases
        .into_iter()
        .map(|(label, coh)| {
            let prior = match coh {
                Some(c) => solve_nonstationary_prior(&st, &c)?,
                None => GaussianPrior::stationary(&st),
            };
            Ok(PriorCase {
                label,
                mu_kappa: st.mu_kappa,
                sigma2_kappa: st.sigma2_kappa,
                mu_tau: st.mu_tau,
                sigma2_tau: st.sigma2_tau,
                sigma2_tau_h: prior.theta_tau.get(1).map(|p| p.variance),
                sigma2_kappa_h: prior.theta_kappa.get(1).map(|p| p.variance),
                prior,
            })
        })
        .collect()
}

#[derive(Serialize)]
struct PriorDocument<'a> {
    manifest: &'a Manifest,
    cases: &'a [PriorCase],
}

#[derive(Serialize, Deserialize)]
struct PriorFile {
    manifest: Manifest,
    #[serde(flatten)]
    prior: GaussianPrior,
}

fn prior_solve(a: &PriorSolveArgs) -> CliResult<()> {
    let (elicitation, inputs) = match &a.prior {
        Some(p) => {
            let (bytes, d) = read_input(p, "prior")?;
            (serde_json::from_slice::<Elicitation>(&bytes)?, vec![d])
        }
        None => {
            let (targets, coherence) = reference_inputs();
            (
                Elicitation {
                    targets,
                    coherence: Some(coherence),
                    cases: Vec::new(),
                },
                Vec::new(),
            )
        }
    };
    let cases = solve_cases(&elicitation)?;
    let manifest = Manifest::new("prior solve", &elicitation, None, inputs);
    let doc = PriorDocument {
        manifest: &manifest,
        cases: &cases,
    };
    match &a.out {
        None => {
            println!("{}", serde_json::to_string_pretty(&doc)?);
        }
        Some(dir) => {
            create_out_dir(dir)?;
            write_json(&dir.join("priors.json"), &doc)?;
            for c in &cases {
                let file = PriorFile {
                    manifest: manifest.clone(),
                    prior: c.prior.clone(),
                };
                write_json(&dir.join(format!("prior_{}.json", c.label)), &file)?;
            }
        }
    }
    Ok(())
}

fn load_prior(path: Option<&Path>, mode: ModelMode) -> CliResult<(GaussianPrior, Vec<InputDigest>)> {
    let (prior, inputs) = match path {
        None => (reference_prior(), Vec::new()),
        Some(p) => {
            let (bytes, d) = read_input(p, "prior")?;
            let prior = match serde_json::from_slice::<PriorInput>(&bytes).map_err(|e| {
                fail(format!(
                    "{} is neither a prior nor an elicitation file: {e}",
                    p.display()
                ))
            })? {
                PriorInput::Explicit(g) => g,
                PriorInput::Elicited(e) => {
                    let cases = solve_cases(&e)?;
                    if cases.len() != 1 {
                        return Err(fail("a prior file for fitting must describe exactly one case"));
                    }
                    cases.into_iter().next().map(|c| c.prior).expect("one case")
                }
            };
            (prior, vec![d])
        }
    };
    prior.validate()?;
    let prior = match mode {
        ModelMode::Stationary => prior.to_stationary(),
        ModelMode::Nonstationary => {
            if prior.theta_tau.len() != 2 || prior.theta_kappa.len() != 2 {
                return Err(fail(
                    "the non-stationary model needs a prior with one elevation weight for τ and κ",
                ));
            }
            prior
        }
    };
    Ok((prior, inputs))
}

// ---------------------------------------------------------------- model inputs

struct Loaded {
    spec: FitSpec,
    data: ObservationSet,
    inputs: Vec<InputDigest>,
    settings: ModelSettings,
}

#[derive(Serialize)]
struct ModelSettings {
    mode: Mode,
    constrained: bool,
    explore: ExploreOptions,
}

fn load_model(a: &ModelArgs) -> CliResult<Loaded> {
    let (mesh_bytes, mesh_digest) = read_input(&a.mesh, "mesh")?;
    let mesh_file: MeshFile = serde_json::from_slice(&mesh_bytes)
        .map_err(|e| fail(format!("invalid mesh file {}: {e}", a.mesh.display())))?;
    let (mesh, elevation) = mesh_file.into_parts();
    let mut inputs = vec![mesh_digest];
    let covariate = match &a.covariate {
        Some(p) => {
            let (_, d) = read_input(p, "covariate")?;
            inputs.push(d);
            CovariateField::read_csv(p, mesh.node_count())?
        }
        None => CovariateField::new(
            elevation.ok_or_else(|| fail("no covariate: pass --covariate or add `elevation` to the mesh file"))?,
        )?,
    };
    if covariate.values.len() != mesh.node_count() {
        return Err(fail(format!(
            "covariate has {} values for {} mesh nodes",
            covariate.values.len(),
            mesh.node_count()
        )));
    }
    let setup: Arc<SpatialSetup> = SpatialSetup::new(mesh, covariate)?;
    let (obs_bytes, obs_digest) = read_input(&a.obs, "obs")?;
    let data =
        ObservationSet::from_reader(obs_bytes.as_slice()).map_err(|e| fail(format!("{}: {e}", a.obs.display())))?;
    inputs.push(obs_digest);
    let mode: ModelMode = a.mode.into();
    let (prior, prior_inputs) = load_prior(a.prior.as_deref(), mode)?;
    inputs.extend(prior_inputs);
    let settings = ModelSettings {
        mode: a.mode,
        constrained: true,
        explore: ExploreOptions::default(),
    };
    let spec = FitSpec {
        config: SpdeConfig::for_mode(mode, &setup.elevation),
        setup,
        prior,
        model_options: ModelOptions {
            constrained: settings.constrained,
        },
        explore: settings.explore.clone(),
    };
    Ok(Loaded {
        spec,
        data,
        inputs,
        settings,
    })
}

// ---------------------------------------------------------------- fit

#[derive(Serialize)]
struct FitDocument<'a> {
    manifest: &'a Manifest,
    summary: &'a FitSummary,
    dic: &'a Dic,
}

#[derive(Serialize, Deserialize)]
struct HyperPosteriorFile {
    manifest: Manifest,
    hyperposterior: HyperPosterior,
}

fn write_fitted(
    path: &Path,
    manifest: &Manifest,
    model: &ReplicateModel,
    data: &ObservationSet,
    preds: &[Prediction],
) -> CliResult<()> {
    let mut w = csv_file(path, manifest)?;
    w.write_record(["station_id", "year", "observed", "mean", "sd_eta", "sd_y"])?;
    for (o, p) in model.observations().iter().zip(preds) {
        w.write_record([
            data.stations[o.station].id.clone(),
            data.years[o.year].clone(),
            fmt(o.value),
            fmt(p.mean),
            fmt(p.sd_eta),
            fmt(p.sd_y),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn fit(a: &FitArgs) -> CliResult<()> {
    let loaded = load_model(&a.model)?;
    let manifest = Manifest::new("fit", &loaded.settings, a.model.seed, loaded.inputs.clone());
    let (model, hp) = loaded.spec.fit(&loaded.data, &[])?;
    let summary = FitSummary::new(&hp);
    let d = dic(&hp, model.y())?;
    create_out_dir(&a.out)?;
    write_json(
        &a.out.join("summary.json"),
        &FitDocument {
            manifest: &manifest,
            summary: &summary,
            dic: &d,
        },
    )?;
    write_fitted(
        &a.out.join("fitted.csv"),
        &manifest,
        &model,
        &loaded.data,
        &fitted_observations(&hp),
    )?;
    write_json(
        &a.out.join("hyperposterior.json"),
        &HyperPosteriorFile {
            manifest,
            hyperposterior: hp,
        },
    )?;
    Ok(())
}

// ---------------------------------------------------------------- predict

#[derive(Debug, Deserialize)]
struct TargetRow {
    x_km: f64,
    y_km: f64,
    elevation_km: f64,
    year: String,
}

struct Located {
    location: [f64; 2],
    elevation: f64,
    year: String,
    target: Target,
}

fn read_targets(path: &Path, model: &ReplicateModel, data: &ObservationSet) -> CliResult<Vec<Located>> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut rows = Vec::new();
    for rec in rdr.deserialize::<TargetRow>() {
        let row = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            fail(format!("{} line {line}: {e}", path.display()))
        })?;
        rows.push(row);
    }
    let locs: Vec<[f64; 2]> = rows.iter().map(|r| [r.x_km, r.y_km]).collect();
    let proj = model.setup().project(&locs);
    proj.require_complete(&locs)?;
    rows.into_iter()
        .enumerate()
        .map(|(i, r)| {
            let year = data
                .years
                .iter()
                .position(|y| *y == r.year)
                .ok_or_else(|| fail(format!("target year {} has no observations", r.year)))?;
            if !r.elevation_km.is_finite() {
                return Err(fail(format!("target {} has a non-finite elevation", i + 1)));
            }
            Ok(Located {
                location: locs[i],
                elevation: r.elevation_km,
                year: r.year,
                target: Target {
                    year,
                    weights: proj.row(i),
                    elevation: r.elevation_km,
                },
            })
        })
        .collect()
}

fn predict_cmd(a: &PredictArgs) -> CliResult<()> {
    let mut loaded = load_model(&a.model)?;
    let model = loaded.spec.model(&loaded.data)?;
    let hp = match &a.fit {
        Some(p) => {
            let (bytes, d) = read_input(p, "fit")?;
            loaded.inputs.push(d);
            let file: HyperPosteriorFile = serde_json::from_slice(&bytes)?;
            if file.hyperposterior.names != model.theta_names() {
                return Err(fail(format!(
                    "hyperposterior parameters {:?} do not match the model ({:?})",
                    file.hyperposterior.names,
                    model.theta_names()
                )));
            }
            file.hyperposterior
        }
        None => spatial_spde::lgm::explore_hyperposterior(&model, &[], &loaded.spec.explore)?,
    };
    let located = match &a.at {
        Some(p) => {
            let (_, d) = read_input(p, "at")?;
            loaded.inputs.push(d);
            read_targets(p, &model, &loaded.data)?
        }
        None => {
            let nodes = &model.setup().mesh.nodes;
            let m = nodes.len();
            model
                .node_targets()
                .into_iter()
                .enumerate()
                .map(|(k, t)| Located {
                    location: nodes[k % m],
                    elevation: t.elevation,
                    year: loaded.data.years[t.year].clone(),
                    target: t,
                })
                .collect()
        }
    };
    let targets: Vec<Target> = located.iter().map(|l| l.target.clone()).collect();
    let preds = predict(&hp, &model, &targets)?;
    let manifest = Manifest::new("predict", &loaded.settings, a.model.seed, loaded.inputs);
    create_out_dir(&a.out)?;
    let mut w = csv_file(&a.out.join("predictions.csv"), &manifest)?;
    w.write_record(["x_km", "y_km", "elevation_km", "year", "mean", "sd_eta", "sd_y"])?;
    for (l, p) in located.iter().zip(&preds) {
        w.write_record([
            fmt(l.location[0]),
            fmt(l.location[1]),
            fmt(l.elevation),
            l.year.clone(),
            fmt(p.mean),
            fmt(p.sd_eta),
            fmt(p.sd_y),
        ])?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------- cv

#[derive(Serialize)]
struct CvSettings<'a> {
    model: &'a ModelSettings,
    cv_mode: CvMode,
}

#[derive(Serialize)]
struct CvDocument<'a> {
    manifest: &'a Manifest,
    cv_mode: CvMode,
    folds: usize,
    skipped_stations: &'a [String],
    rmse_per_year: &'a [(String, f64)],
    summary: ScoreSummary,
}

fn cv(a: &CvArgs) -> CliResult<()> {
    let loaded = load_model(&a.model)?;
    let mode = match a.cv_mode {
        CvModeArg::Refit => CvMode::Refit,
        CvModeArg::Fixed => CvMode::Fixed,
    };
    let settings = CvSettings {
        model: &loaded.settings,
        cv_mode: mode,
    };
    let manifest = Manifest::new("cv", &settings, a.model.seed, loaded.inputs.clone());
    let report = loo_cv(&loaded.spec, &loaded.data, mode)?;
    for s in &report.skipped_stations {
        eprintln!("warning: station {s} has no observations and was skipped");
    }
    create_out_dir(&a.out)?;
    let path = a.out.join("scores.csv");
    let f = fs::File::create(&path).map_err(|e| fail(format!("cannot write {}: {e}", path.display())))?;
    report.write_csv(f, &manifest.comment_lines())?;
    write_json(
        &a.out.join("cv_summary.json"),
        &CvDocument {
            manifest: &manifest,
            cv_mode: mode,
            folds: report.folds,
            skipped_stations: &report.skipped_stations,
            rmse_per_year: &report.rmse_per_year,
            summary: report.summary(),
        },
    )?;
    Ok(())
}

// ---------------------------------------------------------------- simulate / study

fn load_scenario(a: &ScenarioArgs) -> CliResult<(SimScenario, Vec<InputDigest>)> {
    let (mut sc, inputs) = match (&a.scenario, a.preset) {
        (Some(p), _) => {
            let (bytes, d) = read_input(p, "scenario")?;
            let sc: SimScenario =
                serde_json::from_slice(&bytes).map_err(|e| fail(format!("invalid scenario {}: {e}", p.display())))?;
            (sc, vec![d])
        }
        (None, Some(preset)) => (
            match preset {
                Preset::DeskNs => SimScenario::desk(ModelMode::Nonstationary),
                Preset::DeskS => SimScenario::desk(ModelMode::Stationary),
                Preset::FullNs => SimScenario::full(ModelMode::Nonstationary),
                Preset::FullS => SimScenario::full(ModelMode::Stationary),
                Preset::Calibration => SimScenario::calibration(),
            },
            Vec::new(),
        ),
        (None, None) => return Err(fail("pass --scenario or --preset")),
    };
    if let Some(s) = a.seed {
        sc.seed = s;
    }
    if let Some(n) = a.datasets {
        sc.datasets = n;
    }
    sc.validate()?;
    Ok((sc, inputs))
}

#[derive(Serialize, Deserialize)]
struct MeshDocument {
    manifest: Manifest,
    #[serde(flatten)]
    mesh: MeshFile,
}

#[derive(Serialize)]
struct TruthDocument<'a> {
    manifest: &'a Manifest,
    dataset: usize,
    replicates: usize,
    truth: &'a Truth,
}

fn simulate(a: &SimulateArgs) -> CliResult<()> {
    let (mut sc, inputs) = load_scenario(&a.scenario)?;
    let r = a.replicates.unwrap_or_else(|| sc.max_replicates());
    if r == 0 {
        return Err(fail("--replicates must be positive"));
    }
    if r > sc.max_replicates() {
        sc.replicates.push(r);
    }
    let env = SimEnvironment::new(&sc)?;
    let manifest = Manifest::new("simulate", &(&sc, r), Some(sc.seed), inputs);
    let datasets = (0..sc.datasets)
        .into_par_iter()
        .map(|k| -> spatial_spde::Result<_> { assemble_dataset(&env, &draw_raw(&sc, &env, k)?, r) })
        .collect::<spatial_spde::Result<Vec<_>>>()?;
    create_out_dir(&a.out)?;
    let mesh = &env.setup.mesh;
    write_json(
        &a.out.join("mesh.json"),
        &MeshDocument {
            manifest: manifest.clone(),
            mesh: MeshFile::from_mesh(mesh, Some(env.setup.elevation.values.clone())),
        },
    )?;
    let h = &env.setup.elevation.values;
    let m = mesh.node_count();
    for (k, ds) in datasets.iter().enumerate() {
        let path = a.out.join(format!("observations_{k:03}.csv"));
        let f = fs::File::create(&path).map_err(|e| fail(format!("cannot write {}: {e}", path.display())))?;
        ds.observations.write_csv(f, &manifest.comment_lines())?;
        write_json(
            &a.out.join(format!("truth_{k:03}.json")),
            &TruthDocument {
                manifest: &manifest,
                dataset: k,
                replicates: r,
                truth: &ds.truth,
            },
        )?;
        let mut w = csv_file(&a.out.join(format!("truth_nodes_{k:03}.csv")), &manifest)?;
        w.write_record(["node", "x_km", "y_km", "elevation_km", "year", "field", "eta"])?;
        for (idx, (x, eta)) in ds.fields.iter().zip(&ds.eta).enumerate() {
            let (j, i) = (idx / m, idx % m);
            w.write_record([
                i.to_string(),
                fmt(mesh.nodes[i][0]),
                fmt(mesh.nodes[i][1]),
                fmt(h[i]),
                ds.observations.years[j].clone(),
                fmt(*x),
                fmt(*eta),
            ])?;
        }
        w.flush()?;
    }
    Ok(())
}

#[derive(Serialize)]
struct StudyDocument<'a> {
    manifest: &'a Manifest,
    report: &'a StudyReport,
}

fn study(a: &StudyArgs) -> CliResult<()> {
    let (sc, inputs) = load_scenario(&a.scenario)?;
    let manifest = Manifest::new("study", &sc, Some(sc.seed), inputs);
    create_out_dir(&a.out)?;
    let total = sc.datasets * sc.replicates.len();
    let done = std::sync::atomic::AtomicUsize::new(0);
    let progress = |o: &spatial_spde::sim::DatasetOutcome| {
        let n = done.fetch_add(1, std::sync::atomic::Ordering::Relaxed) + 1;
        let failed = if o.failures.is_empty() {
            String::new()
        } else {
            format!(" ({} failed fits)", o.failures.len())
        };
        eprintln!("[{n}/{total}] dataset {} r={}{failed}", o.dataset, o.r);
    };
    let report = run_study_with(&sc, &progress)?;
    write_json(
        &a.out.join("study.json"),
        &StudyDocument {
            manifest: &manifest,
            report: &report,
        },
    )?;
    report.write_tables(&a.out, &manifest.comment_lines())?;
    Ok(())
}
