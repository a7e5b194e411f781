//! Subcommands and report emission.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::Serialize;
use serde_json::{json, Value};

use retro_core::density_estimation::KdeMode;
use retro_core::distributions::{GaussianMixture, InitialDistribution};
use retro_core::forward_sim::{
    check_moment_bound, empirical_moments, euler_maruyama_path, parse_snapshots_csv, sample_initial,
    write_snapshots_csv, ParticleEnsemble, SnapshotPolicy,
};
use retro_core::inverse_source::{
    heat_source_location, injectivity_probe, reconstruct_dirac_affine, reconstruct_dirac_affine_mc,
    reconstruct_dirac_search, small_horizon_check, terminal_cloud, AffineDrift, ProbeConfig, TerminalMetric, Verdict,
};
use retro_core::linalg_ode::TimeGrid;
use retro_core::mckean_sim::{
    check_integrability_proxy, ou_reference, simulate_reversal_analytic, simulate_reversal_selfconsistent,
    verify_representation, write_diagnostics_csv, ReversalConfig, ReversalRun,
};
use retro_core::models::{
    estimate_lipschitz, BoxDomain, Diffusion, DiffusionModel, PiecewiseHomogeneousModel, ScalarDispersion,
};
use retro_core::ou_analytic::{
    fourier_forward, fourier_invert_terminal, fourier_ode_solve, ou_marginal, FourierSolution, InversionConfig, OuModel,
    OuSolution, Transform,
};
use retro_core::rng::{derive_seed, stream_rng, PURPOSE_PROBES, PURPOSE_REFERENCE};
use retro_core::stats::{energy_distance, ks_statistic};

use crate::config::{
    ConfigError, DispersionKind, ExpectVerdict, ExperimentConfig, InvertRoute, KdeKind, LawSpec, MetricKind, ModelSpec,
    ReverseMode,
};

pub const SPEC_VERSION: &str = "1.0";

const DATA_TAG: u64 = 0xda7a;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0} already exists; pass --force to overwrite")]
    Exists(PathBuf),
    #[error(transparent)]
    Core(#[from] retro_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Usage(_) | Self::Exists(_) => 2,
            Self::Io { .. } | Self::Core(_) => 3,
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Forward,
    Reverse,
    OuVerify,
    Invert,
    MomentCheck,
    Injectivity,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Self::Forward => "forward",
            Self::Reverse => "reverse",
            Self::OuVerify => "ou-verify",
            Self::Invert => "invert",
            Self::MomentCheck => "moment-check",
            Self::Injectivity => "injectivity",
        }
    }

    /// Files written under the output directory, report first.
    pub fn outputs(self) -> Vec<String> {
        let n = self.name();
        let mut v = vec![format!("{n}_report.json"), format!("{n}_metadata.json")];
        match self {
            Self::Forward => v.push("forward_snapshots.csv".into()),
            Self::Reverse => {
                v.push("reverse_snapshots.csv".into());
                v.push("reverse_diagnostics.csv".into());
            }
            _ => {}
        }
        v
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub output: Option<PathBuf>,
    pub force: bool,
    pub threads: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub relation: &'static str,
    pub threshold: f64,
    pub pass: bool,
}

impl Check {
    fn below(name: &str, value: f64, threshold: f64) -> Self {
        Self { name: name.into(), value, relation: "<", threshold, pass: value < threshold }
    }

    fn at_most(name: &str, value: f64, threshold: f64) -> Self {
        Self { name: name.into(), value, relation: "<=", threshold, pass: value <= threshold }
    }

    fn above(name: &str, value: f64, threshold: f64) -> Self {
        Self { name: name.into(), value, relation: ">", threshold, pass: value > threshold }
    }

    fn flag(name: &str, pass: bool) -> Self {
        Self { name: name.into(), value: pass as u8 as f64, relation: "==", threshold: 1.0, pass }
    }
}

/// Result of one subcommand before anything touches the disk.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub command: Command,
    pub pass: bool,
    pub report: Value,
    pub files: Vec<(String, Vec<u8>)>,
}

struct Body {
    checks: Vec<Check>,
    details: Value,
    extra: Vec<(String, Vec<u8>)>,
}

fn build_law(spec: &LawSpec) -> Result<InitialDistribution, CliError> {
    match spec {
        LawSpec::Dirac { points, weights } => Ok(InitialDistribution::dirac_list(points.clone(), weights.clone())?),
        LawSpec::Gaussian { mean, covariance } => Ok(InitialDistribution::Gaussian(GaussianMixture::gaussian(
            DVector::from_vec(mean.clone()),
            covariance.clone(),
        )?)),
        LawSpec::Forward => Err(usage("`forward` laws need an OU model and an [initial] law")),
    }
}

fn scalar_dispersion(kind: DispersionKind, sigma: f64, clip: f64) -> ScalarDispersion {
    match kind {
        DispersionKind::Constant => ScalarDispersion::Constant(sigma),
        DispersionKind::SqrtOnePlusSquare => ScalarDispersion::SqrtOnePlusSquare { scale: sigma, clip },
    }
}

fn build_model(spec: &ModelSpec, horizon: f64) -> Result<Arc<dyn Diffusion>, CliError> {
    Ok(match spec {
        ModelSpec::Heat { dim, scale } => Arc::new(DiffusionModel::heat(*dim, *scale)),
        ModelSpec::Ou { c, sigma } => Arc::new(OuModel::constant(c.clone(), sigma.clone())?),
        ModelSpec::Affine { b0, b1, sigma } => {
            Arc::new(DiffusionModel::affine(b0.as_slice().to_vec(), b1.clone(), sigma.clone())?)
        }
        ModelSpec::SinDrift { amplitude, dispersion, sigma, clip } => {
            Arc::new(DiffusionModel::sin_drift(*amplitude, scalar_dispersion(*dispersion, *sigma, *clip)))
        }
        ModelSpec::LinearDrift { rate, dispersion, sigma, clip } => {
            Arc::new(DiffusionModel::linear_drift(*rate, scalar_dispersion(*dispersion, *sigma, *clip)))
        }
        ModelSpec::Piecewise { breakpoints, rates, sigmas } => {
            let pieces: Vec<Arc<dyn Diffusion>> = rates
                .iter()
                .zip(sigmas)
                .map(|(r, s)| Arc::new(DiffusionModel::linear_drift(*r, ScalarDispersion::Constant(*s))) as Arc<dyn Diffusion>)
                .collect();
            if breakpoints.last().is_some_and(|b| *b >= horizon) {
                return Err(usage("piecewise breakpoints must lie inside the horizon"));
            }
            let mut all = vec![0.0];
            all.extend(breakpoints);
            all.push(horizon);
            Arc::new(PiecewiseHomogeneousModel::new(all, pieces)?)
        }
    })
}

/// OU form `dX = C X dt + sigma dW`, when the family has one.
fn ou_model(spec: &ModelSpec) -> Option<OuModel> {
    match spec {
        ModelSpec::Heat { dim, scale } => OuModel::constant(DMatrix::zeros(*dim, *dim), DMatrix::identity(*dim, *dim) * *scale).ok(),
        ModelSpec::Ou { c, sigma } => OuModel::constant(c.clone(), sigma.clone()).ok(),
        ModelSpec::Affine { b0, b1, sigma } if b0.iter().all(|v| *v == 0.0) => OuModel::constant(b1.clone(), sigma.clone()).ok(),
        ModelSpec::LinearDrift { rate, dispersion: DispersionKind::Constant, sigma, .. } => Some(OuModel::scalar(*rate, *sigma)),
        _ => None,
    }
}

fn affine_drift(spec: &ModelSpec) -> Result<AffineDrift, CliError> {
    let zero = |d: usize| AffineDrift::constant(DVector::zeros(d), DMatrix::zeros(d, d));
    Ok(match spec {
        ModelSpec::Heat { dim, .. } => zero(*dim)?,
        ModelSpec::Ou { c, .. } => AffineDrift::constant(DVector::zeros(c.nrows()), c.clone())?,
        ModelSpec::Affine { b0, b1, .. } => AffineDrift::constant(b0.clone(), b1.clone())?,
        ModelSpec::LinearDrift { rate, .. } => AffineDrift::constant(DVector::zeros(1), DMatrix::from_element(1, 1, *rate))?,
        other => return Err(usage(format!("the {} family has no affine drift", other.family()))),
    })
}

fn require_ou(cfg: &ExperimentConfig) -> Result<OuModel, CliError> {
    ou_model(&cfg.model).ok_or_else(|| usage(format!("the {} family is not an OU model", cfg.model.family())))
}

fn grid(cfg: &ExperimentConfig) -> Result<TimeGrid, CliError> {
    Ok(TimeGrid::horizon(cfg.grid.horizon, cfg.grid.n_steps)?)
}

fn csv_bytes(snapshots: &[ParticleEnsemble]) -> Vec<u8> {
    let mut buf = Vec::new();
    write_snapshots_csv(snapshots, &mut buf).expect("writing to memory");
    buf
}

fn moments_json(ens: &ParticleEnsemble) -> Result<Value, CliError> {
    let (mean, cov) = empirical_moments(ens)?;
    Ok(json!({
        "mean": mean.as_slice(),
        "covariance": cov.row_iter().map(|r| r.iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>(),
    }))
}

/// KS in 1D, energy distance against reference draws otherwise.
fn marginal_statistic(ens: &ParticleEnsemble, law: &GaussianMixture, seed: u64) -> Result<(&'static str, f64), CliError> {
    if ens.dim() == 1 {
        return Ok(("ks", ks_statistic(ens.positions(), |x| law.cdf_1d(x))?));
    }
    let mut rng = stream_rng(seed, PURPOSE_REFERENCE, 1);
    let mut draws = vec![0.0; 2000 * law.dim()];
    for x in draws.chunks_mut(law.dim()) {
        law.sample_into(&mut rng, x);
    }
    Ok(("energy", energy_distance(ens.positions(), &draws, ens.dim(), 2000, seed)?))
}

fn forward(cfg: &ExperimentConfig) -> Result<Body, CliError> {
    let spec = cfg.initial.as_ref().ok_or_else(|| usage("forward needs an [initial] section"))?;
    let nu = build_law(spec)?;
    let model = build_model(&cfg.model, cfg.grid.horizon)?;
    let grid = grid(cfg)?;
    let init = sample_initial(&nu, cfg.particles, cfg.seed)?;
    let path = euler_maruyama_path(&*model, &init, &grid, cfg.seed, SnapshotPolicy::Thinned)?;
    let mut checks = Vec::new();
    let mut details = json!({
        "particles": cfg.particles,
        "n_steps": grid.n_steps(),
        "snapshots": path.snapshots.len(),
        "initial": nu.to_json(),
        "terminal": moments_json(path.terminal())?,
    });
    if let Some(ou) = ou_model(&cfg.model) {
        let sol = ou.solve(&grid)?;
        let law = ou_marginal(&sol, &nu, grid.t_end())?;
        let (metric, stat) = marginal_statistic(path.terminal(), &law, cfg.seed)?;
        details["analytic_comparison"] = json!({ "metric": metric, "statistic": stat });
        if let Some(th) = cfg.thresholds.forward_ks {
            checks.push(Check::below("forward_marginal", stat, th));
        }
    }
    Ok(Body { checks, details, extra: vec![("forward_snapshots.csv".into(), csv_bytes(&path.snapshots))] })
}

fn reversal_config(cfg: &ExperimentConfig) -> ReversalConfig {
    let eps = cfg.reverse.epsilon_stop.unwrap_or(1e-2 * cfg.grid.horizon);
    let mut rc = match cfg.reverse.mode {
        ReverseMode::Analytic => ReversalConfig::analytic(cfg.particles, eps, cfg.seed),
        ReverseMode::SelfConsistent => ReversalConfig::self_consistent(cfg.particles, eps, cfg.seed),
    };
    if let Some(clip) = cfg.reverse.drift_clip {
        rc.drift_clip = clip;
    }
    rc.bandwidth = cfg.reverse.bandwidth.clone();
    rc.kde_mode = match cfg.reverse.kde {
        KdeKind::Exact => KdeMode::Exact,
        KdeKind::Binned => KdeMode::Binned,
    };
    rc
}

fn run_json(run: &ReversalRun) -> Value {
    json!({
        "mode": run.mode,
        "epsilon_stop": run.epsilon_stop,
        "drift_clip": run.drift_clip,
        "steps": run.diagnostics.len(),
        "total_clips": run.total_clips(),
        "total_vacuums": run.total_vacuums(),
        "warnings": run.warnings,
    })
}

fn reverse(cfg: &ExperimentConfig) -> Result<(Body, f64), CliError> {
    let grid = grid(cfg)?;
    let rc = reversal_config(cfg);
    let ou = ou_model(&cfg.model);
    let nu = cfg.initial.as_ref().map(build_law).transpose()?;
    let sol = match (&ou, &nu) {
        (Some(m), Some(_)) => Some(Arc::new(m.solve(&grid)?)),
        _ => None,
    };
    let spec = cfg.terminal.as_ref().ok_or_else(|| usage("reverse needs a [terminal] section"))?;
    let mu = match spec {
        LawSpec::Forward => {
            let (sol, nu) = sol.as_ref().zip(nu.as_ref()).ok_or_else(|| usage("`forward` terminal law needs an OU model and [initial]"))?;
            InitialDistribution::Gaussian(ou_marginal(sol, nu, grid.t_end())?)
        }
        other => build_law(other)?,
    };
    let run = match cfg.reverse.mode {
        ReverseMode::Analytic => {
            let (sol, nu) = sol
                .as_ref()
                .zip(nu.as_ref())
                .ok_or_else(|| usage("analytic reversal needs an OU model and an [initial] law"))?;
            simulate_reversal_analytic(sol, nu, &mu, &grid, &rc)?
        }
        ReverseMode::SelfConsistent => {
            let model = build_model(&cfg.model, cfg.grid.horizon)?;
            simulate_reversal_selfconsistent(&*model, &mu, &grid, &rc)?
        }
    };
    let mut checks = Vec::new();
    let integrability = check_integrability_proxy(&run);
    let mut details = json!({
        "particles": cfg.particles,
        "terminal_law": mu.to_json(),
        "run": run_json(&run),
        "terminal": moments_json(run.terminal())?,
        "integrability": integrability,
    });
    if let (Some(sol), Some(nu)) = (&sol, &nu) {
        let rep = verify_representation(&run, &ou_reference(sol, nu), cfg.thresholds.ks)?;
        checks.push(Check::below("representation", rep.max_statistic, cfg.thresholds.ks));
        details["representation"] = serde_json::to_value(&rep).expect("serializable");
    }
    let mut diag = Vec::new();
    write_diagnostics_csv(&run, &mut diag).expect("writing to memory");
    let extra = vec![
        ("reverse_snapshots.csv".into(), csv_bytes(&run.path.snapshots)),
        ("reverse_diagnostics.csv".into(), diag),
    ];
    Ok((Body { checks, details, extra }, run.wall_time))
}

fn frequency_grid(d: usize, half_width: f64) -> Vec<DVector<f64>> {
    let per_axis = match d {
        1 => 41,
        2 => 11,
        _ => 5,
    };
    let axis: Vec<f64> = (0..per_axis).map(|k| -half_width + 2.0 * half_width * k as f64 / (per_axis - 1) as f64).collect();
    let mut out = vec![DVector::zeros(d)];
    for i in 0..d {
        out = out
            .into_iter()
            .flat_map(|v| {
                axis.iter().map(move |&a| {
                    let mut w = v.clone();
                    w[i] = a;
                    w
                })
            })
            .collect();
    }
    out
}

fn ou_verify(cfg: &ExperimentConfig) -> Result<Body, CliError> {
    let model = require_ou(cfg)?;
    let grid = grid(cfg)?;
    let d = cfg.model.dim();
    let nu = match &cfg.initial {
        Some(s) => build_law(s)?,
        None => InitialDistribution::dirac(vec![0.0; d]),
    };
    let sol: Arc<OuSolution> = Arc::new(model.solve(&grid)?);
    let fs = FourierSolution::new(sol.clone(), &nu);
    let nu2 = nu.clone();
    let transform: Transform = Arc::new(move |xi| nu2.char_fn(xi));
    let nodes: Vec<usize> = (1..=10).map(|k| (k * grid.n_steps() + 5) / 10).filter(|&k| k > 0).collect();
    let marginals: Vec<GaussianMixture> =
        nodes.iter().map(|&k| ou_marginal(&sol, &nu, grid.node(k))).collect::<Result<_, _>>()?;
    let mut triangle: f64 = 0.0;
    for xi in frequency_grid(d, 5.0) {
        let ode = fourier_ode_solve(&sol.model, &transform, &xi, &grid)?;
        for (&k, law) in nodes.iter().zip(&marginals) {
            let t = grid.node(k);
            let w = sol.adjoint.at(t) * &xi;
            let closed = fourier_forward(&fs, t, &w)?;
            let marginal = law.char_fn(&w);
            triangle = triangle.max((closed - ode[k]).norm()).max((closed - marginal).norm()).max((ode[k] - marginal).norm());
        }
    }
    let inv = InversionConfig { xi_max: 2.0, exponent_cap: 700.0 };
    let horizon = grid.t_end();
    let mu_hat = |w: &DVector<f64>| fourier_forward(&fs, horizon, w).unwrap_or(Complex64::new(f64::NAN, 0.0));
    let mut round_trip: f64 = 0.0;
    let mut skipped = 0usize;
    for xi in frequency_grid(d, 2.0).into_iter().filter(|x| x.norm() <= 2.0) {
        match fourier_invert_terminal(&sol, mu_hat, &xi, &inv) {
            Ok(v) => round_trip = round_trip.max((v - nu.char_fn(&xi)).norm()),
            Err(retro_core::Error::AmplificationCap { .. }) => skipped += 1,
            Err(e) => return Err(e.into()),
        }
    }
    let checks = vec![
        Check::below("triangle_max_error", triangle, cfg.thresholds.triangle),
        Check::below("round_trip_max_error", round_trip, cfg.thresholds.triangle),
    ];
    let details = json!({
        "initial": nu.to_json(),
        "time_nodes": nodes.iter().map(|&k| grid.node(k)).collect::<Vec<_>>(),
        "triangle_max_error": triangle,
        "round_trip_max_error": round_trip,
        "round_trip_skipped": skipped,
        "min_covariance_eigenvalue": retro_core::ou_analytic::min_covariance_eigenvalue(&sol),
    });
    Ok(Body { checks, details, extra: Vec::new() })
}

fn metric(kind: MetricKind) -> TerminalMetric {
    match kind {
        MetricKind::Wasserstein1 => TerminalMetric::Wasserstein1,
        MetricKind::MeanDistance => TerminalMetric::MeanDistance,
    }
}

fn probe_config(cfg: &ExperimentConfig, kind: MetricKind) -> ProbeConfig {
    ProbeConfig { n_steps: cfg.grid.n_steps, ..ProbeConfig::new(cfg.grid.horizon, cfg.particles, cfg.seed) }.with_metric(metric(kind))
}

fn read_cloud(path: &Path) -> Result<ParticleEnsemble, CliError> {
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Io { path: path.to_path_buf(), source })?;
    let snapshots = parse_snapshots_csv(&text)?;
    snapshots.into_iter().last().ok_or_else(|| usage(format!("{} holds no snapshots", path.display())))
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn invert(cfg: &ExperimentConfig) -> Result<Body, CliError> {
    let spec = cfg.invert.as_ref().ok_or_else(|| usage("invert needs an [invert] section"))?;
    let grid = grid(cfg)?;
    let d = cfg.model.dim();
    let cloud = || -> Result<ParticleEnsemble, CliError> {
        if let Some(path) = &spec.data {
            let c = read_cloud(path)?;
            if c.dim() != d {
                return Err(usage(format!("data has dimension {}, model {d}", c.dim())));
            }
            return Ok(c);
        }
        let source = spec.source.clone().expect("validated at parse time");
        let model = build_model(&cfg.model, cfg.grid.horizon)?;
        Ok(terminal_cloud(&*model, &InitialDistribution::dirac(source), &grid, cfg.particles, derive_seed(cfg.seed, DATA_TAG))?)
    };
    let truth = spec.expected.clone().or_else(|| spec.source.clone());
    let mut checks = Vec::new();
    let details = match spec.route {
        InvertRoute::AffineMean => {
            let drift = affine_drift(&cfg.model)?;
            let m = DVector::from_vec(spec.terminal_mean.clone().expect("validated at parse time"));
            let x = reconstruct_dirac_affine(&drift, &m, &grid)?;
            if let Some(t) = &truth {
                checks.push(Check::at_most("source_error", distance(x.as_slice(), t), cfg.thresholds.source_error.unwrap_or(1e-6)));
            }
            json!({ "route": "affine-mean", "estimate": x.as_slice() })
        }
        InvertRoute::AffineMc => {
            let drift = affine_drift(&cfg.model)?;
            let est = reconstruct_dirac_affine_mc(&drift, None, &cloud()?, &grid)?;
            if let Some(t) = &truth {
                let err = distance(&est.estimate, t);
                match cfg.thresholds.source_error {
                    Some(th) => checks.push(Check::at_most("source_error", err, th)),
                    None => checks.push(Check::at_most("source_error_over_stderr", err / est.stderr, 3.0)),
                }
            }
            json!({ "route": "affine-mc", "estimate": est.estimate, "stderr": est.stderr, "n": est.n })
        }
        InvertRoute::HeatFourier => {
            let ModelSpec::Heat { scale, .. } = cfg.model else {
                return Err(usage("the heat-fourier route needs the heat family"));
            };
            let c = cloud()?;
            // The transform route is written for du/dt = Lap u.
            let tau = cfg.grid.horizon * scale * scale / 2.0;
            let n = c.len() as f64;
            let mu_hat = |xi: &DVector<f64>| {
                c.particles()
                    .map(|p| {
                        let phase: f64 = p.iter().zip(xi.iter()).map(|(a, b)| a * b).sum();
                        Complex64::from_polar(1.0 / n, -phase)
                    })
                    .sum::<Complex64>()
            };
            let x = heat_source_location(mu_hat, tau, d, &InversionConfig::default())?;
            if let Some(t) = &truth {
                checks.push(Check::at_most("source_error", distance(x.as_slice(), t), cfg.thresholds.source_error.unwrap_or(0.05)));
            }
            json!({ "route": "heat-fourier", "estimate": x.as_slice(), "laplacian_time": tau })
        }
        InvertRoute::Search => {
            let model = build_model(&cfg.model, cfg.grid.horizon)?;
            let candidates = spec.candidates.clone().expect("validated at parse time");
            let rep = reconstruct_dirac_search(&*model, &cloud()?, &candidates, &probe_config(cfg, spec.metric))?;
            if let Some(t) = &truth {
                let spacing = candidates
                    .iter()
                    .enumerate()
                    .flat_map(|(i, a)| candidates[i + 1..].iter().map(move |b| distance(a, b)))
                    .fold(f64::INFINITY, f64::min);
                let th = cfg.thresholds.source_error.unwrap_or(if spacing.is_finite() { spacing } else { 0.0 });
                checks.push(Check::at_most("source_error", distance(&rep.estimate, t), th));
            }
            json!({ "route": "search", "search": rep })
        }
    };
    Ok(Body { checks, details, extra: Vec::new() })
}

fn moment_check(cfg: &ExperimentConfig) -> Result<Body, CliError> {
    let spec = cfg.moment.as_ref().ok_or_else(|| usage("moment-check needs a [moment] section"))?;
    let model = build_model(&cfg.model, cfg.grid.horizon)?;
    let grid = grid(cfg)?;
    let domain = BoxDomain::cube(cfg.model.dim(), spec.half_width)?;
    let times: Vec<f64> = (0..5).map(|k| grid.node(k * grid.n_steps() / 4)).collect();
    let mut rng = stream_rng(cfg.seed, PURPOSE_PROBES, 0);
    let lip = estimate_lipschitz(&*model, &domain, &times, spec.probes, &mut rng)?;
    let rep = check_moment_bound(&*model, &spec.x, &spec.y, &grid, cfg.particles, cfg.seed, &lip)?;
    let small = small_horizon_check(&lip, cfg.grid.horizon);
    let checks = vec![Check::at_most("moment_bound_excess", rep.worst_excess, 0.0)];
    let details = json!({ "lipschitz": lip, "moment": rep, "small_horizon": small });
    Ok(Body { checks, details, extra: Vec::new() })
}

fn injectivity(cfg: &ExperimentConfig) -> Result<Body, CliError> {
    let spec = cfg.injectivity.as_ref().ok_or_else(|| usage("injectivity needs an [injectivity] section"))?;
    let model = build_model(&cfg.model, cfg.grid.horizon)?;
    let candidates: Vec<InitialDistribution> = spec.candidates.iter().map(|c| InitialDistribution::dirac(c.clone())).collect();
    let rep = injectivity_probe(&*model, &candidates, &probe_config(cfg, spec.metric))?;
    let want = match spec.expect {
        ExpectVerdict::Injective => Verdict::Injective,
        ExpectVerdict::Ambiguous => Verdict::Ambiguous,
    };
    let checks = vec![
        Check::flag("verdict_matches_expectation", rep.verdict == want),
        match want {
            Verdict::Injective => Check::above("min_distance_over_noise_floor", rep.min_distance / rep.noise_floor, 3.0),
            Verdict::Ambiguous => Check::at_most("min_distance_over_noise_floor", rep.min_distance / rep.noise_floor, 3.0),
        },
    ];
    Ok(Body { checks, details: serde_json::to_value(&rep).expect("serializable"), extra: Vec::new() })
}

/// Runs a subcommand in memory.
pub fn execute(command: Command, cfg: &ExperimentConfig) -> Result<(Outcome, f64), CliError> {
    let started = Instant::now();
    let (body, inner_wall) = match command {
        Command::Forward => (forward(cfg)?, None),
        Command::Reverse => {
            let (b, w) = reverse(cfg)?;
            (b, Some(w))
        }
        Command::OuVerify => (ou_verify(cfg)?, None),
        Command::Invert => (invert(cfg)?, None),
        Command::MomentCheck => (moment_check(cfg)?, None),
        Command::Injectivity => (injectivity(cfg)?, None),
    };
    let pass = body.checks.iter().all(|c| c.pass);
    let failed: Vec<&str> = body.checks.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect();
    let report = json!({
        "spec_version": SPEC_VERSION,
        "command": command.name(),
        "seed": cfg.seed,
        "model": cfg.model.family(),
        "horizon": cfg.grid.horizon,
        "n_steps": cfg.grid.n_steps,
        "pass": pass,
        "checks": body.checks,
        "failed": failed,
        "details": body.details,
    });
    let mut files = vec![(command.outputs()[0].clone(), pretty(&report))];
    files.extend(body.extra);
    let wall = inner_wall.unwrap_or_else(|| started.elapsed().as_secs_f64());
    Ok((Outcome { command, pass, report, files }, wall))
}

fn pretty(v: &Value) -> Vec<u8> {
    let mut s = serde_json::to_vec_pretty(v).expect("serializable");
    s.push(b'\n');
    s
}

fn unix_seconds() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

/// Loads the config, runs the subcommand and writes every output file.
pub fn run(command: Command, config_path: &Path, opts: &RunOptions) -> Result<Outcome, CliError> {
    let text = std::fs::read_to_string(config_path).map_err(|source| CliError::Io { path: config_path.to_path_buf(), source })?;
    let cfg = ExperimentConfig::parse(&text)?;
    let dir = opts.output.clone().unwrap_or_else(|| cfg.output.clone());
    if !opts.force {
        if let Some(p) = command.outputs().iter().map(|f| dir.join(f)).find(|p| p.exists()) {
            return Err(CliError::Exists(p));
        }
    }
    let started = unix_seconds();
    let (mut outcome, wall) = execute(command, &cfg)?;
    let metadata = json!({
        "command": command.name(),
        "config": config_path.display().to_string(),
        "started_unix": started,
        "finished_unix": unix_seconds(),
        "wall_time_s": wall,
        "threads": rayon::current_num_threads(),
        "version": env!("CARGO_PKG_VERSION"),
    });
    outcome.files.insert(1, (command.outputs()[1].clone(), pretty(&metadata)));
    std::fs::create_dir_all(&dir).map_err(|source| CliError::Io { path: dir.clone(), source })?;
    for (name, bytes) in &outcome.files {
        let path = dir.join(name);
        std::fs::write(&path, bytes).map_err(|source| CliError::Io { path, source })?;
    }
    Ok(outcome)
}
