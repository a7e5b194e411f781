//! Time-reversed McKean SDE
//!
//! `dY = [-b(T-t, Y) + div(Sigma(T-t) p_t) / p_t] dt + sigma(T-t) dB`, `Y_0 ~ mu`,
//!
//! where `p_t` is either the exact OU marginal `u(T - t)` or a kernel estimate
//! of the law of `Y_t` built from the live ensemble.

use std::io::Write;
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::density_estimation::{reversal_drift_from_score, silverman_bandwidth, Kde, KdeMode};
use crate::distributions::{GaussianMixture, InitialDistribution};
use crate::error::{invalid, Error, Result};
use crate::forward_sim::{sample_initial, EnsemblePath, ParticleEnsemble, SnapshotPolicy};
use crate::linalg_ode::TimeGrid;
use crate::models::{check_ellipticity, Diffusion};
use crate::ou_analytic::{ou_marginal, OuReversalField, OuSolution};
use crate::rng::{particle_streams, stream_rng, PURPOSE_REFERENCE, PURPOSE_REVERSAL};
use crate::stats::{energy_distance, ks_statistic, ks_two_sample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReversalMode {
    AnalyticDrift,
    SelfConsistent,
}

/// Per-step bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepDiagnostics {
    pub step: usize,
    pub t: f64,
    /// Largest drift norm (after clipping) among particles in the reference box.
    pub max_drift: f64,
    pub clips: usize,
    pub vacuums: usize,
}

/// Settings shared by both reversal modes.
#[derive(Debug, Clone, PartialEq)]
pub struct ReversalConfig {
    pub n: usize,
    pub epsilon_stop: f64,
    /// `None` disables clipping. Self-consistent runs default to `1e3`.
    pub drift_clip: Option<f64>,
    pub seed: u64,
    pub snapshots: SnapshotPolicy,
    pub kde_mode: KdeMode,
    /// Overrides the per-step Silverman bandwidth.
    pub bandwidth: Option<Vec<f64>>,
    /// Rebuild the density estimate every `refresh_stride` steps.
    pub refresh_stride: usize,
    /// Abort once more than this fraction of particles sits in vacuum.
    pub vacuum_abort_fraction: f64,
    /// Half-width of the box over which `max_drift` is recorded.
    pub drift_box: f64,
    pub ellipticity_epsilon: f64,
}

impl ReversalConfig {
    pub fn analytic(n: usize, epsilon_stop: f64, seed: u64) -> Self {
        Self {
            n,
            epsilon_stop,
            drift_clip: None,
            seed,
            snapshots: SnapshotPolicy::Thinned,
            kde_mode: KdeMode::Binned,
            bandwidth: None,
            refresh_stride: 1,
            vacuum_abort_fraction: 0.1,
            drift_box: f64::INFINITY,
            ellipticity_epsilon: 1e-8,
        }
    }

    pub fn self_consistent(n: usize, epsilon_stop: f64, seed: u64) -> Self {
        Self { drift_clip: Some(1e3), ..Self::analytic(n, epsilon_stop, seed) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReversalRun {
    pub mode: ReversalMode,
    pub horizon: f64,
    /// Reversed-time grid on `[0, steps * dt]`.
    pub grid: TimeGrid,
    pub epsilon_stop: f64,
    pub drift_clip: Option<f64>,
    pub path: EnsemblePath,
    pub diagnostics: Vec<StepDiagnostics>,
    pub wall_time: f64,
    pub warnings: Vec<String>,
}

impl ReversalRun {
    pub fn terminal(&self) -> &ParticleEnsemble {
        self.path.terminal()
    }

    pub fn total_clips(&self) -> usize {
        self.diagnostics.iter().map(|d| d.clips).sum()
    }

    pub fn total_vacuums(&self) -> usize {
        self.diagnostics.iter().map(|d| d.vacuums).sum()
    }
}

/// Reversed-time grid stopping at the last node not past `T - epsilon`.
fn reversal_grid(grid: &TimeGrid, epsilon: f64) -> Result<TimeGrid> {
    let horizon = grid.t_end() - grid.t_start();
    if !(epsilon > 0.0 && epsilon < horizon) {
        return Err(invalid("epsilon_stop must lie in ]0, T["));
    }
    let dt = grid.dt();
    let steps = ((horizon - epsilon) / dt + 1e-9).floor() as usize;
    if steps == 0 {
        return Err(invalid("epsilon_stop leaves no reversal steps"));
    }
    TimeGrid::new(0.0, steps as f64 * dt, steps)
}

fn clip(drift: &mut [f64], limit: Option<f64>) -> (f64, bool) {
    let norm = drift.iter().map(|v| v * v).sum::<f64>().sqrt();
    match limit {
        Some(c) if norm > c => {
            drift.iter_mut().for_each(|v| *v *= c / norm);
            (c, true)
        }
        _ => (norm, false),
    }
}

/// Outcome of one particle's drift evaluation.
#[derive(Clone, Copy, Default)]
struct ParticleStep {
    norm: f64,
    in_box: bool,
    clipped: bool,
    vacuum: bool,
}

struct Stepper<'a, M: ?Sized> {
    model: &'a M,
    horizon: f64,
    dt: f64,
    config: &'a ReversalConfig,
}

impl<M: Diffusion + ?Sized> Stepper<'_, M> {
    /// Advances every particle by one step; `extra` writes the
    /// density-dependent drift term and reports vacuum with `false`.
    fn step<F>(&self, k: usize, t: f64, state: &mut ParticleEnsemble, rngs: &mut [rand_chacha::ChaCha8Rng], extra: F) -> Result<StepDiagnostics>
    where
        F: Fn(&[f64], &mut [f64]) -> Result<bool> + Sync,
    {
        let d = self.model.dim();
        let m = self.model.noise_dim();
        let s = self.horizon - t;
        let dt = self.dt;
        let sq = dt.sqrt();
        let n = state.len();
        let mut outcomes = vec![ParticleStep::default(); n];
        state
            .positions_mut()
            .par_chunks_mut(d)
            .zip(rngs.par_iter_mut())
            .zip(outcomes.par_iter_mut())
            .enumerate()
            .try_for_each_init(
                || (vec![0.0; d], vec![0.0; d], vec![0.0; d * m], vec![0.0; m]),
                |(b, div, sigma, noise), (i, ((y, rng), out))| {
                    self.model.drift(s, y, b);
                    let ok = extra(y, div)?;
                    let mut drift: Vec<f64> = if ok {
                        b.iter().zip(div.iter()).map(|(bi, di)| di - bi).collect()
                    } else {
                        b.iter().map(|bi| -bi).collect()
                    };
                    let (norm, clipped) = clip(&mut drift, self.config.drift_clip);
                    self.model.dispersion(s, y, sigma);
                    for z in noise.iter_mut() {
                        *z = rng.sample::<f64, _>(StandardNormal) * sq;
                    }
                    let in_box = y.iter().all(|v| v.abs() <= self.config.drift_box);
                    for r in 0..d {
                        let mut inc = drift[r] * dt;
                        for j in 0..m {
                            inc += sigma[r * m + j] * noise[j];
                        }
                        y[r] += inc;
                    }
                    if y.iter().any(|v| !v.is_finite()) {
                        return Err(Error::Diverged { particle: i, step: k });
                    }
                    *out = ParticleStep { norm, in_box, clipped, vacuum: !ok };
                    Ok(())
                },
            )?;
        let mut diag = StepDiagnostics { step: k, t, max_drift: 0.0, clips: 0, vacuums: 0 };
        for o in &outcomes {
            if o.in_box {
                diag.max_drift = diag.max_drift.max(o.norm);
            }
            diag.clips += o.clipped as usize;
            diag.vacuums += o.vacuum as usize;
        }
        if diag.vacuums as f64 > self.config.vacuum_abort_fraction * n as f64 {
            return Err(Error::TooSparse { step: k, vacuums: diag.vacuums, n });
        }
        Ok(diag)
    }
}

fn ellipticity_gate<M: Diffusion + ?Sized>(model: &M, grid: &TimeGrid, points: &ParticleEnsemble, eps: f64) -> Result<()> {
    let horizon = grid.t_end();
    let mut samples = Vec::new();
    let stride = (points.len() / 64).max(1);
    for t in [0.0, 0.25 * horizon, 0.5 * horizon, 0.75 * horizon, horizon] {
        for p in points.particles().step_by(stride) {
            samples.push((t, p.to_vec()));
        }
    }
    let report = check_ellipticity(model, &samples, eps)?;
    if !report.pass {
        return Err(invalid(format!(
            "diffusion is not uniformly elliptic (min eigenvalue {} < {eps})",
            report.min_eigenvalue
        )));
    }
    Ok(())
}

fn consistency_warning(sol: &OuSolution, nu: &InitialDistribution, start: &ParticleEnsemble) -> Result<Option<String>> {
    let target = ou_marginal(sol, nu, sol.horizon())?;
    let n = start.len() as f64;
    if start.dim() == 1 {
        let ks = ks_statistic(start.positions(), |x| target.cdf_1d(x))?;
        // 0.1% critical value of the one-sample KS test.
        let critical = 1.95 / n.sqrt();
        return Ok((ks > critical).then(|| {
            format!("terminal sample is inconsistent with u(T) from the initial law (KS {ks:.4} > {critical:.4})")
        }));
    }
    let reference = draw(&target, start.len().min(2000), 0)?;
    let e = energy_distance(start.positions(), &reference, start.dim(), 2000, 0)?;
    let scale = target.covariance().trace().sqrt();
    Ok((e > 0.05 * scale).then(|| format!("terminal sample is far from u(T) (energy distance {e:.4})")))
}

fn draw(mix: &GaussianMixture, n: usize, seed: u64) -> Result<Vec<f64>> {
    let mut rng = stream_rng(seed, PURPOSE_REFERENCE, 0);
    let mut out = vec![0.0; n * mix.dim()];
    for x in out.chunks_mut(mix.dim()) {
        mix.sample_into(&mut rng, x);
    }
    Ok(out)
}

/// Reversal with the exact OU drift `Sigma(T-t) grad log u(T-t)`.
pub fn simulate_reversal_analytic(
    sol: &OuSolution,
    nu: &InitialDistribution,
    mu: &InitialDistribution,
    grid: &TimeGrid,
    config: &ReversalConfig,
) -> Result<ReversalRun> {
    let started = Instant::now();
    let rgrid = reversal_grid(grid, config.epsilon_stop)?;
    let horizon = grid.t_end() - grid.t_start();
    if (horizon - sol.horizon()).abs() > 1e-12 * horizon.max(1.0) {
        return Err(invalid("grid horizon does not match the OU solution"));
    }
    let mut state = sample_initial(mu, config.n, config.seed)?;
    ellipticity_gate(&sol.model, grid, &state, config.ellipticity_epsilon)?;
    let mut warnings = Vec::new();
    warnings.extend(consistency_warning(sol, nu, &state)?);

    let stepper = Stepper { model: &sol.model, horizon, dt: rgrid.dt(), config };
    let mut rngs = particle_streams(config.seed, PURPOSE_REVERSAL, state.len());
    let stride = config.snapshots.stride(rgrid.n_steps());
    let mut snapshots = vec![state.clone()];
    let mut diagnostics = Vec::with_capacity(rgrid.n_steps());
    for k in 0..rgrid.n_steps() {
        let t = rgrid.node(k);
        let field = OuReversalField::new(sol, nu, t)?;
        let diag = stepper.step(k, t, &mut state, &mut rngs, |y, out| {
            out.copy_from_slice(&field.drift(y));
            Ok(true)
        })?;
        diagnostics.push(diag);
        state.time = rgrid.node(k + 1);
        if (k + 1) % stride == 0 || k + 1 == rgrid.n_steps() {
            snapshots.push(state.clone());
        }
    }
    Ok(ReversalRun {
        mode: ReversalMode::AnalyticDrift,
        horizon,
        grid: rgrid,
        epsilon_stop: config.epsilon_stop,
        drift_clip: config.drift_clip,
        path: EnsemblePath { grid: rgrid, snapshots },
        diagnostics,
        wall_time: started.elapsed().as_secs_f64(),
        warnings,
    })
}

/// Reversal whose density term is estimated from the ensemble itself.
pub fn simulate_reversal_selfconsistent<M: Diffusion + ?Sized>(
    model: &M,
    mu: &InitialDistribution,
    grid: &TimeGrid,
    config: &ReversalConfig,
) -> Result<ReversalRun> {
    let started = Instant::now();
    let rgrid = reversal_grid(grid, config.epsilon_stop)?;
    let horizon = grid.t_end() - grid.t_start();
    let mut state = sample_initial(mu, config.n, config.seed)?;
    if state.dim() != model.dim() {
        return Err(invalid("terminal law dimension does not match the model"));
    }
    ellipticity_gate(model, grid, &state, config.ellipticity_epsilon)?;
    let mut warnings = Vec::new();
    let d = model.dim();
    let factor = (4.0 / ((d as f64 + 2.0) * state.len() as f64)).powf(1.0 / (d as f64 + 4.0));
    if factor >= 0.5 {
        warnings.push(format!(
            "{} particles give a Silverman bandwidth of {factor:.2} standard deviations",
            state.len()
        ));
    }
    if let Some(h) = &config.bandwidth {
        if h.len() != d || h.iter().any(|v| !(*v > 0.0)) {
            return Err(invalid("bandwidth override needs one positive value per dimension"));
        }
    }

    let stepper = Stepper { model, horizon, dt: rgrid.dt(), config };
    let mut rngs = particle_streams(config.seed, PURPOSE_REVERSAL, state.len());
    let stride = config.snapshots.stride(rgrid.n_steps());
    let refresh = config.refresh_stride.max(1);
    let mut snapshots = vec![state.clone()];
    let mut diagnostics = Vec::with_capacity(rgrid.n_steps());
    let mut kde: Option<Kde> = None;
    for k in 0..rgrid.n_steps() {
        let t = rgrid.node(k);
        if k % refresh == 0 || kde.is_none() {
            let h = match &config.bandwidth {
                Some(h) => h.clone(),
                None => silverman_bandwidth(&state)?,
            };
            kde = Some(Kde::new(d, state.positions().to_vec(), h, config.kde_mode)?);
        }
        let field = kde.as_ref().expect("built above");
        let s = horizon - t;
        let diag = stepper.step(k, t, &mut state, &mut rngs, |y, out| match field.score(y) {
            Ok(score) => {
                out.copy_from_slice(&reversal_drift_from_score(model, s, y, &score)?);
                Ok(true)
            }
            Err(Error::Vacuum) => Ok(false),
            Err(e) => Err(e),
        })?;
        diagnostics.push(diag);
        state.time = rgrid.node(k + 1);
        if (k + 1) % stride == 0 || k + 1 == rgrid.n_steps() {
            snapshots.push(state.clone());
        }
    }
    let clips: usize = diagnostics.iter().map(|d| d.clips).sum();
    if clips > 0 {
        warnings.push(format!("drift clipped {clips} times"));
    }
    Ok(ReversalRun {
        mode: ReversalMode::SelfConsistent,
        horizon,
        grid: rgrid,
        epsilon_stop: config.epsilon_stop,
        drift_clip: config.drift_clip,
        path: EnsemblePath { grid: rgrid, snapshots },
        diagnostics,
        wall_time: started.elapsed().as_secs_f64(),
        warnings,
    })
}

/// Reference law for one snapshot.
#[derive(Debug, Clone, PartialEq)]
pub enum ReferenceLaw {
    Mixture(GaussianMixture),
    Empirical { dim: usize, samples: Vec<f64> },
}

/// Source of reference marginals indexed by reversed time.
pub trait MarginalReference {
    fn law_at(&self, t_reversed: f64) -> Result<ReferenceLaw>;
}

impl<F: Fn(f64) -> Result<ReferenceLaw>> MarginalReference for F {
    fn law_at(&self, t: f64) -> Result<ReferenceLaw> {
        self(t)
    }
}

/// `u(T - t)` for an OU model started from `nu`.
pub fn ou_reference<'a>(sol: &'a OuSolution, nu: &'a InitialDistribution) -> impl MarginalReference + 'a {
    move |t: f64| ou_marginal(sol, nu, sol.horizon() - t).map(ReferenceLaw::Mixture)
}

/// Reference laws listed at fixed times.
#[derive(Debug, Clone, PartialEq)]
pub struct TabulatedReference {
    pub entries: Vec<(f64, ReferenceLaw)>,
}

impl TabulatedReference {
    pub fn from_path(path: &EnsemblePath) -> Self {
        Self {
            entries: path
                .snapshots
                .iter()
                .map(|s| (s.time, ReferenceLaw::Empirical { dim: s.dim(), samples: s.positions().to_vec() }))
                .collect(),
        }
    }
}

impl MarginalReference for TabulatedReference {
    fn law_at(&self, t: f64) -> Result<ReferenceLaw> {
        self.entries
            .iter()
            .find(|(s, _)| (s - t).abs() <= 1e-9 * t.abs().max(1.0))
            .map(|(_, l)| l.clone())
            .ok_or(Error::ReferenceMismatch(t))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RepresentationReport {
    /// `"ks"` for `d = 1`, `"energy"` otherwise.
    pub metric: &'static str,
    pub per_snapshot: Vec<(f64, f64)>,
    pub max_statistic: f64,
    pub argmax_t: f64,
    pub threshold: f64,
    pub pass: bool,
    pub assumptions: Vec<String>,
}

pub const REFERENCE_POINTS: usize = 2000;

/// Compares every stored snapshot with the reference marginal at its time.
pub fn verify_representation(run: &ReversalRun, reference: &dyn MarginalReference, threshold: f64) -> Result<RepresentationReport> {
    let d = run.terminal().dim();
    let metric = if d == 1 { "ks" } else { "energy" };
    let mut per_snapshot = Vec::with_capacity(run.path.snapshots.len());
    for (k, snap) in run.path.snapshots.iter().enumerate() {
        let law = reference.law_at(snap.time)?;
        let stat = match (&law, d) {
            (ReferenceLaw::Mixture(m), 1) => ks_statistic(snap.positions(), |x| m.cdf_1d(x))?,
            (ReferenceLaw::Empirical { samples, .. }, 1) => ks_two_sample(snap.positions(), samples)?,
            (ReferenceLaw::Mixture(m), _) => {
                let r = draw(m, REFERENCE_POINTS, k as u64)?;
                energy_distance(snap.positions(), &r, d, REFERENCE_POINTS, k as u64)?
            }
            (ReferenceLaw::Empirical { samples, .. }, _) => {
                energy_distance(snap.positions(), samples, d, REFERENCE_POINTS, k as u64)?
            }
        };
        per_snapshot.push((snap.time, stat));
    }
    let (argmax_t, max_statistic) = per_snapshot
        .iter()
        .copied()
        .fold((0.0, f64::NEG_INFINITY), |acc, p| if p.1 > acc.1 { p } else { acc });
    let mut assumptions = vec!["p_t in W^{1,1}_loc and the local integrability of the drift are assumed, not verified".to_string()];
    if run.mode == ReversalMode::SelfConsistent {
        assumptions.push("density term estimated by KDE; Hoelder regularity of coefficients not certified".into());
    }
    Ok(RepresentationReport {
        metric,
        per_snapshot,
        max_statistic,
        argmax_t,
        threshold,
        pass: max_statistic < threshold,
        assumptions,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntegrabilityReport {
    /// `sum_k max_drift_k dt` over `[0, T - epsilon]`.
    pub integral: f64,
    pub finite: bool,
    /// Least-squares `a` in `max_drift ~ (T - t)^{-a}`.
    pub fitted_exponent: f64,
    pub clip_events: usize,
    pub vacuum_events: usize,
    pub pass: bool,
}

pub fn check_integrability_proxy(run: &ReversalRun) -> IntegrabilityReport {
    let dt = run.grid.dt();
    let integral: f64 = run.diagnostics.iter().map(|d| d.max_drift * dt).sum();
    let pts: Vec<(f64, f64)> = run
        .diagnostics
        .iter()
        .filter(|d| d.max_drift > 0.0)
        .map(|d| ((run.horizon - d.t).ln(), d.max_drift.ln()))
        .collect();
    let fitted_exponent = if pts.len() >= 2 {
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
        if sxx > 0.0 {
            -sxy / sxx
        } else {
            0.0
        }
    } else {
        0.0
    };
    let finite = integral.is_finite();
    IntegrabilityReport {
        integral,
        finite,
        fitted_exponent,
        clip_events: run.total_clips(),
        vacuum_events: run.total_vacuums(),
        pass: finite,
    }
}

/// Writes `step,t,max_drift,clips,vacuums`.
pub fn write_diagnostics_csv<W: Write>(run: &ReversalRun, mut w: W) -> std::io::Result<()> {
    writeln!(w, "step,t,max_drift,clips,vacuums")?;
    for d in &run.diagnostics {
        writeln!(w, "{},{:.16e},{:.16e},{},{}", d.step, d.t, d.max_drift, d.clips, d.vacuums)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::DiffusionModel;
    use crate::ou_analytic::OuModel;
    use crate::stats::mean_std;

    fn heat_setup() -> (OuSolution, TimeGrid) {
        let grid = TimeGrid::horizon(1.0, 1000).unwrap();
        (OuModel::heat(1).solve(&grid).unwrap(), grid)
    }

    #[test]
    fn reversal_grid_stops_before_horizon() {
        let g = TimeGrid::horizon(1.0, 1000).unwrap();
        let r = reversal_grid(&g, 1e-2).unwrap();
        assert_eq!(r.n_steps(), 990);
        assert!((r.t_end() - 0.99).abs() < 1e-12);
        assert!(reversal_grid(&g, 0.0).is_err());
        assert!(reversal_grid(&g, 1.0).is_err());
    }

    #[test]
    fn degenerate_noise_is_rejected() {
        let grid = TimeGrid::horizon(1.0, 100).unwrap();
        let sol = OuModel::scalar(0.0, 0.0).solve(&grid).unwrap();
        let nu = InitialDistribution::normal(0.0, 1.0).unwrap();
        let cfg = ReversalConfig::analytic(10, 0.1, 1);
        assert!(simulate_reversal_analytic(&sol, &nu, &nu, &grid, &cfg).is_err());
    }

    #[test]
    fn small_heat_reversal_contracts_to_the_source() {
        let (sol, grid) = heat_setup();
        let nu = InitialDistribution::dirac(vec![0.0]);
        let mu = InitialDistribution::normal(0.0, 1.0).unwrap();
        let run = simulate_reversal_analytic(&sol, &nu, &mu, &grid, &ReversalConfig::analytic(2000, 1e-2, 3)).unwrap();
        assert!(run.warnings.is_empty(), "{:?}", run.warnings);
        assert_eq!(run.diagnostics.len(), 990);
        let (m, s) = mean_std(run.terminal().positions()).unwrap();
        assert!(m.abs() < 0.05 && s < 0.15, "{m} {s}");
        let rep = verify_representation(&run, &ou_reference(&sol, &nu), 0.1).unwrap();
        assert!(rep.pass, "{}", rep.max_statistic);
        let proxy = check_integrability_proxy(&run);
        assert!(proxy.finite && (proxy.fitted_exponent - 0.5).abs() < 0.15, "{}", proxy.fitted_exponent);
    }

    #[test]
    fn mismatched_terminal_law_warns() {
        let (sol, grid) = heat_setup();
        let nu = InitialDistribution::dirac(vec![0.0]);
        let mu = InitialDistribution::normal(0.0, 0.5).unwrap();
        let run = simulate_reversal_analytic(&sol, &nu, &mu, &grid, &ReversalConfig::analytic(2000, 0.5, 3)).unwrap();
        assert_eq!(run.warnings.len(), 1);
    }

    #[test]
    fn self_reference_gives_zero_statistic() {
        let (sol, grid) = heat_setup();
        let nu = InitialDistribution::dirac(vec![0.0]);
        let mu = InitialDistribution::normal(0.0, 1.0).unwrap();
        let run = simulate_reversal_analytic(&sol, &nu, &mu, &grid, &ReversalConfig::analytic(200, 0.5, 1)).unwrap();
        let rep = verify_representation(&run, &TabulatedReference::from_path(&run.path), 1e-12).unwrap();
        assert_eq!(rep.max_statistic, 0.0);
        let empty = TabulatedReference { entries: vec![] };
        assert!(matches!(verify_representation(&run, &empty, 0.1), Err(Error::ReferenceMismatch(_))));
    }

    #[test]
    fn bounded_drift_has_zero_exponent() {
        let (sol, grid) = heat_setup();
        let nu = InitialDistribution::normal(0.0, 4.0).unwrap();
        let mu = InitialDistribution::normal(0.0, 5.0).unwrap();
        let mut cfg = ReversalConfig::analytic(2000, 1e-2, 5);
        cfg.drift_box = 1.0;
        let run = simulate_reversal_analytic(&sol, &nu, &mu, &grid, &cfg).unwrap();
        let proxy = check_integrability_proxy(&run);
        assert!(proxy.fitted_exponent.abs() < 0.2, "{}", proxy.fitted_exponent);
        assert_eq!(proxy.clip_events, 0);
    }

    #[test]
    fn runs_are_deterministic() {
        let model = DiffusionModel::heat(1, 1.0);
        let grid = TimeGrid::horizon(1.0, 100).unwrap();
        let mu = InitialDistribution::normal(0.0, 1.0).unwrap();
        let cfg = ReversalConfig::self_consistent(500, 0.1, 9);
        let a = simulate_reversal_selfconsistent(&model, &mu, &grid, &cfg).unwrap();
        let b = simulate_reversal_selfconsistent(&model, &mu, &grid, &cfg).unwrap();
        assert_eq!(a.path, b.path);
        assert_eq!(a.diagnostics, b.diagnostics);
    }

    #[test]
    fn tiny_ensembles_fail_loudly() {
        let model = DiffusionModel::heat(1, 1.0);
        let grid = TimeGrid::horizon(1.0, 1000).unwrap();
        let mu = InitialDistribution::normal(0.0, 1.0).unwrap();
        let cfg = ReversalConfig { kde_mode: KdeMode::Exact, ..ReversalConfig::self_consistent(10, 1e-2, 2) };
        match simulate_reversal_selfconsistent(&model, &mu, &grid, &cfg) {
            Err(Error::TooSparse { .. }) => {}
            Ok(run) => assert!(!run.warnings.is_empty()),
            Err(e) => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn diagnostics_csv_header() {
        let (sol, grid) = heat_setup();
        let nu = InitialDistribution::dirac(vec![0.0]);
        let mu = InitialDistribution::normal(0.0, 1.0).unwrap();
        let run = simulate_reversal_analytic(&sol, &nu, &mu, &grid, &ReversalConfig::analytic(10, 0.9, 1)).unwrap();
        let mut buf = Vec::new();
        write_diagnostics_csv(&run, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("step,t,max_drift,clips,vacuums\n0,"));
        assert_eq!(text.lines().count(), 1 + run.diagnostics.len());
    }
}
