//! Recovery of the initial law from terminal data.
//!
//! Three routes: the mean ODE for affine drifts, Fourier inversion for the
//! heat equation, and brute-force forward simulation over candidate sources.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;

use crate::distributions::InitialDistribution;
use crate::error::{invalid, Error, Result};
use crate::forward_sim::{euler_maruyama_path, empirical_moments, sample_initial, ParticleEnsemble, SnapshotPolicy};
use crate::linalg_ode::{rk4_matrix, TimeGrid};
use crate::models::{Diffusion, LipschitzEstimate};
use crate::ou_analytic::InversionConfig;
use crate::rng::derive_seed;
use crate::stats::{projection_directions, ProjectedCloud};

pub type VectorFn = Arc<dyn Fn(f64) -> DVector<f64> + Send + Sync>;
pub type MatrixFn = Arc<dyn Fn(f64) -> DMatrix<f64> + Send + Sync>;

/// Drift `b(t, y) = b0(t) + b1(t) y`.
#[derive(Clone)]
pub struct AffineDrift {
    b0: VectorFn,
    b1: MatrixFn,
    dim: usize,
}

impl std::fmt::Debug for AffineDrift {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AffineDrift").field("dim", &self.dim).finish_non_exhaustive()
    }
}

impl AffineDrift {
    pub fn new<B0, B1>(b0: B0, b1: B1) -> Result<Self>
    where
        B0: Fn(f64) -> DVector<f64> + Send + Sync + 'static,
        B1: Fn(f64) -> DMatrix<f64> + Send + Sync + 'static,
    {
        let m = b1(0.0);
        let v = b0(0.0);
        if !m.is_square() || m.nrows() == 0 || v.len() != m.nrows() {
            return Err(invalid("affine drift needs square b1 and matching b0"));
        }
        Ok(Self { dim: v.len(), b0: Arc::new(b0), b1: Arc::new(b1) })
    }

    pub fn constant(b0: DVector<f64>, b1: DMatrix<f64>) -> Result<Self> {
        Self::new(move |_| b0.clone(), move |_| b1.clone())
    }

    /// `b1 = [[0, w], [-w, 0]]`, `b0 = 0`.
    pub fn rotation(w: f64) -> Self {
        Self::constant(DVector::zeros(2), DMatrix::from_row_slice(2, 2, &[0.0, w, -w, 0.0]))
            .expect("rotation drift is well formed")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn b0(&self, t: f64) -> DVector<f64> {
        (self.b0)(t)
    }

    pub fn b1(&self, t: f64) -> DMatrix<f64> {
        (self.b1)(t)
    }

    /// Finiteness and shape of the coefficients at every grid node and midpoint.
    pub fn validate(&self, grid: &TimeGrid) -> Result<()> {
        let h = grid.dt();
        for k in 0..=grid.n_steps() {
            for t in [grid.node(k), grid.node(k) + 0.5 * h] {
                if t > grid.t_end() {
                    continue;
                }
                let (v, m) = (self.b0(t), self.b1(t));
                if v.len() != self.dim || m.shape() != (self.dim, self.dim) {
                    return Err(invalid(format!("affine coefficients change shape at t = {t}")));
                }
                if v.iter().chain(m.iter()).any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite { what: "affine coefficient", node: k, t });
                }
            }
        }
        Ok(())
    }
}

/// Mean at time zero together with the sensitivity `d E(0) / d E(T)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanReconstruction {
    pub estimate: DVector<f64>,
    pub fundamental: DMatrix<f64>,
}

/// Integrates `E' = b0 + b1 E` backward from `E(T) = terminal_mean`.
pub fn reconstruct_dirac_affine_full(drift: &AffineDrift, terminal_mean: &DVector<f64>, grid: &TimeGrid) -> Result<MeanReconstruction> {
    let d = drift.dim();
    if terminal_mean.len() != d {
        return Err(invalid(format!("terminal mean has dimension {}, drift {d}", terminal_mean.len())));
    }
    if terminal_mean.iter().any(|v| !v.is_finite()) {
        return Err(invalid("terminal mean must be finite"));
    }
    drift.validate(grid)?;
    let mut y0 = DMatrix::zeros(d, d + 1);
    y0.set_column(0, terminal_mean);
    y0.view_mut((0, 1), (d, d)).fill_with_identity();
    let (t0, t1) = (grid.t_start(), grid.t_end());
    // tau = t1 - t runs forward over the same grid.
    let states = rk4_matrix(grid, y0, |tau, y, _| {
        let t = t1 - (tau - t0);
        let b1 = drift.b1(t);
        let mut out = -(&b1 * y);
        let b0 = drift.b0(t);
        for i in 0..d {
            out[(i, 0)] -= b0[i];
        }
        Ok(out)
    })?;
    let last = states.last().expect("grid has at least one step");
    Ok(MeanReconstruction {
        estimate: last.column(0).into_owned(),
        fundamental: last.columns(1, d).into_owned(),
    })
}

pub fn reconstruct_dirac_affine(drift: &AffineDrift, terminal_mean: &DVector<f64>, grid: &TimeGrid) -> Result<DVector<f64>> {
    Ok(reconstruct_dirac_affine_full(drift, terminal_mean, grid)?.estimate)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonteCarloEstimate {
    pub estimate: Vec<f64>,
    pub stderr: f64,
    pub n: usize,
}

/// Mean-ODE reconstruction from an empirical terminal cloud.
///
/// `stderr = |Phi|_2 sqrt(tr Cov) / sqrt(n)`, `Phi` the backward
/// fundamental matrix. The dispersion does not enter the mean ODE and is
/// accepted for interface symmetry only.
pub fn reconstruct_dirac_affine_mc(
    drift: &AffineDrift,
    _sigma: Option<&DMatrix<f64>>,
    ensemble: &ParticleEnsemble,
    grid: &TimeGrid,
) -> Result<MonteCarloEstimate> {
    if ensemble.len() < 2 {
        return Err(Error::DegenerateCloud(0));
    }
    if ensemble.positions().iter().any(|v| !v.is_finite()) {
        return Err(invalid("ensemble contains non-finite positions"));
    }
    let (mean, cov) = empirical_moments(ensemble)?;
    let rec = reconstruct_dirac_affine_full(drift, &mean, grid)?;
    let spread = cov.trace().max(0.0).sqrt();
    let phi_norm = rec.fundamental.singular_values().max();
    Ok(MonteCarloEstimate {
        estimate: rec.estimate.as_slice().to_vec(),
        stderr: phi_norm * spread / (ensemble.len() as f64).sqrt(),
        n: ensemble.len(),
    })
}

fn heat_window(t: f64, xi: &DVector<f64>, config: &InversionConfig) -> Result<f64> {
    if !(t >= 0.0 && t.is_finite()) {
        return Err(invalid("heat horizon must be finite and non-negative"));
    }
    let norm = xi.norm();
    if norm > config.xi_max {
        return Err(Error::OutOfWindow { norm, xi_max: config.xi_max });
    }
    Ok(t * norm * norm)
}

/// Transform of `u(T)` for `du/dt = Lap u`: `exp(-T |xi|^2) nu_hat(xi)`.
pub fn heat_forward_transform<F>(nu_hat: F, t: f64, xi: &DVector<f64>) -> Complex64
where
    F: Fn(&DVector<f64>) -> Complex64,
{
    nu_hat(xi) * (-t * xi.norm_squared()).exp()
}

/// Initial transform `exp(T |xi|^2) mu_hat(xi)` for `du/dt = Lap u`.
pub fn heat_initial_transform<F>(mu_hat: F, t: f64, xi: &DVector<f64>, config: &InversionConfig) -> Result<Complex64>
where
    F: Fn(&DVector<f64>) -> Complex64,
{
    let exponent = heat_window(t, xi, config)?;
    if exponent > config.exponent_cap {
        return Err(Error::AmplificationCap { exponent, cap: config.exponent_cap });
    }
    Ok(mu_hat(xi) * exponent.exp())
}

pub const PHASE_STEP: f64 = 1e-3;

/// Reads a point source off the phase of the recovered initial transform:
/// `x0 = -grad arg nu_hat(0)` by central differences at `|xi| = 1e-3`.
pub fn heat_source_location<F>(mu_hat: F, t: f64, dim: usize, config: &InversionConfig) -> Result<DVector<f64>>
where
    F: Fn(&DVector<f64>) -> Complex64,
{
    if dim == 0 {
        return Err(invalid("dimension must be positive"));
    }
    let mut x0 = DVector::zeros(dim);
    for i in 0..dim {
        let mut e = DVector::zeros(dim);
        e[i] = PHASE_STEP;
        let plus = heat_initial_transform(&mu_hat, t, &e, config)?;
        let minus = heat_initial_transform(&mu_hat, t, &(-e), config)?;
        let ratio = plus * minus.conj();
        if ratio.norm() == 0.0 || !ratio.norm().is_finite() {
            return Err(invalid("transform vanishes near the origin"));
        }
        x0[i] = -ratio.arg() / (2.0 * PHASE_STEP);
    }
    Ok(x0)
}

/// Comparator between terminal clouds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TerminalMetric {
    /// Exact in 1D, sliced with seeded projections otherwise.
    #[default]
    Wasserstein1,
    MeanDistance,
}

pub const DEFAULT_PROJECTIONS: usize = 32;
pub const PROBE_MAX_STEP: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProbeConfig {
    pub horizon: f64,
    pub n_steps: usize,
    pub n: usize,
    pub seed: u64,
    pub metric: TerminalMetric,
    pub projections: usize,
}

impl ProbeConfig {
    pub fn new(horizon: f64, n: usize, seed: u64) -> Self {
        Self {
            horizon,
            n_steps: (horizon / PROBE_MAX_STEP - 1e-9).ceil().max(1.0) as usize,
            n,
            seed,
            metric: TerminalMetric::Wasserstein1,
            projections: DEFAULT_PROJECTIONS,
        }
    }

    pub fn with_metric(mut self, metric: TerminalMetric) -> Self {
        self.metric = metric;
        self
    }

    fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::horizon(self.horizon, self.n_steps)
    }

    fn validate(&self) -> Result<()> {
        if self.n < 4 {
            return Err(invalid("need at least four particles per candidate"));
        }
        if self.metric == TerminalMetric::Wasserstein1 && self.projections == 0 {
            return Err(invalid("need at least one projection"));
        }
        Ok(())
    }
}

/// Terminal cloud of the forward SDE started from `source`.
pub fn terminal_cloud<M: Diffusion + ?Sized>(
    model: &M,
    source: &InitialDistribution,
    grid: &TimeGrid,
    n: usize,
    seed: u64,
) -> Result<ParticleEnsemble> {
    if source.dim() != model.dim() {
        return Err(invalid(format!("source dimension {} does not match model {}", source.dim(), model.dim())));
    }
    let init = sample_initial(source, n, seed)?;
    let path = euler_maruyama_path(model, &init, grid, seed, SnapshotPolicy::Every(grid.n_steps()))?;
    Ok(path.terminal().clone())
}

/// Cloud summary suited to repeated distance queries.
enum Summary {
    Projected(ProjectedCloud),
    Mean(Vec<f64>),
}

impl Summary {
    fn distance(&self, other: &Self) -> f64 {
        match (self, other) {
            (Self::Projected(a), Self::Projected(b)) => a.sliced_distance(b),
            (Self::Mean(a), Self::Mean(b)) => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
            _ => unreachable!("summaries built with one metric"),
        }
    }
}

struct Comparator {
    metric: TerminalMetric,
    dim: usize,
    directions: Vec<Vec<f64>>,
}

impl Comparator {
    fn new(cfg: &ProbeConfig, dim: usize) -> Self {
        let directions = match cfg.metric {
            TerminalMetric::Wasserstein1 if dim > 1 => projection_directions(dim, cfg.projections, cfg.seed),
            _ => Vec::new(),
        };
        Self { metric: cfg.metric, dim, directions }
    }

    fn summarize(&self, points: &[f64]) -> Result<Summary> {
        match self.metric {
            TerminalMetric::Wasserstein1 => Ok(Summary::Projected(ProjectedCloud::new(points, self.dim, &self.directions)?)),
            TerminalMetric::MeanDistance => {
                let n = (points.len() / self.dim) as f64;
                let mut mean = vec![0.0; self.dim];
                for p in points.chunks(self.dim) {
                    mean.iter_mut().zip(p).for_each(|(m, v)| *m += v / n);
                }
                Ok(Summary::Mean(mean))
            }
        }
    }

    /// Distance between the two halves of a cloud.
    fn split_half(&self, ens: &ParticleEnsemble) -> Result<f64> {
        let half = ens.len() / 2 * self.dim;
        let (a, b) = ens.positions().split_at(half);
        Ok(self.summarize(a)?.distance(&self.summarize(&b[..half])?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Injective,
    Ambiguous,
}

/// Statistical test of injectivity of `nu -> u(T)` on a finite family.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InjectivityReport {
    pub candidates: Vec<serde_json::Value>,
    pub distances: Vec<Vec<f64>>,
    pub min_distance: f64,
    pub argmin: (usize, usize),
    pub noise_floor: f64,
    pub verdict: Verdict,
    pub metric: TerminalMetric,
    pub n: usize,
    pub horizon: f64,
}

/// Seed of candidate `i` in a probe run.
pub fn candidate_seed(seed: u64, i: usize) -> u64 {
    derive_seed(seed, 0x1000 + i as u64)
}

/// Forward-simulates every candidate with its own seed and compares the
/// terminal clouds pairwise. The verdict is injective when the closest pair
/// is more than three noise floors apart; the floor is the largest
/// split-half self-distance over candidates.
pub fn injectivity_probe<M: Diffusion + ?Sized>(
    model: &M,
    candidates: &[InitialDistribution],
    cfg: &ProbeConfig,
) -> Result<InjectivityReport> {
    if candidates.len() < 2 {
        return Err(invalid("need at least two candidates"));
    }
    cfg.validate()?;
    let grid = cfg.grid()?;
    let cmp = Comparator::new(cfg, model.dim());
    let summaries: Vec<(Summary, f64)> = candidates
        .par_iter()
        .enumerate()
        .map(|(i, c)| {
            let cloud = terminal_cloud(model, c, &grid, cfg.n, candidate_seed(cfg.seed, i))?;
            Ok((cmp.summarize(cloud.positions())?, cmp.split_half(&cloud)?))
        })
        .collect::<Result<_>>()?;

    let k = candidates.len();
    let mut distances = vec![vec![0.0; k]; k];
    let mut min_distance = f64::INFINITY;
    let mut argmin = (0, 1);
    for i in 0..k {
        for j in i + 1..k {
            let d = summaries[i].0.distance(&summaries[j].0);
            distances[i][j] = d;
            distances[j][i] = d;
            if d < min_distance {
                min_distance = d;
                argmin = (i, j);
            }
        }
    }
    let noise_floor = summaries.iter().map(|s| s.1).fold(0.0, f64::max);
    let verdict = if min_distance > 3.0 * noise_floor { Verdict::Injective } else { Verdict::Ambiguous };
    Ok(InjectivityReport {
        candidates: candidates.iter().map(InitialDistribution::to_json).collect(),
        distances,
        min_distance,
        argmin,
        noise_floor,
        verdict,
        metric: cfg.metric,
        n: cfg.n,
        horizon: cfg.horizon,
    })
}

/// Score table of a grid search over Dirac sources.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SearchReport {
    pub candidates: Vec<Vec<f64>>,
    pub scores: Vec<f64>,
    pub noise_floor: f64,
    pub best_index: usize,
    pub estimate: Vec<f64>,
    /// Candidates whose score is within the noise floor of the best one.
    pub ties: Vec<usize>,
    pub tie: bool,
}

fn lexicographic(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(std::cmp::Ordering::Equal)
}

/// Grid search for a Dirac source whose terminal cloud best matches `mu`.
///
/// All candidates share `cfg.seed`, so the comparison uses common random
/// numbers. Scores within the split-half noise floor of `mu` of the minimum
/// count as ties, resolved to the lexicographically smallest candidate.
pub fn reconstruct_dirac_search<M: Diffusion + ?Sized>(
    model: &M,
    mu: &ParticleEnsemble,
    candidates: &[Vec<f64>],
    cfg: &ProbeConfig,
) -> Result<SearchReport> {
    if candidates.is_empty() {
        return Err(invalid("candidate grid is empty"));
    }
    cfg.validate()?;
    let d = model.dim();
    if mu.dim() != d || candidates.iter().any(|c| c.len() != d) {
        return Err(invalid("target and candidates must match the model dimension"));
    }
    if mu.len() < 4 {
        return Err(Error::DegenerateCloud(0));
    }
    let grid = cfg.grid()?;
    let cmp = Comparator::new(cfg, d);
    let target = cmp.summarize(mu.positions())?;
    let noise_floor = cmp.split_half(mu)?;
    let scores: Vec<f64> = candidates
        .par_iter()
        .map(|c| {
            let cloud = terminal_cloud(model, &InitialDistribution::dirac(c.clone()), &grid, cfg.n, cfg.seed)?;
            Ok(cmp.summarize(cloud.positions())?.distance(&target))
        })
        .collect::<Result<_>>()?;
    let best = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let ties: Vec<usize> = (0..candidates.len()).filter(|&i| scores[i] <= best + noise_floor).collect();
    let best_index = *ties
        .iter()
        .min_by(|&&a, &&b| lexicographic(&candidates[a], &candidates[b]).then(a.cmp(&b)))
        .expect("the minimum is always a tie");
    Ok(SearchReport {
        candidates: candidates.to_vec(),
        estimate: candidates[best_index].clone(),
        scores,
        noise_floor,
        best_index,
        tie: ties.len() > 1,
        ties,
    })
}

/// Sufficient condition `K T / 2 exp(K T / 2) < 1` for uniqueness among
/// Dirac starts. How sharp it is remains open.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SmallHorizonReport {
    pub k: f64,
    pub horizon: f64,
    pub value: f64,
    pub pass: bool,
}

pub fn small_horizon_check(lipschitz: &LipschitzEstimate, horizon: f64) -> SmallHorizonReport {
    let m = 0.5 * lipschitz.k * horizon;
    let value = m * m.exp();
    SmallHorizonReport { k: lipschitz.k, horizon, value, pass: value < 1.0 }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::DiffusionModel;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn rotation_exp(t: f64) -> DMatrix<f64> {
        let (s, c) = t.sin_cos();
        DMatrix::from_row_slice(2, 2, &[c, s, -s, c])
    }

    #[test]
    fn no_drift_is_identity() {
        let drift = AffineDrift::constant(DVector::zeros(2), DMatrix::zeros(2, 2)).unwrap();
        let m = DVector::from_vec(vec![0.3, -1.7]);
        let grid = TimeGrid::horizon(1.0, 10).unwrap();
        assert_eq!(reconstruct_dirac_affine(&drift, &m, &grid).unwrap(), m);
    }

    #[test]
    fn scalar_linear_drift() {
        let c = 0.7;
        let drift = AffineDrift::constant(DVector::zeros(1), DMatrix::from_element(1, 1, c)).unwrap();
        let grid = TimeGrid::horizon(2.0, 200).unwrap();
        let x = reconstruct_dirac_affine(&drift, &DVector::from_element(1, 1.5), &grid).unwrap();
        assert_abs_diff_eq!(x[0], 1.5 * (-c * 2.0f64).exp(), epsilon = 1e-9);
    }

    #[test]
    fn rotation_against_matrix_exponential() {
        let drift = AffineDrift::rotation(1.0);
        let grid = TimeGrid::horizon(FRAC_PI_2, 400).unwrap();
        let x0 = DVector::from_vec(vec![1.0, 0.0]);
        let m = rotation_exp(FRAC_PI_2) * &x0;
        let x = reconstruct_dirac_affine(&drift, &m, &grid).unwrap();
        assert_abs_diff_eq!((x - x0).norm(), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn constant_offset_is_subtracted() {
        let drift = AffineDrift::new(|t| DVector::from_element(1, 2.0 * t), |_| DMatrix::zeros(1, 1)).unwrap();
        let grid = TimeGrid::horizon(1.0, 8).unwrap();
        let x = reconstruct_dirac_affine(&drift, &DVector::from_element(1, 3.0), &grid).unwrap();
        assert_abs_diff_eq!(x[0], 2.0, epsilon = 1e-13);
    }

    #[test]
    fn mismatched_or_nonfinite_inputs_are_rejected() {
        let drift = AffineDrift::rotation(1.0);
        let grid = TimeGrid::horizon(1.0, 8).unwrap();
        assert!(reconstruct_dirac_affine(&drift, &DVector::zeros(3), &grid).is_err());
        assert!(reconstruct_dirac_affine(&drift, &DVector::from_vec(vec![f64::NAN, 0.0]), &grid).is_err());
        let bad = AffineDrift::new(|t| DVector::from_element(1, 1.0 / (t - 0.5)), |_| DMatrix::zeros(1, 1)).unwrap();
        assert!(matches!(
            reconstruct_dirac_affine(&bad, &DVector::zeros(1), &TimeGrid::horizon(1.0, 2).unwrap()),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn mc_front_end_bookkeeping() {
        let drift = AffineDrift::constant(DVector::zeros(1), DMatrix::zeros(1, 1)).unwrap();
        let grid = TimeGrid::horizon(1.0, 4).unwrap();
        let same = ParticleEnsemble::new(1.0, 1, vec![0.25; 50], 0).unwrap();
        let est = reconstruct_dirac_affine_mc(&drift, None, &same, &grid).unwrap();
        assert_eq!(est.estimate, vec![0.25]);
        assert_eq!(est.stderr, 0.0);

        let tiny = ParticleEnsemble::new(1.0, 1, vec![-1.0, 0.5, 2.0, 0.0, 1.0, -0.5, 0.3, 0.9, -2.0, 1.1], 0).unwrap();
        let est = reconstruct_dirac_affine_mc(&drift, None, &tiny, &grid).unwrap();
        assert!(est.stderr > 0.3, "{}", est.stderr);

        let one = ParticleEnsemble::new(1.0, 1, vec![0.0], 0).unwrap();
        assert!(matches!(reconstruct_dirac_affine_mc(&drift, None, &one, &grid), Err(Error::DegenerateCloud(_))));
    }

    #[test]
    fn mc_stderr_scales_with_fundamental_matrix() {
        let c = 1.0;
        let drift = AffineDrift::constant(DVector::zeros(1), DMatrix::from_element(1, 1, c)).unwrap();
        let grid = TimeGrid::horizon(1.0, 100).unwrap();
        let ens = ParticleEnsemble::new(1.0, 1, vec![-1.0, 1.0, -1.0, 1.0], 0).unwrap();
        let est = reconstruct_dirac_affine_mc(&drift, None, &ens, &grid).unwrap();
        let std = (4.0f64 / 3.0).sqrt();
        assert_abs_diff_eq!(est.stderr, (-1.0f64).exp() * std / 2.0, epsilon = 1e-9);
    }

    #[test]
    fn heat_round_trip_and_window() {
        let cfg = InversionConfig::default();
        let t = 1.0;
        let nu = InitialDistribution::dirac(vec![0.0]);
        let mu_hat = |xi: &DVector<f64>| heat_forward_transform(|x| nu.char_fn(x), t, xi);
        for k in 0..=20 {
            let xi = DVector::from_element(1, -2.0 + 0.2 * k as f64);
            let v = heat_initial_transform(mu_hat, t, &xi, &cfg).unwrap();
            assert!((v - Complex64::new(1.0, 0.0)).norm() < 1e-10);
        }
        let far = DVector::from_element(1, 6.0);
        assert!(matches!(
            heat_initial_transform(|_| Complex64::new(1.0, 0.0), t, &far, &cfg),
            Err(Error::OutOfWindow { .. })
        ));
        let edge = DVector::from_element(1, 5.0);
        assert!(matches!(
            heat_initial_transform(|_| Complex64::new(1.0, 0.0), 3.0, &edge, &cfg),
            Err(Error::AmplificationCap { .. })
        ));
    }

    #[test]
    fn phase_gives_source_location() {
        let x0 = vec![0.8, -1.3];
        let nu = InitialDistribution::dirac(x0.clone());
        let t = 0.5;
        let mu_hat = |xi: &DVector<f64>| heat_forward_transform(|x| nu.char_fn(x), t, xi);
        let x = heat_source_location(mu_hat, t, 2, &InversionConfig::default()).unwrap();
        assert_abs_diff_eq!(x[0], x0[0], epsilon = 1e-9);
        assert_abs_diff_eq!(x[1], x0[1], epsilon = 1e-9);
    }

    #[test]
    fn probe_separates_translated_sources() {
        let model = DiffusionModel::heat(1, 1.0);
        let cands = vec![InitialDistribution::dirac(vec![0.0]), InitialDistribution::dirac(vec![1.0])];
        let cfg = ProbeConfig::new(1.0, 4000, 3).with_metric(TerminalMetric::MeanDistance);
        let rep = injectivity_probe(&model, &cands, &cfg).unwrap();
        assert_eq!(rep.verdict, Verdict::Injective);
        assert!((rep.min_distance - 1.0).abs() < 0.15, "{}", rep.min_distance);
        assert_eq!(rep.distances[0][0], 0.0);
        assert_eq!(rep.distances[0][1], rep.distances[1][0]);
        let json = serde_json::to_value(&rep).unwrap();
        assert_eq!(json["verdict"], "injective");
    }

    #[test]
    fn probe_flags_identical_candidates() {
        let model = DiffusionModel::heat(1, 1.0);
        let c = InitialDistribution::dirac(vec![0.5]);
        let cfg = ProbeConfig::new(1.0, 4000, 11);
        let rep = injectivity_probe(&model, &[c.clone(), c], &cfg).unwrap();
        assert_eq!(rep.verdict, Verdict::Ambiguous);
        assert!(injectivity_probe(&model, &[InitialDistribution::dirac(vec![0.0])], &cfg).is_err());
    }

    #[test]
    fn search_self_match_and_ties() {
        let model = DiffusionModel::heat(1, 1.0);
        let cfg = ProbeConfig::new(1.0, 2000, 5);
        let grid = cfg.grid().unwrap();
        let cands: Vec<Vec<f64>> = vec![vec![-1.0], vec![0.0], vec![1.0]];
        let mu = terminal_cloud(&model, &InitialDistribution::dirac(vec![1.0]), &grid, cfg.n, cfg.seed).unwrap();
        let rep = reconstruct_dirac_search(&model, &mu, &cands, &cfg).unwrap();
        assert_eq!(rep.best_index, 2);
        assert_eq!(rep.scores[2], 0.0);
        assert!(!rep.tie);

        let close: Vec<Vec<f64>> = vec![vec![1.0], vec![1.0 + 1e-6], vec![1.0 - 1e-6]];
        let rep = reconstruct_dirac_search(&model, &mu, &close, &cfg).unwrap();
        assert!(rep.tie);
        assert_eq!(rep.estimate, vec![1.0 - 1e-6]);
        assert!(reconstruct_dirac_search(&model, &mu, &[], &cfg).is_err());
    }

    #[test]
    fn small_horizon_bound() {
        let lip = LipschitzEstimate::new(1.0, vec![0.0]);
        assert!(small_horizon_check(&lip, 0.5).pass);
        assert!(!small_horizon_check(&lip, 2.0).pass);
    }

    proptest! {
        #[test]
        fn reconstruction_is_affine_in_terminal_mean(
            m1 in prop::collection::vec(-3.0f64..3.0, 2),
            m2 in prop::collection::vec(-3.0f64..3.0, 2),
            alpha in 0.0f64..1.0,
            w in -2.0f64..2.0,
            b in -1.0f64..1.0,
        ) {
            let drift = AffineDrift::new(
                move |t| DVector::from_vec(vec![b * t, -b]),
                move |t| DMatrix::from_row_slice(2, 2, &[0.1 * t, w, -w, -0.2]),
            ).unwrap();
            let grid = TimeGrid::horizon(1.0, 50).unwrap();
            let (m1, m2) = (DVector::from_vec(m1), DVector::from_vec(m2));
            let mix = &m1 * alpha + &m2 * (1.0 - alpha);
            let lhs = reconstruct_dirac_affine(&drift, &mix, &grid).unwrap();
            let rhs = reconstruct_dirac_affine(&drift, &m1, &grid).unwrap() * alpha
                + reconstruct_dirac_affine(&drift, &m2, &grid).unwrap() * (1.0 - alpha);
            prop_assert!((lhs - rhs).norm() < 1e-10);
        }

        #[test]
        fn heat_transforms_invert(x0 in -2.0f64..2.0, t in 0.05f64..1.0, xi in -2.0f64..2.0) {
            let nu = InitialDistribution::dirac(vec![x0]);
            let xi = DVector::from_element(1, xi);
            let mu_hat = |z: &DVector<f64>| heat_forward_transform(|x| nu.char_fn(x), t, z);
            let back = heat_initial_transform(mu_hat, t, &xi, &InversionConfig::default()).unwrap();
            prop_assert!((back - nu.char_fn(&xi)).norm() < 1e-10);
        }
    }
}
