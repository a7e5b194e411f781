//! Euler-Maruyama simulation of the forward SDE `dX = b dt + sigma dW` on
//! particle ensembles.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::distributions::InitialDistribution;
use crate::error::{invalid, Error, Result};
use crate::linalg_ode::TimeGrid;
use crate::models::{Diffusion, LipschitzEstimate};
use crate::rng::{particle_streams, stream_rng, PURPOSE_INIT, PURPOSE_PATH};

/// `n` particles in `R^d` at a common time stamp.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    pub time: f64,
    dim: usize,
    positions: Vec<f64>,
    /// Seed the ensemble descends from.
    pub seed: u64,
}

impl ParticleEnsemble {
    pub fn new(time: f64, dim: usize, positions: Vec<f64>, seed: u64) -> Result<Self> {
        if dim == 0 || positions.is_empty() || positions.len() % dim != 0 {
            return Err(invalid("ensemble needs at least one whole particle"));
        }
        if positions.iter().any(|v| !v.is_finite()) {
            return Err(invalid("ensemble positions must be finite"));
        }
        Ok(Self { time, dim, positions, seed })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.positions.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn particle(&self, i: usize) -> &[f64] {
        &self.positions[i * self.dim..(i + 1) * self.dim]
    }

    pub fn particles(&self) -> std::slice::Chunks<'_, f64> {
        self.positions.chunks(self.dim)
    }

    /// Values of coordinate `i` across particles.
    pub fn coordinate(&self, i: usize) -> Vec<f64> {
        self.particles().map(|p| p[i]).collect()
    }

    pub(crate) fn positions_mut(&mut self) -> &mut [f64] {
        &mut self.positions
    }

    pub fn into_positions(self) -> Vec<f64> {
        self.positions
    }
}

/// Snapshots of an ensemble at increasing grid nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsemblePath {
    pub grid: TimeGrid,
    pub snapshots: Vec<ParticleEnsemble>,
}

impl EnsemblePath {
    pub fn terminal(&self) -> &ParticleEnsemble {
        self.snapshots.last().expect("paths keep at least the initial snapshot")
    }
}

/// Which steps keep a snapshot. The initial and final states are always kept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SnapshotPolicy {
    /// Every `ceil(n_steps / 200)`-th step.
    #[default]
    Thinned,
    Full,
    Every(usize),
}

impl SnapshotPolicy {
    pub fn stride(&self, n_steps: usize) -> usize {
        match *self {
            Self::Thinned => n_steps.div_ceil(200).max(1),
            Self::Full => 1,
            Self::Every(k) => k.max(1),
        }
    }
}

/// i.i.d. draws from `dist`; Empirical laws are bootstrap-resampled.
pub fn sample_initial(dist: &InitialDistribution, n: usize, seed: u64) -> Result<ParticleEnsemble> {
    if n == 0 {
        return Err(invalid("need at least one particle"));
    }
    dist.validate()?;
    let d = dist.dim();
    let mut positions = vec![0.0; n * d];
    match dist {
        InitialDistribution::Dirac { points, weights } => {
            let mut rng = stream_rng(seed, PURPOSE_INIT, 0);
            let cumulative: Vec<f64> = weights
                .iter()
                .scan(0.0, |acc, w| {
                    *acc += w;
                    Some(*acc)
                })
                .collect();
            for x in positions.chunks_mut(d) {
                let k = if points.len() == 1 {
                    0
                } else {
                    let u: f64 = rng.random();
                    cumulative.iter().position(|c| u < *c).unwrap_or(points.len() - 1)
                };
                x.copy_from_slice(points[k].as_slice());
            }
        }
        InitialDistribution::Gaussian(mix) => {
            let mut rng = stream_rng(seed, PURPOSE_INIT, 0);
            for x in positions.chunks_mut(d) {
                mix.sample_into(&mut rng, x);
            }
        }
        InitialDistribution::Empirical { dim, samples } => {
            let mut rng = stream_rng(seed, PURPOSE_INIT, 0);
            let m = samples.len() / dim;
            for x in positions.chunks_mut(d) {
                let k = rng.random_range(0..m);
                x.copy_from_slice(&samples[k * d..(k + 1) * d]);
            }
        }
    }
    ParticleEnsemble::new(0.0, d, positions, seed)
}

/// Per-particle scratch for one Euler-Maruyama step.
#[derive(Debug, Clone)]
pub(crate) struct StepScratch {
    pub drift: Vec<f64>,
    pub sigma: Vec<f64>,
    pub noise: Vec<f64>,
}

impl StepScratch {
    pub fn new(d: usize, m: usize) -> Self {
        Self { drift: vec![0.0; d], sigma: vec![0.0; d * m], noise: vec![0.0; m] }
    }
}

/// `x += drift dt + sigma sqrt(dt) xi`, with `scratch.drift` and
/// `scratch.sigma` already filled in.
pub(crate) fn apply_increment(x: &mut [f64], dt: f64, rng: &mut ChaCha8Rng, scratch: &mut StepScratch) {
    let d = x.len();
    let m = scratch.noise.len();
    let sq = dt.sqrt();
    for xi in scratch.noise.iter_mut() {
        *xi = rng.sample::<f64, _>(StandardNormal) * sq;
    }
    for i in 0..d {
        let mut inc = scratch.drift[i] * dt;
        for j in 0..m {
            inc += scratch.sigma[i * m + j] * scratch.noise[j];
        }
        x[i] += inc;
    }
}

/// Simulates the forward SDE from `init` over `grid`.
///
/// Each particle draws from its own stream of `seed`, so the result is
/// bitwise reproducible for any thread count.
pub fn euler_maruyama_path<M: Diffusion + ?Sized>(
    model: &M,
    init: &ParticleEnsemble,
    grid: &TimeGrid,
    seed: u64,
    policy: SnapshotPolicy,
) -> Result<EnsemblePath> {
    let d = model.dim();
    let m = model.noise_dim();
    if init.dim() != d {
        return Err(invalid(format!("ensemble dimension {} does not match model {d}", init.dim())));
    }
    let dt = grid.dt();
    let stride = policy.stride(grid.n_steps());
    let mut state = init.clone();
    state.time = grid.t_start();
    state.seed = seed;
    let mut rngs = particle_streams(seed, PURPOSE_PATH, state.len());
    let mut snapshots = vec![state.clone()];

    for k in 0..grid.n_steps() {
        let t = grid.node(k);
        state
            .positions_mut()
            .par_chunks_mut(d)
            .zip(rngs.par_iter_mut())
            .enumerate()
            .try_for_each_init(
                || StepScratch::new(d, m),
                |scratch, (i, (x, rng))| {
                    model.drift(t, x, &mut scratch.drift);
                    model.dispersion(t, x, &mut scratch.sigma);
                    apply_increment(x, dt, rng, scratch);
                    if x.iter().all(|v| v.is_finite()) {
                        Ok(())
                    } else {
                        Err(Error::Diverged { particle: i, step: k })
                    }
                },
            )?;
        state.time = grid.node(k + 1);
        if (k + 1) % stride == 0 || k + 1 == grid.n_steps() {
            snapshots.push(state.clone());
        }
    }
    Ok(EnsemblePath { grid: *grid, snapshots })
}

/// Synchronous-coupling check of `sup_t E|X^x_t - X^y_t|^2 <= |y - x|^2 e^{K T}`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentBoundReport {
    pub k: f64,
    pub initial_gap: f64,
    pub bound: f64,
    /// `sup_t` of the empirical mean of `|Z_t|^2`.
    pub sup_mean_sq: f64,
    pub sup_time: f64,
    /// Monte Carlo margin `3 std(|Z|^2) / sqrt(n)` at the node of the supremum.
    pub margin: f64,
    /// `max_t (mean_t - bound - margin_t)`; non-positive when the bound holds.
    pub worst_excess: f64,
    pub pass: bool,
}

pub fn check_moment_bound<M: Diffusion + ?Sized>(
    model: &M,
    x: &[f64],
    y: &[f64],
    grid: &TimeGrid,
    n: usize,
    seed: u64,
    lipschitz: &LipschitzEstimate,
) -> Result<MomentBoundReport> {
    let d = model.dim();
    let m = model.noise_dim();
    if x.len() != d || y.len() != d {
        return Err(invalid("starting points must match the model dimension"));
    }
    if n < 2 {
        return Err(invalid("moment check needs at least two particle pairs"));
    }
    let gap: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    let horizon = grid.t_end() - grid.t_start();
    let bound = gap * (lipschitz.k * horizon).exp();
    let dt = grid.dt();

    // Each pair stores [X^x, X^y] and shares one noise stream.
    let mut pairs: Vec<f64> = (0..n).flat_map(|_| x.iter().chain(y).copied()).collect();
    let mut rngs = particle_streams(seed, PURPOSE_PATH, n);
    let mut sq = vec![0.0; n];

    let mut report = MomentBoundReport {
        k: lipschitz.k,
        initial_gap: gap,
        bound,
        sup_mean_sq: gap,
        sup_time: grid.t_start(),
        margin: 0.0,
        worst_excess: f64::NEG_INFINITY,
        pass: true,
    };
    let record = |t: f64, sq: &[f64], report: &mut MomentBoundReport| {
        let nf = n as f64;
        let mean = sq.iter().sum::<f64>() / nf;
        let var = sq.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (nf - 1.0);
        let margin = 3.0 * var.sqrt() / nf.sqrt();
        if mean > report.sup_mean_sq || t == grid.t_start() {
            report.sup_mean_sq = mean;
            report.sup_time = t;
            report.margin = margin;
        }
        report.worst_excess = report.worst_excess.max(mean - bound - margin);
    };
    sq.fill(gap);
    record(grid.t_start(), &sq, &mut report);

    for k in 0..grid.n_steps() {
        let t = grid.node(k);
        pairs
            .par_chunks_mut(2 * d)
            .zip(rngs.par_iter_mut())
            .zip(sq.par_iter_mut())
            .enumerate()
            .try_for_each_init(
                || (StepScratch::new(d, m), StepScratch::new(d, m)),
                |(sa, sb), (i, ((pair, rng), out))| {
                    let (a, b) = pair.split_at_mut(d);
                    model.drift(t, a, &mut sa.drift);
                    model.dispersion(t, a, &mut sa.sigma);
                    model.drift(t, b, &mut sb.drift);
                    model.dispersion(t, b, &mut sb.sigma);
                    let sqdt = dt.sqrt();
                    for xi in sa.noise.iter_mut() {
                        *xi = rng.sample::<f64, _>(StandardNormal) * sqdt;
                    }
                    for i in 0..d {
                        let mut ia = sa.drift[i] * dt;
                        let mut ib = sb.drift[i] * dt;
                        for j in 0..m {
                            ia += sa.sigma[i * m + j] * sa.noise[j];
                            ib += sb.sigma[i * m + j] * sa.noise[j];
                        }
                        a[i] += ia;
                        b[i] += ib;
                    }
                    if !(a.iter().chain(b.iter()).all(|v| v.is_finite())) {
                        return Err(Error::Diverged { particle: i, step: k });
                    }
                    *out = a.iter().zip(b.iter()).map(|(u, v)| (u - v) * (u - v)).sum();
                    Ok(())
                },
            )?;
        record(grid.node(k + 1), &sq, &mut report);
    }
    report.pass = report.worst_excess <= 0.0;
    Ok(report)
}

/// Unbiased sample mean and covariance.
pub fn empirical_moments(ens: &ParticleEnsemble) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = ens.len();
    if n < 2 {
        return Err(invalid("sample covariance needs at least two particles"));
    }
    let d = ens.dim();
    let mut mean = DVector::zeros(d);
    for p in ens.particles() {
        for i in 0..d {
            mean[i] += p[i];
        }
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for p in ens.particles() {
        for i in 0..d {
            for j in 0..d {
                cov[(i, j)] += (p[i] - mean[i]) * (p[j] - mean[j]);
            }
        }
    }
    cov /= (n - 1) as f64;
    Ok((mean, cov))
}

/// Writes snapshots as `t,particle_id,x1..xd` with 17 significant digits.
pub fn write_snapshots_csv<W: Write>(snapshots: &[ParticleEnsemble], mut w: W) -> std::io::Result<()> {
    let Some(first) = snapshots.first() else {
        return Ok(());
    };
    let d = first.dim();
    write!(w, "t,particle_id")?;
    for i in 1..=d {
        write!(w, ",x{i}")?;
    }
    writeln!(w)?;
    for snap in snapshots {
        for (id, p) in snap.particles().enumerate() {
            write!(w, "{:.16e},{id}", snap.time)?;
            for v in p {
                write!(w, ",{v:.16e}")?;
            }
            writeln!(w)?;
        }
    }
    Ok(())
}

/// Parses the snapshot CSV format back into ensembles. Rows sharing a time
/// stamp form one snapshot; particle ids must count up from zero.
pub fn parse_snapshots_csv(text: &str) -> Result<Vec<ParticleEnsemble>> {
    let parse_err = |line: usize, message: String| Error::Parse { line, message };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| parse_err(1, "empty input".into()))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.len() < 3 || cols[0] != "t" || cols[1] != "particle_id" {
        return Err(parse_err(1, "header must start with t,particle_id".into()));
    }
    for (i, c) in cols[2..].iter().enumerate() {
        if *c != format!("x{}", i + 1) {
            return Err(parse_err(1, format!("unexpected column '{c}'")));
        }
    }
    let d = cols.len() - 2;
    let mut out: Vec<ParticleEnsemble> = Vec::new();
    let mut current: Option<(f64, Vec<f64>)> = None;
    for (idx, line) in lines {
        let lineno = idx + 1;
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != d + 2 {
            return Err(parse_err(lineno, format!("expected {} fields, got {}", d + 2, fields.len())));
        }
        let num = |s: &str| -> Result<f64> {
            let v: f64 = s.parse().map_err(|_| parse_err(lineno, format!("'{s}' is not a number")))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(parse_err(lineno, format!("'{s}' is not finite")))
            }
        };
        let t = num(fields[0])?;
        let id: usize = fields[1]
            .parse()
            .map_err(|_| parse_err(lineno, format!("'{}' is not a particle id", fields[1])))?;
        let starts_new = match &current {
            Some((ct, _)) => *ct != t,
            None => true,
        };
        if starts_new {
            if let Some((ct, pos)) = current.take() {
                out.push(ParticleEnsemble::new(ct, d, pos, 0)?);
            }
            current = Some((t, Vec::new()));
        }
        let (_, pos) = current.as_mut().expect("set above");
        if id != pos.len() / d {
            return Err(parse_err(lineno, format!("particle id {id} out of sequence")));
        }
        for f in &fields[2..] {
            pos.push(num(f)?);
        }
    }
    if let Some((ct, pos)) = current {
        out.push(ParticleEnsemble::new(ct, d, pos, 0)?);
    }
    if out.is_empty() {
        return Err(parse_err(1, "no data rows".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::GaussianMixture;
    use crate::models::{DiffusionModel, ScalarDispersion};
    use nalgebra::{dmatrix, dvector};

    #[test]
    fn dirac_sampling_copies_the_point() {
        let e = sample_initial(&InitialDistribution::dirac(vec![1.5, -2.0]), 5, 3).unwrap();
        assert_eq!(e.len(), 5);
        assert!(e.particles().all(|p| p == [1.5, -2.0]));
        assert!(sample_initial(&InitialDistribution::dirac(vec![0.0]), 0, 3).is_err());
    }

    #[test]
    fn gaussian_sampling_mean_within_clt_bound() {
        let n = 100_000;
        let e = sample_initial(&InitialDistribution::normal(0.0, 1.0).unwrap(), n, 11).unwrap();
        let (mean, cov) = empirical_moments(&e).unwrap();
        assert!(mean[0].abs() < 3.0 / (n as f64).sqrt());
        assert!((cov[(0, 0)] - 1.0).abs() < 0.02);
    }

    #[test]
    fn empirical_bootstrap_stays_in_sample() {
        let sample = vec![0.1, 0.7, -3.0];
        let dist = InitialDistribution::empirical(1, sample.clone()).unwrap();
        let e = sample_initial(&dist, 50, 2).unwrap();
        assert!(e.positions().iter().all(|v| sample.contains(v)));
    }

    #[test]
    fn non_psd_covariance_is_rejected() {
        assert!(GaussianMixture::gaussian(dvector![0.0, 0.0], dmatrix![1.0, 2.0; 2.0, 1.0]).is_err());
    }

    #[test]
    fn frozen_particles_without_coefficients() {
        let model = DiffusionModel::linear_drift(0.0, ScalarDispersion::Constant(0.0));
        let init = sample_initial(&InitialDistribution::normal(0.0, 1.0).unwrap(), 20, 1).unwrap();
        let grid = TimeGrid::horizon(1.0, 10).unwrap();
        let path = euler_maruyama_path(&model, &init, &grid, 5, SnapshotPolicy::Full).unwrap();
        assert_eq!(path.snapshots.len(), 11);
        assert_eq!(path.terminal().positions(), init.positions());
    }

    #[test]
    fn thinning_keeps_first_and_last() {
        let model = DiffusionModel::heat(1, 1.0);
        let init = sample_initial(&InitialDistribution::dirac(vec![0.0]), 4, 1).unwrap();
        let grid = TimeGrid::horizon(1.0, 1001).unwrap();
        let path = euler_maruyama_path(&model, &init, &grid, 5, SnapshotPolicy::Thinned).unwrap();
        let stride = 6;
        assert_eq!(SnapshotPolicy::Thinned.stride(1001), stride);
        assert_eq!(path.snapshots[0].time, 0.0);
        assert_eq!(path.terminal().time, 1.0);
        assert_eq!(path.snapshots.len(), 1 + 1001 / stride + 1);
        assert!(path.snapshots.windows(2).all(|w| w[1].time > w[0].time));
    }

    #[test]
    fn divergence_reports_particle_and_step() {
        let model = DiffusionModel::new("blowup", 1, 1, |_, x, o| o[0] = x[0] * 1e200, |_, _, o| o[0] = 0.0);
        let init = ParticleEnsemble::new(0.0, 1, vec![0.0, 1e200], 0).unwrap();
        let grid = TimeGrid::horizon(1.0, 5).unwrap();
        let err = euler_maruyama_path(&model, &init, &grid, 1, SnapshotPolicy::Full).unwrap_err();
        assert_eq!(err, Error::Diverged { particle: 1, step: 0 });
    }

    #[test]
    fn moments_of_small_samples() {
        let e = ParticleEnsemble::new(0.0, 1, vec![-1.0, 1.0], 0).unwrap();
        let (m, c) = empirical_moments(&e).unwrap();
        assert_eq!((m[0], c[(0, 0)]), (0.0, 2.0));
        let e = ParticleEnsemble::new(0.0, 2, vec![3.0, 4.0].repeat(10), 0).unwrap();
        let (m, c) = empirical_moments(&e).unwrap();
        assert_eq!(m.as_slice(), &[3.0, 4.0]);
        assert_eq!(c, DMatrix::zeros(2, 2));
        assert!(empirical_moments(&ParticleEnsemble::new(0.0, 1, vec![1.0], 0).unwrap()).is_err());
    }

    #[test]
    fn moment_bound_exact_for_constant_coefficients() {
        let model = DiffusionModel::linear_drift(0.0, ScalarDispersion::Constant(1.0));
        let grid = TimeGrid::horizon(1.0, 50).unwrap();
        let lip = LipschitzEstimate::new(0.0, vec![0.0]);
        let r = check_moment_bound(&model, &[0.0], &[0.5], &grid, 100, 1, &lip).unwrap();
        assert!((r.sup_mean_sq - 0.25).abs() < 1e-12);
        assert_eq!(r.bound, 0.25);
        assert!(r.pass);
        let r = check_moment_bound(&model, &[0.3], &[0.3], &grid, 100, 1, &lip).unwrap();
        assert_eq!(r.sup_mean_sq, 0.0);
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let e = ParticleEnsemble::new(0.25, 2, vec![0.1, 1.0 / 3.0, -2.5, 1e-300], 0).unwrap();
        let mut buf = Vec::new();
        write_snapshots_csv(std::slice::from_ref(&e), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,particle_id,x1,x2\n"));
        let back = parse_snapshots_csv(&text).unwrap();
        assert_eq!(back[0].positions(), e.positions());
        assert_eq!(back[0].time, 0.25);

        assert!(parse_snapshots_csv("").is_err());
        assert!(parse_snapshots_csv("t,id,x1\n").is_err());
        match parse_snapshots_csv("t,particle_id,x1\n0,0,1.0\n0,2,1.0\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(parse_snapshots_csv("t,particle_id,x1\n0,0,nan\n").is_err());
    }
}
