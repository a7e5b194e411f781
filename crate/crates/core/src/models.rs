//! Diffusion coefficients `b`, `sigma` and `Sigma = sigma sigma^T`.
//!
//! Coefficients are exposed through the [`Diffusion`] trait, which works on
//! flat slices so that particle loops stay allocation free. Derivatives fall
//! back to central finite differences when a model does not provide them.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use serde::Serialize;

use crate::error::{invalid, Result};
use crate::linalg_ode::min_sym_eigenvalue;

/// Central-difference step for coordinate value `x`.
pub fn fd_step(x: f64) -> f64 {
    1e-6f64.max(1e-6 * x.abs())
}

pub trait Diffusion: Send + Sync {
    /// State dimension `d`.
    fn dim(&self) -> usize;

    /// Noise dimension `m`.
    fn noise_dim(&self) -> usize;

    fn drift(&self, t: f64, x: &[f64], out: &mut [f64]);

    /// Dispersion `sigma(t, x)`, written row-major into a `d * m` buffer.
    fn dispersion(&self, t: f64, x: &[f64], out: &mut [f64]);

    /// Jacobian of the drift, row-major `d x d`.
    fn drift_jacobian(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let d = self.dim();
        let mut xp = x.to_vec();
        let mut fp = vec![0.0; d];
        let mut fm = vec![0.0; d];
        for j in 0..d {
            let h = fd_step(x[j]);
            xp[j] = x[j] + h;
            self.drift(t, &xp, &mut fp);
            xp[j] = x[j] - h;
            self.drift(t, &xp, &mut fm);
            xp[j] = x[j];
            for i in 0..d {
                out[i * d + j] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
    }

    /// Jacobian of dispersion column `col`, row-major `d x d`.
    fn dispersion_column_jacobian(&self, t: f64, x: &[f64], col: usize, out: &mut [f64]) {
        let (d, m) = (self.dim(), self.noise_dim());
        let mut xp = x.to_vec();
        let mut sp = vec![0.0; d * m];
        let mut sm = vec![0.0; d * m];
        for j in 0..d {
            let h = fd_step(x[j]);
            xp[j] = x[j] + h;
            self.dispersion(t, &xp, &mut sp);
            xp[j] = x[j] - h;
            self.dispersion(t, &xp, &mut sm);
            xp[j] = x[j];
            for i in 0..d {
                out[i * d + j] = (sp[i * m + col] - sm[i * m + col]) / (2.0 * h);
            }
        }
    }

    /// Row divergences `sum_j d_j Sigma_ij(t, x)`.
    fn sigma_row_divergence(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let d = self.dim();
        let mut xp = x.to_vec();
        out.iter_mut().for_each(|v| *v = 0.0);
        for j in 0..d {
            let h = fd_step(x[j]);
            xp[j] = x[j] + h;
            let sp = sigma_sigma_t(self, t, &xp);
            xp[j] = x[j] - h;
            let sm = sigma_sigma_t(self, t, &xp);
            xp[j] = x[j];
            for i in 0..d {
                out[i] += (sp[(i, j)] - sm[(i, j)]) / (2.0 * h);
            }
        }
    }

    /// Whether the coefficients depend on the state (false for OU-type models).
    fn state_dependent_dispersion(&self) -> bool {
        true
    }
}

impl<D: Diffusion + ?Sized> Diffusion for Arc<D> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn noise_dim(&self) -> usize {
        (**self).noise_dim()
    }
    fn drift(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (**self).drift(t, x, out)
    }
    fn dispersion(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (**self).dispersion(t, x, out)
    }
    fn drift_jacobian(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (**self).drift_jacobian(t, x, out)
    }
    fn dispersion_column_jacobian(&self, t: f64, x: &[f64], col: usize, out: &mut [f64]) {
        (**self).dispersion_column_jacobian(t, x, col, out)
    }
    fn sigma_row_divergence(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (**self).sigma_row_divergence(t, x, out)
    }
    fn state_dependent_dispersion(&self) -> bool {
        (**self).state_dependent_dispersion()
    }
}

/// `Sigma(t, x) = sigma sigma^T`, symmetric by construction.
pub fn sigma_sigma_t<M: Diffusion + ?Sized>(model: &M, t: f64, x: &[f64]) -> DMatrix<f64> {
    let (d, m) = (model.dim(), model.noise_dim());
    let mut buf = vec![0.0; d * m];
    model.dispersion(t, x, &mut buf);
    let sigma = DMatrix::from_row_slice(d, m, &buf);
    let mut s = &sigma * sigma.transpose();
    crate::linalg_ode::symmetrize(&mut s);
    s
}

pub fn drift_vec<M: Diffusion + ?Sized>(model: &M, t: f64, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; model.dim()];
    model.drift(t, x, &mut out);
    out
}

pub fn dispersion_matrix<M: Diffusion + ?Sized>(model: &M, t: f64, x: &[f64]) -> DMatrix<f64> {
    let mut buf = vec![0.0; model.dim() * model.noise_dim()];
    model.dispersion(t, x, &mut buf);
    DMatrix::from_row_slice(model.dim(), model.noise_dim(), &buf)
}

type VecFn = dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync;
type ColFn = dyn Fn(f64, &[f64], usize, &mut [f64]) + Send + Sync;

/// Closure-backed diffusion with optional analytic derivatives.
#[derive(Clone)]
pub struct DiffusionModel {
    name: String,
    dim: usize,
    noise_dim: usize,
    drift: Arc<VecFn>,
    dispersion: Arc<VecFn>,
    drift_jacobian: Option<Arc<VecFn>>,
    dispersion_jacobian: Option<Arc<ColFn>>,
    row_divergence: Option<Arc<VecFn>>,
    state_dependent: bool,
}

impl std::fmt::Debug for DiffusionModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DiffusionModel")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("noise_dim", &self.noise_dim)
            .finish_non_exhaustive()
    }
}

impl DiffusionModel {
    pub fn new<B, S>(name: impl Into<String>, dim: usize, noise_dim: usize, drift: B, dispersion: S) -> Self
    where
        B: Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
        S: Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        Self {
            name: name.into(),
            dim,
            noise_dim,
            drift: Arc::new(drift),
            dispersion: Arc::new(dispersion),
            drift_jacobian: None,
            dispersion_jacobian: None,
            row_divergence: None,
            state_dependent: true,
        }
    }

    pub fn with_drift_jacobian<F>(mut self, f: F) -> Self
    where
        F: Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        self.drift_jacobian = Some(Arc::new(f));
        self
    }

    pub fn with_dispersion_jacobian<F>(mut self, f: F) -> Self
    where
        F: Fn(f64, &[f64], usize, &mut [f64]) + Send + Sync + 'static,
    {
        self.dispersion_jacobian = Some(Arc::new(f));
        self
    }

    pub fn with_row_divergence<F>(mut self, f: F) -> Self
    where
        F: Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        self.row_divergence = Some(Arc::new(f));
        self
    }

    /// Marks the dispersion as a function of time only.
    pub fn space_independent_dispersion(mut self) -> Self {
        self.state_dependent = false;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// `b = 0`, `sigma = scale * I` in dimension `d`.
    pub fn heat(dim: usize, scale: f64) -> Self {
        Self::new(
            "heat",
            dim,
            dim,
            |_, _, out| out.fill(0.0),
            move |_, _, out| {
                out.fill(0.0);
                for i in 0..dim {
                    out[i * dim + i] = scale;
                }
            },
        )
        .with_drift_jacobian(|_, _, out| out.fill(0.0))
        .with_dispersion_jacobian(|_, _, _, out| out.fill(0.0))
        .with_row_divergence(|_, _, out| out.fill(0.0))
        .space_independent_dispersion()
    }

    /// Affine drift `b(t, x) = b0 + b1 x` with constant dispersion.
    pub fn affine(b0: Vec<f64>, b1: DMatrix<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        let d = b0.len();
        if b1.nrows() != d || b1.ncols() != d || sigma.nrows() != d {
            return Err(invalid("affine model dimensions do not match"));
        }
        let m = sigma.ncols();
        let jac: Vec<f64> = row_major(&b1);
        let sig: Vec<f64> = row_major(&sigma);
        let b1c = b1.clone();
        Ok(Self::new(
            "affine",
            d,
            m,
            move |_, x, out| {
                for i in 0..d {
                    out[i] = b0[i] + (0..d).map(|j| b1c[(i, j)] * x[j]).sum::<f64>();
                }
            },
            move |_, _, out| out.copy_from_slice(&sig),
        )
        .with_drift_jacobian(move |_, _, out| out.copy_from_slice(&jac))
        .with_dispersion_jacobian(|_, _, _, out| out.fill(0.0))
        .with_row_divergence(|_, _, out| out.fill(0.0))
        .space_independent_dispersion())
    }

    /// Scalar model `b(x) = amplitude * sin(x)` with the given dispersion.
    pub fn sin_drift(amplitude: f64, dispersion: ScalarDispersion) -> Self {
        Self::scalar("sin-drift", move |x| amplitude * x.sin(), move |x| amplitude * x.cos(), dispersion)
    }

    /// Scalar model `b(x) = rate * x` with the given dispersion.
    pub fn linear_drift(rate: f64, dispersion: ScalarDispersion) -> Self {
        Self::scalar("linear-drift", move |x| rate * x, move |_| rate, dispersion)
    }

    fn scalar<B, J>(name: &str, b: B, jb: J, disp: ScalarDispersion) -> Self
    where
        B: Fn(f64) -> f64 + Send + Sync + 'static,
        J: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        let model = Self::new(
            name,
            1,
            1,
            move |_, x, out| out[0] = b(x[0]),
            move |_, x, out| out[0] = disp.value(x[0]),
        )
        .with_drift_jacobian(move |_, x, out| out[0] = jb(x[0]))
        .with_dispersion_jacobian(move |_, x, _, out| out[0] = disp.derivative(x[0]))
        .with_row_divergence(move |_, x, out| out[0] = 2.0 * disp.value(x[0]) * disp.derivative(x[0]));
        if matches!(disp, ScalarDispersion::Constant(_)) {
            model.space_independent_dispersion()
        } else {
            model
        }
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

/// One-dimensional dispersion families.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum ScalarDispersion {
    Constant(f64),
    /// `scale * sqrt(1 + min(x^2, clip^2))`.
    SqrtOnePlusSquare { scale: f64, clip: f64 },
}

impl ScalarDispersion {
    pub fn value(&self, x: f64) -> f64 {
        match *self {
            Self::Constant(s) => s,
            Self::SqrtOnePlusSquare { scale, clip } => {
                let y = x.clamp(-clip, clip);
                scale * (1.0 + y * y).sqrt()
            }
        }
    }

    pub fn derivative(&self, x: f64) -> f64 {
        match *self {
            Self::Constant(_) => 0.0,
            Self::SqrtOnePlusSquare { scale, clip } => {
                if x.abs() > clip {
                    0.0
                } else {
                    scale * x / (1.0 + x * x).sqrt()
                }
            }
        }
    }
}

impl Diffusion for DiffusionModel {
    fn dim(&self) -> usize {
        self.dim
    }

    fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    fn drift(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (self.drift)(t, x, out)
    }

    fn dispersion(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (self.dispersion)(t, x, out)
    }

    fn drift_jacobian(&self, t: f64, x: &[f64], out: &mut [f64]) {
        match &self.drift_jacobian {
            Some(f) => f(t, x, out),
            None => fd_drift_jacobian(self, t, x, out),
        }
    }

    fn dispersion_column_jacobian(&self, t: f64, x: &[f64], col: usize, out: &mut [f64]) {
        match &self.dispersion_jacobian {
            Some(f) => f(t, x, col, out),
            None => fd_dispersion_jacobian(self, t, x, col, out),
        }
    }

    fn sigma_row_divergence(&self, t: f64, x: &[f64], out: &mut [f64]) {
        match &self.row_divergence {
            Some(f) => f(t, x, out),
            None => fd_row_divergence(self, t, x, out),
        }
    }

    fn state_dependent_dispersion(&self) -> bool {
        self.state_dependent
    }
}

// Finite-difference helpers that bypass overridden trait methods.
struct Raw<'a>(&'a DiffusionModel);

impl Diffusion for Raw<'_> {
    fn dim(&self) -> usize {
        self.0.dim
    }
    fn noise_dim(&self) -> usize {
        self.0.noise_dim
    }
    fn drift(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (self.0.drift)(t, x, out)
    }
    fn dispersion(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (self.0.dispersion)(t, x, out)
    }
}

fn fd_drift_jacobian(m: &DiffusionModel, t: f64, x: &[f64], out: &mut [f64]) {
    Raw(m).drift_jacobian(t, x, out)
}

fn fd_dispersion_jacobian(m: &DiffusionModel, t: f64, x: &[f64], col: usize, out: &mut [f64]) {
    Raw(m).dispersion_column_jacobian(t, x, col, out)
}

fn fd_row_divergence(m: &DiffusionModel, t: f64, x: &[f64], out: &mut [f64]) {
    Raw(m).sigma_row_divergence(t, x, out)
}

/// Coefficients that are time-homogeneous on each interval `]t_{k-1}, t_k]`
/// (the first interval is closed at `t_0`).
#[derive(Clone)]
pub struct PiecewiseHomogeneousModel {
    breakpoints: Vec<f64>,
    pieces: Vec<Arc<dyn Diffusion>>,
}

impl std::fmt::Debug for PiecewiseHomogeneousModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PiecewiseHomogeneousModel")
            .field("breakpoints", &self.breakpoints)
            .finish_non_exhaustive()
    }
}

impl PiecewiseHomogeneousModel {
    /// `breakpoints` holds `t_0 < t_1 < ... < t_n`; `pieces[k]` applies on the
    /// k-th interval.
    pub fn new(breakpoints: Vec<f64>, pieces: Vec<Arc<dyn Diffusion>>) -> Result<Self> {
        if breakpoints.len() < 2 || pieces.len() != breakpoints.len() - 1 {
            return Err(invalid("piecewise model needs n+1 breakpoints for n pieces"));
        }
        if breakpoints.windows(2).any(|w| !(w[1] > w[0])) || breakpoints.iter().any(|t| !t.is_finite()) {
            return Err(invalid("breakpoints must be finite and strictly increasing"));
        }
        let (d, m) = (pieces[0].dim(), pieces[0].noise_dim());
        if pieces.iter().any(|p| p.dim() != d || p.noise_dim() != m) {
            return Err(invalid("all pieces must share dimensions"));
        }
        Ok(Self { breakpoints, pieces })
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    /// Index of the interval containing `t`; breakpoints belong to the
    /// interval on their left.
    pub fn piece_index(&self, t: f64) -> usize {
        let interior = &self.breakpoints[1..self.breakpoints.len() - 1];
        interior.iter().take_while(|&&b| t > b).count()
    }

    fn piece(&self, t: f64) -> &dyn Diffusion {
        self.pieces[self.piece_index(t)].as_ref()
    }
}

impl Diffusion for PiecewiseHomogeneousModel {
    fn dim(&self) -> usize {
        self.pieces[0].dim()
    }
    fn noise_dim(&self) -> usize {
        self.pieces[0].noise_dim()
    }
    fn drift(&self, t: f64, x: &[f64], out: &mut [f64]) {
        self.piece(t).drift(t, x, out)
    }
    fn dispersion(&self, t: f64, x: &[f64], out: &mut [f64]) {
        self.piece(t).dispersion(t, x, out)
    }
    fn drift_jacobian(&self, t: f64, x: &[f64], out: &mut [f64]) {
        self.piece(t).drift_jacobian(t, x, out)
    }
    fn dispersion_column_jacobian(&self, t: f64, x: &[f64], col: usize, out: &mut [f64]) {
        self.piece(t).dispersion_column_jacobian(t, x, col, out)
    }
    fn sigma_row_divergence(&self, t: f64, x: &[f64], out: &mut [f64]) {
        self.piece(t).sigma_row_divergence(t, x, out)
    }
    fn state_dependent_dispersion(&self) -> bool {
        self.pieces.iter().any(|p| p.state_dependent_dispersion())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EllipticityReport {
    pub min_eigenvalue: f64,
    /// Sample index where the minimum was attained.
    pub argmin: usize,
    pub epsilon: f64,
    pub pass: bool,
}

/// Minimum over `(t, x)` samples of the smallest eigenvalue of `Sigma(t, x)`.
pub fn check_ellipticity<M: Diffusion + ?Sized>(
    model: &M,
    samples: &[(f64, Vec<f64>)],
    epsilon: f64,
) -> Result<EllipticityReport> {
    if samples.is_empty() {
        return Err(invalid("ellipticity check needs at least one sample point"));
    }
    let (argmin, min_eigenvalue) = samples
        .iter()
        .map(|(t, x)| min_sym_eigenvalue(&sigma_sigma_t(model, *t, x)))
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, v)| if v < acc.1 { (i, v) } else { acc });
    Ok(EllipticityReport { min_eigenvalue, argmin, epsilon, pass: min_eigenvalue >= epsilon })
}

/// Axis-aligned box in state space.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoxDomain {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxDomain {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(invalid("box bounds must have equal, non-zero length"));
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(u > l) || !l.is_finite() || !u.is_finite()) {
            return Err(invalid("box has zero volume"));
        }
        Ok(Self { lower, upper })
    }

    pub fn cube(dim: usize, half_width: f64) -> Result<Self> {
        Self::new(vec![-half_width; dim], vec![half_width; dim])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter().zip(self.lower.iter().zip(&self.upper)).all(|(v, (l, u))| v >= l && v <= u)
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(l, u)| rng.random_range(*l..=*u)).collect()
    }

    fn clamp(&self, x: &mut [f64]) {
        for (v, (l, u)) in x.iter_mut().zip(self.lower.iter().zip(&self.upper)) {
            *v = v.clamp(*l, *u);
        }
    }
}

/// Sampled suprema of the coefficient Jacobian norms.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LipschitzEstimate {
    pub k_b: f64,
    pub k_sigma: Vec<f64>,
    /// `2 K_b + sum_j K_sigma_j^2`.
    pub k: f64,
}

impl LipschitzEstimate {
    pub fn new(k_b: f64, k_sigma: Vec<f64>) -> Self {
        let k = 2.0 * k_b + k_sigma.iter().map(|s| s * s).sum::<f64>();
        Self { k_b, k_sigma, k }
    }
}

fn frobenius(buf: &[f64]) -> f64 {
    buf.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Jacobian norms `(|Jb|, |J sigma_.j|...)` at one point.
fn jacobian_norms<M: Diffusion + ?Sized>(model: &M, t: f64, x: &[f64], buf: &mut [f64]) -> (f64, Vec<f64>) {
    model.drift_jacobian(t, x, buf);
    let kb = frobenius(buf);
    let ks = (0..model.noise_dim())
        .map(|j| {
            model.dispersion_column_jacobian(t, x, j, buf);
            frobenius(buf)
        })
        .collect();
    (kb, ks)
}

/// Monte Carlo estimate of the Lipschitz constants over `domain x t_samples`.
///
/// Probes are drawn uniformly from the box; whenever a probe raises a running
/// maximum, a deterministic pattern search refines around it. The point set
/// for `n` probes is a prefix of the set for `n + k` probes, so the estimate
/// never decreases as probes are added. It is a lower bound of the supremum.
pub fn estimate_lipschitz<M: Diffusion + ?Sized, R: Rng>(
    model: &M,
    domain: &BoxDomain,
    t_samples: &[f64],
    n_probes: usize,
    rng: &mut R,
) -> Result<LipschitzEstimate> {
    if domain.dim() != model.dim() {
        return Err(invalid("domain dimension does not match model"));
    }
    if t_samples.is_empty() {
        return Err(invalid("need at least one time sample"));
    }
    let d = model.dim();
    let m = model.noise_dim();
    let mut buf = vec![0.0; d * d];
    let mut k_b = 0.0f64;
    let mut k_sigma = vec![0.0f64; m];
    let widths: Vec<f64> = domain.lower.iter().zip(&domain.upper).map(|(l, u)| u - l).collect();

    for _ in 0..n_probes {
        let x = domain.sample(rng);
        for &t in t_samples {
            let (kb, ks) = jacobian_norms(model, t, &x, &mut buf);
            if kb > k_b {
                k_b = kb;
                k_b = refine(&x, &widths, domain, k_b, |y: &[f64], b: &mut [f64]| {
                    jacobian_norms(model, t, y, b).0
                }, &mut buf);
            }
            for j in 0..m {
                if ks[j] > k_sigma[j] {
                    k_sigma[j] = ks[j];
                    k_sigma[j] = refine(&x, &widths, domain, k_sigma[j], |y: &[f64], b: &mut [f64]| {
                        model.dispersion_column_jacobian(t, y, j, b);
                        frobenius(b)
                    }, &mut buf);
                }
            }
        }
    }
    Ok(LipschitzEstimate::new(k_b, k_sigma))
}

fn refine<F>(start: &[f64], widths: &[f64], domain: &BoxDomain, mut best: f64, f: F, buf: &mut [f64]) -> f64
where
    F: Fn(&[f64], &mut [f64]) -> f64,
{
    let mut x = start.to_vec();
    let mut step: Vec<f64> = widths.iter().map(|w| 0.05 * w).collect();
    for _ in 0..40 {
        let mut improved = false;
        for j in 0..x.len() {
            for sign in [1.0, -1.0] {
                let mut y = x.clone();
                y[j] += sign * step[j];
                domain.clamp(&mut y);
                let v = f(&y, buf);
                if v > best {
                    best = v;
                    x = y;
                    improved = true;
                }
            }
        }
        if !improved {
            step.iter_mut().for_each(|s| *s *= 0.5);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sigma_sigma_t_identity_and_rank_one() {
        let heat = DiffusionModel::heat(2, 1.0);
        assert_eq!(sigma_sigma_t(&heat, 0.0, &[0.3, 0.1]), DMatrix::identity(2, 2));
        let col = DiffusionModel::new("col", 2, 1, |_, _, o| o.fill(0.0), |_, _, o| o.fill(1.0));
        let s = sigma_sigma_t(&col, 0.0, &[0.0, 0.0]);
        assert_eq!(s, DMatrix::from_element(2, 2, 1.0));
        assert_eq!(s.rank(1e-12), 1);
    }

    #[test]
    fn ellipticity_reports() {
        let heat = DiffusionModel::heat(2, 1.0);
        let samples = vec![(0.0, vec![0.0, 0.0]), (0.5, vec![3.0, -1.0])];
        let r = check_ellipticity(&heat, &samples, 0.5).unwrap();
        assert!(r.pass);
        assert_relative_eq!(r.min_eigenvalue, 1.0, epsilon = 1e-14);

        let degenerate = DiffusionModel::new("deg", 2, 2, |_, _, o| o.fill(0.0), |_, _, o| {
            o.copy_from_slice(&[1.0, 0.0, 0.0, 0.0])
        });
        let r = check_ellipticity(&degenerate, &samples, 1e-9).unwrap();
        assert!(!r.pass);
        assert!(r.min_eigenvalue.abs() < 1e-14);
        assert!(check_ellipticity(&heat, &[], 0.1).is_err());
    }

    #[test]
    fn ellipticity_grid_minimum() {
        let m = DiffusionModel::linear_drift(0.0, ScalarDispersion::SqrtOnePlusSquare { scale: 1.0, clip: 1e9 });
        let samples: Vec<_> = (0..=400).map(|i| (0.0, vec![-2.0 + i as f64 * 0.01])).collect();
        let r = check_ellipticity(&m, &samples, 0.5).unwrap();
        assert_relative_eq!(r.min_eigenvalue, 1.0, epsilon = 1e-12);
        assert_relative_eq!(samples[r.argmin].1[0], 0.0, epsilon = 1e-9);
    }

    #[test]
    fn lipschitz_trivial_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dom = BoxDomain::cube(1, 3.0).unwrap();
        let zero = DiffusionModel::linear_drift(0.0, ScalarDispersion::Constant(1.3));
        let e = estimate_lipschitz(&zero, &dom, &[0.0], 10, &mut rng).unwrap();
        assert_eq!((e.k_b, e.k_sigma.clone(), e.k), (0.0, vec![0.0], 0.0));

        let lin = DiffusionModel::linear_drift(2.0, ScalarDispersion::Constant(1.0));
        let e = estimate_lipschitz(&lin, &dom, &[0.0], 1, &mut rng).unwrap();
        assert_eq!(e.k_b, 2.0);
        assert_eq!(e.k, 4.0);
    }

    #[test]
    fn lipschitz_sin_drift_approaches_one() {
        let dom = BoxDomain::cube(1, 4.0).unwrap();
        let m = DiffusionModel::sin_drift(1.0, ScalarDispersion::Constant(1.0));
        // Dense-grid supremum of |cos| over the box.
        let oracle = (0..=80_000).map(|i| (-4.0 + i as f64 * 1e-4).cos().abs()).fold(0.0, f64::max);
        let mut prev = 0.0;
        for n in [1, 4, 16, 64] {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let e = estimate_lipschitz(&m, &dom, &[0.0], n, &mut rng).unwrap();
            assert!(e.k_b >= prev);
            assert!(e.k_b <= oracle + 1e-12);
            prev = e.k_b;
        }
        assert!((oracle - prev).abs() < 1e-6, "{prev} vs {oracle}");
    }

    #[test]
    fn finite_difference_fallback_matches_analytic() {
        let analytic = DiffusionModel::sin_drift(1.5, ScalarDispersion::SqrtOnePlusSquare { scale: 1.0, clip: 10.0 });
        let raw = DiffusionModel::new(
            "raw",
            1,
            1,
            |_, x, o| o[0] = 1.5 * x[0].sin(),
            |_, x, o| o[0] = (1.0 + x[0] * x[0]).sqrt(),
        );
        let mut a = [0.0];
        let mut b = [0.0];
        for x in [-2.0, -0.3, 0.0, 0.7, 3.0] {
            analytic.drift_jacobian(0.0, &[x], &mut a);
            raw.drift_jacobian(0.0, &[x], &mut b);
            assert_relative_eq!(a[0], b[0], epsilon = 1e-8);
            analytic.dispersion_column_jacobian(0.0, &[x], 0, &mut a);
            raw.dispersion_column_jacobian(0.0, &[x], 0, &mut b);
            assert_relative_eq!(a[0], b[0], epsilon = 1e-8);
            analytic.sigma_row_divergence(0.0, &[x], &mut a);
            raw.sigma_row_divergence(0.0, &[x], &mut b);
            assert_relative_eq!(a[0], b[0], epsilon = 1e-7);
        }
    }

    #[test]
    fn piecewise_breakpoint_convention() {
        let a: Arc<dyn Diffusion> = Arc::new(DiffusionModel::linear_drift(1.0, ScalarDispersion::Constant(1.0)));
        let b: Arc<dyn Diffusion> = Arc::new(DiffusionModel::linear_drift(-3.0, ScalarDispersion::Constant(2.0)));
        let pw = PiecewiseHomogeneousModel::new(vec![0.0, 0.5, 1.0], vec![a, b]).unwrap();
        let mut out = [0.0];
        pw.drift(0.0, &[1.0], &mut out);
        assert_eq!(out[0], 1.0);
        pw.drift(0.25, &[1.0], &mut out);
        assert_eq!(out[0], 1.0);
        pw.drift(0.5, &[1.0], &mut out);
        assert_eq!(out[0], 1.0, "breakpoint belongs to the left interval");
        pw.drift(0.5 + 1e-12, &[1.0], &mut out);
        assert_eq!(out[0], -3.0);
        pw.dispersion(1.0, &[0.0], &mut out);
        assert_eq!(out[0], 2.0);
        assert!(PiecewiseHomogeneousModel::new(vec![0.0, 0.0], vec![]).is_err());
    }

    #[test]
    fn degenerate_box_rejected() {
        assert!(BoxDomain::new(vec![0.0, 1.0], vec![1.0, 1.0]).is_err());
    }
}
