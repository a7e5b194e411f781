//! Closed-form Ornstein-Uhlenbeck machinery: Gaussian marginals, Fourier
//! forward and backward maps and the exact reversal drift.
//!
//! With `b(t, x) = C(t) x` and `Sigma = sigma sigma^T`, the marginal started
//! at `x0` is `N(R(t) x0, Q_t)`. The Fourier transform (convention
//! `int e^{-i<xi, x>} mu(dx)`) evolves as
//!
//! `F u(t)(xi) = exp(-1/2 eta^T G(t) eta) F nu(eta)`, `eta = D^{-1}(t) xi`,
//!
//! where `G(t) = int_0^t D(s)^T Sigma(s) D(s) ds`. For `C = 0` the exponent
//! reduces to `int |sigma^T xi|^2 / 2`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::Serialize;

use crate::distributions::{GaussianMixture, InitialDistribution, MixtureDensity};
use crate::error::{invalid, Error, Result};
use crate::linalg_ode::{
    compute_ou_covariance, min_sym_eigenvalue, rk4_matrix, solve_adjoint_resolvent,
    solve_adjoint_resolvent_inverse, solve_resolvent, symmetrize, MatrixPath, TimeGrid,
};
use crate::models::{BoxDomain, Diffusion};

pub type MatrixFn = Arc<dyn Fn(f64) -> DMatrix<f64> + Send + Sync>;

/// OU model `dX = C(t) X dt + sigma(t) dW`.
#[derive(Clone)]
pub struct OuModel {
    c_fn: MatrixFn,
    sigma_fn: MatrixFn,
    dim: usize,
    noise_dim: usize,
}

impl std::fmt::Debug for OuModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OuModel").field("dim", &self.dim).field("noise_dim", &self.noise_dim).finish()
    }
}

impl OuModel {
    pub fn new<C, S>(c_fn: C, sigma_fn: S) -> Result<Self>
    where
        C: Fn(f64) -> DMatrix<f64> + Send + Sync + 'static,
        S: Fn(f64) -> DMatrix<f64> + Send + Sync + 'static,
    {
        let c0 = c_fn(0.0);
        let s0 = sigma_fn(0.0);
        if !c0.is_square() || c0.nrows() == 0 {
            return Err(invalid("OU generator must be a non-empty square matrix"));
        }
        if s0.nrows() != c0.nrows() || s0.ncols() == 0 {
            return Err(invalid("OU dispersion must have one row per state coordinate"));
        }
        Ok(Self { dim: c0.nrows(), noise_dim: s0.ncols(), c_fn: Arc::new(c_fn), sigma_fn: Arc::new(sigma_fn) })
    }

    pub fn constant(c: DMatrix<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        Self::new(move |_| c.clone(), move |_| sigma.clone())
    }

    /// `C = 0`, `sigma = I`.
    pub fn heat(dim: usize) -> Self {
        Self::constant(DMatrix::zeros(dim, dim), DMatrix::identity(dim, dim)).expect("identity is valid")
    }

    /// Scalar model `dX = c X dt + s dW`.
    pub fn scalar(c: f64, s: f64) -> Self {
        Self::constant(DMatrix::from_element(1, 1, c), DMatrix::from_element(1, 1, s)).expect("scalars are valid")
    }

    pub fn generator(&self, t: f64) -> DMatrix<f64> {
        (self.c_fn)(t)
    }

    pub fn sigma(&self, t: f64) -> DMatrix<f64> {
        (self.sigma_fn)(t)
    }

    /// `Sigma(t) = sigma sigma^T`, symmetrized.
    pub fn big_sigma(&self, t: f64) -> DMatrix<f64> {
        let s = self.sigma(t);
        let mut m = &s * s.transpose();
        symmetrize(&mut m);
        m
    }

    /// Whether `sigma(t)` is square and invertible at every node.
    pub fn sigma_invertible(&self, grid: &TimeGrid) -> bool {
        self.dim == self.noise_dim
            && grid.nodes().all(|t| {
                let s = self.sigma(t);
                let scale = s.norm().max(1.0);
                s.lu().determinant().abs() > 1e-12 * scale.powi(self.dim as i32)
            })
    }

    /// Builds the cached resolvent paths on `grid`.
    pub fn solve(&self, grid: &TimeGrid) -> Result<OuSolution> {
        OuSolution::new(self.clone(), grid)
    }
}

impl Diffusion for OuModel {
    fn dim(&self) -> usize {
        self.dim
    }

    fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    fn drift(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let c = self.generator(t);
        for i in 0..self.dim {
            out[i] = (0..self.dim).map(|j| c[(i, j)] * x[j]).sum();
        }
    }

    fn dispersion(&self, t: f64, _x: &[f64], out: &mut [f64]) {
        let s = self.sigma(t);
        for i in 0..self.dim {
            for j in 0..self.noise_dim {
                out[i * self.noise_dim + j] = s[(i, j)];
            }
        }
    }

    fn drift_jacobian(&self, t: f64, _x: &[f64], out: &mut [f64]) {
        let c = self.generator(t);
        for i in 0..self.dim {
            for j in 0..self.dim {
                out[i * self.dim + j] = c[(i, j)];
            }
        }
    }

    fn dispersion_column_jacobian(&self, _t: f64, _x: &[f64], _col: usize, out: &mut [f64]) {
        out.fill(0.0);
    }

    fn sigma_row_divergence(&self, _t: f64, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }

    fn state_dependent_dispersion(&self) -> bool {
        false
    }
}

/// Resolvents, covariance and Fourier Gram matrix of an OU model on a
/// master grid. Off-node times are interpolated.
#[derive(Debug, Clone)]
pub struct OuSolution {
    pub model: OuModel,
    pub resolvent: MatrixPath,
    pub adjoint: MatrixPath,
    pub adjoint_inverse: MatrixPath,
    pub covariance: MatrixPath,
    /// `G(t) = int_0^t D^T Sigma D ds`.
    pub gram: MatrixPath,
}

impl OuSolution {
    pub fn new(model: OuModel, grid: &TimeGrid) -> Result<Self> {
        if grid.t_start() != 0.0 {
            return Err(invalid("OU solutions start at t = 0"));
        }
        let c = |t: f64| model.generator(t);
        let s = |t: f64| model.big_sigma(t);
        let resolvent = solve_resolvent(c, grid)?;
        let adjoint = solve_adjoint_resolvent(c, grid)?;
        let adjoint_inverse = solve_adjoint_resolvent_inverse(c, grid)?;
        let covariance = compute_ou_covariance(c, s, grid)?;
        let d = model.dim;
        // State [D | G].
        let mut y0 = DMatrix::zeros(d, 2 * d);
        y0.view_mut((0, 0), (d, d)).fill_with_identity();
        let states = rk4_matrix(grid, y0, |t, y, _| {
            let dm = y.view((0, 0), (d, d)).into_owned();
            let mut out = DMatrix::zeros(d, 2 * d);
            out.view_mut((0, 0), (d, d)).copy_from(&(-(c(t).transpose() * &dm)));
            out.view_mut((0, d), (d, d)).copy_from(&(dm.transpose() * s(t) * &dm));
            Ok(out)
        })?;
        let gram = states
            .into_iter()
            .map(|y| {
                let mut g = y.view((0, d), (d, d)).into_owned();
                symmetrize(&mut g);
                g
            })
            .collect();
        let gram = MatrixPath::new(*grid, gram)?;
        Ok(Self { model, resolvent, adjoint, adjoint_inverse, covariance, gram })
    }

    pub fn grid(&self) -> &TimeGrid {
        self.resolvent.grid()
    }

    pub fn horizon(&self) -> f64 {
        self.grid().t_end()
    }

    pub fn dim(&self) -> usize {
        self.model.dim
    }

    fn check_time(&self, t: f64) -> Result<()> {
        let tol = 1e-12 * self.horizon().max(1.0);
        if !(t >= -tol && t <= self.horizon() + tol) {
            return Err(invalid(format!("t = {t} outside [0, {}]", self.horizon())));
        }
        Ok(())
    }
}

/// Marginal law at time `t` of the OU process started from `init`.
///
/// Dirac components at `x0` map to `N(R(t) x0, Q_t)`; Gaussian components
/// `N(m, V)` map to `N(R(t) m, R V R^T + Q_t)`.
pub fn ou_marginal(sol: &OuSolution, init: &InitialDistribution, t: f64) -> Result<GaussianMixture> {
    sol.check_time(t)?;
    if init.dim() != sol.dim() {
        return Err(invalid("initial law dimension does not match the model"));
    }
    let mix = init.as_mixture()?;
    if t <= 0.0 {
        if mix.has_atoms() {
            return Err(Error::NoDensityAtZero);
        }
        return Ok(mix);
    }
    let r = sol.resolvent.at(t);
    let q = sol.covariance.at(t);
    let means = mix.means().iter().map(|m| &r * m).collect();
    let covs = mix
        .covariances()
        .iter()
        .map(|v| {
            let mut c = &r * v * r.transpose() + &q;
            symmetrize(&mut c);
            c
        })
        .collect();
    GaussianMixture::new(mix.weights().to_vec(), means, covs)
}

pub type Transform = Arc<dyn Fn(&DVector<f64>) -> Complex64 + Send + Sync>;

/// OU solution paired with the Fourier transform of its initial law.
#[derive(Clone)]
pub struct FourierSolution {
    pub ou: Arc<OuSolution>,
    pub init_transform: Transform,
}

impl FourierSolution {
    pub fn new(ou: Arc<OuSolution>, init: &InitialDistribution) -> Self {
        let init = init.clone();
        Self { ou, init_transform: Arc::new(move |xi| init.char_fn(xi)) }
    }

    pub fn from_transform(ou: Arc<OuSolution>, transform: Transform) -> Self {
        Self { ou, init_transform: transform }
    }
}

/// Closed-form `F u(t)(xi)`.
pub fn fourier_forward(sol: &FourierSolution, t: f64, xi: &DVector<f64>) -> Result<Complex64> {
    let ou = &sol.ou;
    ou.check_time(t)?;
    if xi.iter().all(|v| *v == 0.0) {
        return Ok(Complex64::new(1.0, 0.0));
    }
    let eta = ou.adjoint_inverse.at(t) * xi;
    let exponent = -0.5 * eta.dot(&(ou.gram.at(t) * &eta));
    Ok((sol.init_transform)(&eta) * exponent.exp())
}

/// RK4 solution of `y' = -1/2 <Sigma D xi, D xi> y`, `y(0) = F nu(xi)`, on
/// `grid`. `y(t)` equals `F u(t)(D(t) xi)`.
///
/// `D(t) xi` is advanced inside the same RK4 system. The equation is linear
/// in `y`, so the solver integrates the exponent `l' = -1/2 w^T Sigma w` and
/// returns `y(0) exp(l)`, which stays stable for large `|D xi|`.
pub fn fourier_ode_solve(ou: &OuModel, init_transform: &Transform, xi: &DVector<f64>, grid: &TimeGrid) -> Result<Vec<Complex64>> {
    if xi.len() != ou.dim {
        return Err(invalid("frequency dimension does not match the model"));
    }
    let d = ou.dim;
    // Column state [w; l] with w = D xi and l(0) = 0.
    let mut y0 = DMatrix::zeros(d + 1, 1);
    y0.view_mut((0, 0), (d, 1)).copy_from(xi);
    let states = rk4_matrix(grid, y0, |t, y, node| {
        let c = ou.generator(t);
        let s = ou.big_sigma(t);
        if c.iter().chain(s.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "coefficient", node, t });
        }
        let w = y.view((0, 0), (d, 1)).into_owned();
        let mut out = DMatrix::zeros(d + 1, 1);
        out.view_mut((0, 0), (d, 1)).copy_from(&(-(c.transpose() * &w)));
        out[(d, 0)] = -0.5 * w.dot(&(s * &w));
        Ok(out)
    })?;
    let y0 = init_transform(xi);
    Ok(states.iter().map(|s| y0 * s[(d, 0)].exp()).collect())
}

/// Window and amplification guard of the backward Fourier map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InversionConfig {
    pub xi_max: f64,
    pub exponent_cap: f64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self { xi_max: 5.0, exponent_cap: 50.0 }
    }
}

/// Recovers `F nu(xi) = exp(1/2 xi^T G(T) xi) F mu(D(T) xi)` from the
/// terminal transform `mu_hat`.
pub fn fourier_invert_terminal<F>(ou: &OuSolution, mu_hat: F, xi: &DVector<f64>, config: &InversionConfig) -> Result<Complex64>
where
    F: Fn(&DVector<f64>) -> Complex64,
{
    let norm = xi.norm();
    if norm > config.xi_max {
        return Err(Error::OutOfWindow { norm, xi_max: config.xi_max });
    }
    let exponent = 0.5 * xi.dot(&(ou.gram.last() * xi));
    if exponent > config.exponent_cap {
        return Err(Error::AmplificationCap { exponent, cap: config.exponent_cap });
    }
    Ok(mu_hat(&(ou.adjoint.last() * xi)) * exponent.exp())
}

/// Marginal density `p_s` at a fixed time, ready for repeated score queries.
#[derive(Debug, Clone)]
pub struct OuReversalField {
    pub s: f64,
    pub big_sigma: DMatrix<f64>,
    pub density: MixtureDensity,
}

impl OuReversalField {
    /// Field for reversed time `t_reversed`, i.e. forward time `T - t_reversed`.
    pub fn new(sol: &OuSolution, nu: &InitialDistribution, t_reversed: f64) -> Result<Self> {
        let s = sol.horizon() - t_reversed;
        if s <= 0.0 && nu.has_atoms() {
            return Err(Error::Singular);
        }
        let mix = ou_marginal(sol, nu, s.max(0.0))?;
        Ok(Self { s, big_sigma: sol.model.big_sigma(s.max(0.0)), density: mix.density()? })
    }

    /// `Sigma(s) grad log p_s(x)`, the divergence term `div(Sigma p) / p`.
    pub fn drift(&self, x: &[f64]) -> Vec<f64> {
        let score = DVector::from_vec(self.density.score(x));
        (&self.big_sigma * score).data.into()
    }
}

/// Exact reversal drift term `div(Sigma(T-t) p) / p` at `(t_reversed, x)`.
pub fn ou_reversal_drift(sol: &OuSolution, nu: &InitialDistribution, t_reversed: f64, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != sol.dim() {
        return Err(invalid("query point dimension does not match the model"));
    }
    Ok(OuReversalField::new(sol, nu, t_reversed)?.drift(x))
}

/// Two-sided density and gradient bounds over a compact `[t0, t1] x box`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GaussianBoundReport {
    pub min_density: f64,
    pub max_density: f64,
    pub max_gradient: f64,
    /// Lower constant `min / 1.1`.
    pub c1: f64,
    /// Upper constant `1.1 max`.
    pub c2: f64,
    /// Gradient constant `1.1 max |grad p|`.
    pub c3: f64,
    pub points: usize,
    pub pass: bool,
    pub note: Option<String>,
}

pub const BOUND_SAFETY: f64 = 1.1;

/// Evaluates `p^nu(t, x)` and its gradient on a tensor grid with
/// `per_axis` points along time and each space axis.
pub fn gaussian_bound_check(
    sol: &OuSolution,
    nu: &InitialDistribution,
    t_range: (f64, f64),
    space: &BoxDomain,
    per_axis: usize,
) -> Result<GaussianBoundReport> {
    let (t0, t1) = t_range;
    if per_axis < 2 || t0 <= 0.0 || t1 < t0 || space.dim() != sol.dim() {
        return Err(invalid("bound check needs a compact time range in ]0, T] and a matching box"));
    }
    let d = sol.dim();
    let axis = |lo: f64, hi: f64, k: usize| lo + (hi - lo) * k as f64 / (per_axis - 1) as f64;
    let mut report = GaussianBoundReport {
        min_density: f64::INFINITY,
        max_density: 0.0,
        max_gradient: 0.0,
        c1: 0.0,
        c2: 0.0,
        c3: 0.0,
        points: 0,
        pass: false,
        note: None,
    };
    let mut x = vec![0.0; d];
    for kt in 0..per_axis {
        let t = axis(t0, t1, kt);
        let density = match ou_marginal(sol, nu, t).and_then(|m| m.density()) {
            Ok(p) => p,
            Err(e) => {
                report.note = Some(format!("no density at t = {t}: {e}"));
                return Ok(report);
            }
        };
        for flat in 0..per_axis.pow(d as u32) {
            let mut rest = flat;
            for (i, xi) in x.iter_mut().enumerate() {
                *xi = axis(space.lower[i], space.upper[i], rest % per_axis);
                rest /= per_axis;
            }
            let p = density.pdf(&x);
            let g = density.gradient(&x).iter().map(|v| v * v).sum::<f64>().sqrt();
            report.min_density = report.min_density.min(p);
            report.max_density = report.max_density.max(p);
            report.max_gradient = report.max_gradient.max(g);
            report.points += 1;
        }
    }
    report.c1 = report.min_density / BOUND_SAFETY;
    report.c2 = report.max_density * BOUND_SAFETY;
    report.c3 = report.max_gradient * BOUND_SAFETY;
    report.pass = [report.c1, report.c2, report.c3].iter().all(|c| c.is_finite()) && report.c1 > 0.0 && report.c2 > 0.0;
    if !report.pass {
        report.note = Some("density bounds are not finite and positive on the box".into());
    }
    Ok(report)
}

/// Smallest eigenvalue of `Q_t` over the nodes with `t > 0`.
pub fn min_covariance_eigenvalue(sol: &OuSolution) -> f64 {
    sol.covariance.values()[1..].iter().map(min_sym_eigenvalue).fold(f64::INFINITY, f64::min)
}
