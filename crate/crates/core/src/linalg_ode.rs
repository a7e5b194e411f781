//! Fixed-step integration of the linear matrix ODEs behind the
//! Ornstein-Uhlenbeck closed forms.
//!
//! All solvers use classical RK4 on a uniform [`TimeGrid`]. Paths are stored
//! densely, one matrix per node, and can be sampled between nodes with cubic
//! Lagrange interpolation (same order as the integrator).

use nalgebra::DMatrix;

use crate::error::{invalid, Error, Result};

/// Uniform grid `t_start = t_0 < t_1 < ... < t_n = t_end`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    t_start: f64,
    t_end: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(t_start: f64, t_end: f64, n_steps: usize) -> Result<Self> {
        if !(t_start.is_finite() && t_end.is_finite()) || t_end <= t_start {
            return Err(invalid(format!(
                "time grid needs finite t_end > t_start, got [{t_start}, {t_end}]"
            )));
        }
        if n_steps == 0 {
            return Err(invalid("time grid needs at least one step"));
        }
        Ok(Self { t_start, t_end, n_steps })
    }

    /// Grid on `[0, horizon]`.
    pub fn horizon(horizon: f64, n_steps: usize) -> Result<Self> {
        Self::new(0.0, horizon, n_steps)
    }

    /// Grid on `[0, horizon]` whose step is at most `dt`.
    pub fn with_max_step(horizon: f64, dt: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(invalid("time step must be positive"));
        }
        Self::horizon(horizon, (horizon / dt - 1e-9).ceil().max(1.0) as usize)
    }

    pub fn t_start(&self) -> f64 {
        self.t_start
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dt(&self) -> f64 {
        (self.t_end - self.t_start) / self.n_steps as f64
    }

    pub fn node(&self, k: usize) -> f64 {
        if k == self.n_steps {
            self.t_end
        } else {
            self.t_start + k as f64 * self.dt()
        }
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.n_steps).map(move |k| self.node(k))
    }

    /// Index of the node equal to `t` (within a relative tolerance of the step).
    pub fn node_index(&self, t: f64) -> Option<usize> {
        let pos = (t - self.t_start) / self.dt();
        let k = pos.round();
        if k < 0.0 || k > self.n_steps as f64 || (pos - k).abs() > 1e-9 {
            None
        } else {
            Some(k as usize)
        }
    }

    /// Same grid with the step halved.
    pub fn refined(&self) -> Self {
        Self { n_steps: self.n_steps * 2, ..*self }
    }
}

/// Time-indexed `d x d` matrices, one per grid node.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixPath {
    grid: TimeGrid,
    values: Vec<DMatrix<f64>>,
}

impl MatrixPath {
    pub fn new(grid: TimeGrid, values: Vec<DMatrix<f64>>) -> Result<Self> {
        if values.len() != grid.n_steps() + 1 {
            return Err(invalid(format!(
                "matrix path needs {} values, got {}",
                grid.n_steps() + 1,
                values.len()
            )));
        }
        if let Some((node, _)) = values
            .iter()
            .enumerate()
            .find(|(_, m)| m.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::NonFinite { what: "matrix entry", node, t: grid.node(node) });
        }
        Ok(Self { grid, values })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn values(&self) -> &[DMatrix<f64>] {
        &self.values
    }

    pub fn last(&self) -> &DMatrix<f64> {
        self.values.last().expect("paths are never empty")
    }

    pub fn dim(&self) -> usize {
        self.values[0].nrows()
    }

    /// Value at time `t`, interpolated with a 4-point Lagrange stencil between
    /// nodes. Times outside the grid are clamped.
    pub fn at(&self, t: f64) -> DMatrix<f64> {
        let grid = &self.grid;
        if let Some(k) = grid.node_index(t) {
            return self.values[k].clone();
        }
        let t = t.clamp(grid.t_start(), grid.t_end());
        let n = grid.n_steps();
        let pos = (t - grid.t_start()) / grid.dt();
        if n < 3 {
            let k = (pos.floor() as usize).min(n - 1);
            let w = pos - k as f64;
            return &self.values[k] * (1.0 - w) + &self.values[k + 1] * w;
        }
        let k = pos.floor() as isize;
        let i0 = (k - 1).clamp(0, n as isize - 3) as usize;
        let mut out = DMatrix::zeros(self.dim(), self.dim());
        for j in 0..4 {
            let mut w = 1.0;
            for l in 0..4 {
                if l != j {
                    w *= (pos - (i0 + l) as f64) / (j as f64 - l as f64);
                }
            }
            out += &self.values[i0 + j] * w;
        }
        out
    }

    /// Smallest eigenvalue of the symmetric part at every node.
    pub fn min_eigenvalues(&self) -> Vec<f64> {
        self.values.iter().map(min_sym_eigenvalue).collect()
    }
}

pub(crate) fn min_sym_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigen().eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

fn checked<F>(f: &F, t: f64, node: usize, what: &'static str) -> Result<DMatrix<f64>>
where
    F: Fn(f64) -> DMatrix<f64>,
{
    let m = f(t);
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { what, node, t });
    }
    Ok(m)
}

/// Generic RK4 for `Y' = rhs(t, Y)` on `grid`, starting at `y0`.
pub fn rk4_matrix<R>(grid: &TimeGrid, y0: DMatrix<f64>, rhs: R) -> Result<Vec<DMatrix<f64>>>
where
    R: Fn(f64, &DMatrix<f64>, usize) -> Result<DMatrix<f64>>,
{
    let h = grid.dt();
    let mut out = Vec::with_capacity(grid.n_steps() + 1);
    let mut y = y0;
    out.push(y.clone());
    for k in 0..grid.n_steps() {
        let t = grid.node(k);
        let k1 = rhs(t, &y, k)?;
        let k2 = rhs(t + 0.5 * h, &(&y + &k1 * (0.5 * h)), k)?;
        let k3 = rhs(t + 0.5 * h, &(&y + &k2 * (0.5 * h)), k)?;
        let k4 = rhs(t + h, &(&y + &k3 * h), k + 1)?;
        y += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        out.push(y.clone());
    }
    Ok(out)
}

fn dimension_of<F: Fn(f64) -> DMatrix<f64>>(c_fn: &F, grid: &TimeGrid) -> Result<usize> {
    let c0 = checked(c_fn, grid.t_start(), 0, "generator entry")?;
    if !c0.is_square() || c0.nrows() == 0 {
        return Err(invalid(format!("generator must be square, got {}x{}", c0.nrows(), c0.ncols())));
    }
    Ok(c0.nrows())
}

/// Resolvent `R(t) = I + int_0^t C(s) R(s) ds`.
pub fn solve_resolvent<F>(c_fn: F, grid: &TimeGrid) -> Result<MatrixPath>
where
    F: Fn(f64) -> DMatrix<f64>,
{
    let d = dimension_of(&c_fn, grid)?;
    let values = rk4_matrix(grid, DMatrix::identity(d, d), |t, y, node| {
        Ok(checked(&c_fn, t, node, "generator entry")? * y)
    })?;
    MatrixPath::new(*grid, values)
}

/// Adjoint resolvent `D(t) = I - int_0^t C(s)^T D(s) ds`.
pub fn solve_adjoint_resolvent<F>(c_fn: F, grid: &TimeGrid) -> Result<MatrixPath>
where
    F: Fn(f64) -> DMatrix<f64>,
{
    let d = dimension_of(&c_fn, grid)?;
    let values = rk4_matrix(grid, DMatrix::identity(d, d), |t, y, node| {
        Ok(-(checked(&c_fn, t, node, "generator entry")?.transpose() * y))
    })?;
    MatrixPath::new(*grid, values)
}

/// Inverse of the adjoint resolvent, `D^{-1}(t) = I + int_0^t D^{-1}(s) C(s)^T ds`.
///
/// The generator multiplies from the right; for time-varying generators that
/// do not commute this is the only ordering for which `D(t) D^{-1}(t) = I`.
pub fn solve_adjoint_resolvent_inverse<F>(c_fn: F, grid: &TimeGrid) -> Result<MatrixPath>
where
    F: Fn(f64) -> DMatrix<f64>,
{
    let d = dimension_of(&c_fn, grid)?;
    let values = rk4_matrix(grid, DMatrix::identity(d, d), |t, y, node| {
        Ok(y * checked(&c_fn, t, node, "generator entry")?.transpose())
    })?;
    MatrixPath::new(*grid, values)
}

fn check_symmetric(m: &DMatrix<f64>, node: usize, t: f64) -> Result<()> {
    if !m.is_square() {
        return Err(invalid("diffusion matrix must be square"));
    }
    let scale = 1.0 + m.norm();
    if (m - m.transpose()).norm() > 1e-12 * scale {
        return Err(invalid(format!("diffusion matrix is not symmetric at node {node} (t = {t})")));
    }
    Ok(())
}

/// OU covariance `Q_t = R(t) (int_0^t R^{-1}(s) S(s) R^{-1}(s)^T ds) R(t)^T`.
///
/// The resolvent and the inner integral are advanced together by one RK4
/// system; `R^{-1}` comes from an LU solve at every stage and `Q` is
/// symmetrized at every node.
pub fn compute_ou_covariance<F, S>(c_fn: F, sigma_fn: S, grid: &TimeGrid) -> Result<MatrixPath>
where
    F: Fn(f64) -> DMatrix<f64>,
    S: Fn(f64) -> DMatrix<f64>,
{
    let d = dimension_of(&c_fn, grid)?;
    // State is stacked as [R | J] (d x 2d).
    let mut y0 = DMatrix::zeros(d, 2 * d);
    y0.view_mut((0, 0), (d, d)).fill_with_identity();
    let rhs = |t: f64, y: &DMatrix<f64>, node: usize| -> Result<DMatrix<f64>> {
        let c = checked(&c_fn, t, node, "generator entry")?;
        let s = checked(&sigma_fn, t, node, "diffusion entry")?;
        if s.nrows() != d {
            return Err(invalid("diffusion matrix dimension does not match generator"));
        }
        check_symmetric(&s, node, t)?;
        let r = y.view((0, 0), (d, d)).into_owned();
        let lu = r.clone().lu();
        // X = R^{-1} S R^{-T} via two solves.
        let a = lu
            .solve(&s)
            .ok_or(Error::NonFinite { what: "resolvent inverse", node, t })?;
        let x = lu
            .solve(&a.transpose())
            .ok_or(Error::NonFinite { what: "resolvent inverse", node, t })?;
        let mut out = DMatrix::zeros(d, 2 * d);
        out.view_mut((0, 0), (d, d)).copy_from(&(c * r));
        out.view_mut((0, d), (d, d)).copy_from(&x);
        Ok(out)
    };
    let states = rk4_matrix(grid, y0, rhs)?;
    let values = states
        .iter()
        .map(|y| {
            let r = y.view((0, 0), (d, d));
            let mut j = y.view((0, d), (d, d)).into_owned();
            symmetrize(&mut j);
            let mut q = r * j * r.transpose();
            symmetrize(&mut q);
            q
        })
        .collect();
    MatrixPath::new(*grid, values)
}
