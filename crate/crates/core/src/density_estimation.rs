//! Gaussian product-kernel density and score estimation on particle clouds,
//! and the density-dependent reversal drift built from them.

use std::f64::consts::PI;

use crate::distributions::MixtureDensity;
use crate::error::{invalid, Error, Result};
use crate::forward_sim::ParticleEnsemble;
use crate::models::{sigma_sigma_t, Diffusion};

/// How kernel sums are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KdeMode {
    /// Direct `O(N)` sum per query with log-sum-exp.
    #[default]
    Exact,
    /// Linear binning onto a grid, 8h-truncated convolution and linear
    /// interpolation of `p` and `grad p`. Falls back to the exact sum off
    /// the grid and in low-density regions. Only used for `d <= 2`.
    Binned,
}

/// Densities below `VACUUM_FLOOR * N` count as vacuum.
pub const VACUUM_FLOOR: f64 = 1e-300;

const TRUNCATION: f64 = 8.0;

/// Kernel density estimate with a diagonal bandwidth.
#[derive(Debug, Clone)]
pub struct Kde {
    dim: usize,
    points: Vec<f64>,
    bandwidth: Vec<f64>,
    log_norm: f64,
    grid: Option<BinnedGrid>,
}

impl Kde {
    pub fn new(dim: usize, points: Vec<f64>, bandwidth: Vec<f64>, mode: KdeMode) -> Result<Self> {
        if dim == 0 || points.is_empty() || points.len() % dim != 0 {
            return Err(invalid("KDE needs at least one whole point"));
        }
        if bandwidth.len() != dim || bandwidth.iter().any(|h| !(h.is_finite() && *h > 0.0)) {
            return Err(invalid("KDE bandwidths must be positive and one per dimension"));
        }
        let n = points.len() / dim;
        let log_norm = -(n as f64).ln() - bandwidth.iter().map(|h| (h * (2.0 * PI).sqrt()).ln()).sum::<f64>();
        let mut kde = Self { dim, points, bandwidth, log_norm, grid: None };
        if mode == KdeMode::Binned && dim <= 2 {
            kde.grid = BinnedGrid::build(&kde);
        }
        Ok(kde)
    }

    /// KDE over `ens` with per-dimension Silverman bandwidths.
    pub fn silverman(ens: &ParticleEnsemble, mode: KdeMode) -> Result<Self> {
        let h = silverman_bandwidth(ens)?;
        Self::new(ens.dim(), ens.positions().to_vec(), h, mode)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn bandwidth(&self) -> &[f64] {
        &self.bandwidth
    }

    pub fn mode(&self) -> KdeMode {
        if self.grid.is_some() {
            KdeMode::Binned
        } else {
            KdeMode::Exact
        }
    }

    fn max_exponent(&self, x: &[f64]) -> f64 {
        let mut lmax = f64::NEG_INFINITY;
        for p in self.points.chunks(self.dim) {
            lmax = lmax.max(self.exponent(x, p));
        }
        lmax
    }

    #[inline]
    fn exponent(&self, x: &[f64], p: &[f64]) -> f64 {
        let mut a = 0.0;
        for i in 0..self.dim {
            let z = (x[i] - p[i]) / self.bandwidth[i];
            a -= 0.5 * z * z;
        }
        a
    }

    /// Exact `log p(x)`.
    pub fn log_density_exact(&self, x: &[f64]) -> f64 {
        let lmax = self.max_exponent(x);
        let s: f64 = self.points.chunks(self.dim).map(|p| (self.exponent(x, p) - lmax).exp()).sum();
        self.log_norm + lmax + s.ln()
    }

    /// Exact `(log p(x), grad log p(x))` from one pass of kernel sums.
    pub fn log_density_and_score_exact(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let d = self.dim;
        let lmax = self.max_exponent(x);
        let mut s0 = 0.0;
        let mut s1 = vec![0.0; d];
        for p in self.points.chunks(d) {
            let w = (self.exponent(x, p) - lmax).exp();
            s0 += w;
            for i in 0..d {
                s1[i] += w * (p[i] - x[i]);
            }
        }
        let score = s1.iter().zip(&self.bandwidth).map(|(s, h)| s / (s0 * h * h)).collect();
        (self.log_norm + lmax + s0.ln(), score)
    }

    fn vacuum_log_floor(&self) -> f64 {
        (VACUUM_FLOOR * self.len() as f64).ln()
    }

    pub fn density(&self, x: &[f64]) -> f64 {
        if let Some(p) = self.grid.as_ref().and_then(|g| g.density(self, x)) {
            return p;
        }
        self.log_density_exact(x).exp()
    }

    pub fn score(&self, x: &[f64]) -> Result<Vec<f64>> {
        if let Some(s) = self.grid.as_ref().and_then(|g| g.score(self, x)) {
            return Ok(s);
        }
        let (lp, s) = self.log_density_and_score_exact(x);
        if !(lp >= self.vacuum_log_floor()) {
            return Err(Error::Vacuum);
        }
        Ok(s)
    }

    /// One-particle kernel peak `1 / (N prod h_i sqrt(2 pi))`.
    fn single_peak(&self) -> f64 {
        self.log_norm.exp()
    }
}

/// Binned density and gradient on a regular grid covering the cloud.
#[derive(Debug, Clone)]
struct BinnedGrid {
    lower: Vec<f64>,
    spacing: Vec<f64>,
    shape: Vec<usize>,
    density: Vec<f64>,
    gradient: Vec<Vec<f64>>,
    /// Below this interpolated density the exact sum is used.
    threshold: f64,
}

const MAX_CELLS: usize = 4_000_000;

fn kernel_taps(h: f64, delta: f64) -> (Vec<f64>, Vec<f64>) {
    let half = (TRUNCATION * h / delta).ceil() as isize;
    let norm = 1.0 / (h * (2.0 * PI).sqrt());
    let mut k = Vec::with_capacity((2 * half + 1) as usize);
    let mut dk = Vec::with_capacity(k.capacity());
    for j in -half..=half {
        let u = j as f64 * delta;
        let v = norm * (-0.5 * (u / h) * (u / h)).exp();
        k.push(v);
        dk.push(-u / (h * h) * v);
    }
    (k, dk)
}

/// Convolution along `axis` of a row-major grid (last axis fastest).
fn convolve_axis(data: &[f64], shape: &[usize], axis: usize, taps: &[f64]) -> Vec<f64> {
    let half = (taps.len() / 2) as isize;
    let stride: usize = shape[axis + 1..].iter().product();
    let len = shape[axis] as isize;
    let mut out = vec![0.0; data.len()];
    for (flat, value) in data.iter().enumerate() {
        if *value == 0.0 {
            continue;
        }
        let pos = ((flat / stride) % shape[axis]) as isize;
        let lo = (pos - half).max(0);
        let hi = (pos + half).min(len - 1);
        for q in lo..=hi {
            let target = flat as isize + (q - pos) * stride as isize;
            out[target as usize] += value * taps[(q - pos + half) as usize];
        }
    }
    out
}

impl BinnedGrid {
    fn build(kde: &Kde) -> Option<Self> {
        let d = kde.dim;
        let per_h = if d == 1 { 20.0 } else { 8.0 };
        let n = kde.len();
        let mut lower = Vec::with_capacity(d);
        let mut spacing = Vec::with_capacity(d);
        let mut shape = Vec::with_capacity(d);
        for i in 0..d {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for p in kde.points.chunks(d) {
                lo = lo.min(p[i]);
                hi = hi.max(p[i]);
            }
            let h = kde.bandwidth[i];
            let delta = h / per_h;
            let lo = lo - TRUNCATION * h - delta;
            let cells = ((hi + TRUNCATION * h + delta - lo) / delta).ceil() as usize + 1;
            lower.push(lo);
            spacing.push(delta);
            shape.push(cells);
        }
        if shape.iter().product::<usize>() > MAX_CELLS {
            return None;
        }
        let total: usize = shape.iter().product();
        let mut counts = vec![0.0; total];
        let inv_n = 1.0 / n as f64;
        for p in kde.points.chunks(d) {
            let mut base = [0usize; 2];
            let mut frac = [0.0f64; 2];
            for i in 0..d {
                let u = (p[i] - lower[i]) / spacing[i];
                let k = (u.floor() as usize).min(shape[i] - 2);
                base[i] = k;
                frac[i] = u - k as f64;
            }
            for corner in 0..(1usize << d) {
                let mut w = inv_n;
                let mut flat = 0;
                for i in 0..d {
                    let bit = (corner >> i) & 1;
                    w *= if bit == 1 { frac[i] } else { 1.0 - frac[i] };
                    flat = flat * shape[i] + base[i] + bit;
                }
                counts[flat] += w;
            }
        }
        let taps: Vec<(Vec<f64>, Vec<f64>)> =
            (0..d).map(|i| kernel_taps(kde.bandwidth[i], spacing[i])).collect();
        let smooth = |derivative_axis: Option<usize>| {
            let mut g = counts.clone();
            for (axis, (k, dk)) in taps.iter().enumerate() {
                let t = if derivative_axis == Some(axis) { dk } else { k };
                g = convolve_axis(&g, &shape, axis, t);
            }
            g
        };
        let density = smooth(None);
        let gradient = (0..d).map(|i| smooth(Some(i))).collect();
        Some(Self { lower, spacing, shape, density, gradient, threshold: 1e-3 * kde.single_peak() })
    }

    /// Corner indices and weights of the cell containing `x`, if inside.
    fn stencil(&self, x: &[f64]) -> Option<([(usize, f64); 4], usize)> {
        let d = self.shape.len();
        let mut base = [0usize; 2];
        let mut frac = [0.0f64; 2];
        for i in 0..d {
            let u = (x[i] - self.lower[i]) / self.spacing[i];
            if !(u >= 0.0 && u < (self.shape[i] - 1) as f64) {
                return None;
            }
            base[i] = u as usize;
            frac[i] = u - base[i] as f64;
        }
        let mut out = [(0usize, 0.0f64); 4];
        let corners = 1usize << d;
        for (corner, slot) in out.iter_mut().enumerate().take(corners) {
            let mut w = 1.0;
            let mut flat = 0;
            for i in 0..d {
                let bit = (corner >> i) & 1;
                w *= if bit == 1 { frac[i] } else { 1.0 - frac[i] };
                flat = flat * self.shape[i] + base[i] + bit;
            }
            *slot = (flat, w);
        }
        Some((out, corners))
    }

    fn interpolate(values: &[f64], stencil: &([(usize, f64); 4], usize)) -> f64 {
        stencil.0[..stencil.1].iter().map(|(i, w)| values[*i] * w).sum()
    }

    fn density(&self, kde: &Kde, x: &[f64]) -> Option<f64> {
        debug_assert_eq!(kde.dim, self.shape.len());
        let st = self.stencil(x)?;
        let p = Self::interpolate(&self.density, &st);
        (p >= self.threshold).then_some(p)
    }

    fn score(&self, kde: &Kde, x: &[f64]) -> Option<Vec<f64>> {
        let st = self.stencil(x)?;
        let p = Self::interpolate(&self.density, &st);
        if p < self.threshold {
            return None;
        }
        debug_assert_eq!(kde.dim, self.gradient.len());
        Some(self.gradient.iter().map(|g| Self::interpolate(g, &st) / p).collect())
    }
}

/// Either an exact mixture density or a kernel estimate.
#[derive(Debug, Clone)]
pub enum DensityField {
    Analytic(MixtureDensity),
    Kde(Kde),
}

impl DensityField {
    pub fn dim(&self) -> usize {
        match self {
            Self::Analytic(m) => m.dim(),
            Self::Kde(k) => k.dim(),
        }
    }
}

/// Density of `field` at `x`; never negative.
pub fn kde_density(field: &DensityField, x: &[f64]) -> f64 {
    match field {
        DensityField::Analytic(m) => m.pdf(x),
        DensityField::Kde(k) => k.density(x),
    }
}

/// `grad log p(x)`; fails with [`Error::Vacuum`] below the density floor.
pub fn kde_score(field: &DensityField, x: &[f64]) -> Result<Vec<f64>> {
    match field {
        DensityField::Analytic(m) => Ok(m.score(x)),
        DensityField::Kde(k) => k.score(x),
    }
}

fn scaled_std_bandwidth(ens: &ParticleEnsemble, factor: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>> {
    let n = ens.len();
    if n < 2 {
        return Err(invalid("bandwidth selection needs at least two particles"));
    }
    let d = ens.dim();
    let factor = factor(d as f64, n as f64);
    (0..d)
        .map(|i| {
            let col = ens.coordinate(i);
            let mean = col.iter().sum::<f64>() / n as f64;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
            if var > 0.0 {
                Ok(var.sqrt() * factor)
            } else {
                Err(Error::DegenerateCloud(i))
            }
        })
        .collect()
}

/// `h_i = std_i (4 / ((d + 2) n))^{1 / (d + 4)}`.
pub fn silverman_bandwidth(ens: &ParticleEnsemble) -> Result<Vec<f64>> {
    scaled_std_bandwidth(ens, |d, n| (4.0 / ((d + 2.0) * n)).powf(1.0 / (d + 4.0)))
}

/// Normal-reference rule for estimating the density gradient,
/// `h_i = std_i (4 / ((d + 4) n))^{1 / (d + 6)}`. Wider than Silverman, with
/// much lower score variance.
pub fn score_bandwidth(ens: &ParticleEnsemble) -> Result<Vec<f64>> {
    scaled_std_bandwidth(ens, |d, n| (4.0 / ((d + 4.0) * n)).powf(1.0 / (d + 6.0)))
}

/// `div(Sigma_hat_i. p) / p` at reversed time `t_reversed`, expanded as
/// `div Sigma_hat_i. + <Sigma_hat_i., grad log p>` with
/// `Sigma_hat(t, x) = Sigma(T - t, x)`.
pub fn reversal_drift<M: Diffusion + ?Sized>(
    model: &M,
    field: &DensityField,
    horizon: f64,
    t_reversed: f64,
    x: &[f64],
) -> Result<Vec<f64>> {
    let score = kde_score(field, x)?;
    reversal_drift_from_score(model, horizon - t_reversed, x, &score)
}

/// The same expansion for a precomputed score at forward time `s`.
pub fn reversal_drift_from_score<M: Diffusion + ?Sized>(model: &M, s: f64, x: &[f64], score: &[f64]) -> Result<Vec<f64>> {
    let d = model.dim();
    if x.len() != d || score.len() != d {
        return Err(invalid("query point dimension does not match the model"));
    }
    let sigma = sigma_sigma_t(model, s, x);
    let mut out = vec![0.0; d];
    if model.state_dependent_dispersion() {
        model.sigma_row_divergence(s, x, &mut out);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "diffusion divergence", node: 0, t: s });
        }
    }
    for i in 0..d {
        out[i] += (0..d).map(|j| sigma[(i, j)] * score[j]).sum::<f64>();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::{GaussianMixture, InitialDistribution};
    use crate::forward_sim::sample_initial;
    use crate::linalg_ode::TimeGrid;
    use crate::models::{DiffusionModel, ScalarDispersion};
    use crate::ou_analytic::{ou_reversal_drift, OuModel};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn std_normal_peak() -> f64 {
        1.0 / (2.0 * PI).sqrt()
    }

    fn normal_cloud(n: usize, seed: u64) -> ParticleEnsemble {
        sample_initial(&InitialDistribution::normal(0.0, 1.0).unwrap(), n, seed).unwrap()
    }

    #[test]
    fn single_kernel_peak_and_tail() {
        let k = DensityField::Kde(Kde::new(1, vec![0.0], vec![1.0], KdeMode::Exact).unwrap());
        assert_abs_diff_eq!(kde_density(&k, &[0.0]), 0.398942, epsilon = 1e-6);
        let far = kde_density(&k, &[20.0]);
        assert!(far < 1e-80 && far > 0.0);
        assert!(kde_density(&k, &[1e6]) >= 0.0);
    }

    #[test]
    fn single_kernel_score() {
        let k = DensityField::Kde(Kde::new(2, vec![0.5, -1.0], vec![0.5, 2.0], KdeMode::Exact).unwrap());
        let s = kde_score(&k, &[1.0, 1.0]).unwrap();
        assert_abs_diff_eq!(s[0], -0.5 / 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(s[1], -2.0 / 4.0, epsilon = 1e-12);
    }

    #[test]
    fn vacuum_is_an_error() {
        let k = DensityField::Kde(Kde::new(1, vec![0.0], vec![0.01], KdeMode::Exact).unwrap());
        assert_eq!(kde_score(&k, &[10.0]).unwrap_err(), Error::Vacuum);
    }

    #[test]
    fn analytic_field_score_is_exact() {
        let field = DensityField::Analytic(
            GaussianMixture::gaussian(nalgebra::DVector::zeros(2), nalgebra::DMatrix::identity(2, 2))
                .unwrap()
                .density()
                .unwrap(),
        );
        let s = kde_score(&field, &[0.3, -1.2]).unwrap();
        assert_abs_diff_eq!(s[0], -0.3, epsilon = 1e-14);
        assert_abs_diff_eq!(s[1], 1.2, epsilon = 1e-14);
    }

    #[test]
    fn silverman_formula_and_scaling() {
        let n = 10_000;
        let raw = normal_cloud(n, 4).into_positions();
        let mean = raw.iter().sum::<f64>() / n as f64;
        let sd = (raw.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        let unit: Vec<f64> = raw.iter().map(|v| (v - mean) / sd).collect();
        let ens = ParticleEnsemble::new(0.0, 1, unit.clone(), 0).unwrap();
        let h = silverman_bandwidth(&ens).unwrap()[0];
        assert_abs_diff_eq!(h, (4.0 / 3e4f64).powf(0.2), epsilon = 1e-12);
        assert_abs_diff_eq!(h, 0.1679, epsilon = 1e-4);
        let doubled = ParticleEnsemble::new(0.0, 1, unit.iter().map(|v| 2.0 * v).collect(), 0).unwrap();
        assert_abs_diff_eq!(silverman_bandwidth(&doubled).unwrap()[0], 2.0 * h, epsilon = 1e-12);
        let quad = ParticleEnsemble::new(0.0, 1, unit.repeat(4), 0).unwrap();
        let h4 = silverman_bandwidth(&quad).unwrap()[0];
        // Repetition changes the unbiased std slightly; the rate dominates.
        assert_abs_diff_eq!(h4 / h, 4f64.powf(-0.2), epsilon = 1e-4);
        let flat = ParticleEnsemble::new(0.0, 2, vec![1.0, 0.0, 1.0, 1.0], 0).unwrap();
        assert_eq!(silverman_bandwidth(&flat).unwrap_err(), Error::DegenerateCloud(0));
    }

    #[test]
    fn score_bandwidth_rate() {
        let ens = normal_cloud(10_000, 4);
        let h = silverman_bandwidth(&ens).unwrap()[0];
        let g = score_bandwidth(&ens).unwrap()[0];
        assert_abs_diff_eq!(g / h, (0.8f64 / 1e4).powf(1.0 / 7.0) / (4.0 / 3e4f64).powf(0.2), epsilon = 1e-12);
        assert!(g > h);
    }

    #[test]
    fn normal_cloud_density_near_truth() {
        let ens = normal_cloud(100_000, 9);
        let field = DensityField::Kde(Kde::silverman(&ens, KdeMode::Exact).unwrap());
        let p = kde_density(&field, &[0.0]);
        assert!((p / std_normal_peak() - 1.0).abs() < 0.05, "{p}");
    }

    #[test]
    fn score_matches_log_density_difference() {
        let ens = normal_cloud(500, 3);
        let kde = Kde::silverman(&ens, KdeMode::Exact).unwrap();
        for x in [-2.5, -0.7, 0.0, 0.4, 1.9] {
            let (_, s) = kde.log_density_and_score_exact(&[x]);
            let h = 1e-5;
            let fd = (kde.log_density_exact(&[x + h]) - kde.log_density_exact(&[x - h])) / (2.0 * h);
            assert!((s[0] - fd).abs() <= 1e-6 * fd.abs().max(1.0), "x = {x}");
        }
    }

    #[test]
    fn binned_mode_tracks_exact_mode() {
        let ens = normal_cloud(20_000, 5);
        let exact = Kde::silverman(&ens, KdeMode::Exact).unwrap();
        let binned = Kde::silverman(&ens, KdeMode::Binned).unwrap();
        assert_eq!(binned.mode(), KdeMode::Binned);
        for k in 0..=40 {
            let x = -2.0 + 0.1 * k as f64;
            let se = exact.score(&[x]).unwrap()[0];
            let sb = binned.score(&[x]).unwrap()[0];
            assert!((se - sb).abs() < 1e-2 * (1.0 + se.abs()), "x = {x}: {se} vs {sb}");
            let pe = exact.density(&[x]);
            assert!((binned.density(&[x]) / pe - 1.0).abs() < 1e-3);
        }
        // Far outside the grid the exact path takes over.
        assert_eq!(binned.score(&[50.0]).is_err(), exact.score(&[50.0]).is_err());
    }

    #[test]
    fn binned_mode_in_two_dimensions() {
        let mix = GaussianMixture::gaussian(nalgebra::DVector::zeros(2), nalgebra::DMatrix::identity(2, 2)).unwrap();
        let ens = sample_initial(&InitialDistribution::Gaussian(mix), 5_000, 2).unwrap();
        let exact = Kde::silverman(&ens, KdeMode::Exact).unwrap();
        let binned = Kde::silverman(&ens, KdeMode::Binned).unwrap();
        for x in [[0.0, 0.0], [0.5, -0.8], [-1.2, 0.3]] {
            let se = exact.score(&x).unwrap();
            let sb = binned.score(&x).unwrap();
            for i in 0..2 {
                assert!((se[i] - sb[i]).abs() < 3e-2 * (1.0 + se[i].abs()));
            }
        }
    }

    #[test]
    fn drift_with_unit_diffusion_is_the_score() {
        let model = DiffusionModel::heat(1, 1.0);
        let field = DensityField::Kde(Kde::new(1, vec![0.0, 1.0], vec![0.5], KdeMode::Exact).unwrap());
        let d = reversal_drift(&model, &field, 1.0, 0.3, &[0.2]).unwrap();
        assert_abs_diff_eq!(d[0], kde_score(&field, &[0.2]).unwrap()[0], epsilon = 1e-14);
    }

    #[test]
    fn drift_with_state_dependent_diffusion() {
        let model = DiffusionModel::linear_drift(0.0, ScalarDispersion::SqrtOnePlusSquare { scale: 1.0, clip: 1e6 });
        let field = DensityField::Analytic(GaussianMixture::normal(0.0, 1.0).unwrap().density().unwrap());
        let p = |x: f64| (-x * x / 2.0).exp() / (2.0 * PI).sqrt();
        for x in [-1.3, 0.0, 0.4, 2.0] {
            let d = reversal_drift(&model, &field, 1.0, 0.5, &[x]).unwrap()[0];
            assert_abs_diff_eq!(d, x - x * x * x, epsilon = 1e-8);
            // Oracle: central difference of Sigma p, divided by p.
            let h = 1e-5;
            let sp = |y: f64| (1.0 + y * y) * p(y);
            let fd = (sp(x + h) - sp(x - h)) / (2.0 * h) / p(x);
            assert_abs_diff_eq!(d, fd, epsilon = 1e-6);
        }
        assert_eq!(reversal_drift(&model, &field, 1.0, 0.5, &[0.0]).unwrap()[0], 0.0);
    }

    #[test]
    fn analytic_field_matches_ou_reversal_drift() {
        let ou = OuModel::scalar(-0.5, 1.3);
        let sol = ou.solve(&TimeGrid::horizon(1.0, 1000).unwrap()).unwrap();
        let nu = InitialDistribution::dirac_list(vec![vec![-1.0], vec![0.5]], vec![0.3, 0.7]).unwrap();
        let t = 0.4;
        let mix = crate::ou_analytic::ou_marginal(&sol, &nu, 1.0 - t).unwrap();
        let field = DensityField::Analytic(mix.density().unwrap());
        for x in [-1.0, 0.0, 0.8] {
            let a = reversal_drift(&ou, &field, 1.0, t, &[x]).unwrap()[0];
            let b = ou_reversal_drift(&sol, &nu, t, &[x]).unwrap()[0];
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
    }

    proptest! {
        #[test]
        fn density_non_negative_and_score_equivariant(
            pts in prop::collection::vec(-3.0f64..3.0, 2..30),
            x in -5.0f64..5.0,
            lambda in 0.2f64..5.0,
        ) {
            let h = 0.7;
            let kde = Kde::new(1, pts.clone(), vec![h], KdeMode::Exact).unwrap();
            prop_assert!(kde.density(&[x]) >= 0.0);
            let scaled = Kde::new(1, pts.iter().map(|p| p * lambda).collect(), vec![h * lambda], KdeMode::Exact).unwrap();
            let s = kde.score(&[x]).unwrap()[0];
            let s_l = scaled.score(&[x * lambda]).unwrap()[0];
            prop_assert!((s_l - s / lambda).abs() <= 1e-9 * (1.0 + s.abs()));
        }

        #[test]
        fn score_is_fd_of_log_density(
            pts in prop::collection::vec(-3.0f64..3.0, 2..30),
            x in -4.0f64..4.0,
        ) {
            let kde = Kde::new(1, pts, vec![0.5], KdeMode::Exact).unwrap();
            let (_, s) = kde.log_density_and_score_exact(&[x]);
            let h = 1e-5;
            let fd = (kde.log_density_exact(&[x + h]) - kde.log_density_exact(&[x - h])) / (2.0 * h);
            prop_assert!((s[0] - fd).abs() <= 1e-6 * fd.abs().max(1.0));
        }
    }
}
