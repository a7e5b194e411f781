//! Initial and terminal laws: Dirac lists, Gaussian mixtures and empirical
//! samples.
//!
//! Fourier transforms follow the convention `F mu(xi) = int exp(-i <xi, x>) mu(dx)`.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde_json::json;

use crate::error::{invalid, Result};
use crate::linalg_ode::min_sym_eigenvalue;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

fn check_weights(weights: &[f64]) -> Result<Vec<f64>> {
    if weights.is_empty() {
        return Err(invalid("at least one component is required"));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(invalid("weights must be finite and non-negative"));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(invalid(format!("weights must sum to 1, got {total}")));
    }
    Ok(weights.iter().map(|w| w / total).collect())
}

/// Finite mixture of (possibly degenerate) Gaussians.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    covariances: Vec<DMatrix<f64>>,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<DVector<f64>>, covariances: Vec<DMatrix<f64>>) -> Result<Self> {
        if weights.len() != means.len() || means.len() != covariances.len() {
            return Err(invalid("mixture lists must have equal length"));
        }
        let weights = check_weights(&weights)?;
        let d = means[0].len();
        for (m, c) in means.iter().zip(&covariances) {
            if m.len() != d || c.nrows() != d || c.ncols() != d {
                return Err(invalid("mixture component dimensions differ"));
            }
            if m.iter().chain(c.iter()).any(|v| !v.is_finite()) {
                return Err(invalid("mixture parameters must be finite"));
            }
            let scale = 1.0 + c.norm();
            if (c - c.transpose()).norm() > 1e-10 * scale {
                return Err(invalid("covariance is not symmetric"));
            }
            if min_sym_eigenvalue(c) < -1e-12 * scale {
                return Err(invalid("covariance is not positive semi-definite"));
            }
        }
        let covariances = covariances
            .into_iter()
            .map(|mut c| {
                crate::linalg_ode::symmetrize(&mut c);
                c
            })
            .collect();
        Ok(Self { weights, means, covariances })
    }

    pub fn gaussian(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        Self::new(vec![1.0], vec![mean], vec![covariance])
    }

    /// Scalar normal `N(mean, variance)`.
    pub fn normal(mean: f64, variance: f64) -> Result<Self> {
        Self::gaussian(DVector::from_element(1, mean), DMatrix::from_element(1, 1, variance))
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[DVector<f64>] {
        &self.means
    }

    pub fn covariances(&self) -> &[DMatrix<f64>] {
        &self.covariances
    }

    pub fn mean(&self) -> DVector<f64> {
        self.means
            .iter()
            .zip(&self.weights)
            .fold(DVector::zeros(self.dim()), |acc, (m, w)| acc + m * *w)
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        let mu = self.mean();
        let d = self.dim();
        self.means.iter().zip(&self.covariances).zip(&self.weights).fold(
            DMatrix::zeros(d, d),
            |acc, ((m, c), w)| {
                let dm = m - &mu;
                acc + (c + &dm * dm.transpose()) * *w
            },
        )
    }

    /// Characteristic transform `sum_k w_k exp(-i <xi, m_k> - xi^T V_k xi / 2)`.
    pub fn char_fn(&self, xi: &DVector<f64>) -> Complex64 {
        self.weights
            .iter()
            .zip(self.means.iter().zip(&self.covariances))
            .map(|(w, (m, c))| {
                let quad = (xi.transpose() * c * xi)[(0, 0)];
                Complex64::from_polar(*w * (-0.5 * quad).exp(), -xi.dot(m))
            })
            .sum()
    }

    /// Mixture CDF for `d = 1`; degenerate components are right-continuous steps.
    pub fn cdf_1d(&self, x: f64) -> f64 {
        self.weights
            .iter()
            .zip(self.means.iter().zip(&self.covariances))
            .map(|(w, (m, c))| {
                let s = c[(0, 0)].sqrt();
                let z = x - m[0];
                let p = if s > 0.0 {
                    0.5 * libm::erfc(-z / (s * std::f64::consts::SQRT_2))
                } else if z >= 0.0 {
                    1.0
                } else {
                    0.0
                };
                w * p
            })
            .sum()
    }

    pub fn has_atoms(&self) -> bool {
        self.covariances.iter().any(|c| min_sym_eigenvalue(c) <= 0.0)
    }

    /// Precomputes precisions; fails when a component is degenerate.
    pub fn density(&self) -> Result<MixtureDensity> {
        MixtureDensity::new(self)
    }

    pub fn sample_into<R: Rng>(&self, rng: &mut R, out: &mut [f64]) {
        MixtureSampler::new(self).sample_into(rng, out)
    }
}

/// Mixture with precomputed component precisions, ready for evaluation.
#[derive(Debug, Clone)]
pub struct MixtureDensity {
    dim: usize,
    log_weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    precisions: Vec<DMatrix<f64>>,
    log_norms: Vec<f64>,
}

impl MixtureDensity {
    pub fn new(mix: &GaussianMixture) -> Result<Self> {
        let d = mix.dim();
        let mut precisions = Vec::with_capacity(mix.len());
        let mut log_norms = Vec::with_capacity(mix.len());
        for c in mix.covariances() {
            let chol = c
                .clone()
                .cholesky()
                .ok_or_else(|| invalid("mixture component has a singular covariance (no density)"))?;
            let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            precisions.push(chol.inverse());
            log_norms.push(-0.5 * (d as f64 * LN_2PI + log_det));
        }
        Ok(Self {
            dim: d,
            log_weights: mix.weights().iter().map(|w| w.ln()).collect(),
            means: mix.means().to_vec(),
            precisions,
            log_norms,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn component_terms(&self, x: &[f64], residual: &mut Vec<DVector<f64>>) -> Vec<f64> {
        residual.clear();
        self.means
            .iter()
            .zip(&self.precisions)
            .zip(self.log_weights.iter().zip(&self.log_norms))
            .map(|((m, p), (lw, ln))| {
                let r = DVector::from_iterator(self.dim, x.iter().zip(m.iter()).map(|(a, b)| a - b));
                let pr = p * &r;
                let q = r.dot(&pr);
                residual.push(pr);
                lw + ln - 0.5 * q
            })
            .collect()
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let mut scratch = Vec::new();
        log_sum_exp(&self.component_terms(x, &mut scratch))
    }

    pub fn pdf(&self, x: &[f64]) -> f64 {
        self.log_density(x).exp()
    }

    /// `grad log p(x)`, computed with log-sum-exp weights.
    pub fn score(&self, x: &[f64]) -> Vec<f64> {
        let mut residual = Vec::new();
        let terms = self.component_terms(x, &mut residual);
        let lmax = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut out = vec![0.0; self.dim];
        let mut total = 0.0;
        for (l, pr) in terms.iter().zip(&residual) {
            let w = (l - lmax).exp();
            total += w;
            for i in 0..self.dim {
                out[i] -= w * pr[i];
            }
        }
        out.iter_mut().for_each(|v| *v /= total);
        out
    }

    /// `grad p(x)`.
    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let p = self.pdf(x);
        self.score(x).into_iter().map(|s| s * p).collect()
    }
}

pub(crate) fn log_sum_exp(terms: &[f64]) -> f64 {
    let lmax = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lmax == f64::NEG_INFINITY {
        return lmax;
    }
    lmax + terms.iter().map(|l| (l - lmax).exp()).sum::<f64>().ln()
}

struct MixtureSampler<'a> {
    mix: &'a GaussianMixture,
    factors: Vec<DMatrix<f64>>,
    cumulative: Vec<f64>,
}

impl<'a> MixtureSampler<'a> {
    fn new(mix: &'a GaussianMixture) -> Self {
        let factors = mix
            .covariances()
            .iter()
            .map(|c| {
                let eig = c.clone().symmetric_eigen();
                let sqrt = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
                &eig.eigenvectors * DMatrix::from_diagonal(&sqrt)
            })
            .collect();
        let cumulative = mix
            .weights()
            .iter()
            .scan(0.0, |acc, w| {
                *acc += w;
                Some(*acc)
            })
            .collect();
        Self { mix, factors, cumulative }
    }

    fn sample_into<R: Rng>(&self, rng: &mut R, out: &mut [f64]) {
        let k = if self.mix.len() == 1 {
            0
        } else {
            let u: f64 = rng.random();
            self.cumulative.iter().position(|c| u < *c).unwrap_or(self.mix.len() - 1)
        };
        let d = self.mix.dim();
        let z = DVector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let x = &self.mix.means()[k] + &self.factors[k] * z;
        out.copy_from_slice(x.as_slice());
    }
}

/// Law used as an initial datum `nu` or a terminal datum `mu`.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialDistribution {
    Dirac { points: Vec<DVector<f64>>, weights: Vec<f64> },
    Gaussian(GaussianMixture),
    /// Flat row-major sample, `dim` coordinates per point.
    Empirical { dim: usize, samples: Vec<f64> },
}

impl InitialDistribution {
    pub fn dirac(point: Vec<f64>) -> Self {
        Self::Dirac { points: vec![DVector::from_vec(point)], weights: vec![1.0] }
    }

    pub fn dirac_list(points: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        let d = Self::Dirac {
            points: points.into_iter().map(DVector::from_vec).collect(),
            weights,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn normal(mean: f64, variance: f64) -> Result<Self> {
        Ok(Self::Gaussian(GaussianMixture::normal(mean, variance)?))
    }

    pub fn empirical(dim: usize, samples: Vec<f64>) -> Result<Self> {
        let e = Self::Empirical { dim, samples };
        e.validate()?;
        Ok(e)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Dirac { points, weights } => {
                if points.len() != weights.len() {
                    return Err(invalid("Dirac list needs one weight per point"));
                }
                check_weights(weights)?;
                let d = points[0].len();
                if d == 0 || points.iter().any(|p| p.len() != d || p.iter().any(|v| !v.is_finite())) {
                    return Err(invalid("Dirac points must be finite and share a dimension"));
                }
                Ok(())
            }
            Self::Gaussian(_) => Ok(()),
            Self::Empirical { dim, samples } => {
                if *dim == 0 || samples.is_empty() || samples.len() % dim != 0 {
                    return Err(invalid("empirical sample must be non-empty with whole points"));
                }
                if samples.iter().any(|v| !v.is_finite()) {
                    return Err(invalid("empirical sample must be finite"));
                }
                Ok(())
            }
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Dirac { points, .. } => points[0].len(),
            Self::Gaussian(g) => g.dim(),
            Self::Empirical { dim, .. } => *dim,
        }
    }

    /// Whether the law has point masses (and therefore no density).
    pub fn has_atoms(&self) -> bool {
        match self {
            Self::Gaussian(g) => g.has_atoms(),
            _ => true,
        }
    }

    /// Equivalent mixture; atoms become zero-covariance components.
    pub fn as_mixture(&self) -> Result<GaussianMixture> {
        let d = self.dim();
        match self {
            Self::Gaussian(g) => Ok(g.clone()),
            Self::Dirac { points, weights } => {
                GaussianMixture::new(weights.clone(), points.clone(), vec![DMatrix::zeros(d, d); points.len()])
            }
            Self::Empirical { samples, .. } => {
                let n = samples.len() / d;
                GaussianMixture::new(
                    vec![1.0 / n as f64; n],
                    samples.chunks(d).map(DVector::from_column_slice).collect(),
                    vec![DMatrix::zeros(d, d); n],
                )
            }
        }
    }

    pub fn char_fn(&self, xi: &DVector<f64>) -> Complex64 {
        match self {
            Self::Gaussian(g) => g.char_fn(xi),
            Self::Dirac { points, weights } => points
                .iter()
                .zip(weights)
                .map(|(p, w)| Complex64::from_polar(*w, -xi.dot(p)))
                .sum(),
            Self::Empirical { dim, samples } => {
                let n = samples.len() / dim;
                samples
                    .chunks(*dim)
                    .map(|p| {
                        let phase: f64 = p.iter().zip(xi.iter()).map(|(a, b)| a * b).sum();
                        Complex64::from_polar(1.0 / n as f64, -phase)
                    })
                    .sum()
            }
        }
    }

    pub fn mean(&self) -> Result<DVector<f64>> {
        Ok(self.as_mixture()?.mean())
    }

    pub fn to_json(&self) -> serde_json::Value {
        match self {
            Self::Dirac { points, weights } => json!({
                "kind": "dirac",
                "points": points.iter().map(|p| p.as_slice().to_vec()).collect::<Vec<_>>(),
                "weights": weights,
            }),
            Self::Gaussian(g) => json!({
                "kind": "gaussian-mixture",
                "weights": g.weights(),
                "means": g.means().iter().map(|p| p.as_slice().to_vec()).collect::<Vec<_>>(),
                "covariances": g.covariances().iter().map(|c| {
                    c.row_iter().map(|r| r.iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>()
                }).collect::<Vec<_>>(),
            }),
            Self::Empirical { dim, samples } => json!({
                "kind": "empirical",
                "dim": dim,
                "n": samples.len() / dim,
            }),
        }
    }
}
