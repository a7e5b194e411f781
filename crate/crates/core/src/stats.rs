//! Distances between empirical laws and reference distributions.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Result};
use crate::rng::{stream_rng, PURPOSE_PROJECTIONS};

fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

fn nonempty(values: &[f64], what: &str) -> Result<()> {
    if values.is_empty() {
        Err(invalid(format!("{what} sample is empty")))
    } else {
        Ok(())
    }
}

/// Kolmogorov-Smirnov statistic `sup |F_n - F|` of a sample against a CDF.
pub fn ks_statistic<F: Fn(f64) -> f64>(sample: &[f64], cdf: F) -> Result<f64> {
    nonempty(sample, "KS")?;
    let v = sorted(sample);
    let n = v.len() as f64;
    let mut d: f64 = 0.0;
    for (i, x) in v.iter().enumerate() {
        let f = cdf(*x);
        d = d.max((i + 1) as f64 / n - f).max(f - i as f64 / n);
    }
    Ok(d)
}

/// Two-sample Kolmogorov-Smirnov statistic.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<f64> {
    nonempty(a, "first")?;
    nonempty(b, "second")?;
    let (a, b) = (sorted(a), sorted(b));
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    Ok(d)
}

/// Exact Wasserstein-1 distance between two 1D empirical laws, as
/// `int |F_a - F_b| dx`.
pub fn wasserstein1_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    nonempty(a, "first")?;
    nonempty(b, "second")?;
    Ok(wasserstein1_sorted(&sorted(a), &sorted(b)))
}

/// [`wasserstein1_1d`] for inputs already sorted ascending and non-empty.
pub fn wasserstein1_sorted(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut last = a[0].min(b[0]);
    let mut total = 0.0;
    while i < a.len() || j < b.len() {
        let x = match (a.get(i), b.get(j)) {
            (Some(u), Some(v)) => u.min(*v),
            (Some(u), None) => *u,
            (None, Some(v)) => *v,
            (None, None) => unreachable!(),
        };
        total += (i as f64 / na - j as f64 / nb).abs() * (x - last);
        last = x;
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
    }
    total
}

/// `n` seeded unit directions in `R^dim`.
pub fn projection_directions(dim: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = stream_rng(seed, PURPOSE_PROJECTIONS, 0);
    (0..n)
        .map(|_| {
            let mut dir: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            dir.iter_mut().for_each(|v| *v /= norm);
            dir
        })
        .collect()
}

/// Sorted projections of a cloud onto fixed directions, reusable across
/// many sliced distance evaluations.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedCloud {
    projections: Vec<Vec<f64>>,
}

impl ProjectedCloud {
    pub fn new(points: &[f64], dim: usize, directions: &[Vec<f64>]) -> Result<Self> {
        if dim == 0 || points.is_empty() || points.len() % dim != 0 {
            return Err(invalid("point cloud must be non-empty with whole points"));
        }
        let projections = if dim == 1 {
            vec![sorted(points)]
        } else {
            directions.iter().map(|u| sorted(&project(points, dim, u))).collect()
        };
        Ok(Self { projections })
    }

    /// Mean over directions of the 1D W1 distance.
    pub fn sliced_distance(&self, other: &Self) -> f64 {
        let total: f64 = self
            .projections
            .iter()
            .zip(&other.projections)
            .map(|(a, b)| wasserstein1_sorted(a, b))
            .sum();
        total / self.projections.len() as f64
    }
}

fn project(points: &[f64], dim: usize, dir: &[f64]) -> Vec<f64> {
    points.chunks(dim).map(|p| p.iter().zip(dir).map(|(x, u)| x * u).sum()).collect()
}

/// Sliced Wasserstein-1 distance over `n_projections` seeded random
/// directions. Exact W1 for `dim == 1`.
pub fn sliced_wasserstein1(a: &[f64], b: &[f64], dim: usize, n_projections: usize, seed: u64) -> Result<f64> {
    if dim == 0 || a.len() % dim != 0 || b.len() % dim != 0 {
        return Err(invalid("point clouds must be whole multiples of the dimension"));
    }
    if dim == 1 {
        return wasserstein1_1d(a, b);
    }
    if n_projections == 0 {
        return Err(invalid("need at least one projection"));
    }
    let dirs = projection_directions(dim, n_projections, seed);
    Ok(ProjectedCloud::new(a, dim, &dirs)?.sliced_distance(&ProjectedCloud::new(b, dim, &dirs)?))
}

fn subsample(points: &[f64], dim: usize, max_points: usize, rng: &mut impl Rng) -> Vec<f64> {
    let n = points.len() / dim;
    if n <= max_points {
        return points.to_vec();
    }
    let mut idx = sample_indices(rng, n, max_points).into_vec();
    idx.sort_unstable();
    idx.iter().flat_map(|&i| points[i * dim..(i + 1) * dim].iter().copied()).collect()
}

fn mean_distance(a: &[f64], b: &[f64], dim: usize, same: bool) -> f64 {
    let na = a.len() / dim;
    let nb = b.len() / dim;
    let mut total = 0.0;
    for (i, p) in a.chunks(dim).enumerate() {
        for (j, q) in b.chunks(dim).enumerate() {
            if same && j <= i {
                continue;
            }
            total += p.iter().zip(q).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        }
    }
    if same {
        2.0 * total / (na * na) as f64
    } else {
        total / (na * nb) as f64
    }
}

/// Energy distance `2E|X-Y| - E|X-X'| - E|Y-Y'|` as a V-statistic, so it is
/// non-negative and vanishes for identical clouds. Clouds larger than
/// `max_points` are subsampled deterministically from `seed`.
pub fn energy_distance(a: &[f64], b: &[f64], dim: usize, max_points: usize, seed: u64) -> Result<f64> {
    if dim == 0 || a.len() % dim != 0 || b.len() % dim != 0 {
        return Err(invalid("point clouds must be whole multiples of the dimension"));
    }
    if a.len() < 2 * dim || b.len() < 2 * dim || max_points < 2 {
        return Err(invalid("energy distance needs at least two points per cloud"));
    }
    let mut rng = stream_rng(seed, PURPOSE_PROJECTIONS, 1);
    let a = subsample(a, dim, max_points, &mut rng);
    let b = subsample(b, dim, max_points, &mut rng);
    Ok(2.0 * mean_distance(&a, &b, dim, false) - mean_distance(&a, &a, dim, true) - mean_distance(&b, &b, dim, true))
}

pub fn mean_std(values: &[f64]) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(invalid("need at least two values"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok((mean, var.sqrt()))
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}
