//! Metric MDS by stress majorization (SMACOF) with unit weights.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::DissimilarityMatrix;
use crate::error::{Error, Result};

/// Problem size above which the Guttman update is computed in parallel.
const PARALLEL_MIN_POINTS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmacofOptions {
    pub max_iters: usize,
    /// Stop once the relative decrease of raw stress falls below this.
    pub rel_tol: f64,
    pub seed: u64,
}

impl Default for SmacofOptions {
    fn default() -> Self {
        SmacofOptions {
            max_iters: 500,
            rel_tol: 1e-7,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SmacofRun {
    /// One row of length `m` per point, in dissimilarity-matrix order.
    pub points: Vec<Vec<f64>>,
    /// Raw stress of the initial configuration followed by one value per
    /// accepted Guttman iteration.
    pub raw_stress_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl SmacofRun {
    /// `σ = sqrt(raw stress)` of the returned configuration.
    pub fn stress(&self) -> f64 {
        self.raw_stress_history.last().copied().unwrap_or(0.0).sqrt()
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `Σ_i Σ_{j≠i} (‖x_i − x_j‖ − δ_ij)²` over ordered pairs.
pub fn raw_stress(points: &[Vec<f64>], d: &DissimilarityMatrix) -> f64 {
    let n = points.len();
    let mut total = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let r = distance(&points[i], &points[j]) - d.get(i, j);
            total += r * r;
        }
    }
    2.0 * total
}

/// `σ(X)`: square root of [`raw_stress`].
pub fn stress(points: &[Vec<f64>], d: &DissimilarityMatrix) -> f64 {
    raw_stress(points, d).sqrt()
}

/// Guttman transform `X⁺ = n⁻¹ B(X) X`, written row-wise as
/// `x⁺_i = n⁻¹ Σ_{j≠i} (δ_ij / d_ij)(x_i − x_j)`. Pairs at zero distance
/// contribute nothing.
fn guttman_row(i: usize, points: &[Vec<f64>], d: &DissimilarityMatrix) -> Vec<f64> {
    let n = points.len();
    let m = points[i].len();
    let mut out = vec![0.0; m];
    for j in 0..n {
        if j == i {
            continue;
        }
        let dij = distance(&points[i], &points[j]);
        if dij > 0.0 {
            let ratio = d.get(i, j) / dij;
            for (k, o) in out.iter_mut().enumerate() {
                *o += ratio * (points[i][k] - points[j][k]);
            }
        }
    }
    let inv_n = 1.0 / n as f64;
    for o in &mut out {
        *o *= inv_n;
    }
    out
}

fn guttman_transform(points: &[Vec<f64>], d: &DissimilarityMatrix) -> Vec<Vec<f64>> {
    let n = points.len();
    if n >= PARALLEL_MIN_POINTS {
        (0..n).into_par_iter().map(|i| guttman_row(i, points, d)).collect()
    } else {
        (0..n).map(|i| guttman_row(i, points, d)).collect()
    }
}

/// Uniform random start in `[-0.5, 0.5]^m` from a ChaCha8 stream.
pub fn initial_configuration(n: usize, m: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..m).map(|_| rng.random::<f64>() - 0.5).collect())
        .collect()
}

/// Runs SMACOF from the seeded random start.
pub fn smacof(d: &DissimilarityMatrix, m: usize, opts: &SmacofOptions) -> Result<SmacofRun> {
    let n = d.len();
    if n < 2 {
        return Err(Error::Domain(format!("MDS needs at least 2 points, got {n}")));
    }
    if m == 0 {
        return Err(Error::Domain("embedding dimension must be positive".into()));
    }
    smacof_from(d, initial_configuration(n, m, opts.seed), opts)
}

/// Runs SMACOF from a caller-provided configuration.
pub fn smacof_from(d: &DissimilarityMatrix, init: Vec<Vec<f64>>, opts: &SmacofOptions) -> Result<SmacofRun> {
    if init.len() != d.len() {
        return Err(Error::Domain(
            "initial configuration size does not match dissimilarities".into(),
        ));
    }
    let mut points = init;
    let mut history = vec![raw_stress(&points, d)];
    let mut iterations = 0;
    let mut converged = false;

    while iterations < opts.max_iters {
        let prev = *history.last().unwrap();
        if prev == 0.0 {
            converged = true;
            break;
        }
        let next = guttman_transform(&points, d);
        iterations += 1;
        let cur = raw_stress(&next, d);
        if cur > prev {
            // Only roundoff can raise stress; keep the better configuration.
            converged = true;
            break;
        }
        points = next;
        history.push(cur);
        if prev - cur < opts.rel_tol * prev {
            converged = true;
            break;
        }
    }

    Ok(SmacofRun {
        points,
        raw_stress_history: history,
        iterations,
        converged,
    })
}
