//! Lloyd's k-means with greedy k-means++ seeding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansParams {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    /// Relative tolerance: iteration stops once the summed squared centroid
    /// shift falls to `tol` times the mean per-feature variance of the data.
    pub tol: f64,
}

impl KMeansParams {
    pub fn new(k: usize, seed: u64) -> Self {
        Self { k, seed, max_iter: 300, tol: 1e-4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansFit {
    pub centroids: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    /// Within-cluster sum of squares after each assignment step, starting
    /// with the assignment to the seeded centroids.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl KMeansFit {
    pub fn inertia(&self) -> f64 {
        self.inertia_history.last().copied().unwrap_or(0.0)
    }
}

pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid, ties going to the lowest index.
pub(crate) fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = squared_distance(point, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn assign(data: &[&[f64]], centroids: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let pairs: Vec<(usize, f64)> = data.par_iter().map(|p| nearest(p, centroids)).collect();
    let inertia = pairs.iter().map(|(_, d)| d).sum();
    (pairs.into_iter().map(|(l, _)| l).collect(), inertia)
}

fn update(data: &[&[f64]], labels: &[usize], previous: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let dim = previous[0].len();
    let mut sums = vec![vec![0f64; dim]; previous.len()];
    let mut counts = vec![0usize; previous.len()];
    for (p, &l) in data.iter().zip(labels) {
        counts[l] += 1;
        for (s, v) in sums[l].iter_mut().zip(p.iter()) {
            *s += v;
        }
    }
    sums.into_iter()
        .zip(counts)
        .zip(previous)
        .map(|((mut s, n), prev)| {
            if n == 0 {
                prev.clone()
            } else {
                s.iter_mut().for_each(|v| *v /= n as f64);
                s
            }
        })
        .collect()
}

/// Greedy k-means++: each new center is the best of `2 + ln k` candidates
/// drawn proportionally to squared distance from the chosen centers.
pub(crate) fn kmeans_plus_plus(data: &[&[f64]], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let n = data.len();
    let trials = 2 + (k as f64).ln().floor() as usize;
    let mut centers = vec![data[rng.random_range(0..n)].to_vec()];
    let mut closest: Vec<f64> = data.iter().map(|p| squared_distance(p, &centers[0])).collect();
    let mut potential: f64 = closest.iter().sum();

    while centers.len() < k {
        if potential <= 0.0 {
            // Every point already coincides with a center.
            centers.push(data[rng.random_range(0..n)].to_vec());
            continue;
        }
        let mut cumulative = Vec::with_capacity(n);
        let mut acc = 0.0;
        for d in &closest {
            acc += d;
            cumulative.push(acc);
        }
        let mut best: Option<(usize, f64, Vec<f64>)> = None;
        for _ in 0..trials {
            let target = rng.random::<f64>() * potential;
            let idx = cumulative.partition_point(|c| *c <= target).min(n - 1);
            let dists: Vec<f64> = data
                .iter()
                .zip(&closest)
                .map(|(p, c)| squared_distance(p, data[idx]).min(*c))
                .collect();
            let pot: f64 = dists.iter().sum();
            if best.as_ref().is_none_or(|(_, b, _)| pot < *b) {
                best = Some((idx, pot, dists));
            }
        }
        let (idx, pot, dists) = best.expect("at least two trials");
        centers.push(data[idx].to_vec());
        closest = dists;
        potential = pot;
    }
    centers
}

fn mean_variance(data: &[&[f64]]) -> f64 {
    let n = data.len() as f64;
    let dim = data[0].len();
    if dim == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for j in 0..dim {
        let mean = data.iter().map(|p| p[j]).sum::<f64>() / n;
        total += data.iter().map(|p| (p[j] - mean).powi(2)).sum::<f64>() / n;
    }
    total / dim as f64
}

/// Clusters `data` into `params.k` groups. `k` must not exceed `data.len()`
/// and all rows must share one dimension; callers validate both.
pub fn kmeans(data: &[&[f64]], params: &KMeansParams) -> KMeansFit {
    assert!(!data.is_empty() && params.k >= 1 && params.k <= data.len());
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut centroids = kmeans_plus_plus(data, params.k, &mut rng);
    let tol = params.tol * mean_variance(data);

    let (mut labels, inertia) = assign(data, &centroids);
    let mut history = vec![inertia];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < params.max_iter {
        iterations += 1;
        let next = update(data, &labels, &centroids);
        let shift: f64 = next.iter().zip(&centroids).map(|(a, b)| squared_distance(a, b)).sum();
        centroids = next;
        let (l, inertia) = assign(data, &centroids);
        labels = l;
        history.push(inertia);
        if shift <= tol {
            converged = true;
            break;
        }
    }
    KMeansFit { centroids, labels, inertia_history: history, iterations, converged }
}
