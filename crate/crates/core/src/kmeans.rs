//! Seeded Lloyd's k-means with k-means++ seeding, used to initialize codebooks.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::SeededRng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KMeansConfig {
    pub max_iters: usize,
    /// Stop once `‖Δcentroids‖ / ‖centroids‖` falls below this.
    pub tol: f64,
    /// Standard deviation of the perturbation used to pad duplicate centroids,
    /// relative to the data's RMS norm (at least 1).
    pub duplicate_jitter: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self { max_iters: 50, tol: 1e-6, duplicate_jitter: 1e-3 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub iterations: usize,
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid; ties go to the lowest index.
pub fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Clusters `points` into `k` groups.
///
/// When fewer than `k` distinct points exist, the missing centroids are
/// copies of chosen ones plus a small Gaussian perturbation.
pub fn kmeans(points: &[Vec<f64>], k: usize, cfg: &KMeansConfig, rng: &mut SeededRng) -> Result<KMeans> {
    if points.is_empty() {
        return Err(Error::Empty("k-means input"));
    }
    if k == 0 {
        return Err(Error::config("k-means needs k >= 1"));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::data("k-means points have mixed widths"));
    }

    // k-means++ seeding
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(points[rng.random_range(0..points.len())].clone());
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            break;
        }
        let mut target = rng.random::<f64>() * total;
        let mut pick = None;
        for (i, &w) in d2.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            pick = Some(i);
            if target < w {
                break;
            }
            target -= w;
        }
        let c = points[pick.expect("positive total weight")].clone();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    if centroids.len() < k {
        let rms = libm::sqrt(points.iter().map(|p| p.iter().map(|x| x * x).sum::<f64>()).sum::<f64>() / points.len() as f64);
        let sigma = cfg.duplicate_jitter * rms.max(1.0);
        let live = centroids.len();
        let mut j = 0;
        while centroids.len() < k {
            let mut c = centroids[j % live].clone();
            for x in c.iter_mut() {
                let n: f64 = StandardNormal.sample(rng);
                *x += sigma * n;
            }
            centroids.push(c);
            j += 1;
        }
    }

    let mut assignments = vec![0usize; points.len()];
    let mut iterations = 0;
    for _ in 0..cfg.max_iters {
        iterations += 1;
        let mut dist = vec![0.0; points.len()];
        for (i, p) in points.iter().enumerate() {
            let (j, d) = nearest(p, &centroids);
            assignments[i] = j;
            dist[i] = d;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        // first member, and whether every member equals it bitwise
        let mut first: Vec<Option<(usize, bool)>> = vec![None; k];
        for (i, (p, &j)) in points.iter().zip(&assignments).enumerate() {
            counts[j] += 1;
            for (s, x) in sums[j].iter_mut().zip(p) {
                *s += x;
            }
            match &mut first[j] {
                None => first[j] = Some((i, true)),
                Some((f, same)) => *same &= points[*f] == *p,
            }
        }
        let mut next = centroids.clone();
        let mut taken = vec![false; points.len()];
        for j in 0..k {
            if counts[j] > 0 {
                next[j] = match first[j] {
                    // the mean of identical points is that point, without rounding
                    Some((f, true)) => points[f].clone(),
                    _ => sums[j].iter().map(|s| s / counts[j] as f64).collect(),
                };
                continue;
            }
            // empty cluster: re-seed to the point farthest from its centroid
            let far = (0..points.len())
                .filter(|&i| !taken[i] && dist[i] > 0.0)
                .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)));
            if let Some(i) = far {
                taken[i] = true;
                dist[i] = 0.0;
                next[j] = points[i].clone();
            }
        }
        let moved: f64 = next.iter().zip(&centroids).map(|(a, b)| sq_dist(a, b)).sum();
        let norm: f64 = centroids.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>()).sum();
        centroids = next;
        if moved <= cfg.tol * cfg.tol * norm.max(f64::MIN_POSITIVE) {
            break;
        }
    }
    for (i, p) in points.iter().enumerate() {
        assignments[i] = nearest(p, &centroids).0;
    }
    Ok(KMeans { centroids, assignments, iterations })
}
