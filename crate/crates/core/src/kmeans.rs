//! Lloyd's k-means with deterministic k-means++ seeding.
//!
//! Used both for codebook training and for splitting nodes of the
//! [`KMeansTree`](crate::annindex::KMeansTree).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::vecmath::{nearest, sq_dist};

#[derive(Debug, Clone)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iters: usize,
    /// Stop once no centroid moves farther than this (Euclidean).
    pub tol: f64,
    pub seed: u64,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            max_iters: 100,
            tol: 1e-6,
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Clustering {
    pub centroids: Vec<Vec<f64>>,
    /// Nearest-centroid index of every input point under `centroids`.
    pub assignment: Vec<usize>,
    pub iterations: usize,
    pub converged: bool,
}

impl Clustering {
    /// Sum of squared distances from each point to its assigned centroid.
    pub fn inertia<P: AsRef<[f64]>>(&self, points: &[P]) -> f64 {
        points
            .iter()
            .zip(&self.assignment)
            .map(|(p, &a)| sq_dist(p.as_ref(), &self.centroids[a]))
            .sum()
    }
}

/// Number of bitwise-distinct points.
pub fn count_distinct<P: AsRef<[f64]>>(points: &[P]) -> usize {
    let mut keys: Vec<Vec<u64>> = points
        .iter()
        .map(|p| p.as_ref().iter().map(|x| x.to_bits()).collect())
        .collect();
    keys.sort_unstable();
    keys.dedup();
    keys.len()
}

/// Runs k-means on `points`.
///
/// Returns fewer than `cfg.k` centroids when the input has fewer distinct
/// points than requested. `points` must be non-empty and `cfg.k >= 1`.
pub fn kmeans<P: AsRef<[f64]>>(points: &[P], cfg: &KMeansConfig) -> Clustering {
    assert!(!points.is_empty(), "kmeans on empty input");
    assert!(cfg.k >= 1, "kmeans with k = 0");

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut centroids = seed_plus_plus(points, cfg.k, &mut rng);
    let dim = points[0].as_ref().len();
    let k = centroids.len();

    let mut assignment = vec![0usize; points.len()];
    let mut iterations = 0;
    let mut converged = false;

    while iterations < cfg.max_iters {
        iterations += 1;
        let mut dists = vec![0.0; points.len()];
        for (i, p) in points.iter().enumerate() {
            let (c, d) = nearest(p.as_ref(), &centroids);
            assignment[i] = c;
            dists[i] = d;
        }

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignment) {
            counts[a] += 1;
            for (s, x) in sums[a].iter_mut().zip(p.as_ref()) {
                *s += x;
            }
        }

        let mut taken = vec![false; points.len()];
        let mut shift: f64 = 0.0;
        for c in 0..k {
            let next = if counts[c] > 0 {
                let n = counts[c] as f64;
                sums[c].iter().map(|s| s / n).collect::<Vec<_>>()
            } else {
                // Re-seed an empty cluster with the worst-served point.
                let mut far = None;
                for (i, &d) in dists.iter().enumerate() {
                    if taken[i] {
                        continue;
                    }
                    if far.is_none_or(|(_, fd)| d > fd) {
                        far = Some((i, d));
                    }
                }
                match far {
                    Some((i, _)) => {
                        taken[i] = true;
                        dists[i] = 0.0;
                        points[i].as_ref().to_vec()
                    }
                    None => centroids[c].clone(),
                }
            };
            shift = shift.max(sq_dist(&next, &centroids[c]).sqrt());
            centroids[c] = next;
        }

        if shift < cfg.tol {
            converged = true;
            break;
        }
    }

    for (i, p) in points.iter().enumerate() {
        assignment[i] = nearest(p.as_ref(), &centroids).0;
    }

    Clustering {
        centroids,
        assignment,
        iterations,
        converged,
    }
}

fn seed_plus_plus<P: AsRef<[f64]>>(points: &[P], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let first = rng.random_range(0..n);
    let mut centroids = vec![points[first].as_ref().to_vec()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p.as_ref(), &centroids[0])).collect();

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
        let Some(pick) = pick else { break };
        let c = points[pick].as_ref().to_vec();
        for (i, p) in points.iter().enumerate() {
            let d = sq_dist(p.as_ref(), &c);
            if d < d2[i] {
                d2[i] = d;
            }
        }
        centroids.push(c);
    }
    centroids
}
