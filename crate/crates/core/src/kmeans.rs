//! Lloyd's k-means with deterministic farthest-point seeding.

use rand::Rng;

use crate::embedding::squared_distance;
use crate::error::{Error, Result};
use crate::seed;

pub const DEFAULT_MAX_ITERS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    /// Within-cluster SSE after every assignment step, starting with the seeding.
    pub sse_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl KMeans {
    pub fn sse(&self) -> f64 {
        *self.sse_history.last().expect("history is never empty")
    }
}

/// Index of the nearest centroid; ties go to the lowest index.
pub fn nearest(centroids: &[Vec<f64>], point: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let d = squared_distance(c, point);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

pub fn within_cluster_sse(points: &[Vec<f64>], centroids: &[Vec<f64>], assignments: &[usize]) -> f64 {
    points
        .iter()
        .zip(assignments)
        .map(|(p, &a)| squared_distance(p, &centroids[a]))
        .sum()
}

fn farthest_point_seeding(points: &[Vec<f64>], k: usize, seed: u64) -> Vec<Vec<f64>> {
    let first = (seed::stream(seed, "kmeans-seeding", &[]).random::<u64>() % points.len() as u64) as usize;
    let mut centroids = vec![points[first].clone()];
    let mut min_dist: Vec<f64> = points.iter().map(|p| squared_distance(p, &points[first])).collect();
    while centroids.len() < k {
        let mut pick = 0;
        for (i, &d) in min_dist.iter().enumerate() {
            if d > min_dist[pick] {
                pick = i;
            }
        }
        let chosen = points[pick].clone();
        for (d, p) in min_dist.iter_mut().zip(points) {
            *d = d.min(squared_distance(p, &chosen));
        }
        centroids.push(chosen);
    }
    centroids
}

fn assign(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> Vec<usize> {
    points.iter().map(|p| nearest(centroids, p)).collect()
}

/// Clusters `points` into `k` groups.
///
/// Identical input points are allowed: the surplus centroids coincide and all
/// points land in the lowest-indexed cluster.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, max_iters: usize) -> Result<KMeans> {
    if k == 0 || points.len() < k {
        return Err(Error::InsufficientData {
            have: points.len(),
            need: k.max(1),
        });
    }
    let dim = points[0].len();
    if let Some(p) = points.iter().find(|p| p.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: p.len(),
        });
    }

    let mut centroids = farthest_point_seeding(points, k, seed);
    let mut assignments = assign(points, &centroids);
    let mut sse_history = vec![within_cluster_sse(points, &centroids, &assignments)];
    let mut converged = false;
    let mut iterations = 0;

    while iterations < max_iters {
        iterations += 1;
        update_centroids(points, &assignments, &mut centroids);
        let next = assign(points, &centroids);
        sse_history.push(within_cluster_sse(points, &centroids, &next));
        if next == assignments {
            converged = true;
            break;
        }
        assignments = next;
    }

    Ok(KMeans {
        centroids,
        assignments,
        sse_history,
        iterations,
        converged,
    })
}

fn update_centroids(points: &[Vec<f64>], assignments: &[usize], centroids: &mut [Vec<f64>]) {
    let k = centroids.len();
    let dim = points[0].len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assignments) {
        counts[a] += 1;
        for (s, x) in sums[a].iter_mut().zip(p) {
            *s += x;
        }
    }
    for c in 0..k {
        if counts[c] > 0 {
            let n = counts[c] as f64;
            centroids[c] = sums[c].iter().map(|s| s / n).collect();
        }
    }

    // Empty clusters move onto the point worst served by its own centroid.
    let mut taken = vec![false; points.len()];
    for c in (0..k).filter(|&c| counts[c] == 0) {
        let mut pick = None;
        let mut pick_d = f64::NEG_INFINITY;
        for (i, (p, &a)) in points.iter().zip(assignments).enumerate() {
            if taken[i] {
                continue;
            }
            let d = squared_distance(p, &centroids[a]);
            if d > pick_d {
                pick = Some(i);
                pick_d = d;
            }
        }
        if let Some(i) = pick {
            taken[i] = true;
            centroids[c] = points[i].clone();
        }
    }
}
