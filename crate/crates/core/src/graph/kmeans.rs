//! Spherical k-means: unit vectors, max-dot assignment, renormalized means.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{dot, l2_norm, Mat};

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    /// `k × d`, unit rows.
    pub centroids: Mat,
    /// Cluster index per input row.
    pub assignment: Vec<usize>,
    /// Objective after each assignment step.
    pub objective_history: Vec<f64>,
    pub iterations: usize,
}

impl KMeans {
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.centroids.rows];
        for (i, &c) in self.assignment.iter().enumerate() {
            out[c].push(i);
        }
        out
    }

    pub fn objective(&self) -> f64 {
        self.objective_history.last().copied().unwrap_or(0.0)
    }
}

pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    1.0 - dot(a, b)
}

/// Index of the max-dot centroid; ties go to the lowest index.
pub fn nearest_centroid(centroids: &Mat, x: &[f64]) -> usize {
    let mut best = 0;
    let mut best_dot = f64::NEG_INFINITY;
    for c in 0..centroids.rows {
        let s = dot(centroids.row(c), x);
        if s > best_dot {
            best_dot = s;
            best = c;
        }
    }
    best
}

fn normalized_mean(points: &Mat, members: &[usize]) -> Option<Vec<f64>> {
    let mut mean = vec![0.0; points.cols];
    for &i in members {
        for (m, v) in mean.iter_mut().zip(points.row(i)) {
            *m += v;
        }
    }
    let n = l2_norm(&mean);
    (n > 0.0 && n.is_finite()).then(|| mean.iter().map(|v| v / n).collect())
}

/// k-means++ seeding with squared cosine distance weights.
fn seed_centroids(points: &Mat, k: usize, rng: &mut ChaCha8Rng) -> Mat {
    let n = points.rows;
    let mut chosen = Vec::with_capacity(k);
    let mut taken = vec![false; n];
    let first = rng.random_range(0..n);
    chosen.push(first);
    taken[first] = true;
    let mut d2: Vec<f64> = (0..n)
        .map(|i| cosine_distance(points.row(i), points.row(first)).max(0.0).powi(2))
        .collect();
    while chosen.len() < k {
        let next = match WeightedIndex::new(d2.iter().enumerate().map(|(i, &w)| if taken[i] { 0.0 } else { w })) {
            Ok(dist) => dist.sample(rng),
            // Every remaining point coincides with a centroid.
            Err(_) => (0..n).find(|&i| !taken[i]).expect("k ≤ n"),
        };
        chosen.push(next);
        taken[next] = true;
        for (i, w) in d2.iter_mut().enumerate() {
            let d = cosine_distance(points.row(i), points.row(next)).max(0.0);
            *w = w.min(d * d);
        }
    }
    let mut c = Mat::zeros(k, points.cols);
    for (r, &i) in chosen.iter().enumerate() {
        c.row_mut(r).copy_from_slice(points.row(i));
    }
    c
}

/// Clusters unit-norm rows of `points` into `k` groups.
pub fn spherical_kmeans(points: &Mat, k: usize, seed: u64, max_iters: usize, tol: f64) -> Result<KMeans> {
    let n = points.rows;
    if k == 0 {
        return Err(Error::config("graph.k1", "must be at least 1"));
    }
    if n < k {
        return Err(Error::TooFewPoints { needed: k, got: n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_centroids(points, k, &mut rng);
    let mut assignment = vec![usize::MAX; n];
    let mut history: Vec<f64> = Vec::new();
    let mut iterations = 0;
    for _ in 0..max_iters.max(1) {
        iterations += 1;
        let mut changes = 0;
        let mut objective = 0.0;
        for (i, slot) in assignment.iter_mut().enumerate() {
            let c = nearest_centroid(&centroids, points.row(i));
            if *slot != c {
                changes += 1;
                *slot = c;
            }
            objective += cosine_distance(points.row(i), centroids.row(c));
        }
        let improvement = history.last().map(|prev| prev - objective);
        history.push(objective);
        if changes == 0 || improvement.is_some_and(|d| d < tol) {
            break;
        }

        let mut members = vec![Vec::new(); k];
        for (i, &c) in assignment.iter().enumerate() {
            members[c].push(i);
        }
        let mut reseeded = vec![false; n];
        for c in 0..k {
            if members[c].is_empty() {
                // Farthest point from its own centroid; lowest index on ties.
                let mut far = None;
                let mut far_d = f64::NEG_INFINITY;
                for i in 0..n {
                    if reseeded[i] {
                        continue;
                    }
                    let d = cosine_distance(points.row(i), centroids.row(assignment[i]));
                    if d > far_d {
                        far_d = d;
                        far = Some(i);
                    }
                }
                if let Some(i) = far {
                    reseeded[i] = true;
                    centroids.row_mut(c).copy_from_slice(points.row(i));
                }
            } else if let Some(mean) = normalized_mean(points, &members[c]) {
                centroids.row_mut(c).copy_from_slice(&mean);
            }
        }
    }
    Ok(KMeans {
        centroids,
        assignment,
        objective_history: history,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = l2_norm(v);
        v.iter().map(|x| x / n).collect()
    }

    #[test]
    fn k_equals_n_gives_zero_objective() {
        let rows: Vec<Vec<f64>> = (0..6)
            .map(|i| unit(&[(i as f64).cos(), (i as f64).sin(), 0.3 * i as f64]))
            .collect();
        let km = spherical_kmeans(&Mat::from_rows(&rows), 6, 1, 50, 1e-9).unwrap();
        assert!(km.objective().abs() < 1e-12, "{}", km.objective());
        let mut seen = km.assignment.clone();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 6);
    }

    #[test]
    fn too_few_points() {
        let m = Mat::from_rows(&[vec![1.0, 0.0]]);
        assert!(matches!(spherical_kmeans(&m, 2, 0, 10, 0.0), Err(Error::TooFewPoints { needed: 2, got: 1 })));
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let c = Mat::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 0.0]]);
        assert_eq!(nearest_centroid(&c, &[1.0, 0.0]), 1);
    }
}
