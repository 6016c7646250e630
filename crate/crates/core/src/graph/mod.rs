//! Per-region user-similarity graph: spherical k-means, nearest-cluster
//! pruning, exact k-NN inside the pruned candidate set.

mod io;
mod kmeans;

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use io::{parse_graph, parse_graph_header, read_graph, write_graph, GraphHeader, GraphLine};
pub use kmeans::{cosine_distance, nearest_centroid, spherical_kmeans, KMeans};

use crate::error::{Error, Result};
use crate::parallel::par_map;
use crate::pipeline::EmbeddingSnapshot;
use crate::tensor::{dot, l2_norm, Mat};

/// How a user's `M` vectors collapse to one vector for similarity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    MeanPool,
    First,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    pub k1: usize,
    pub k1_prime: usize,
    pub k2: usize,
    pub kmeans_max_iters: usize,
    pub kmeans_tol: f64,
    pub seed: u64,
    pub reduction: Reduction,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            k1: 400,
            k1_prime: 50,
            k2: 15,
            kmeans_max_iters: 100,
            kmeans_tol: 1e-6,
            seed: 7,
            reduction: Reduction::MeanPool,
        }
    }
}

impl GraphConfig {
    pub fn desk_scale() -> Self {
        GraphConfig {
            k1: 40,
            k1_prime: 5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k1 == 0 {
            return Err(Error::config("graph.k1", "must be at least 1"));
        }
        if self.k1_prime == 0 || self.k1_prime > self.k1 {
            return Err(Error::config("graph.k1_prime", "must be in [1, k1]"));
        }
        if self.k2 == 0 {
            return Err(Error::config("graph.k2", "must be at least 1"));
        }
        if !(self.kmeans_tol >= 0.0) {
            return Err(Error::config("graph.kmeans_tol", "must be non-negative"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, hex.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// `v / ‖v‖`, or `None` for a zero or non-finite norm.
pub fn normalize(v: &[f64]) -> Option<Vec<f64>> {
    let n = l2_norm(v);
    (n > 0.0 && n.is_finite()).then(|| v.iter().map(|x| x / n).collect())
}

fn reduce(vectors: &Mat, reduction: Reduction) -> Vec<f64> {
    match reduction {
        Reduction::First => vectors.row(0).to_vec(),
        Reduction::MeanPool => {
            let mut out = vec![0.0; vectors.cols];
            for r in 0..vectors.rows {
                for (o, v) in out.iter_mut().zip(vectors.row(r)) {
                    *o += v;
                }
            }
            let m = vectors.rows as f64;
            out.iter_mut().for_each(|o| *o /= m);
            out
        }
    }
}

/// Unit vector per user plus the number of zero-norm users dropped.
pub fn normalize_embeddings(snapshot: &EmbeddingSnapshot, reduction: Reduction) -> (BTreeMap<u64, Vec<f64>>, usize) {
    let mut out = BTreeMap::new();
    let mut rejected = 0;
    for (&id, e) in &snapshot.records {
        match normalize(&reduce(&e.vectors, reduction)) {
            Some(v) => {
                out.insert(id, v);
            }
            None => rejected += 1,
        }
    }
    if rejected > 0 {
        log::warn!("{rejected} users with zero-norm embeddings excluded");
    }
    (out, rejected)
}

/// Unit vectors of one region, rows ordered by ascending user id.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionPoints {
    pub ids: Vec<u64>,
    pub vectors: Mat,
}

impl RegionPoints {
    pub fn from_map(vectors: &BTreeMap<u64, Vec<f64>>, ids: &[u64]) -> Self {
        let mut kept: Vec<u64> = ids.iter().copied().filter(|id| vectors.contains_key(id)).collect();
        kept.sort_unstable();
        let rows: Vec<Vec<f64>> = kept.iter().map(|id| vectors[id].clone()).collect();
        let d = rows.first().map_or(0, Vec::len);
        let vectors = if rows.is_empty() { Mat::zeros(0, d) } else { Mat::from_rows(&rows) };
        RegionPoints { ids: kept, vectors }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub region: String,
    pub centroids: Mat,
    /// Row index into the region's points → cluster.
    pub assignment: Vec<usize>,
    /// Row indices per cluster, ascending.
    pub members: Vec<Vec<usize>>,
    pub objective_history: Vec<f64>,
}

impl ClusterModel {
    pub fn fit(region: &str, points: &RegionPoints, k1: usize, seed: u64, max_iters: usize, tol: f64) -> Result<Self> {
        let km = spherical_kmeans(&points.vectors, k1, seed, max_iters, tol)?;
        Ok(ClusterModel {
            region: region.to_string(),
            members: km.members(),
            centroids: km.centroids,
            assignment: km.assignment,
            objective_history: km.objective_history,
        })
    }

    pub fn k(&self) -> usize {
        self.centroids.rows
    }
}

/// Cosine similarity of unit vectors, clamped against rounding past ±1.
pub fn similarity(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b).clamp(-1.0, 1.0)
}

/// Descending similarity, then ascending id.
fn by_similarity(a: &(u64, f64), b: &(u64, f64)) -> Ordering {
    b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0))
}

fn top_k(mut scored: Vec<(u64, f64)>, k: usize) -> Vec<(u64, f64)> {
    if scored.len() > k {
        scored.select_nth_unstable_by(k - 1, by_similarity);
        scored.truncate(k);
    }
    scored.sort_by(by_similarity);
    scored
}

/// Indices of the `k1_prime` most similar centroids, best first.
pub fn nearest_clusters(model: &ClusterModel, query: &[f64], k1_prime: usize) -> Vec<usize> {
    let mut scored: Vec<(usize, f64)> = (0..model.k()).map(|c| (c, dot(model.centroids.row(c), query))).collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
    scored.truncate(k1_prime);
    scored.into_iter().map(|(c, _)| c).collect()
}

/// Exact top-`k2` among members of `cluster_ids`, excluding the query row.
pub fn knn_within(
    model: &ClusterModel,
    points: &RegionPoints,
    query_row: usize,
    cluster_ids: &[usize],
    k2: usize,
) -> Vec<(u64, f64)> {
    let q = points.vectors.row(query_row);
    let scored: Vec<(u64, f64)> = cluster_ids
        .iter()
        .flat_map(|&c| &model.members[c])
        .filter(|&&i| i != query_row)
        .map(|&i| (points.ids[i], similarity(q, points.vectors.row(i))))
        .collect();
    top_k(scored, k2)
}

/// Exact top-`k` over the whole region.
pub fn brute_force_knn(points: &RegionPoints, query_row: usize, k: usize) -> Vec<(u64, f64)> {
    let q = points.vectors.row(query_row);
    let scored: Vec<(u64, f64)> = (0..points.len())
        .filter(|&i| i != query_row)
        .map(|i| (points.ids[i], similarity(q, points.vectors.row(i))))
        .collect();
    top_k(scored, k)
}

/// Directed user → neighbors graph with cosine weights.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityGraph {
    pub snapshot_version: u64,
    pub config_hash: String,
    pub edges: BTreeMap<u64, Vec<(u64, f64)>>,
}

impl SimilarityGraph {
    pub fn neighbors(&self, user: u64) -> &[(u64, f64)] {
        self.edges.get(&user).map_or(&[], Vec::as_slice)
    }

    pub fn n_edges(&self) -> usize {
        self.edges.values().map(Vec::len).sum()
    }
}

#[derive(Debug, Clone)]
pub struct GraphBuild {
    pub graph: SimilarityGraph,
    pub models: Vec<ClusterModel>,
    pub skipped_regions: usize,
    pub rejected_users: usize,
}

fn region_seed(seed: u64, region: &str) -> u64 {
    seed ^ (crc32fast::hash(region.as_bytes()) as u64).rotate_left(32)
}

/// Builds the graph region by region, in region-name order.
pub fn build_graph(snapshot: &EmbeddingSnapshot, cfg: &GraphConfig) -> Result<GraphBuild> {
    cfg.validate()?;
    if snapshot.is_empty() {
        return Err(Error::Invalid("snapshot is empty".into()));
    }
    let (unit, rejected_users) = normalize_embeddings(snapshot, cfg.reduction);
    let mut edges = BTreeMap::new();
    let mut models = Vec::new();
    let mut skipped_regions = 0;
    for (region, ids) in &snapshot.region_index {
        let points = RegionPoints::from_map(&unit, ids);
        if points.len() < 2 {
            log::warn!("region {region:?} has {} users; skipped", points.len());
            skipped_regions += 1;
            continue;
        }
        let k1 = cfg.k1.min(points.len());
        let k1_prime = cfg.k1_prime.min(k1);
        let model = ClusterModel::fit(
            region,
            &points,
            k1,
            region_seed(cfg.seed, region),
            cfg.kmeans_max_iters,
            cfg.kmeans_tol,
        )?;
        let rows: Vec<usize> = (0..points.len()).collect();
        let lists = par_map(&rows, |&i| {
            let clusters = nearest_clusters(&model, points.vectors.row(i), k1_prime);
            knn_within(&model, &points, i, &clusters, cfg.k2)
        });
        for (&id, list) in points.ids.iter().zip(lists) {
            edges.insert(id, list);
        }
        models.push(model);
    }
    Ok(GraphBuild {
        graph: SimilarityGraph {
            snapshot_version: snapshot.snapshot_version,
            config_hash: cfg.hash(),
            edges,
        },
        models,
        skipped_regions,
        rejected_users,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_closed_form() {
        assert_eq!(normalize(&[3.0, 4.0]).unwrap(), vec![0.6, 0.8]);
        assert!(normalize(&[0.0, 0.0]).is_none());
        let u = normalize(&[0.6, 0.8]).unwrap();
        assert!((u[0] - 0.6).abs() < 1e-15 && (u[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn cosine_distance_definition() {
        assert_eq!(cosine_distance(&[0.6, 0.8], &[0.6, 0.8]), 0.0);
        assert_eq!(cosine_distance(&[1.0, 0.0], &[0.0, 1.0]), 1.0);
    }

    #[test]
    fn top_k_orders_by_similarity_then_id() {
        let got = top_k(vec![(5, 0.5), (2, 0.9), (9, 0.5), (1, 0.5), (3, 0.1)], 3);
        assert_eq!(got, vec![(2, 0.9), (1, 0.5), (5, 0.5)]);
    }

    #[test]
    fn config_validation() {
        assert!(GraphConfig::default().validate().is_ok());
        let bad = GraphConfig {
            k1_prime: 500,
            ..GraphConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config { field, .. }) if field == "graph.k1_prime"));
        assert_eq!(GraphConfig::default().hash(), GraphConfig::default().hash());
        assert_ne!(GraphConfig::default().hash(), GraphConfig::desk_scale().hash());
    }
}
