//! Per-slide over-clustering of embeddings and review sampling.

mod kmeans;
mod session;

use std::collections::BTreeSet;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedder::Embedding;
use crate::tiler::TileAddress;

pub use kmeans::{kmeans, KMeansFit, KMeansParams};
pub use session::{
    AnnotationSession, ClusterStatus, Decision, Progress, SessionAction, SessionConfig, SessionError, SessionEvent,
};

pub const DEFAULT_K: usize = 32;
pub const GRID_SIDE: usize = 5;
pub const GRID_CELLS: usize = GRID_SIDE * GRID_SIDE;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ClusterError {
    #[error("no embeddings to cluster")]
    EmptyPool,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("embedding for tile {address} has {got} values, expected {expected}")]
    DimensionMismatch { address: TileAddress, expected: usize, got: usize },
    #[error("tile {0} appears more than once in the pool")]
    DuplicateTile(TileAddress),
    #[error("pool mixes slides `{0}` and `{1}`")]
    MixedSlides(String, String),
    #[error("cluster {cluster} does not exist (k = {k})")]
    UnknownCluster { cluster: usize, k: usize },
    #[error("cluster {0} is empty and is skipped in review")]
    EmptyCluster(usize),
}

/// Result of clustering one slide's foreground pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub slide_id: String,
    pub round: u8,
    pub requested_k: usize,
    /// Effective k, reduced to the pool size when the pool is smaller.
    pub k: usize,
    pub seed: u64,
    /// Pool tiles in ascending address order.
    pub tiles: Vec<TileAddress>,
    /// Cluster id of `tiles[i]`.
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub empty_clusters: Vec<usize>,
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl ClusterAssignment {
    pub fn k_reduced(&self) -> bool {
        self.k < self.requested_k
    }

    pub fn cluster_of(&self, addr: TileAddress) -> Option<usize> {
        self.tiles.binary_search(&addr).ok().map(|i| self.labels[i])
    }

    pub fn members(&self, cluster: usize) -> Vec<TileAddress> {
        self.tiles
            .iter()
            .zip(&self.labels)
            .filter(|(_, l)| **l == cluster)
            .map(|(t, _)| *t)
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }
}

/// Clusters a slide's embeddings. Input order does not matter: the pool is
/// sorted by tile address before seeding.
pub fn cluster_embeddings(
    embeddings: &[Embedding],
    k: usize,
    seed: u64,
    round: u8,
) -> Result<ClusterAssignment, ClusterError> {
    if k == 0 {
        return Err(ClusterError::InvalidK);
    }
    let first = embeddings.first().ok_or(ClusterError::EmptyPool)?;
    let dim = first.vector.len();
    let mut sorted: Vec<&Embedding> = embeddings.iter().collect();
    sorted.sort_by_key(|e| e.address);
    for pair in sorted.windows(2) {
        if pair[0].address == pair[1].address {
            return Err(ClusterError::DuplicateTile(pair[0].address));
        }
    }
    for e in &sorted {
        if e.slide_id != first.slide_id {
            return Err(ClusterError::MixedSlides(first.slide_id.clone(), e.slide_id.clone()));
        }
        if e.vector.len() != dim {
            return Err(ClusterError::DimensionMismatch { address: e.address, expected: dim, got: e.vector.len() });
        }
    }

    let effective_k = k.min(sorted.len());
    if effective_k < k {
        tracing::info!(slide = %first.slide_id, requested = k, effective = effective_k, "pool smaller than k; reducing k");
    }
    let data: Vec<&[f64]> = sorted.iter().map(|e| e.vector.as_slice()).collect();
    let fit = kmeans(&data, &KMeansParams::new(effective_k, seed));

    let mut sizes = vec![0usize; effective_k];
    for &l in &fit.labels {
        sizes[l] += 1;
    }
    let empty_clusters: Vec<usize> = sizes.iter().enumerate().filter(|(_, n)| **n == 0).map(|(i, _)| i).collect();
    Ok(ClusterAssignment {
        slide_id: first.slide_id.clone(),
        round,
        requested_k: k,
        k: effective_k,
        seed,
        tiles: sorted.iter().map(|e| e.address).collect(),
        labels: fit.labels,
        centroids: fit.centroids,
        empty_clusters,
        inertia_history: fit.inertia_history,
        iterations: fit.iterations,
        converged: fit.converged,
    })
}

/// Up to 25 tiles of one cluster, laid out row-major on a 5x5 grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSample {
    pub cluster_id: usize,
    pub tiles: Vec<TileAddress>,
    pub sampling_seed: u64,
}

impl GridSample {
    /// Rows of the display grid; the last row may be short.
    pub fn rows(&self) -> impl Iterator<Item = &[TileAddress]> {
        self.tiles.chunks(GRID_SIDE)
    }
}

pub fn sample_cluster_grid(assignment: &ClusterAssignment, cluster_id: usize, seed: u64) -> Result<GridSample, ClusterError> {
    if cluster_id >= assignment.k {
        return Err(ClusterError::UnknownCluster { cluster: cluster_id, k: assignment.k });
    }
    let members = assignment.members(cluster_id);
    if members.is_empty() {
        return Err(ClusterError::EmptyCluster(cluster_id));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let amount = members.len().min(GRID_CELLS);
    let tiles = index::sample(&mut rng, members.len(), amount).into_iter().map(|i| members[i]).collect();
    Ok(GridSample { cluster_id, tiles, sampling_seed: seed })
}

/// Union of the members of `clusters`, ascending.
pub fn pooled_members(assignment: &ClusterAssignment, clusters: &BTreeSet<usize>) -> Vec<TileAddress> {
    assignment
        .tiles
        .iter()
        .zip(&assignment.labels)
        .filter(|(_, l)| clusters.contains(l))
        .map(|(t, _)| *t)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn blob_pool(centers: &[Vec<f64>], per: usize, sigma: f64, seed: u64) -> (Vec<Embedding>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, sigma).unwrap();
        let mut out = Vec::new();
        let mut truth = Vec::new();
        for (ci, c) in centers.iter().enumerate() {
            for _ in 0..per {
                let i = out.len() as u32;
                let vector = c.iter().map(|v| v + noise.sample(&mut rng)).collect();
                out.push(Embedding { slide_id: "s".into(), address: TileAddress::new(i / 100, i % 100), vector });
                truth.push(ci);
            }
        }
        (out, truth)
    }

    fn corner(i: usize) -> Vec<f64> {
        let mut v = vec![0.0; 40];
        v[i] = 1.0;
        v
    }

    #[test]
    fn tight_blobs_are_recovered_purely() {
        let centers: Vec<Vec<f64>> = (0..3).map(corner).collect();
        let (pool, truth) = blob_pool(&centers, 40, 0.01, 3);
        let a = cluster_embeddings(&pool, 3, 11, 1).unwrap();
        for c in 0..3 {
            let members: BTreeSet<usize> = a
                .tiles
                .iter()
                .zip(&a.labels)
                .filter(|(_, l)| **l == c)
                .map(|(t, _)| truth[pool.iter().position(|e| e.address == *t).unwrap()])
                .collect();
            assert_eq!(members.len(), 1, "cluster {c} mixes blobs");
        }
        assert!(a.empty_clusters.is_empty());
    }

    #[test]
    fn single_embedding_is_its_own_centroid() {
        let e = Embedding { slide_id: "s".into(), address: TileAddress::new(0, 0), vector: corner(5) };
        let a = cluster_embeddings(std::slice::from_ref(&e), 1, 0, 1).unwrap();
        assert_eq!(a.centroids[0], e.vector);
        assert_eq!(a.members(0), vec![e.address]);
    }

    #[test]
    fn same_seed_same_assignment_regardless_of_order() {
        let centers: Vec<Vec<f64>> = (0..4).map(corner).collect();
        let (mut pool, _) = blob_pool(&centers, 20, 0.2, 9);
        let a = cluster_embeddings(&pool, 6, 42, 1).unwrap();
        pool.reverse();
        let b = cluster_embeddings(&pool, 6, 42, 1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn k_is_reduced_for_small_pools() {
        let centers: Vec<Vec<f64>> = (0..2).map(corner).collect();
        let (pool, _) = blob_pool(&centers, 5, 0.1, 1);
        let a = cluster_embeddings(&pool, 32, 0, 2).unwrap();
        assert_eq!((a.requested_k, a.k), (32, 10));
        assert!(a.k_reduced());
    }

    #[test]
    fn invalid_pools_are_rejected() {
        assert_eq!(cluster_embeddings(&[], 3, 0, 1), Err(ClusterError::EmptyPool));
        let e = Embedding { slide_id: "s".into(), address: TileAddress::new(0, 0), vector: vec![0.0] };
        assert_eq!(cluster_embeddings(&[e.clone(), e.clone()], 1, 0, 1), Err(ClusterError::DuplicateTile(e.address)));
        assert_eq!(cluster_embeddings(std::slice::from_ref(&e), 0, 0, 1), Err(ClusterError::InvalidK));
    }

    fn one_cluster(n: usize) -> ClusterAssignment {
        let pool: Vec<Embedding> = (0..n)
            .map(|i| Embedding { slide_id: "s".into(), address: TileAddress::new(i as u32, 0), vector: vec![0.0] })
            .collect();
        cluster_embeddings(&pool, 1, 0, 1).unwrap()
    }

    #[test]
    fn grid_sample_cardinality() {
        let big = one_cluster(100);
        let g = sample_cluster_grid(&big, 0, 5).unwrap();
        assert_eq!(g.tiles.len(), 25);
        assert_eq!(g.tiles.iter().collect::<BTreeSet<_>>().len(), 25);
        assert_eq!(g.rows().count(), 5);

        let small = one_cluster(7);
        let g = sample_cluster_grid(&small, 0, 5).unwrap();
        assert_eq!(g.tiles.iter().copied().collect::<BTreeSet<_>>(), small.tiles.iter().copied().collect());
        assert!(matches!(sample_cluster_grid(&small, 1, 0), Err(ClusterError::UnknownCluster { .. })));
    }

    #[test]
    fn grid_sample_is_seeded() {
        let a = one_cluster(100);
        assert_eq!(sample_cluster_grid(&a, 0, 9).unwrap(), sample_cluster_grid(&a, 0, 9).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut differing = 0;
        for _ in 0..100 {
            let (s1, s2): (u64, u64) = (rng.random(), rng.random());
            let g1 = sample_cluster_grid(&a, 0, s1).unwrap().tiles;
            let g2 = sample_cluster_grid(&a, 0, s2).unwrap().tiles;
            if g1 != g2 {
                differing += 1;
            }
        }
        assert_eq!(differing, 100);
    }

    #[test]
    fn empty_cluster_is_a_notice() {
        let mut a = one_cluster(3);
        a.k = 2;
        a.empty_clusters = vec![1];
        assert_eq!(sample_cluster_grid(&a, 1, 0), Err(ClusterError::EmptyCluster(1)));
    }
}
