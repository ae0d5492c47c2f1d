//! Feature-space clustering of clients: binary feature matrix, k-means with
//! silhouette-based K selection, recursive refinement against a Jaccard
//! threshold, and per-cluster overlapping-feature extraction.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nncore::seeded_rng;

/// Default intra-cluster similarity threshold.
pub const DEFAULT_MIN_SIM: f64 = 0.80;

/// Clusters larger than this may be re-clustered during refinement; pairs are
/// only threshold-checked.
pub const DEFAULT_MAX_PAIR_SIZE: usize = 2;

/// A client's feature subset out of the global feature universe.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSubset {
    /// Sorted feature ids.
    pub indices: Vec<usize>,
    /// Size of the global feature universe.
    pub n_features_total: usize,
}

impl FeatureSubset {
    pub fn new(mut indices: Vec<usize>, n_features_total: usize) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Config("feature subset must be nonempty".into()));
        }
        indices.sort_unstable();
        indices.dedup();
        if let Some(&max) = indices.last() {
            if max >= n_features_total {
                return Err(Error::Config(format!(
                    "feature id {max} out of range (universe size {n_features_total})"
                )));
            }
        }
        Ok(FeatureSubset {
            indices,
            n_features_total,
        })
    }

    /// 0/1 indicator row over the feature universe.
    pub fn binary_row(&self) -> Vec<f64> {
        let mut row = vec![0.0; self.n_features_total];
        for &i in &self.indices {
            row[i] = 1.0;
        }
        row
    }

    pub fn contains(&self, feature: usize) -> bool {
        self.indices.binary_search(&feature).is_ok()
    }
}

/// |a∩b| / |a∪b| over the two index sets.
pub fn jaccard(a: &FeatureSubset, b: &FeatureSubset) -> f64 {
    let mut inter = 0usize;
    let (mut i, mut j) = (0usize, 0usize);
    while i < a.indices.len() && j < b.indices.len() {
        match a.indices[i].cmp(&b.indices[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.indices.len() + b.indices.len() - inter;
    inter as f64 / union as f64
}

/// Partition of clients with per-cluster overlapping feature sets.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClusterAssignment {
    /// Client-id sets; together they partition all clients.
    pub clusters: Vec<Vec<usize>>,
    /// O_k = ∩_{i∈C_k} S_i, ascending, aligned with `clusters`.
    pub overlaps: Vec<Vec<usize>>,
    pub min_sim: f64,
    /// Multi-client clusters that had an empty feature intersection and were
    /// split to singletons.
    pub empty_overlap_splits: usize,
}

impl ClusterAssignment {
    /// All-singleton assignment (the degenerate case where every client
    /// stands alone).
    pub fn singletons(subsets: &[FeatureSubset], min_sim: f64) -> Self {
        ClusterAssignment {
            clusters: (0..subsets.len()).map(|i| vec![i]).collect(),
            overlaps: subsets.iter().map(|s| s.indices.clone()).collect(),
            min_sim,
            empty_overlap_splits: 0,
        }
    }

    pub fn cluster_of(&self, client: usize) -> Option<usize> {
        self.clusters.iter().position(|c| c.contains(&client))
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm with k-means++ seeding and restarts; deterministic
/// given the seed. Centroids are real-valued means of binary rows.
pub fn kmeans_binary(rows: &[Vec<f64>], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    let n = rows.len();
    if k == 0 || k > n {
        return Err(Error::Config(format!("K={k} out of range for {n} clients")));
    }
    let dim = rows[0].len();
    let mut best: Option<(f64, Vec<usize>)> = None;
    for restart in 0..10u64 {
        let mut rng = seeded_rng(&[seed, restart, 0x6b6d]);
        let assign = kmeans_once(rows, k, dim, &mut rng);
        let inertia = kmeans_inertia(rows, &assign, k, dim);
        if best.as_ref().map(|(bi, _)| inertia < *bi).unwrap_or(true) {
            best = Some((inertia, assign));
        }
    }
    let (_, assign) = best.unwrap();
    let mut clusters: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &c) in assign.iter().enumerate() {
        clusters[c].push(i);
    }
    clusters.retain(|c| !c.is_empty());
    Ok(clusters)
}

fn kmeans_once(rows: &[Vec<f64>], k: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = rows.len();
    // k-means++ seeding
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(rows[rng.gen_range(0..n)].clone());
    while centroids.len() < k {
        let d2: Vec<f64> = rows
            .iter()
            .map(|r| centroids.iter().map(|c| sq_dist(r, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            rng.gen_range(0..n)
        } else {
            let mut t = rng.gen_range(0.0..total);
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if t < d {
                    pick = i;
                    break;
                }
                t -= d;
            }
            pick
        };
        centroids.push(rows[next].clone());
    }

    let mut assign = vec![0usize; n];
    for _ in 0..100 {
        let mut changed = false;
        for (i, r) in rows.iter().enumerate() {
            let mut bestc = 0;
            let mut bestd = f64::INFINITY;
            for (c, cen) in centroids.iter().enumerate() {
                let d = sq_dist(r, cen);
                if d < bestd {
                    bestd = d;
                    bestc = c;
                }
            }
            if assign[i] != bestc {
                assign[i] = bestc;
                changed = true;
            }
        }
        // recompute centroids; empty centroids re-seeded from the farthest row
        let mut counts = vec![0usize; k];
        let mut sums = vec![vec![0.0; dim]; k];
        for (i, r) in rows.iter().enumerate() {
            counts[assign[i]] += 1;
            for (s, v) in sums[assign[i]].iter_mut().zip(r.iter()) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .max_by(|&a, &b| {
                        sq_dist(&rows[a], &centroids[assign[a]])
                            .partial_cmp(&sq_dist(&rows[b], &centroids[assign[b]]))
                            .unwrap()
                    })
                    .unwrap();
                centroids[c] = rows[far].clone();
                assign[far] = c;
            } else {
                for (j, s) in sums[c].iter().enumerate() {
                    centroids[c][j] = s / counts[c] as f64;
                }
            }
        }
        if !changed {
            break;
        }
    }
    assign
}

fn kmeans_inertia(rows: &[Vec<f64>], assign: &[usize], k: usize, dim: usize) -> f64 {
    let mut counts = vec![0usize; k];
    let mut sums = vec![vec![0.0; dim]; k];
    for (i, r) in rows.iter().enumerate() {
        counts[assign[i]] += 1;
        for (s, v) in sums[assign[i]].iter_mut().zip(r.iter()) {
            *s += v;
        }
    }
    let centroids: Vec<Vec<f64>> = sums
        .iter()
        .zip(counts.iter())
        .map(|(s, &c)| {
            if c == 0 {
                vec![f64::INFINITY; dim]
            } else {
                s.iter().map(|v| v / c as f64).collect()
            }
        })
        .collect();
    rows.iter().zip(assign.iter()).map(|(r, &a)| sq_dist(r, &centroids[a])).sum()
}

/// Mean silhouette coefficient of an assignment (Euclidean distance).
pub fn silhouette(rows: &[Vec<f64>], clusters: &[Vec<usize>]) -> f64 {
    let n = rows.len();
    if clusters.len() < 2 {
        return -1.0;
    }
    let mut label = vec![0usize; n];
    for (c, members) in clusters.iter().enumerate() {
        for &m in members {
            label[m] = c;
        }
    }
    let dist = |a: usize, b: usize| sq_dist(&rows[a], &rows[b]).sqrt();
    let mut total = 0.0;
    for i in 0..n {
        let own = &clusters[label[i]];
        if own.len() == 1 {
            continue; // silhouette of a singleton is 0
        }
        let a = own.iter().filter(|&&j| j != i).map(|&j| dist(i, j)).sum::<f64>() / (own.len() - 1) as f64;
        let b = clusters
            .iter()
            .enumerate()
            .filter(|(c, _)| *c != label[i])
            .map(|(_, members)| members.iter().map(|&j| dist(i, j)).sum::<f64>() / members.len() as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    total / n as f64
}

/// Initial grouping: k-means over the binary feature matrix with K chosen by
/// silhouette over K ∈ {2..min(8, n−1)}.
pub fn initial_clusters(subsets: &[FeatureSubset], seed: u64) -> Result<Vec<Vec<usize>>> {
    let n = subsets.len();
    if n == 0 {
        return Err(Error::Config("no clients to cluster".into()));
    }
    if n == 1 {
        return Ok(vec![vec![0]]);
    }
    let rows: Vec<Vec<f64>> = subsets.iter().map(|s| s.binary_row()).collect();
    let kmax = 8.min(n - 1);
    let mut best: Option<(f64, Vec<Vec<usize>>)> = None;
    for k in 2..=kmax.max(2) {
        if k > n {
            break;
        }
        let clusters = kmeans_binary(&rows, k, seed)?;
        let score = silhouette(&rows, &clusters);
        if best.as_ref().map(|(bs, _)| score > *bs).unwrap_or(true) {
            best = Some((score, clusters));
        }
    }
    Ok(best.unwrap().1)
}

fn min_pairwise_jaccard(cluster: &[usize], subsets: &[FeatureSubset]) -> f64 {
    let mut min = 1.0f64;
    for (a, &i) in cluster.iter().enumerate() {
        for &j in &cluster[a + 1..] {
            min = min.min(jaccard(&subsets[i], &subsets[j]));
        }
    }
    min
}

/// Exact intersection of the members' feature sets, ascending.
pub fn overlap_features(cluster: &[usize], subsets: &[FeatureSubset]) -> Result<Vec<usize>> {
    let first = cluster
        .first()
        .ok_or_else(|| Error::Config("overlap of empty cluster".into()))?;
    let mut acc: Vec<usize> = subsets[*first].indices.clone();
    for &i in &cluster[1..] {
        acc.retain(|f| subsets[i].contains(*f));
    }
    Ok(acc)
}

/// Recursively refine initial groups until every surviving multi-client
/// cluster has min pairwise Jaccard ≥ `min_sim`; recursion bottoms out at
/// singletons. Clusters no larger than `max_pair_size` are only
/// threshold-checked, never re-clustered.
pub fn refine_clusters(
    initial: Vec<Vec<usize>>,
    subsets: &[FeatureSubset],
    min_sim: f64,
    max_pair_size: usize,
    seed: u64,
) -> Result<ClusterAssignment> {
    if !(min_sim > 0.0 && min_sim <= 1.0) {
        return Err(Error::Config(format!("min_sim must be in (0,1], got {min_sim}")));
    }
    let mut finals: Vec<Vec<usize>> = Vec::new();
    let mut queue: Vec<Vec<usize>> = initial;
    let mut depth = 0usize;
    while let Some(cluster) = queue.pop() {
        depth += 1;
        if depth > 10_000 {
            return Err(Error::Config("cluster refinement did not terminate".into()));
        }
        if cluster.len() <= 1 || min_pairwise_jaccard(&cluster, subsets) >= min_sim {
            finals.push(cluster);
            continue;
        }
        if cluster.len() <= max_pair_size {
            // small dissimilar cluster: split to singletons
            for i in cluster {
                finals.push(vec![i]);
            }
            continue;
        }
        let rows: Vec<Vec<f64>> = cluster.iter().map(|&i| subsets[i].binary_row()).collect();
        let sub = kmeans_binary(&rows, 2, seed ^ depth as u64)?;
        if sub.len() < 2 {
            for i in cluster {
                finals.push(vec![i]);
            }
            continue;
        }
        for part in sub {
            queue.push(part.iter().map(|&local| cluster[local]).collect());
        }
    }

    // empty-overlap multi-client clusters cannot share an encoder input space
    let mut empty_overlap_splits = 0usize;
    let mut clusters = Vec::new();
    for c in finals {
        if c.len() > 1 && overlap_features(&c, subsets)?.is_empty() {
            empty_overlap_splits += 1;
            for i in c {
                clusters.push(vec![i]);
            }
        } else {
            clusters.push(c);
        }
    }
    for c in &mut clusters {
        c.sort_unstable();
    }
    clusters.sort();
    let overlaps = clusters
        .iter()
        .map(|c| overlap_features(c, subsets))
        .collect::<Result<Vec<_>>>()?;
    Ok(ClusterAssignment {
        clusters,
        overlaps,
        min_sim,
        empty_overlap_splits,
    })
}

/// Full pipeline: binary matrix → k-means with silhouette K → refinement.
pub fn cluster_clients(subsets: &[FeatureSubset], min_sim: f64, seed: u64) -> Result<ClusterAssignment> {
    // all clients identical → nothing to split, skip k-means entirely
    if subsets.windows(2).all(|w| w[0].indices == w[1].indices) {
        let initial = vec![(0..subsets.len()).collect::<Vec<usize>>()];
        return refine_clusters(initial, subsets, min_sim, DEFAULT_MAX_PAIR_SIZE, seed);
    }
    let initial = initial_clusters(subsets, seed)?;
    refine_clusters(initial, subsets, min_sim, DEFAULT_MAX_PAIR_SIZE, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fs(idx: &[usize], total: usize) -> FeatureSubset {
        FeatureSubset::new(idx.to_vec(), total).unwrap()
    }

    #[test]
    fn jaccard_basics() {
        let a = fs(&[1, 2, 3], 8);
        let b = fs(&[2, 3, 4], 8);
        assert_eq!(jaccard(&a, &a), 1.0);
        assert_eq!(jaccard(&a, &fs(&[5, 6], 8)), 0.0);
        assert_eq!(jaccard(&a, &b), 0.5);
    }

    #[test]
    fn kmeans_k_equals_n_gives_singletons() {
        let rows: Vec<Vec<f64>> = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]];
        let clusters = kmeans_binary(&rows, 3, 0).unwrap();
        assert_eq!(clusters.len(), 3);
        assert!(clusters.iter().all(|c| c.len() == 1));
    }

    #[test]
    fn kmeans_recovers_identical_blocks() {
        let mut rows = Vec::new();
        for _ in 0..4 {
            rows.push(vec![1.0, 1.0, 0.0, 0.0]);
        }
        for _ in 0..4 {
            rows.push(vec![0.0, 0.0, 1.0, 1.0]);
        }
        let clusters = kmeans_binary(&rows, 2, 3).unwrap();
        assert_eq!(clusters.len(), 2);
        let mut sorted: Vec<Vec<usize>> = clusters;
        sorted.sort();
        assert_eq!(sorted[0], vec![0, 1, 2, 3]);
        assert_eq!(sorted[1], vec![4, 5, 6, 7]);
    }

    #[test]
    fn silhouette_selects_three_planted_blocks() {
        // 3-block synthetic matrix; enumerate K by direct silhouette formula
        let mut hits = 0;
        for seed in 0..20u64 {
            let mut subsets = Vec::new();
            for block in 0..3usize {
                for _ in 0..4 {
                    let base: Vec<usize> = (block * 5..block * 5 + 5).collect();
                    subsets.push(fs(&base, 15));
                }
            }
            let rows: Vec<Vec<f64>> = subsets.iter().map(|s| s.binary_row()).collect();
            let mut best_k = 0;
            let mut best_s = f64::NEG_INFINITY;
            for k in 2..=5 {
                let clusters = kmeans_binary(&rows, k, seed).unwrap();
                let s = silhouette(&rows, &clusters);
                if s > best_s {
                    best_s = s;
                    best_k = clusters.len();
                }
            }
            if best_k == 3 {
                hits += 1;
            }
        }
        assert!(hits >= 18, "K=3 selected only {hits}/20 times");
    }

    #[test]
    fn refine_identical_sets_single_cluster() {
        let subsets: Vec<FeatureSubset> = (0..5).map(|_| fs(&[0, 1, 2], 6)).collect();
        let assignment = cluster_clients(&subsets, 0.8, 0).unwrap();
        assert_eq!(assignment.clusters.len(), 1);
        assert_eq!(assignment.clusters[0], vec![0, 1, 2, 3, 4]);
        assert_eq!(assignment.overlaps[0], vec![0, 1, 2]);
    }

    #[test]
    fn refine_disjoint_sets_all_singletons() {
        let subsets: Vec<FeatureSubset> = (0..4).map(|i| fs(&[i * 2, i * 2 + 1], 8)).collect();
        let assignment = cluster_clients(&subsets, 0.8, 1).unwrap();
        assert_eq!(assignment.clusters.len(), 4);
        assert!(assignment.clusters.iter().all(|c| c.len() == 1));
    }

    #[test]
    fn refine_two_planted_groups() {
        // within-group Jaccard 1.0, across-group ≈0.2
        let ga: Vec<usize> = (0..8).collect();
        let gb: Vec<usize> = (5..13).collect(); // overlap {5,6,7}: 3/13 ≈ 0.23
        let mut subsets = Vec::new();
        for _ in 0..5 {
            subsets.push(fs(&ga, 13));
        }
        for _ in 0..5 {
            subsets.push(fs(&gb, 13));
        }
        for seed in 0..20u64 {
            let assignment = cluster_clients(&subsets, 0.8, seed).unwrap();
            assert_eq!(assignment.clusters.len(), 2, "seed {seed}: {:?}", assignment.clusters);
            assert_eq!(assignment.clusters[0], vec![0, 1, 2, 3, 4]);
            assert_eq!(assignment.clusters[1], vec![5, 6, 7, 8, 9]);
            // brute-force threshold verification over all pairs
            for c in &assignment.clusters {
                assert!(min_pairwise_jaccard(c, &subsets) >= 0.8);
            }
            assert_eq!(assignment.overlaps[0], ga);
            assert_eq!(assignment.overlaps[1], gb);
        }
    }

    #[test]
    fn refinement_is_idempotent() {
        let ga: Vec<usize> = (0..6).collect();
        let mut subsets = Vec::new();
        for _ in 0..3 {
            subsets.push(fs(&ga, 12));
        }
        for i in 0..3 {
            subsets.push(fs(&[6 + i], 12));
        }
        let first = cluster_clients(&subsets, 0.8, 7).unwrap();
        let again = refine_clusters(first.clusters.clone(), &subsets, 0.8, DEFAULT_MAX_PAIR_SIZE, 7).unwrap();
        assert_eq!(first.clusters, again.clusters);
        assert_eq!(first.overlaps, again.overlaps);
    }

    #[test]
    fn partition_property_holds() {
        let subsets: Vec<FeatureSubset> = (0..9)
            .map(|i| fs(&[(i % 3) * 3, (i % 3) * 3 + 1, (i % 3) * 3 + 2], 9))
            .collect();
        let assignment = cluster_clients(&subsets, 0.8, 0).unwrap();
        let mut seen: Vec<usize> = assignment.clusters.iter().flatten().cloned().collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..9).collect::<Vec<_>>());
    }

    #[test]
    fn overlap_singleton_and_set_algebra() {
        let subsets = vec![fs(&[1, 2, 3], 6), fs(&[2, 3, 4], 6), fs(&[2, 3], 6)];
        assert_eq!(overlap_features(&[0], &subsets).unwrap(), vec![1, 2, 3]);
        assert_eq!(overlap_features(&[0, 1, 2], &subsets).unwrap(), vec![2, 3]);
    }

    #[test]
    fn overlap_matches_fold_intersection_recompute() {
        let mut rng = seeded_rng(&[99]);
        use rand::Rng;
        let subsets: Vec<FeatureSubset> = (0..6)
            .map(|_| {
                let idx: Vec<usize> = (0..10).filter(|_| rng.gen_bool(0.6)).collect();
                fs(if idx.is_empty() { &[0] } else { &idx }, 10)
            })
            .collect();
        let cluster: Vec<usize> = (0..6).collect();
        let got = overlap_features(&cluster, &subsets).unwrap();
        let expect: Vec<usize> = (0..10)
            .filter(|f| subsets.iter().all(|s| s.contains(*f)))
            .collect();
        assert_eq!(got, expect);
    }

    #[test]
    fn empty_overlap_multiclient_cluster_splits() {
        // pairwise Jaccard 1/3 passes the 0.3 threshold but the triple
        // intersection is empty, so the cluster cannot share an input space
        let subsets = vec![fs(&[0, 1], 4), fs(&[1, 2], 4), fs(&[0, 2], 4)];
        let a = refine_clusters(vec![vec![0, 1, 2]], &subsets, 0.3, DEFAULT_MAX_PAIR_SIZE, 0).unwrap();
        assert!(a.clusters.iter().all(|c| c.len() == 1));
        assert_eq!(a.empty_overlap_splits, 1);
    }

    #[test]
    fn min_sim_out_of_range_rejected() {
        let subsets = vec![fs(&[0], 2)];
        assert!(refine_clusters(vec![vec![0]], &subsets, 0.0, 2, 0).is_err());
        assert!(refine_clusters(vec![vec![0]], &subsets, 1.5, 2, 0).is_err());
    }
}
