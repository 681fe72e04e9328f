//! Cluster cleanup: graph-based member filtering and threshold-based
//! cluster aggregation.

use std::collections::BTreeMap;

use ndarray::Array2;

use crate::error::{CeilError, Result};
use crate::math::{cosine, mean_rows};

/// Where a cluster set sits in the filter -> aggregate chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClusterStage {
    Raw,
    Filtered,
    Aggregated,
}

/// Clusters as document-id sets. Raw partitions the corpus; Filtered and
/// Aggregated clusters are pairwise disjoint subsets of it.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSet {
    pub clusters: Vec<Vec<usize>>,
    pub stage: ClusterStage,
}

impl ClusterSet {
    /// Build the Raw stage from per-document assignments; clusters are
    /// indexed densely in assignment order and empty ones dropped.
    pub fn from_assignments(assignments: &[usize]) -> ClusterSet {
        let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (doc, &c) in assignments.iter().enumerate() {
            map.entry(c).or_default().push(doc);
        }
        ClusterSet {
            clusters: map.into_values().collect(),
            stage: ClusterStage::Raw,
        }
    }

    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }
}

/// The directed search graph built inside one cluster during filtering.
#[derive(Debug, Clone)]
pub struct FilterGraph {
    /// Member document ids.
    pub nodes: Vec<usize>,
    /// Undirected adjacency (cos >= beta), as sorted id pairs.
    pub undirected_edges: Vec<(usize, usize)>,
    /// Directed arrow multiset from the two-hop expansion.
    pub arrows: Vec<(usize, usize)>,
    /// Max-degree node (ties -> lowest doc id).
    pub center: usize,
}

/// Build the filter graph for one cluster. `reps` maps position -> row of
/// `member_reps`; `ids[pos]` is the document id of that row.
fn build_graph(ids: &[usize], member_reps: &Array2<f64>, beta: f64) -> FilterGraph {
    let m = ids.len();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); m];
    let mut undirected_edges = Vec::new();
    for a in 0..m {
        for b in a + 1..m {
            if cosine(member_reps.row(a), member_reps.row(b)) >= beta {
                adj[a].push(b);
                adj[b].push(a);
                undirected_edges.push((ids[a].min(ids[b]), ids[a].max(ids[b])));
            }
        }
    }
    // center: maximal degree, ties to the lowest document id; positions are
    // scanned in ascending-id order below
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by_key(|&p| ids[p]);
    let mut center_pos = order[0];
    for &p in &order {
        if adj[p].len() > adj[center_pos].len() {
            center_pos = p;
        }
    }
    // arrows: center -> center, center -> each neighbor; then every
    // first-order node points to all of its undirected neighbors
    let mut arrows = vec![(ids[center_pos], ids[center_pos])];
    let first_order: Vec<usize> = adj[center_pos].clone();
    for &g in &first_order {
        arrows.push((ids[center_pos], ids[g]));
    }
    for &g in &first_order {
        for &t in &adj[g] {
            arrows.push((ids[g], ids[t]));
        }
    }
    FilterGraph {
        nodes: ids.to_vec(),
        undirected_edges,
        arrows,
        center: ids[center_pos],
    }
}

/// Keep the tightly connected core of one cluster: candidates are the
/// center plus its first- and second-order neighborhood; a candidate
/// survives when its incoming-arrow count exceeds the mode of the
/// candidates' in-degrees. Clusters of size <= 3 pass through unchanged.
pub fn filter_cluster(ids: &[usize], member_reps: &Array2<f64>, beta: f64) -> Result<Vec<usize>> {
    if ids.is_empty() {
        return Err(CeilError::Contract("filter_cluster requires at least one member".into()));
    }
    if ids.len() != member_reps.nrows() {
        return Err(CeilError::Contract("ids/representations length mismatch".into()));
    }
    if !(-1.0..=1.0).contains(&beta) {
        return Err(CeilError::Config("beta must be in [-1, 1]".into()));
    }
    if ids.len() <= 3 {
        let mut out = ids.to_vec();
        out.sort_unstable();
        return Ok(out);
    }
    let graph = build_graph(ids, member_reps, beta);

    // candidates: every node that appears as an arrow endpoint
    let mut candidates: Vec<usize> = Vec::new();
    for &(a, b) in &graph.arrows {
        for node in [a, b] {
            if !candidates.contains(&node) {
                candidates.push(node);
            }
        }
    }
    candidates.sort_unstable();

    let in_degree: BTreeMap<usize, usize> = candidates
        .iter()
        .map(|&c| (c, graph.arrows.iter().filter(|&&(_, to)| to == c).count()))
        .collect();

    // mode of the in-degrees; ties -> smallest value
    let mut freq: BTreeMap<usize, usize> = BTreeMap::new();
    for &d in in_degree.values() {
        *freq.entry(d).or_default() += 1;
    }
    let mode = freq
        .iter()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
        .map(|(&d, _)| d)
        .unwrap();

    let mut kept: Vec<usize> = candidates
        .into_iter()
        .filter(|c| in_degree[c] > mode)
        .collect();
    if kept.is_empty() {
        kept.push(graph.center);
    }
    Ok(kept)
}

/// Filter every cluster; empty results are impossible (center fallback) but
/// clusters that were empty on input are dropped. `reps` is indexed by
/// document id.
pub fn filter_all(set: &ClusterSet, reps: &Array2<f64>, beta: f64) -> Result<ClusterSet> {
    let mut clusters = Vec::new();
    for cluster in &set.clusters {
        if cluster.is_empty() {
            continue;
        }
        let member_reps = rows_for(reps, cluster);
        clusters.push(filter_cluster(cluster, &member_reps, beta)?);
    }
    Ok(ClusterSet {
        clusters,
        stage: ClusterStage::Filtered,
    })
}

fn rows_for(reps: &Array2<f64>, ids: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((ids.len(), reps.ncols()));
    for (row, &id) in ids.iter().enumerate() {
        out.row_mut(row).assign(&reps.row(id));
    }
    out
}

/// Greedy highest-similarity-first merging: repeatedly merge the pair of
/// clusters whose mean representations have the highest cosine similarity,
/// while that similarity exceeds `delta`. Ties pick the lexicographically
/// smallest index pair.
pub fn aggregate(set: &ClusterSet, reps: &Array2<f64>, delta: f64) -> Result<ClusterSet> {
    if !(-1.0..=1.0).contains(&delta) {
        return Err(CeilError::Config("delta must be in [-1, 1]".into()));
    }
    let mut clusters = set.clusters.clone();
    let mut means: Vec<ndarray::Array1<f64>> =
        clusters.iter().map(|c| mean_rows(reps, c)).collect();
    loop {
        if clusters.len() < 2 {
            break;
        }
        let mut best: Option<(usize, usize, f64)> = None;
        for i in 0..clusters.len() {
            for j in i + 1..clusters.len() {
                let sim = cosine(means[i].view(), means[j].view());
                let better = match best {
                    None => true,
                    Some((_, _, s)) => sim > s,
                };
                if better {
                    best = Some((i, j, sim));
                }
            }
        }
        match best {
            Some((i, j, sim)) if sim > delta => {
                let merged_members = {
                    let mut m = clusters[i].clone();
                    m.extend_from_slice(&clusters[j]);
                    m.sort_unstable();
                    m
                };
                clusters[i] = merged_members;
                means[i] = mean_rows(reps, &clusters[i]);
                clusters.remove(j);
                means.remove(j);
            }
            _ => break,
        }
    }
    Ok(ClusterSet {
        clusters,
        stage: ClusterStage::Aggregated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tiny_clusters_pass_through() {
        let reps = array![[1.0, 0.0], [0.0, 1.0]];
        let kept = filter_cluster(&[4, 9], &reps, 0.99).unwrap();
        assert_eq!(kept, vec![4, 9]);
    }

    #[test]
    fn filter_output_subset_and_order_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 12;
        let reps = Array2::from_shape_fn((n, 4), |_| rng.gen_range(-1.0..1.0));
        let ids: Vec<usize> = (0..n).collect();
        let kept = filter_cluster(&ids, &reps, 0.3).unwrap();
        assert!(kept.iter().all(|id| ids.contains(id)));

        // permuted member ordering must give the same set
        let perm: Vec<usize> = (0..n).rev().collect();
        let permuted_reps = Array2::from_shape_fn((n, 4), |(i, j)| reps[[perm[i], j]]);
        let permuted_ids: Vec<usize> = perm.clone();
        let mut kept2 = filter_cluster(&permuted_ids, &permuted_reps, 0.3).unwrap();
        kept2.sort_unstable();
        let mut kept_sorted = kept;
        kept_sorted.sort_unstable();
        assert_eq!(kept_sorted, kept2);
    }

    #[test]
    fn near_orthogonal_members_collapse_to_center() {
        // beta so high that no edges form: center is the lowest id with
        // degree 0, candidates = {center}, in-degree 1 from the self-arrow,
        // mode 1, nobody exceeds it -> fallback {center}
        let reps = array![
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0]
        ];
        let kept = filter_cluster(&[10, 11, 12, 13], &reps, 0.99).unwrap();
        assert_eq!(kept, vec![10]);
    }

    #[test]
    fn filter_all_small_clusters_identity() {
        let reps = Array2::from_elem((6, 2), 1.0);
        let set = ClusterSet::from_assignments(&[0, 0, 0, 1, 1, 1]);
        let out = filter_all(&set, &reps, 0.5).unwrap();
        assert_eq!(out.stage, ClusterStage::Filtered);
        assert_eq!(out.clusters, set.clusters);
    }

    #[test]
    fn filter_all_outputs_disjoint_subsets() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let reps = Array2::from_shape_fn((20, 3), |_| rng.gen_range(-1.0..1.0));
        let assignments: Vec<usize> = (0..20).map(|i| i % 2).collect();
        let set = ClusterSet::from_assignments(&assignments);
        let out = filter_all(&set, &reps, 0.2).unwrap();
        let mut all: Vec<usize> = out.clusters.iter().flatten().copied().collect();
        let before = all.len();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), before, "filtered clusters overlap");
        for (outc, inc) in out.clusters.iter().zip(&set.clusters) {
            assert!(outc.iter().all(|d| inc.contains(d)));
        }
    }

    #[test]
    fn aggregate_merges_identical_means() {
        let reps = array![[1.0, 1.0], [1.0, 1.0], [0.0, 1.0], [0.0, 1.0]];
        let set = ClusterSet {
            clusters: vec![vec![0], vec![1], vec![2, 3]],
            stage: ClusterStage::Filtered,
        };
        let out = aggregate(&set, &reps, 0.95).unwrap();
        assert_eq!(out.stage, ClusterStage::Aggregated);
        assert!(out.clusters.contains(&vec![0, 1]));
    }

    #[test]
    fn aggregate_orthogonal_means_unchanged() {
        let reps = array![[1.0, 0.0], [0.0, 1.0]];
        let set = ClusterSet {
            clusters: vec![vec![0], vec![1]],
            stage: ClusterStage::Filtered,
        };
        let out = aggregate(&set, &reps, 0.95).unwrap();
        assert_eq!(out.clusters, set.clusters);
    }

    #[test]
    fn aggregate_chains_colinear_clusters() {
        // three nearly colinear directions, pairwise sims all above delta
        let reps = array![[1.0, 0.00], [1.0, 0.05], [1.0, 0.10]];
        let set = ClusterSet {
            clusters: vec![vec![0], vec![1], vec![2]],
            stage: ClusterStage::Filtered,
        };
        let out = aggregate(&set, &reps, 0.95).unwrap();
        assert_eq!(out.clusters, vec![vec![0, 1, 2]]);
    }

    #[test]
    fn aggregate_never_increases_count_and_unions() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let reps = Array2::from_shape_fn((15, 3), |_| rng.gen_range(-1.0..1.0));
        let set = ClusterSet {
            clusters: (0..5).map(|c| (3 * c..3 * c + 3).collect()).collect(),
            stage: ClusterStage::Filtered,
        };
        let out = aggregate(&set, &reps, 0.5).unwrap();
        assert!(out.len() <= set.len());
        for cluster in &out.clusters {
            // each output cluster is a union of input clusters
            let covered: Vec<&Vec<usize>> = set
                .clusters
                .iter()
                .filter(|inc| inc.iter().all(|d| cluster.contains(d)))
                .collect();
            let total: usize = covered.iter().map(|c| c.len()).sum();
            assert_eq!(total, cluster.len());
        }
    }

    #[test]
    fn aggregate_high_delta_is_identity() {
        let reps = array![[1.0, 0.0], [0.9, 0.1], [0.0, 1.0]];
        let set = ClusterSet {
            clusters: vec![vec![0], vec![1], vec![2]],
            stage: ClusterStage::Filtered,
        };
        let out = aggregate(&set, &reps, 1.0).unwrap();
        assert_eq!(out.clusters, set.clusters);
        assert!(aggregate(&set, &reps, 1.5).is_err());
    }
}
