//! Synthetic multi-source graphs with planted cluster structure.
//!
//! Every category of every source is split into `clusters_per_category`
//! clusters with unequal sizes (cluster `k` gets weight `C - k`). Nodes link
//! densely inside their cluster, and each cluster links to one cluster of the
//! next category: the one carrying the same *concept* index.
//!
//! Source 0 is the reference, where cluster `k` carries concept `k`. In a
//! conflicted category, every other source assigns concepts through a cyclic
//! shift, so the cluster that is large in source 0 is linked like the small
//! one elsewhere. Distribution matching inside that category then pairs
//! clusters whose cross-category neighborhoods disagree.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Edge, MultiSourceGraph, Node, SourceGraph};
use crate::error::{IcpaError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub sources: usize,
    pub categories: usize,
    pub nodes_per_source: usize,
    /// Probability of an edge between two nodes of the same cluster.
    pub edge_density: f64,
    /// Fraction of categories whose concept assignment is shifted.
    pub conflict_rate: f64,
    pub clusters_per_category: usize,
    /// Cross-category links drawn per node.
    pub cross_links: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            sources: 2,
            categories: 4,
            nodes_per_source: 200,
            edge_density: 0.3,
            conflict_rate: 0.0,
            clusters_per_category: 2,
            cross_links: 2,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(IcpaError::Config(m.to_string()));
        if self.sources == 0 || self.categories == 0 || self.clusters_per_category == 0 {
            return bad("sources, categories and clusters_per_category must be positive");
        }
        if self.nodes_per_source < self.categories * self.clusters_per_category {
            return bad("nodes_per_source must cover at least one node per cluster");
        }
        if !(0.0..=1.0).contains(&self.edge_density) || self.edge_density == 0.0 {
            return bad("edge_density must be in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.conflict_rate) {
            return bad("conflict_rate must be in [0, 1]");
        }
        Ok(())
    }
}

/// One row of the ground-truth table: `cluster_a` of `source_a` and
/// `cluster_b` of `source_b` carry the same concept inside `category`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Correspondence {
    pub category: usize,
    pub source_a: usize,
    pub cluster_a: usize,
    pub source_b: usize,
    pub cluster_b: usize,
}

#[derive(Debug, Clone)]
pub struct SyntheticGraph {
    pub graph: MultiSourceGraph,
    pub correspondence: Vec<Correspondence>,
    /// `conflicted[c]` is true when category `c` was shifted.
    pub conflicted: Vec<bool>,
    /// `cluster_of[j][node]` is the node's cluster inside its category.
    pub cluster_of: Vec<Vec<usize>>,
}

fn split_weighted(total: usize, weights: &[usize]) -> Vec<usize> {
    let wsum: usize = weights.iter().sum();
    let mut out: Vec<usize> = weights.iter().map(|w| total * w / wsum).collect();
    let mut rem = total - out.iter().sum::<usize>();
    // Largest remainders first, ties to the lower index.
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by_key(|&k| (std::cmp::Reverse(total * weights[k] % wsum), k));
    for &k in order.iter().cycle() {
        if rem == 0 {
            break;
        }
        out[k] += 1;
        rem -= 1;
    }
    // Every cluster keeps at least one node when possible.
    for k in 0..out.len() {
        if out[k] == 0 {
            if let Some(donor) = (0..out.len()).max_by_key(|&d| out[d]).filter(|&d| out[d] > 1) {
                out[donor] -= 1;
                out[k] = 1;
            }
        }
    }
    out
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticGraph> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let k_cat = spec.categories;
    let n_cl = spec.clusters_per_category;

    let n_conflicted = (spec.conflict_rate * k_cat as f64).round() as usize;
    let mut order: Vec<usize> = (0..k_cat).collect();
    order.shuffle(&mut rng);
    let mut conflicted = vec![false; k_cat];
    for &c in order.iter().take(n_conflicted) {
        conflicted[c] = true;
    }

    // concept[j][c][k]: concept carried by cluster k of category c in source j.
    let mut concept = vec![vec![(0..n_cl).collect::<Vec<_>>(); k_cat]; spec.sources];
    for per_source in concept.iter_mut().skip(1) {
        for (c, perm) in per_source.iter_mut().enumerate() {
            if conflicted[c] && n_cl > 1 {
                let shift = rng.random_range(1..n_cl);
                for (k, slot) in perm.iter_mut().enumerate() {
                    *slot = (k + shift) % n_cl;
                }
            }
        }
    }

    let mut correspondence = Vec::new();
    for c in 0..k_cat {
        for a in 0..spec.sources {
            for b in a + 1..spec.sources {
                for kappa in 0..n_cl {
                    let cluster_a = concept[a][c].iter().position(|&x| x == kappa).unwrap();
                    let cluster_b = concept[b][c].iter().position(|&x| x == kappa).unwrap();
                    correspondence.push(Correspondence {
                        category: c,
                        source_a: a,
                        cluster_a,
                        source_b: b,
                        cluster_b,
                    });
                }
            }
        }
    }

    let cat_sizes = split_weighted(spec.nodes_per_source, &vec![1; k_cat]);
    let cluster_weights: Vec<usize> = (0..n_cl).map(|k| n_cl - k).collect();

    let mut sources = Vec::with_capacity(spec.sources);
    let mut cluster_of = Vec::with_capacity(spec.sources);
    for j in 0..spec.sources {
        // members[c][k] = node ids
        let mut members: Vec<Vec<Vec<usize>>> = Vec::with_capacity(k_cat);
        let mut nodes = Vec::with_capacity(spec.nodes_per_source);
        let mut cl_of = Vec::with_capacity(spec.nodes_per_source);
        for c in 0..k_cat {
            let sizes = split_weighted(cat_sizes[c], &cluster_weights);
            let mut per_cluster = Vec::with_capacity(n_cl);
            for (k, &size) in sizes.iter().enumerate() {
                let mut ids = Vec::with_capacity(size);
                for _ in 0..size {
                    let id = nodes.len();
                    let cluster_feature = (spec.nodes_per_source + c * n_cl + k) as u64;
                    nodes.push(Node {
                        id,
                        category: c,
                        node_type: 0,
                        features: vec![id as u64, cluster_feature],
                        degree: 0.0,
                    });
                    cl_of.push(k);
                    ids.push(id);
                }
                per_cluster.push(ids);
            }
            members.push(per_cluster);
        }

        let mut edge_set: BTreeSet<(usize, usize)> = BTreeSet::new();
        let add = |a: usize, b: usize, set: &mut BTreeSet<(usize, usize)>| {
            if a != b {
                set.insert((a.min(b), a.max(b)));
            }
        };
        for per_cluster in &members {
            for ids in per_cluster {
                // A ring keeps every node of a cluster connected.
                if ids.len() > 1 {
                    for w in 0..ids.len() {
                        add(ids[w], ids[(w + 1) % ids.len()], &mut edge_set);
                    }
                }
                for x in 0..ids.len() {
                    for y in x + 1..ids.len() {
                        if rng.random::<f64>() < spec.edge_density {
                            add(ids[x], ids[y], &mut edge_set);
                        }
                    }
                }
            }
        }
        if k_cat > 1 {
            let pairs: Vec<(usize, usize)> = if k_cat == 2 {
                vec![(0, 1)]
            } else {
                (0..k_cat).map(|c| (c, (c + 1) % k_cat)).collect()
            };
            for (c, d) in pairs {
                for k in 0..n_cl {
                    let kappa = concept[j][c][k];
                    let target_k = concept[j][d].iter().position(|&x| x == kappa).unwrap();
                    let targets = &members[d][target_k];
                    if targets.is_empty() {
                        continue;
                    }
                    for &u in &members[c][k] {
                        for _ in 0..spec.cross_links {
                            let v = targets[rng.random_range(0..targets.len())];
                            add(u, v, &mut edge_set);
                        }
                    }
                }
            }
        }
        let edges = edge_set
            .into_iter()
            .map(|(u, v)| Edge { u, v, weight: 1.0 })
            .collect();
        sources.push(SourceGraph::new(j, nodes, edges)?);
        cluster_of.push(cl_of);
    }

    let graph = MultiSourceGraph::new(sources, k_cat, vec!["item".to_string()])?;
    Ok(SyntheticGraph {
        graph,
        correspondence,
        conflicted,
        cluster_of,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(conflict_rate: f64) -> SyntheticSpec {
        SyntheticSpec {
            sources: 2,
            categories: 4,
            nodes_per_source: 120,
            conflict_rate,
            seed: 11,
            ..Default::default()
        }
    }

    #[test]
    fn no_conflict_gives_identity_correspondence() {
        let s = generate_synthetic(&spec(0.0)).unwrap();
        assert!(s.conflicted.iter().all(|c| !c));
        assert_eq!(s.correspondence.len(), 4 * 2);
        assert!(s.correspondence.iter().all(|r| r.cluster_a == r.cluster_b));
    }

    #[test]
    fn full_conflict_permutes_every_category() {
        let s = generate_synthetic(&spec(1.0)).unwrap();
        assert!(s.conflicted.iter().all(|&c| c));
        for c in 0..4 {
            let rows: Vec<_> = s.correspondence.iter().filter(|r| r.category == c).collect();
            assert!(rows.iter().any(|r| r.cluster_a != r.cluster_b));
        }
    }

    #[test]
    fn partial_conflict_marks_expected_count() {
        let s = generate_synthetic(&spec(0.5)).unwrap();
        assert_eq!(s.conflicted.iter().filter(|&&c| c).count(), 2);
        for r in &s.correspondence {
            assert_eq!(r.cluster_a != r.cluster_b, s.conflicted[r.category]);
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let a = generate_synthetic(&spec(0.5)).unwrap();
        let b = generate_synthetic(&spec(0.5)).unwrap();
        assert_eq!(a.graph, b.graph);
        assert_eq!(a.correspondence, b.correspondence);
        let c = generate_synthetic(&SyntheticSpec { seed: 12, ..spec(0.5) }).unwrap();
        assert_ne!(a.graph, c.graph);
    }

    #[test]
    fn clusters_have_unequal_sizes_and_no_isolated_nodes() {
        let s = generate_synthetic(&spec(0.0)).unwrap();
        let src = s.graph.source(0).unwrap();
        let big = (0..30).filter(|&i| s.cluster_of[0][i] == 0).count();
        let small = (0..30).filter(|&i| s.cluster_of[0][i] == 1).count();
        assert_eq!((big, small), (20, 10));
        assert!(src.nodes().iter().all(|n| n.degree > 0.0));
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(generate_synthetic(&SyntheticSpec { conflict_rate: 1.5, ..spec(0.0) }).is_err());
        assert!(generate_synthetic(&SyntheticSpec { sources: 0, ..spec(0.0) }).is_err());
    }
}
