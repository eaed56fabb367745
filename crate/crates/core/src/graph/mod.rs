//! Multi-source graph data model.
//!
//! A [`MultiSourceGraph`] holds `m` independent source graphs that share only
//! a category vocabulary `[0, K)`. Node ids are dense per source (`0..n`), so a
//! node id doubles as its position in [`SourceGraph::nodes`]. Edges are
//! undirected and stored once; adjacency is materialized in both directions.

mod io;
mod synthetic;

pub use io::{load, load_correspondence, write, write_correspondence};
pub use synthetic::{generate_synthetic, Correspondence, SyntheticGraph, SyntheticSpec};

use serde::{Deserialize, Serialize};

use crate::error::{IcpaError, Result};

pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: NodeId,
    pub category: usize,
    /// Index into [`MultiSourceGraph::type_names`].
    pub node_type: usize,
    pub features: Vec<u64>,
    /// Sum of incident edge weights, filled in by [`SourceGraph::new`].
    pub degree: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub u: NodeId,
    pub v: NodeId,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceGraph {
    nodes: Vec<Node>,
    edges: Vec<Edge>,
    adjacency: Vec<Vec<(NodeId, f64)>>,
}

impl SourceGraph {
    /// Validates endpoints, rejects self-loops and negative weights, then
    /// caches weighted degrees and adjacency. `nodes[i].id` must equal `i`.
    pub fn new(source_id: usize, mut nodes: Vec<Node>, edges: Vec<Edge>) -> Result<Self> {
        for (i, node) in nodes.iter().enumerate() {
            if node.id != i {
                return Err(IcpaError::Invalid(format!(
                    "source {source_id}: node ids must be dense, found id {} at position {i}",
                    node.id
                )));
            }
        }
        let n = nodes.len();
        let mut adjacency = vec![Vec::new(); n];
        for node in &mut nodes {
            node.degree = 0.0;
        }
        for e in &edges {
            for &end in &[e.u, e.v] {
                if end >= n {
                    return Err(IcpaError::DanglingEndpoint {
                        source_id,
                        node: end,
                    });
                }
            }
            if e.u == e.v {
                return Err(IcpaError::Invalid(format!(
                    "source {source_id}: self-loop on node {}",
                    e.u
                )));
            }
            if !(e.weight >= 0.0) || !e.weight.is_finite() {
                return Err(IcpaError::Invalid(format!(
                    "source {source_id}: edge ({}, {}) has invalid weight {}",
                    e.u, e.v, e.weight
                )));
            }
            adjacency[e.u].push((e.v, e.weight));
            adjacency[e.v].push((e.u, e.weight));
            nodes[e.u].degree += e.weight;
            nodes[e.v].degree += e.weight;
        }
        Ok(Self {
            nodes,
            edges,
            adjacency,
        })
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn node(&self, id: NodeId) -> Option<&Node> {
        self.nodes.get(id)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Neighbors of `id` with edge weights; each undirected edge appears once
    /// in each endpoint's list.
    pub fn neighbors(&self, id: NodeId) -> &[(NodeId, f64)] {
        &self.adjacency[id]
    }

    /// Recomputes the weighted degree of `id` from the edge list.
    pub fn recomputed_degree(&self, id: NodeId) -> f64 {
        self.edges
            .iter()
            .filter(|e| e.u == id || e.v == id)
            .map(|e| e.weight)
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiSourceGraph {
    sources: Vec<SourceGraph>,
    num_categories: usize,
    type_names: Vec<String>,
}

impl MultiSourceGraph {
    pub fn new(
        sources: Vec<SourceGraph>,
        num_categories: usize,
        type_names: Vec<String>,
    ) -> Result<Self> {
        if sources.is_empty() {
            return Err(IcpaError::Empty("graph has no sources"));
        }
        for s in &sources {
            for node in s.nodes() {
                if node.category >= num_categories {
                    return Err(IcpaError::CategoryOutOfRange {
                        category: node.category,
                        num_categories,
                    });
                }
                if node.node_type >= type_names.len() {
                    return Err(IcpaError::Invalid(format!(
                        "node {} has type index {} but only {} types exist",
                        node.id,
                        node.node_type,
                        type_names.len()
                    )));
                }
            }
        }
        Ok(Self {
            sources,
            num_categories,
            type_names,
        })
    }

    pub fn num_sources(&self) -> usize {
        self.sources.len()
    }

    /// SHA-256 over every node, edge and type name.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update((self.num_categories as u64).to_le_bytes());
        for t in &self.type_names {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        for s in &self.sources {
            h.update((s.len() as u64).to_le_bytes());
            for n in s.nodes() {
                for x in [n.id as u64, n.node_type as u64, n.category as u64, n.features.len() as u64] {
                    h.update(x.to_le_bytes());
                }
                for f in &n.features {
                    h.update(f.to_le_bytes());
                }
            }
            h.update((s.edges().len() as u64).to_le_bytes());
            for e in s.edges() {
                h.update((e.u as u64).to_le_bytes());
                h.update((e.v as u64).to_le_bytes());
                h.update(e.weight.to_bits().to_le_bytes());
            }
        }
        crate::nn::hex(&h.finalize())
    }

    pub fn num_categories(&self) -> usize {
        self.num_categories
    }

    pub fn type_names(&self) -> &[String] {
        &self.type_names
    }

    pub fn num_types(&self) -> usize {
        self.type_names.len()
    }

    pub fn sources(&self) -> &[SourceGraph] {
        &self.sources
    }

    pub fn source(&self, j: usize) -> Result<&SourceGraph> {
        self.sources.get(j).ok_or(IcpaError::UnknownSource(j))
    }

    /// Node ids of category `c` for every source, in ascending id order.
    pub fn category_partition(&self, c: usize) -> Result<Vec<Vec<NodeId>>> {
        if c >= self.num_categories {
            return Err(IcpaError::CategoryOutOfRange {
                category: c,
                num_categories: self.num_categories,
            });
        }
        Ok(self
            .sources
            .iter()
            .map(|s| {
                s.nodes()
                    .iter()
                    .filter(|n| n.category == c)
                    .map(|n| n.id)
                    .collect()
            })
            .collect())
    }

    /// A one-source graph holding a copy of source `j`, with the same
    /// category and type vocabulary.
    pub fn single_source(&self, j: usize) -> Result<Self> {
        let s = self.source(j)?.clone();
        Ok(Self {
            sources: vec![s],
            num_categories: self.num_categories,
            type_names: self.type_names.clone(),
        })
    }

    /// Returns a copy with the given edges removed from each source.
    /// `removed[j]` holds indices into `sources[j].edges()`.
    pub fn without_edges(&self, removed: &[Vec<usize>]) -> Result<Self> {
        let mut sources = Vec::with_capacity(self.sources.len());
        for (j, s) in self.sources.iter().enumerate() {
            let drop: std::collections::BTreeSet<usize> =
                removed.get(j).map(|r| r.iter().copied().collect()).unwrap_or_default();
            let edges = s
                .edges()
                .iter()
                .enumerate()
                .filter(|(i, _)| !drop.contains(i))
                .map(|(_, e)| *e)
                .collect();
            sources.push(SourceGraph::new(j, s.nodes().to_vec(), edges)?);
        }
        Self::new(sources, self.num_categories, self.type_names.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn node(id: usize, category: usize) -> Node {
        Node {
            id,
            category,
            node_type: 0,
            features: vec![id as u64],
            degree: 0.0,
        }
    }

    fn graph() -> MultiSourceGraph {
        let s0 = SourceGraph::new(
            0,
            vec![node(0, 1), node(1, 2), node(2, 1)],
            vec![Edge { u: 0, v: 1, weight: 2.0 }, Edge { u: 1, v: 2, weight: 0.5 }],
        )
        .unwrap();
        let s1 = SourceGraph::new(1, vec![node(0, 2), node(1, 2)], vec![]).unwrap();
        MultiSourceGraph::new(vec![s0, s1], 3, vec!["item".into()]).unwrap()
    }

    #[test]
    fn degrees_are_weighted_sums() {
        let g = graph();
        let s = g.source(0).unwrap();
        assert_eq!(s.nodes()[1].degree, 2.5);
        for n in s.nodes() {
            assert_eq!(n.degree, s.recomputed_degree(n.id));
        }
        assert_eq!(s.neighbors(1).len(), 2);
    }

    #[test]
    fn category_partition_cases() {
        let g = graph();
        assert_eq!(g.category_partition(1).unwrap(), vec![vec![0, 2], vec![]]);
        assert_eq!(g.category_partition(2).unwrap(), vec![vec![1], vec![0, 1]]);
        assert!(matches!(
            g.category_partition(3),
            Err(IcpaError::CategoryOutOfRange { .. })
        ));
        let total: usize = (0..3)
            .map(|c| g.category_partition(c).unwrap()[0].len())
            .sum();
        assert_eq!(total, g.source(0).unwrap().len());
    }

    #[test]
    fn rejects_bad_edges() {
        let err = SourceGraph::new(0, vec![node(0, 0)], vec![Edge { u: 0, v: 99, weight: 1.0 }]);
        assert!(matches!(err, Err(IcpaError::DanglingEndpoint { node: 99, .. })));
        let err = SourceGraph::new(0, vec![node(0, 0)], vec![Edge { u: 0, v: 0, weight: 1.0 }]);
        assert!(err.is_err());
    }

    #[test]
    fn rejects_category_out_of_range() {
        let s = SourceGraph::new(0, vec![node(0, 5)], vec![]).unwrap();
        assert!(matches!(
            MultiSourceGraph::new(vec![s], 3, vec!["item".into()]),
            Err(IcpaError::CategoryOutOfRange { category: 5, .. })
        ));
    }
}
