//! Training batch assembly.

use rand::seq::index;
use rand::Rng;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{IcpaError, Result};
use crate::graph::{MultiSourceGraph, NodeId, SourceGraph};

/// One weighted binary-classification example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triple {
    pub source: usize,
    pub anchor: NodeId,
    pub positive: NodeId,
    pub negatives: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct SamplerConfig {
    pub batch_size: usize,
    pub walk_length: usize,
    pub num_negatives: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            walk_length: 1,
            num_negatives: 6,
        }
    }
}

/// A minibatch drawn from one category.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryBatch {
    pub category: usize,
    /// `triples[j]` is empty when source `j` has no usable anchor in the category.
    pub triples: Vec<Vec<Triple>>,
    /// Node ids of the category used for cross-source alignment; empty for
    /// sources that do not populate the category.
    pub align_nodes: Vec<Vec<NodeId>>,
}

impl CategoryBatch {
    pub fn populated_sources(&self) -> Vec<usize> {
        (0..self.align_nodes.len())
            .filter(|&j| !self.align_nodes[j].is_empty())
            .collect()
    }
}

/// Per-category node lists and degree prefix sums of one source.
#[derive(Debug, Clone)]
pub struct DegreeIndex {
    nodes: Vec<Vec<NodeId>>,
    cumulative: Vec<Vec<f64>>,
    with_neighbors: Vec<Vec<NodeId>>,
}

impl DegreeIndex {
    pub fn new(graph: &SourceGraph, num_categories: usize) -> Self {
        let mut nodes = vec![Vec::new(); num_categories];
        let mut cumulative = vec![Vec::new(); num_categories];
        let mut with_neighbors = vec![Vec::new(); num_categories];
        for n in graph.nodes() {
            let c = n.category;
            let prev = cumulative[c].last().copied().unwrap_or(0.0);
            nodes[c].push(n.id);
            cumulative[c].push(prev + n.degree);
            if !graph.neighbors(n.id).is_empty() {
                with_neighbors[c].push(n.id);
            }
        }
        Self {
            nodes,
            cumulative,
            with_neighbors,
        }
    }

    pub fn category_nodes(&self, c: usize) -> &[NodeId] {
        &self.nodes[c]
    }
}

/// Terminal node of a weighted random walk of `length` steps. With return
/// and in-out parameters both 1 every step picks a neighbor with probability
/// proportional to edge weight. Returns `None` when the walk cannot start or
/// ends on the anchor.
pub fn walk_positive<R: Rng + ?Sized>(
    graph: &SourceGraph,
    anchor: NodeId,
    length: usize,
    rng: &mut R,
) -> Option<NodeId> {
    let mut cur = anchor;
    for _ in 0..length.max(1) {
        let adj = graph.neighbors(cur);
        if adj.is_empty() {
            return None;
        }
        let total: f64 = adj.iter().map(|&(_, w)| w).sum();
        cur = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = adj[adj.len() - 1].0;
            for &(v, w) in adj {
                if u < w {
                    pick = v;
                    break;
                }
                u -= w;
            }
            pick
        } else {
            adj[rng.random_range(0..adj.len())].0
        };
    }
    (cur != anchor).then_some(cur)
}

/// `k` draws with replacement from the positive's category, excluding the
/// positive, with probability proportional to weighted degree. Falls back to
/// uniform draws when every candidate has zero degree.
pub fn sample_negatives<R: Rng + ?Sized>(
    graph: &SourceGraph,
    index: &DegreeIndex,
    source_id: usize,
    positive: NodeId,
    k: usize,
    rng: &mut R,
) -> Result<Vec<NodeId>> {
    let node = graph.node(positive).ok_or(IcpaError::UnknownNode {
        source_id,
        node: positive,
    })?;
    let c = node.category;
    let nodes = &index.nodes[c];
    let cum = &index.cumulative[c];
    if nodes.len() < 2 {
        return Err(IcpaError::NoNegatives {
            source_id,
            category: c,
        });
    }
    let total = *cum.last().unwrap();
    let mass_without = total - node.degree;
    let mut out = Vec::with_capacity(k);
    if mass_without <= 0.0 {
        while out.len() < k {
            let v = nodes[rng.random_range(0..nodes.len())];
            if v != positive {
                out.push(v);
            }
        }
        return Ok(out);
    }
    while out.len() < k {
        let u = rng.random::<f64>() * total;
        let i = cum.partition_point(|&x| x <= u).min(nodes.len() - 1);
        let v = nodes[i];
        if v != positive {
            out.push(v);
        }
    }
    Ok(out)
}

/// Samples category minibatches from a graph.
#[derive(Debug, Clone)]
pub struct Sampler {
    pub config: SamplerConfig,
    indexes: Vec<DegreeIndex>,
    category_cumulative: Vec<f64>,
}

impl Sampler {
    pub fn new(graph: &MultiSourceGraph, config: SamplerConfig) -> Result<Self> {
        if config.batch_size == 0 {
            return Err(IcpaError::Config("batch_size must be positive".into()));
        }
        let k = graph.num_categories();
        let indexes: Vec<DegreeIndex> = graph
            .sources()
            .iter()
            .map(|s| DegreeIndex::new(s, k))
            .collect();
        let mut category_cumulative = Vec::with_capacity(k);
        let mut acc = 0.0;
        for c in 0..k {
            acc += indexes.iter().map(|ix| ix.nodes[c].len()).sum::<usize>() as f64;
            category_cumulative.push(acc);
        }
        if acc == 0.0 {
            return Err(IcpaError::Empty("graph has no nodes"));
        }
        Ok(Self {
            config,
            indexes,
            category_cumulative,
        })
    }

    pub fn index(&self, source: usize) -> &DegreeIndex {
        &self.indexes[source]
    }

    /// One training triple anchored at `anchor`, or `None` when no positive
    /// or no negative can be drawn.
    pub fn triple_at<R: Rng + ?Sized>(
        &self,
        graph: &MultiSourceGraph,
        source: usize,
        anchor: NodeId,
        rng: &mut R,
    ) -> Option<Triple> {
        let s = &graph.sources()[source];
        let positive = walk_positive(s, anchor, self.config.walk_length, rng)?;
        let negatives = sample_negatives(
            s,
            &self.indexes[source],
            source,
            positive,
            self.config.num_negatives,
            rng,
        )
        .ok()?;
        Some(Triple {
            source,
            anchor,
            positive,
            negatives,
        })
    }

    /// Up to `count` triples of source `j` anchored in category `c`.
    pub fn triples_in<R: Rng + ?Sized>(
        &self,
        graph: &MultiSourceGraph,
        source: usize,
        c: usize,
        count: usize,
        rng: &mut R,
    ) -> Vec<Triple> {
        let anchors = &self.indexes[source].with_neighbors[c];
        let mut out = Vec::with_capacity(count);
        if anchors.is_empty() {
            return out;
        }
        let mut attempts = 0;
        while out.len() < count && attempts < 3 * count {
            attempts += 1;
            let a = anchors[rng.random_range(0..anchors.len())];
            if let Some(t) = self.triple_at(graph, source, a, rng) {
                out.push(t);
            }
        }
        out
    }

    pub fn pick_category<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let total = *self.category_cumulative.last().unwrap();
        let u = rng.random::<f64>() * total;
        self.category_cumulative
            .partition_point(|&x| x <= u)
            .min(self.category_cumulative.len() - 1)
    }

    /// Picks a category with probability proportional to its node count and
    /// splits the batch evenly across the sources that populate it.
    pub fn next_batch<R: Rng + ?Sized>(&self, graph: &MultiSourceGraph, rng: &mut R) -> CategoryBatch {
        let c = self.pick_category(rng);
        self.batch_for(graph, c, rng)
    }

    /// Up to `count` distinct nodes of category `c` in source `j`, sorted.
    pub fn pick_nodes<R: Rng + ?Sized>(&self, j: usize, c: usize, count: usize, rng: &mut R) -> Vec<NodeId> {
        let nodes = &self.indexes[j].nodes[c];
        let take = count.min(nodes.len());
        let mut picked: Vec<NodeId> = index::sample(rng, nodes.len(), take)
            .into_iter()
            .map(|i| nodes[i])
            .collect();
        picked.sort_unstable();
        picked
    }

    /// Alignment nodes for every category, each drawn as in [`Self::batch_for`].
    pub fn align_sample<R: Rng + ?Sized>(&self, graph: &MultiSourceGraph, rng: &mut R) -> Vec<Vec<Vec<NodeId>>> {
        let m = graph.num_sources();
        (0..graph.num_categories())
            .map(|c| {
                let populated = (0..m).filter(|&j| !self.indexes[j].nodes[c].is_empty()).count().max(1);
                let quota = (self.config.batch_size / populated).max(1);
                (0..m).map(|j| self.pick_nodes(j, c, quota, rng)).collect()
            })
            .collect()
    }

    pub fn batch_for<R: Rng + ?Sized>(
        &self,
        graph: &MultiSourceGraph,
        c: usize,
        rng: &mut R,
    ) -> CategoryBatch {
        let m = graph.num_sources();
        let populated = (0..m)
            .filter(|&j| !self.indexes[j].nodes[c].is_empty())
            .count()
            .max(1);
        let quota = (self.config.batch_size / populated).max(1);
        let mut triples = Vec::with_capacity(m);
        let mut align_nodes = Vec::with_capacity(m);
        for j in 0..m {
            let nodes = &self.indexes[j].nodes[c];
            if nodes.is_empty() {
                triples.push(Vec::new());
                align_nodes.push(Vec::new());
                continue;
            }
            triples.push(self.triples_in(graph, j, c, quota, rng));
            align_nodes.push(self.pick_nodes(j, c, quota, rng));
        }
        CategoryBatch {
            category: c,
            triples,
            align_nodes,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Edge, Node};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn node(id: usize, category: usize) -> Node {
        Node {
            id,
            category,
            node_type: 0,
            features: vec![],
            degree: 0.0,
        }
    }

    fn e(u: usize, v: usize, weight: f64) -> Edge {
        Edge { u, v, weight }
    }

    #[test]
    fn walk_single_neighbor_and_isolated() {
        let g = SourceGraph::new(0, vec![node(0, 0), node(1, 0), node(2, 0)], vec![e(0, 1, 1.0)])
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            assert_eq!(walk_positive(&g, 0, 1, &mut rng), Some(1));
        }
        assert_eq!(walk_positive(&g, 2, 1, &mut rng), None);
    }

    #[test]
    fn star_leaves_are_uniform() {
        let g = SourceGraph::new(
            0,
            (0..5).map(|i| node(i, 0)).collect(),
            (1..5).map(|l| e(0, l, 1.0)).collect(),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut counts = [0usize; 5];
        let n = 100_000;
        for _ in 0..n {
            counts[walk_positive(&g, 0, 1, &mut rng).unwrap()] += 1;
        }
        assert_eq!(counts[0], 0);
        for &c in &counts[1..] {
            assert!((c as f64 / n as f64 - 0.25).abs() < 0.01);
        }
    }

    #[test]
    fn negatives_follow_degree_ratio() {
        // Category 0 = {a: deg 3, b: deg 1}; the positive p lives in category 0 too
        // but has its mass excluded, so a:b = 3:1.
        let g = SourceGraph::new(
            0,
            vec![node(0, 0), node(1, 0), node(2, 0), node(3, 1), node(4, 1)],
            vec![e(0, 3, 2.0), e(0, 4, 1.0), e(1, 3, 1.0), e(2, 4, 5.0)],
        )
        .unwrap();
        let ix = DegreeIndex::new(&g, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let draws = sample_negatives(&g, &ix, 0, 2, 100_000, &mut rng).unwrap();
        let a = draws.iter().filter(|&&v| v == 0).count() as f64 / draws.len() as f64;
        assert!((a - 0.75).abs() < 0.01, "{a}");
        assert!(!draws.contains(&2));
        assert_eq!(sample_negatives(&g, &ix, 0, 2, 6, &mut rng).unwrap().len(), 6);
    }

    #[test]
    fn negatives_errors_when_category_is_only_the_positive() {
        let g = SourceGraph::new(0, vec![node(0, 0), node(1, 1)], vec![e(0, 1, 1.0)]).unwrap();
        let ix = DegreeIndex::new(&g, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        assert!(matches!(
            sample_negatives(&g, &ix, 0, 1, 6, &mut rng),
            Err(IcpaError::NoNegatives { .. })
        ));
    }

    #[test]
    fn zero_degree_candidates_fall_back_to_uniform() {
        let g = SourceGraph::new(
            0,
            vec![node(0, 0), node(1, 0), node(2, 0), node(3, 1)],
            vec![e(0, 3, 1.0)],
        )
        .unwrap();
        let ix = DegreeIndex::new(&g, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let draws = sample_negatives(&g, &ix, 0, 0, 10_000, &mut rng).unwrap();
        let ones = draws.iter().filter(|&&v| v == 1).count() as f64 / 10_000.0;
        assert!((ones - 0.5).abs() < 0.02);
    }

    /// Pearson statistic of `counts` against `probs`, with its 0.999 critical value.
    fn chi_square(counts: &[usize], probs: &[f64]) -> (f64, f64) {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let n = counts.iter().sum::<usize>() as f64;
        let stat = counts
            .iter()
            .zip(probs)
            .map(|(&c, &p)| (c as f64 - n * p).powi(2) / (n * p))
            .sum();
        let crit = ChiSquared::new((counts.len() - 1) as f64).unwrap().inverse_cdf(0.999);
        (stat, crit)
    }

    #[test]
    fn negatives_pass_chi_square() {
        // Category 0: nodes 0..8 with degrees 1..8 via edges to a hub in category 1.
        let mut nodes: Vec<Node> = (0..8).map(|i| node(i, 0)).collect();
        nodes.push(node(8, 1));
        let edges = (0..8).map(|i| e(i, 8, (i + 1) as f64)).collect();
        let g = SourceGraph::new(0, nodes, edges).unwrap();
        let ix = DegreeIndex::new(&g, 2);
        let positive = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draws = sample_negatives(&g, &ix, 0, positive, 50_000, &mut rng).unwrap();
        let others: Vec<usize> = (0..8).filter(|&i| i != positive).collect();
        let mass: f64 = others.iter().map(|&i| (i + 1) as f64).sum();
        let probs: Vec<f64> = others.iter().map(|&i| (i + 1) as f64 / mass).collect();
        let counts: Vec<usize> = others.iter().map(|&i| draws.iter().filter(|&&v| v == i).count()).collect();
        let (stat, crit) = chi_square(&counts, &probs);
        assert!(stat < crit, "chi2 {stat} >= {crit}");
    }

    #[test]
    fn categories_pass_chi_square() {
        use crate::graph::{generate_synthetic, SyntheticSpec};
        let g = generate_synthetic(&SyntheticSpec {
            nodes_per_source: 60,
            categories: 3,
            ..Default::default()
        })
        .unwrap()
        .graph;
        let sampler = Sampler::new(&g, SamplerConfig::default()).unwrap();
        let sizes: Vec<f64> = (0..3)
            .map(|c| (0..g.num_sources()).map(|j| sampler.index(j).category_nodes(c).len()).sum::<usize>() as f64)
            .collect();
        let total: f64 = sizes.iter().sum();
        let probs: Vec<f64> = sizes.iter().map(|s| s / total).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut counts = vec![0usize; 3];
        for _ in 0..30_000 {
            counts[sampler.pick_category(&mut rng)] += 1;
        }
        let (stat, crit) = chi_square(&counts, &probs);
        assert!(stat < crit, "chi2 {stat} >= {crit}");
    }

    #[test]
    fn batches_are_deterministic_and_well_formed() {
        use crate::graph::{generate_synthetic, SyntheticSpec};
        let g = generate_synthetic(&SyntheticSpec {
            nodes_per_source: 40,
            ..Default::default()
        })
        .unwrap()
        .graph;
        let sampler = Sampler::new(&g, SamplerConfig { batch_size: 16, ..Default::default() }).unwrap();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..5).map(|_| sampler.next_batch(&g, &mut rng)).collect::<Vec<_>>()
        };
        let a = draw(9);
        assert_eq!(a, draw(9));
        assert_ne!(a, draw(10));
        for b in &a {
            for (j, ts) in b.triples.iter().enumerate() {
                assert!(ts.len() <= 8);
                for t in ts {
                    let s = &g.sources()[j];
                    assert_eq!(t.source, j);
                    assert_eq!(s.node(t.anchor).unwrap().category, b.category);
                    assert_eq!(t.negatives.len(), 6);
                    let pc = s.node(t.positive).unwrap().category;
                    assert!(t.negatives.iter().all(|&v| v != t.positive && s.node(v).unwrap().category == pc));
                }
            }
            for nodes in &b.align_nodes {
                assert!(nodes.windows(2).all(|w| w[0] < w[1]));
            }
        }
    }
}
