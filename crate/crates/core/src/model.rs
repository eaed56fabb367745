//! Node representation model and the edge-prediction loss.
//!
//! A node is encoded in one hop: its own feature embeddings are mean-pooled
//! into a self vector, sampled neighbors are embedded the same way and
//! mean-pooled per node type, and the concatenation
//! `[self, type_0, type_1, ...]` goes through a tower MLP whose output is
//! L2-normalized. Anchors use tower A; positives and negatives use tower B.
//! Both towers read one shared embedding table whose rows are keyed by
//! `(source, feature id)`, so feature spaces never collide across sources.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{IcpaError, Result};
use crate::graph::{MultiSourceGraph, NodeId};
use crate::nn::{self, l2_normalize, l2_normalize_backward, Mlp, MlpTrace, Parameters, Tensor};
use crate::sampler::Triple;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub neighbor_samples: usize,
    pub positive_weight: f64,
    /// Hidden layers of the gate network.
    pub gate_hidden: Vec<usize>,
}

impl Default for ModelConfig {
    /// Desk-scale dimensions.
    fn default() -> Self {
        Self {
            embed_dim: 8,
            hidden_dims: vec![32, 32, 16],
            neighbor_samples: 5,
            positive_weight: 2.0,
            gate_hidden: vec![16],
        }
    }
}

impl ModelConfig {
    /// Production-scale dimensions.
    pub fn full_scale() -> Self {
        Self {
            hidden_dims: vec![256, 256, 32],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return Err(IcpaError::Config("model dimensions must be positive".into()));
        }
        if self.gate_hidden.contains(&0) {
            return Err(IcpaError::Config("gate hidden dimensions must be positive".into()));
        }
        if !(self.positive_weight >= 0.0) {
            return Err(IcpaError::Config("positive_weight must be non-negative".into()));
        }
        Ok(())
    }

    pub fn rep_dim(&self) -> usize {
        *self.hidden_dims.last().expect("validated")
    }
}

/// Maps `(source, feature id)` to an embedding row.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureVocab {
    rows: BTreeMap<(usize, u64), usize>,
}

impl FeatureVocab {
    pub fn from_graph(graph: &MultiSourceGraph) -> Self {
        let mut keys = std::collections::BTreeSet::new();
        for (j, s) in graph.sources().iter().enumerate() {
            for n in s.nodes() {
                for &f in &n.features {
                    keys.insert((j, f));
                }
            }
        }
        Self::from_keys(keys.into_iter().collect())
    }

    pub fn from_keys(keys: Vec<(usize, u64)>) -> Self {
        Self {
            rows: keys.into_iter().enumerate().map(|(i, k)| (k, i)).collect(),
        }
    }

    /// Keys in row order.
    pub fn keys(&self) -> Vec<(usize, u64)> {
        let mut v: Vec<_> = self.rows.iter().map(|(&k, &r)| (r, k)).collect();
        v.sort();
        v.into_iter().map(|(_, k)| k).collect()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, source: usize, feature: u64) -> Result<usize> {
        self.rows
            .get(&(source, feature))
            .copied()
            .ok_or(IcpaError::UnknownFeature {
                source_id: source,
                feature,
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Tower {
    A,
    B,
}

/// Learnable parameters of the representation model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub num_types: usize,
    pub vocab: Arc<FeatureVocab>,
    /// Row-major `vocab.len() x embed_dim`.
    pub embeddings: Vec<f64>,
    pub tower_a: Mlp,
    pub tower_b: Mlp,
}

impl Parameters for ModelParams {
    fn tensors(&self) -> Vec<Tensor<'_>> {
        let mut out = vec![Tensor {
            name: "embeddings".into(),
            shape: vec![self.vocab.len(), self.config.embed_dim],
            data: &self.embeddings,
        }];
        self.tower_a.push_tensors("tower_a", &mut out);
        self.tower_b.push_tensors("tower_b", &mut out);
        out
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![&mut self.embeddings];
        self.tower_a.push_slices_mut(&mut out);
        self.tower_b.push_slices_mut(&mut out);
        out
    }
}

/// Sampled neighborhood of one node, resolved to embedding rows.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeContext {
    pub source: usize,
    pub node: NodeId,
    pub self_rows: Vec<usize>,
    /// `type_groups[t][k]` holds the rows of the k-th sampled neighbor of type `t`.
    pub type_groups: Vec<Vec<Vec<usize>>>,
}

/// Forward-pass state for one node.
#[derive(Debug, Clone)]
pub struct NodeForward {
    trace: MlpTrace,
    norm: f64,
    pub rep: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRepresentation(pub Vec<f64>);

/// Contexts for every node of a training triple.
#[derive(Debug, Clone, PartialEq)]
pub struct TripleContext {
    pub anchor: NodeContext,
    pub positive: NodeContext,
    pub negatives: Vec<NodeContext>,
}

fn clamp_logit(s: f64) -> (f64, bool) {
    if s > nn::LOGIT_CLAMP {
        (nn::LOGIT_CLAMP, false)
    } else if s < -nn::LOGIT_CLAMP {
        (-nn::LOGIT_CLAMP, false)
    } else {
        (s, true)
    }
}

impl ModelParams {
    pub fn new(config: ModelConfig, graph: &MultiSourceGraph, seed: u64) -> Result<Self> {
        config.validate()?;
        let vocab = FeatureVocab::from_graph(graph);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = config.embed_dim;
        let embeddings = (0..vocab.len() * e)
            .map(|_| rng.random_range(-0.5..0.5))
            .collect();
        let in_dim = e * (1 + graph.num_types());
        let tower_a = Mlp::init(in_dim, &config.hidden_dims, true, &mut rng);
        let tower_b = Mlp::init(in_dim, &config.hidden_dims, true, &mut rng);
        Ok(Self {
            config,
            num_types: graph.num_types(),
            vocab: Arc::new(vocab),
            embeddings,
            tower_a,
            tower_b,
        })
    }

    pub fn rep_dim(&self) -> usize {
        self.config.rep_dim()
    }

    fn tower(&self, t: Tower) -> &Mlp {
        match t {
            Tower::A => &self.tower_a,
            Tower::B => &self.tower_b,
        }
    }

    fn rows_of(&self, graph: &MultiSourceGraph, source: usize, node: NodeId) -> Result<Vec<usize>> {
        let n = graph
            .source(source)?
            .node(node)
            .ok_or(IcpaError::UnknownNode {
                source_id: source,
                node,
            })?;
        n.features
            .iter()
            .map(|&f| self.vocab.row(source, f))
            .collect()
    }

    fn build_context(
        &self,
        graph: &MultiSourceGraph,
        source: usize,
        node: NodeId,
        neighbors: &[NodeId],
    ) -> Result<NodeContext> {
        let self_rows = self.rows_of(graph, source, node)?;
        let s = graph.source(source)?;
        let mut type_groups = vec![Vec::new(); self.num_types];
        for &nb in neighbors {
            let t = s.nodes()[nb].node_type;
            type_groups[t].push(self.rows_of(graph, source, nb)?);
        }
        Ok(NodeContext {
            source,
            node,
            self_rows,
            type_groups,
        })
    }

    /// Samples `neighbor_samples` neighbors uniformly with replacement.
    pub fn sample_context<R: Rng + ?Sized>(
        &self,
        graph: &MultiSourceGraph,
        source: usize,
        node: NodeId,
        rng: &mut R,
    ) -> Result<NodeContext> {
        let s = graph.source(source)?;
        if node >= s.len() {
            return Err(IcpaError::UnknownNode {
                source_id: source,
                node,
            });
        }
        let adj = s.neighbors(node);
        let picked: Vec<NodeId> = if adj.is_empty() {
            Vec::new()
        } else {
            (0..self.config.neighbor_samples)
                .map(|_| adj[rng.random_range(0..adj.len())].0)
                .collect()
        };
        self.build_context(graph, source, node, &picked)
    }

    /// Context used at inference: the full neighborhood when it has at most
    /// `neighbor_samples` entries, otherwise a sample drawn from a stream
    /// seeded by the node's identity.
    pub fn inference_context(
        &self,
        graph: &MultiSourceGraph,
        source: usize,
        node: NodeId,
    ) -> Result<NodeContext> {
        let s = graph.source(source)?;
        if node >= s.len() {
            return Err(IcpaError::UnknownNode {
                source_id: source,
                node,
            });
        }
        let adj = s.neighbors(node);
        if adj.len() <= self.config.neighbor_samples {
            let all: Vec<NodeId> = adj.iter().map(|&(v, _)| v).collect();
            self.build_context(graph, source, node, &all)
        } else {
            let seed = INFERENCE_SEED ^ ((source as u64) << 40) ^ node as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            self.sample_context(graph, source, node, &mut rng)
        }
    }

    fn assemble_input(&self, ctx: &NodeContext) -> Vec<f64> {
        let e = self.config.embed_dim;
        let mut x = vec![0.0; e * (1 + self.num_types)];
        self.mean_rows(&ctx.self_rows, &mut x[..e], 1.0);
        for (t, group) in ctx.type_groups.iter().enumerate() {
            if group.is_empty() {
                continue;
            }
            let slot = &mut x[e * (1 + t)..e * (2 + t)];
            let w = 1.0 / group.len() as f64;
            for rows in group {
                self.mean_rows(rows, slot, w);
            }
        }
        x
    }

    /// `out += scale * mean(embeddings[rows])`
    fn mean_rows(&self, rows: &[usize], out: &mut [f64], scale: f64) {
        if rows.is_empty() {
            return;
        }
        let e = self.config.embed_dim;
        let w = scale / rows.len() as f64;
        for &r in rows {
            for (o, v) in out.iter_mut().zip(&self.embeddings[r * e..(r + 1) * e]) {
                *o += w * v;
            }
        }
    }

    pub fn forward(&self, ctx: &NodeContext, tower: Tower) -> NodeForward {
        let x = self.assemble_input(ctx);
        let trace = self.tower(tower).forward(&x);
        let (rep, norm) = l2_normalize(&trace.output);
        NodeForward { trace, norm, rep }
    }

    /// Accumulates into `grads` the gradient of a loss with respect to the
    /// parameters given `dL/d rep`.
    pub fn backward(
        &self,
        ctx: &NodeContext,
        tower: Tower,
        fwd: &NodeForward,
        grad_rep: &[f64],
        grads: &mut ModelParams,
    ) {
        let gh = l2_normalize_backward(&fwd.rep, fwd.norm, grad_rep);
        let gx = match tower {
            Tower::A => self.tower_a.backward(&fwd.trace, &gh, &mut grads.tower_a),
            Tower::B => self.tower_b.backward(&fwd.trace, &gh, &mut grads.tower_b),
        };
        let e = self.config.embed_dim;
        scatter_rows(&mut grads.embeddings, e, &ctx.self_rows, &gx[..e], 1.0);
        for (t, group) in ctx.type_groups.iter().enumerate() {
            if group.is_empty() {
                continue;
            }
            let g = &gx[e * (1 + t)..e * (2 + t)];
            let w = 1.0 / group.len() as f64;
            for rows in group {
                scatter_rows(&mut grads.embeddings, e, rows, g, w);
            }
        }
    }

    pub fn represent(&self, ctx: &NodeContext, tower: Tower) -> NodeRepresentation {
        NodeRepresentation(self.forward(ctx, tower).rep)
    }

    /// Mean weighted BCE over the triples, and its exact gradient.
    pub fn edge_loss_contexts(&self, batch: &[TripleContext]) -> Result<(f64, ModelParams)> {
        if batch.is_empty() {
            return Err(IcpaError::EmptyBatch);
        }
        let mut grads = self.zeros_like();
        let inv_n = 1.0 / batch.len() as f64;
        let pw = self.config.positive_weight;
        let mut total = 0.0;
        for t in batch {
            let fa = self.forward(&t.anchor, Tower::A);
            let fp = self.forward(&t.positive, Tower::B);
            let mut ga = vec![0.0; fa.rep.len()];

            let (s, live) = clamp_logit(nn::dot(&fa.rep, &fp.rep));
            total += pw * nn::softplus(-s);
            if live {
                let d = -pw * nn::sigmoid(-s) * inv_n;
                let gp: Vec<f64> = fa.rep.iter().map(|a| d * a).collect();
                ga.iter_mut().zip(&fp.rep).for_each(|(g, p)| *g += d * p);
                self.backward(&t.positive, Tower::B, &fp, &gp, &mut grads);
            }
            for neg in &t.negatives {
                let fneg = self.forward(neg, Tower::B);
                let (s, live) = clamp_logit(nn::dot(&fa.rep, &fneg.rep));
                total += nn::softplus(s);
                if live {
                    let d = nn::sigmoid(s) * inv_n;
                    let gn: Vec<f64> = fa.rep.iter().map(|a| d * a).collect();
                    ga.iter_mut().zip(&fneg.rep).for_each(|(g, p)| *g += d * p);
                    self.backward(neg, Tower::B, &fneg, &gn, &mut grads);
                }
            }
            self.backward(&t.anchor, Tower::A, &fa, &ga, &mut grads);
        }
        Ok((total * inv_n, grads))
    }

    /// Loss value only.
    pub fn edge_loss_value(&self, batch: &[TripleContext]) -> Result<f64> {
        if batch.is_empty() {
            return Err(IcpaError::EmptyBatch);
        }
        let pw = self.config.positive_weight;
        let mut total = 0.0;
        for t in batch {
            let a = self.forward(&t.anchor, Tower::A).rep;
            let p = self.forward(&t.positive, Tower::B).rep;
            total += pw * nn::softplus(-clamp_logit(nn::dot(&a, &p)).0);
            for neg in &t.negatives {
                let n = self.forward(neg, Tower::B).rep;
                total += nn::softplus(clamp_logit(nn::dot(&a, &n)).0);
            }
        }
        Ok(total / batch.len() as f64)
    }

    /// Samples contexts for every node of the triples.
    pub fn triple_contexts<R: Rng + ?Sized>(
        &self,
        graph: &MultiSourceGraph,
        triples: &[Triple],
        rng: &mut R,
    ) -> Result<Vec<TripleContext>> {
        triples
            .iter()
            .map(|t| {
                Ok(TripleContext {
                    anchor: self.sample_context(graph, t.source, t.anchor, rng)?,
                    positive: self.sample_context(graph, t.source, t.positive, rng)?,
                    negatives: t
                        .negatives
                        .iter()
                        .map(|&n| self.sample_context(graph, t.source, n, rng))
                        .collect::<Result<_>>()?,
                })
            })
            .collect()
    }

    /// Contexts built with [`Self::inference_context`] for every node.
    pub fn triple_inference_contexts(
        &self,
        graph: &MultiSourceGraph,
        triples: &[Triple],
    ) -> Result<Vec<TripleContext>> {
        triples
            .iter()
            .map(|t| {
                Ok(TripleContext {
                    anchor: self.inference_context(graph, t.source, t.anchor)?,
                    positive: self.inference_context(graph, t.source, t.positive)?,
                    negatives: t
                        .negatives
                        .iter()
                        .map(|&n| self.inference_context(graph, t.source, n))
                        .collect::<Result<_>>()?,
                })
            })
            .collect()
    }

    /// Edge loss on `triples` with freshly sampled contexts.
    pub fn edge_loss<R: Rng + ?Sized>(
        &self,
        graph: &MultiSourceGraph,
        triples: &[Triple],
        rng: &mut R,
    ) -> Result<(f64, ModelParams)> {
        let ctx = self.triple_contexts(graph, triples, rng)?;
        self.edge_loss_contexts(&ctx)
    }

    /// Representation of a node through the given tower, sampling neighbors
    /// from `rng`.
    pub fn embed_node<R: Rng + ?Sized>(
        &self,
        graph: &MultiSourceGraph,
        source: usize,
        node: NodeId,
        tower: Tower,
        rng: &mut R,
    ) -> Result<NodeRepresentation> {
        let ctx = self.sample_context(graph, source, node, rng)?;
        Ok(self.represent(&ctx, tower))
    }

    /// Matching probability `sigmoid(<A(u), B(v)>)`, using inference contexts.
    pub fn predict_edge(
        &self,
        graph: &MultiSourceGraph,
        source: usize,
        u: NodeId,
        v: NodeId,
    ) -> Result<f64> {
        let cu = self.inference_context(graph, source, u)?;
        let cv = self.inference_context(graph, source, v)?;
        Ok(self.score(&cu, Tower::A, &cv, Tower::B))
    }

    /// `sigmoid(<rep_u, rep_v>)` for explicit contexts and towers.
    pub fn score(&self, cu: &NodeContext, tu: Tower, cv: &NodeContext, tv: Tower) -> f64 {
        let a = self.forward(cu, tu).rep;
        let b = self.forward(cv, tv).rep;
        nn::sigmoid(clamp_logit(nn::dot(&a, &b)).0)
    }
}

const INFERENCE_SEED: u64 = 0x1CBA_5EED_0000_0000;

fn scatter_rows(table: &mut [f64], e: usize, rows: &[usize], g: &[f64], scale: f64) {
    if rows.is_empty() {
        return;
    }
    let w = scale / rows.len() as f64;
    for &r in rows {
        for (t, gi) in table[r * e..(r + 1) * e].iter_mut().zip(g) {
            *t += w * gi;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Edge, Node, SourceGraph};

    fn small_graph() -> MultiSourceGraph {
        let mk = |id, category, node_type, features: Vec<u64>| Node {
            id,
            category,
            node_type,
            features,
            degree: 0.0,
        };
        let s0 = SourceGraph::new(
            0,
            vec![
                mk(0, 0, 0, vec![1, 2]),
                mk(1, 0, 1, vec![3]),
                mk(2, 1, 0, vec![4]),
                mk(3, 1, 1, vec![]),
                mk(4, 0, 0, vec![5]),
            ],
            vec![
                Edge { u: 0, v: 1, weight: 1.0 },
                Edge { u: 0, v: 2, weight: 2.0 },
                Edge { u: 1, v: 3, weight: 1.0 },
                Edge { u: 2, v: 3, weight: 1.0 },
            ],
        )
        .unwrap();
        MultiSourceGraph::new(vec![s0], 2, vec!["item".into(), "user".into()]).unwrap()
    }

    fn params(g: &MultiSourceGraph) -> ModelParams {
        let cfg = ModelConfig {
            embed_dim: 4,
            hidden_dims: vec![8, 8, 4],
            ..Default::default()
        };
        ModelParams::new(cfg, g, 5).unwrap()
    }

    #[test]
    fn representation_is_unit_norm_even_when_isolated() {
        let g = small_graph();
        let p = params(&g);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for node in 0..5 {
            for tower in [Tower::A, Tower::B] {
                let r = p.embed_node(&g, 0, node, tower, &mut rng).unwrap();
                let n = nn::dot(&r.0, &r.0).sqrt();
                assert!((n - 1.0).abs() < 1e-6);
            }
        }
        let ctx = p.sample_context(&g, 0, 4, &mut rng).unwrap();
        assert!(ctx.type_groups.iter().all(|t| t.is_empty()));
    }

    #[test]
    fn identical_streams_give_identical_representations() {
        let g = small_graph();
        let p = params(&g);
        let a = p
            .embed_node(&g, 0, 0, Tower::A, &mut ChaCha8Rng::seed_from_u64(9))
            .unwrap();
        let b = p
            .embed_node(&g, 0, 0, Tower::A, &mut ChaCha8Rng::seed_from_u64(9))
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unknown_node_and_feature_errors() {
        let g = small_graph();
        let p = params(&g);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            p.embed_node(&g, 0, 17, Tower::A, &mut rng),
            Err(IcpaError::UnknownNode { node: 17, .. })
        ));
        let mut other = p.clone();
        other.vocab = Arc::new(FeatureVocab::from_keys(vec![(0, 1)]));
        assert!(matches!(
            other.embed_node(&g, 0, 1, Tower::A, &mut rng),
            Err(IcpaError::UnknownFeature { feature: 3, .. })
        ));
    }

    #[test]
    fn self_similarity_and_orthogonal_scores() {
        let g = small_graph();
        let p = params(&g);
        let c = p.inference_context(&g, 0, 0).unwrap();
        assert!((p.score(&c, Tower::A, &c, Tower::A) - nn::sigmoid(1.0)).abs() < 1e-12);
        assert!((nn::sigmoid(1.0) - 0.731).abs() < 1e-3);
        assert!(p.predict_edge(&g, 0, 0, 9).is_err());
        let pr = p.predict_edge(&g, 0, 0, 1).unwrap();
        assert!((0.0..=1.0).contains(&pr));
    }

    #[test]
    fn zero_representations_give_eight_ln2_per_triple() {
        // All logits are zero when the tower outputs are orthogonal; build
        // that directly through the loss on contexts whose reps we force.
        let g = small_graph();
        let mut p = params(&g);
        // Force tower A to output e0 and tower B to output e1 regardless of input.
        for (tower, hot) in [(&mut p.tower_a, 0), (&mut p.tower_b, 1)] {
            let last = tower.layers.last_mut().unwrap();
            last.weight.iter_mut().for_each(|w| *w = 0.0);
            last.bias.iter_mut().for_each(|b| *b = 0.0);
            last.bias[hot] = 1.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = Triple {
            source: 0,
            anchor: 0,
            positive: 1,
            negatives: vec![4; 6],
        };
        let (l, _) = p.edge_loss(&g, &[t.clone(), t], &mut rng).unwrap();
        assert!((l - 8.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!((p.predict_edge(&g, 0, 0, 1).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn empty_batch_is_an_error() {
        let g = small_graph();
        let p = params(&g);
        assert!(matches!(p.edge_loss_contexts(&[]), Err(IcpaError::EmptyBatch)));
    }
}
