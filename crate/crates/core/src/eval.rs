//! Held-out risk, ranking metrics and chained user-item scoring.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{IcpaError, Result};
use crate::graph::{MultiSourceGraph, NodeId};
use crate::model::ModelParams;
use crate::sampler::{sample_negatives, DegreeIndex, Sampler, SamplerConfig, Triple};

/// Held-out edges with sampled same-category non-edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSplit {
    pub seed: u64,
    /// `triples[j]` evaluates source `j`.
    pub triples: Vec<Vec<Triple>>,
}

/// Removes up to `fraction` of each source's edges without isolating any
/// node, and pairs every removed edge with `negatives` non-neighbors of its
/// anchor drawn from the positive's category in proportion to degree.
/// Returns the training graph and the split.
pub fn split_edges(
    graph: &MultiSourceGraph,
    fraction: f64,
    negatives: usize,
    seed: u64,
) -> Result<(MultiSourceGraph, EvalSplit)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(IcpaError::Config("held-out fraction must be in [0, 1)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut removed = Vec::with_capacity(graph.num_sources());
    for s in graph.sources() {
        let mut order: Vec<usize> = (0..s.edges().len()).collect();
        order.shuffle(&mut rng);
        let want = (fraction * s.edges().len() as f64).floor() as usize;
        let mut deg: Vec<usize> = (0..s.len()).map(|i| s.neighbors(i).len()).collect();
        let mut out = Vec::with_capacity(want);
        for i in order {
            if out.len() == want {
                break;
            }
            let e = s.edges()[i];
            if deg[e.u] > 1 && deg[e.v] > 1 {
                deg[e.u] -= 1;
                deg[e.v] -= 1;
                out.push(i);
            }
        }
        out.sort_unstable();
        removed.push(out);
    }
    let train = graph.without_edges(&removed)?;
    let mut triples = Vec::with_capacity(graph.num_sources());
    for (j, s) in graph.sources().iter().enumerate() {
        let ts = &train.sources()[j];
        let index = DegreeIndex::new(ts, graph.num_categories());
        let mut per = Vec::with_capacity(removed[j].len());
        for &i in &removed[j] {
            let e = s.edges()[i];
            let adjacent: BTreeSet<NodeId> = s.neighbors(e.u).iter().map(|&(v, _)| v).collect();
            let mut negs = Vec::with_capacity(negatives);
            let mut attempts = 0;
            while negs.len() < negatives && attempts < 50 * negatives.max(1) {
                attempts += 1;
                match sample_negatives(ts, &index, j, e.v, 1, &mut rng) {
                    Ok(v) if v[0] != e.u && !adjacent.contains(&v[0]) => negs.push(v[0]),
                    Ok(_) => {}
                    Err(_) => break,
                }
            }
            if negs.len() == negatives {
                per.push(Triple {
                    source: j,
                    anchor: e.u,
                    positive: e.v,
                    negatives: negs,
                });
            }
        }
        triples.push(per);
    }
    Ok((train, EvalSplit { seed, triples }))
}

/// A fixed set of training-style triples for source `j`, drawn with the
/// same walk and negative sampling as training.
pub fn fixed_triples(
    graph: &MultiSourceGraph,
    j: usize,
    count: usize,
    config: &SamplerConfig,
    seed: u64,
) -> Result<Vec<Triple>> {
    graph.source(j)?;
    let sampler = Sampler::new(graph, config.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx = sampler.index(j);
    let anchors: Vec<NodeId> = (0..graph.num_categories())
        .flat_map(|c| idx.category_nodes(c).iter().copied())
        .filter(|&n| !graph.sources()[j].neighbors(n).is_empty())
        .collect();
    if anchors.is_empty() {
        return Err(IcpaError::Empty("source has no connected nodes"));
    }
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count && attempts < 10 * count {
        attempts += 1;
        let a = anchors[rng.random_range(0..anchors.len())];
        if let Some(t) = sampler.triple_at(graph, j, a, &mut rng) {
            out.push(t);
        }
    }
    Ok(out)
}

/// Mean edge loss over `triples` with deterministic inference contexts.
pub fn empirical_risk(model: &ModelParams, graph: &MultiSourceGraph, triples: &[Triple]) -> Result<f64> {
    if triples.is_empty() {
        return Err(IcpaError::Empty("evaluation triples"));
    }
    let ctx = model.triple_inference_contexts(graph, triples)?;
    model.edge_loss_value(&ctx)
}

/// Candidates of one query ordered by non-increasing score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub query: NodeId,
    /// `(candidate, score, relevance)`.
    pub items: Vec<(NodeId, f64, f64)>,
}

impl RankedList {
    /// Sorts by score, descending; ties keep the input order.
    pub fn new(query: NodeId, mut items: Vec<(NodeId, f64, f64)>) -> Self {
        items.sort_by(|a, b| b.1.total_cmp(&a.1));
        Self { query, items }
    }
}

/// DCG@k with linear gain and `1 / log2(rank + 1)` discount, divided by the
/// ideal DCG@k. Zero when nothing is relevant.
pub fn ndcg_at_k(list: &RankedList, k: usize) -> f64 {
    let dcg = |labels: &mut dyn Iterator<Item = f64>| -> f64 {
        labels
            .take(k)
            .enumerate()
            .map(|(i, g)| g / ((i + 2) as f64).log2())
            .sum()
    };
    let actual = dcg(&mut list.items.iter().map(|x| x.2));
    let mut ideal: Vec<f64> = list.items.iter().map(|x| x.2).collect();
    ideal.sort_by(|a, b| b.total_cmp(a));
    let best = dcg(&mut ideal.into_iter());
    if best > 0.0 {
        actual / best
    } else {
        0.0
    }
}

/// Harmonic mean of precision@k and recall@k against `truth`.
pub fn f_measure_at_k(list: &RankedList, k: usize, truth: &BTreeSet<NodeId>) -> f64 {
    if k == 0 || truth.is_empty() {
        return 0.0;
    }
    let hits = list.items.iter().take(k).filter(|x| truth.contains(&x.0)).count() as f64;
    let p = hits / k as f64;
    let r = hits / truth.len() as f64;
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Mean of `values`, weighted by `weights` when given.
pub fn weighted_mean(values: &[f64], weights: Option<&[f64]>) -> Result<f64> {
    if values.is_empty() {
        return Err(IcpaError::Empty("metric values"));
    }
    match weights {
        None => Ok(values.iter().sum::<f64>() / values.len() as f64),
        Some(w) => {
            if w.len() != values.len() {
                return Err(IcpaError::LengthMismatch {
                    expected: values.len(),
                    actual: w.len(),
                });
            }
            let total: f64 = w.iter().sum();
            if !(total > 0.0) {
                return Err(IcpaError::Invalid("weights must have a positive sum".into()));
            }
            Ok(values.iter().zip(w).map(|(v, x)| v * x).sum::<f64>() / total)
        }
    }
}

/// Score of candidate `y` for a user with interaction history
/// `(item, weight)`: the history-weighted average of `p(y | item)`.
pub fn chain_score<F>(history: &[(NodeId, f64)], mut p_given: F) -> Result<f64>
where
    F: FnMut(NodeId) -> Result<f64>,
{
    if history.is_empty() {
        return Err(IcpaError::Empty("interaction history"));
    }
    if history.iter().any(|&(_, w)| !(w > 0.0)) {
        return Err(IcpaError::Invalid("history weights must be positive".into()));
    }
    let total: f64 = history.iter().map(|&(_, w)| w).sum();
    let mut s = 0.0;
    for &(item, w) in history {
        s += w / total * p_given(item)?;
    }
    Ok(s)
}

/// [`chain_score`] with item-item probabilities from the model.
pub fn chain_score_model(
    model: &ModelParams,
    graph: &MultiSourceGraph,
    source: usize,
    candidate: NodeId,
    history: &[(NodeId, f64)],
) -> Result<f64> {
    chain_score(history, |item| model.predict_edge(graph, source, item, candidate))
}

/// Mean NDCG@k and F@k over the held-out triples of one source: each
/// anchor ranks its positive among its negatives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct RankingMetrics {
    pub k: usize,
    pub ndcg: f64,
    pub f_measure: f64,
    pub queries: usize,
}

pub fn ranking_metrics(
    model: &ModelParams,
    graph: &MultiSourceGraph,
    triples: &[Triple],
    k: usize,
) -> Result<RankingMetrics> {
    if triples.is_empty() {
        return Err(IcpaError::Empty("evaluation triples"));
    }
    let mut ndcg = Vec::with_capacity(triples.len());
    let mut f = Vec::with_capacity(triples.len());
    for t in triples {
        let mut items = vec![(t.positive, model.predict_edge(graph, t.source, t.anchor, t.positive)?, 1.0)];
        for &n in &t.negatives {
            items.push((n, model.predict_edge(graph, t.source, t.anchor, n)?, 0.0));
        }
        let list = RankedList::new(t.anchor, items);
        ndcg.push(ndcg_at_k(&list, k));
        f.push(f_measure_at_k(&list, k, &BTreeSet::from([t.positive])));
    }
    Ok(RankingMetrics {
        k,
        ndcg: weighted_mean(&ndcg, None)?,
        f_measure: weighted_mean(&f, None)?,
        queries: triples.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{generate_synthetic, SyntheticSpec};
    use crate::model::ModelConfig;

    fn list(labels: &[f64]) -> RankedList {
        RankedList::new(
            0,
            labels
                .iter()
                .enumerate()
                .map(|(i, &l)| (i + 1, 1.0 - i as f64 * 0.1, l))
                .collect(),
        )
    }

    #[test]
    fn ndcg_examples() {
        assert_eq!(ndcg_at_k(&list(&[1.0]), 1), 1.0);
        let v = ndcg_at_k(&list(&[0.0, 1.0]), 2);
        assert!((v - 1.0 / 3f64.log2()).abs() < 1e-12);
        assert_eq!(ndcg_at_k(&list(&[0.0, 0.0]), 2), 0.0);
        assert!(ndcg_at_k(&list(&[0.0, 2.0, 1.0, 3.0]), 3) <= 1.0);
    }

    #[test]
    fn f_measure_examples() {
        let l = list(&[0.0; 4]);
        let truth: BTreeSet<NodeId> = [1, 2].into();
        assert_eq!(f_measure_at_k(&l, 2, &truth), 1.0);
        let truth: BTreeSet<NodeId> = [2, 7, 8, 9].into();
        assert!((f_measure_at_k(&l, 2, &truth) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(f_measure_at_k(&l, 2, &[9].into()), 0.0);
    }

    #[test]
    fn chain_examples() {
        assert_eq!(chain_score(&[(3, 2.0)], |_| Ok(0.8)).unwrap(), 0.8);
        let v = chain_score(&[(1, 1.0), (2, 1.0)], |i| Ok(if i == 1 { 0.2 } else { 0.6 })).unwrap();
        assert!((v - 0.4).abs() < 1e-12);
        assert!(chain_score(&[], |_| Ok(0.5)).is_err());
        let orth = chain_score(&[(1, 0.3), (2, 0.7)], |_| Ok(crate::nn::sigmoid(0.0))).unwrap();
        assert_eq!(orth, 0.5);
        assert!((weighted_mean(&[1.0, 3.0], Some(&[3.0, 1.0])).unwrap() - 1.5).abs() < 1e-12);
    }

    #[test]
    fn split_is_disjoint_and_keeps_nodes_connected() {
        let s = generate_synthetic(&SyntheticSpec {
            nodes_per_source: 80,
            seed: 3,
            ..Default::default()
        })
        .unwrap();
        let (train, split) = split_edges(&s.graph, 0.1, 4, 1).unwrap();
        for j in 0..2 {
            let ts = &train.sources()[j];
            assert!(ts.nodes().iter().all(|n| n.degree > 0.0));
            assert!(!split.triples[j].is_empty());
            for t in &split.triples[j] {
                assert!(!ts.neighbors(t.anchor).iter().any(|&(v, _)| v == t.positive));
                assert_eq!(t.negatives.len(), 4);
            }
        }
        let (_, again) = split_edges(&s.graph, 0.1, 4, 1).unwrap();
        assert_eq!(split, again);
    }

    #[test]
    fn risk_is_mean_invariant_and_matches_edge_loss() {
        let s = generate_synthetic(&SyntheticSpec {
            nodes_per_source: 40,
            seed: 5,
            ..Default::default()
        })
        .unwrap();
        let model = ModelParams::new(ModelConfig::default(), &s.graph, 2).unwrap();
        let t = fixed_triples(&s.graph, 0, 20, &SamplerConfig::default(), 4).unwrap();
        let r = empirical_risk(&model, &s.graph, &t).unwrap();
        let doubled: Vec<Triple> = t.iter().chain(&t).cloned().collect();
        assert!((empirical_risk(&model, &s.graph, &doubled).unwrap() - r).abs() < 1e-12);
        let ctx = model.triple_inference_contexts(&s.graph, &t).unwrap();
        assert!((model.edge_loss_contexts(&ctx).unwrap().0 - r).abs() < 1e-12);
        let m = ranking_metrics(&model, &s.graph, &t, 3).unwrap();
        assert!((0.0..=1.0).contains(&m.ndcg));
    }
}
