//! Sliced cross-source matching with learnable gates.
//!
//! Representations of one category are projected onto random unit vectors.
//! Each source's projections are sorted, both sorted lists are resampled to a
//! common length, and the k-th entries are matched. In one dimension this
//! sorted matching is the optimal transport plan for a quadratic cost, so the
//! plan never has to be materialized. Every matched pair is weighted by the
//! product of the two directional gates of its endpoints.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{IcpaError, Result};
use crate::model::{ModelParams, NodeContext, NodeForward, Tower};
use crate::nn::{self, Mlp, MlpTrace, Parameters, Tensor};

/// Upper bound on the common matched length.
pub const MAX_MATCH_LEN: usize = 1024;

/// Slot of the gate that source `j` uses toward source `other`.
pub fn gate_slot(j: usize, other: usize) -> usize {
    debug_assert_ne!(j, other);
    if other < j {
        other
    } else {
        other - 1
    }
}

/// Shared gate network: representation to `m - 1` directional gates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateParams {
    pub num_sources: usize,
    pub mlp: Mlp,
}

impl Parameters for GateParams {
    fn tensors(&self) -> Vec<Tensor<'_>> {
        let mut out = Vec::new();
        self.mlp.push_tensors("gate", &mut out);
        out
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        self.mlp.push_slices_mut(&mut out);
        out
    }
}

/// Gate values of one node with the state needed for backpropagation.
#[derive(Debug, Clone)]
pub struct GateForward {
    trace: MlpTrace,
    /// False where the logit was clamped.
    live: Vec<bool>,
    pub gates: Vec<f64>,
}

impl GateParams {
    pub fn new(rep_dim: usize, hidden: &[usize], num_sources: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dims = hidden.to_vec();
        dims.push(num_sources.saturating_sub(1));
        Self {
            num_sources,
            mlp: Mlp::init(rep_dim, &dims, false, &mut rng),
        }
    }

    pub fn forward(&self, rep: &[f64]) -> GateForward {
        let trace = self.mlp.forward(rep);
        let mut live = Vec::with_capacity(trace.output.len());
        let gates = trace
            .output
            .iter()
            .map(|&z| {
                let c = z.clamp(-nn::LOGIT_CLAMP, nn::LOGIT_CLAMP);
                live.push(c == z);
                nn::sigmoid(c)
            })
            .collect();
        GateForward { trace, live, gates }
    }

    pub fn gates(&self, rep: &[f64]) -> Vec<f64> {
        self.forward(rep).gates
    }

    /// Accumulates parameter gradients given `dL/dt` and returns `dL/d rep`.
    pub fn backward(&self, fwd: &GateForward, grad_gates: &[f64], grads: &mut GateParams) -> Vec<f64> {
        let g_logit: Vec<f64> = grad_gates
            .iter()
            .zip(&fwd.gates)
            .zip(&fwd.live)
            .map(|((g, t), &live)| if live { g * t * (1.0 - t) } else { 0.0 })
            .collect();
        self.mlp.backward(&fwd.trace, &g_logit, &mut grads.mlp)
    }
}

/// Random directions on the unit sphere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionSet {
    pub seed: u64,
    pub dim: usize,
    pub vectors: Vec<Vec<f64>>,
}

impl ProjectionSet {
    pub fn new(n_proj: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vectors = (0..n_proj)
            .map(|_| loop {
                let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let n = nn::dot(&v, &v).sqrt();
                if n > 1e-12 {
                    break v.into_iter().map(|x| x / n).collect();
                }
            })
            .collect();
        Self { seed, dim, vectors }
    }

    pub fn from_vectors(vectors: Vec<Vec<f64>>) -> Self {
        let dim = vectors.first().map_or(0, Vec::len);
        Self {
            seed: 0,
            dim,
            vectors,
        }
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

/// Resamples a sorted list of `n_actual` entries to `n_target` entries:
/// position `k` (1-based) reads entry `round(k / n_target * n_actual)`,
/// clamped to `[1, n_actual]`.
pub fn interpolate_indices(n_target: usize, n_actual: usize) -> Vec<usize> {
    assert!(n_target >= 1 && n_actual >= 1);
    (1..=n_target)
        .map(|k| {
            let r = (k as f64 / n_target as f64 * n_actual as f64).round() as usize;
            r.clamp(1, n_actual) - 1
        })
        .collect()
}

/// Sorting permutation of `values`, ties broken by index.
pub fn sort_order(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    idx
}

/// Result of the gated sliced matching cost.
#[derive(Debug, Clone, PartialEq)]
pub struct SlicedLoss {
    pub value: f64,
    /// Same cost with every gate at 1.
    pub ungated: f64,
    /// `grad_reps[j][i]`; empty for absent sources.
    pub grad_reps: Vec<Vec<Vec<f64>>>,
    /// `grad_gates[j][i][slot]`.
    pub grad_gates: Vec<Vec<Vec<f64>>>,
    /// Mean gated cost of each unordered populated pair `(j, j')`, `j < j'`.
    pub pair_costs: Vec<(usize, usize, f64)>,
}

struct ProjectionTerm {
    value: f64,
    ungated: f64,
    /// dL/d(projected value) per source and node.
    g_proj: Vec<Vec<f64>>,
    g_gates: Vec<Vec<Vec<f64>>>,
    pair: Vec<f64>,
}

/// Gated sliced matching cost. `reps[j]` holds the representations of
/// source `j` (empty when the source is absent) and `gates[j][i]` the `m - 1`
/// directional gates of its i-th node. When `plan_reps` is given, the sort
/// order of every projection is taken from it instead of `reps`, which keeps
/// the matching fixed while `reps` moves.
pub fn sliced_align_loss(
    reps: &[Vec<Vec<f64>>],
    gates: &[Vec<Vec<f64>>],
    projections: &ProjectionSet,
    plan_reps: Option<&[Vec<Vec<f64>>]>,
) -> Result<SlicedLoss> {
    let m = reps.len();
    if gates.len() != m {
        return Err(IcpaError::LengthMismatch {
            expected: m,
            actual: gates.len(),
        });
    }
    for j in 0..m {
        if gates[j].len() != reps[j].len() {
            return Err(IcpaError::LengthMismatch {
                expected: reps[j].len(),
                actual: gates[j].len(),
            });
        }
        if let Some(p) = plan_reps {
            if p[j].len() != reps[j].len() {
                return Err(IcpaError::LengthMismatch {
                    expected: reps[j].len(),
                    actual: p[j].len(),
                });
            }
        }
    }
    let populated: Vec<usize> = (0..m).filter(|&j| !reps[j].is_empty()).collect();
    let mut out = SlicedLoss {
        value: 0.0,
        ungated: 0.0,
        grad_reps: reps
            .iter()
            .map(|r| r.iter().map(|v| vec![0.0; v.len()]).collect())
            .collect(),
        grad_gates: gates
            .iter()
            .map(|g| g.iter().map(|v| vec![0.0; v.len()]).collect())
            .collect(),
        pair_costs: Vec::new(),
    };
    let p = populated.len();
    if p < 2 || projections.is_empty() {
        return Ok(out);
    }
    let mut pairs = Vec::new();
    for (x, &a) in populated.iter().enumerate() {
        for &b in &populated[x + 1..] {
            pairs.push((a, b));
        }
    }
    let len = populated
        .iter()
        .map(|&j| reps[j].len())
        .max()
        .unwrap()
        .min(MAX_MATCH_LEN);
    let interp: Vec<Vec<usize>> = (0..m)
        .map(|j| {
            if reps[j].is_empty() {
                Vec::new()
            } else {
                interpolate_indices(len, reps[j].len())
            }
        })
        .collect();
    // Each unordered pair stands for both ordered pairs, which are equal.
    let scale = 2.0 / (projections.len() * p * (p - 1)) as f64;

    let terms: Vec<ProjectionTerm> = projections
        .vectors
        .par_iter()
        .map(|xi| {
            let proj: Vec<Vec<f64>> = reps
                .iter()
                .map(|r| r.iter().map(|v| nn::dot(v, xi)).collect())
                .collect();
            let order: Vec<Vec<usize>> = match plan_reps {
                Some(pr) => pr
                    .iter()
                    .map(|r| sort_order(&r.iter().map(|v| nn::dot(v, xi)).collect::<Vec<_>>()))
                    .collect(),
                None => proj.iter().map(|v| sort_order(v)).collect(),
            };
            let mut term = ProjectionTerm {
                value: 0.0,
                ungated: 0.0,
                g_proj: proj.iter().map(|v| vec![0.0; v.len()]).collect(),
                g_gates: gates
                    .iter()
                    .map(|g| g.iter().map(|v| vec![0.0; v.len()]).collect())
                    .collect(),
                pair: Vec::with_capacity(pairs.len()),
            };
            for &(a, b) in &pairs {
                let sa = gate_slot(a, b);
                let sb = gate_slot(b, a);
                let mut pair_cost = 0.0;
                for k in 0..len {
                    let ia = order[a][interp[a][k]];
                    let ib = order[b][interp[b][k]];
                    let diff = proj[a][ia] - proj[b][ib];
                    let u = diff * diff;
                    let ta = gates[a][ia][sa];
                    let tb = gates[b][ib][sb];
                    let tt = ta * tb;
                    pair_cost += tt * u;
                    term.ungated += u;
                    term.g_proj[a][ia] += scale * tt * 2.0 * diff;
                    term.g_proj[b][ib] -= scale * tt * 2.0 * diff;
                    term.g_gates[a][ia][sa] += scale * tb * u;
                    term.g_gates[b][ib][sb] += scale * ta * u;
                }
                term.value += pair_cost;
                term.pair.push(pair_cost);
            }
            term
        })
        .collect();

    let mut pair_sum = vec![0.0; pairs.len()];
    for (t, xi) in terms.iter().zip(&projections.vectors) {
        out.value += t.value;
        out.ungated += t.ungated;
        for (s, v) in pair_sum.iter_mut().zip(&t.pair) {
            *s += v;
        }
        for j in 0..m {
            for (i, &g) in t.g_proj[j].iter().enumerate() {
                if g != 0.0 {
                    for (o, x) in out.grad_reps[j][i].iter_mut().zip(xi) {
                        *o += g * x;
                    }
                }
            }
            for (dst, src) in out.grad_gates[j].iter_mut().zip(&t.g_gates[j]) {
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
    }
    out.value *= scale;
    out.ungated *= scale;
    out.pair_costs = pairs
        .iter()
        .zip(pair_sum)
        .map(|(&(a, b), s)| (a, b, s / projections.len() as f64))
        .collect();
    Ok(out)
}

fn binary_entropy(t: f64) -> f64 {
    -(t * t.ln() + (1.0 - t) * (1.0 - t).ln())
}

/// Mean per-gate entropy minus the entropy of the mean gate, with its
/// gradient. Low values mean each gate is decisive while the population as a
/// whole is mixed.
pub fn gate_loss(t: &[f64]) -> Result<(f64, Vec<f64>)> {
    if t.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    if let Some(&bad) = t.iter().find(|&&x| !(x > 0.0 && x < 1.0)) {
        return Err(IcpaError::GateOutOfRange(bad));
    }
    let n = t.len() as f64;
    let mean = t.iter().sum::<f64>() / n;
    let value = t.iter().map(|&x| binary_entropy(x)).sum::<f64>() / n - binary_entropy(mean);
    let shared = (mean / (1.0 - mean)).ln();
    let grad = t.iter().map(|&x| (((1.0 - x) / x).ln() + shared) / n).collect();
    Ok((value, grad))
}

/// Value and gradients of the alignment objective on one category batch.
#[derive(Debug, Clone)]
pub struct AlignOutcome {
    /// Sliced cost plus gate loss.
    pub value: f64,
    pub sliced: f64,
    pub ungated: f64,
    pub gate_loss: f64,
    pub pair_costs: Vec<(usize, usize, f64)>,
    /// Mean gate per source, over all its nodes and directions.
    pub mean_gates: Vec<Option<f64>>,
    pub grad_model: ModelParams,
    pub grad_gate: GateParams,
}

/// Alignment objective for per-source node contexts of one category.
/// Representations come from tower A. Gradients reach the model through
/// both the projected values and the gate inputs.
pub fn alignment_objective(
    model: &ModelParams,
    gate: &GateParams,
    contexts: &[Vec<NodeContext>],
    projections: &ProjectionSet,
) -> Result<AlignOutcome> {
    pooled_alignment_objective(model, gate, &[contexts], projections)
}

/// Alignment objective over several categories. Matching stays inside each
/// group and the sliced costs are averaged over groups, while every gate
/// population pools one direction across all groups.
pub fn pooled_alignment_objective(
    model: &ModelParams,
    gate: &GateParams,
    groups: &[&[Vec<NodeContext>]],
    projections: &ProjectionSet,
) -> Result<AlignOutcome> {
    let m = gate.num_sources;
    if let Some(bad) = groups.iter().find(|g| g.len() != m) {
        return Err(IcpaError::LengthMismatch {
            expected: m,
            actual: bad.len(),
        });
    }
    let k = groups.len().max(1) as f64;
    let mut fwd: Vec<Vec<Vec<NodeForward>>> = Vec::with_capacity(groups.len());
    let mut gfwd: Vec<Vec<Vec<GateForward>>> = Vec::with_capacity(groups.len());
    let mut gates: Vec<Vec<Vec<Vec<f64>>>> = Vec::with_capacity(groups.len());
    let mut grad_gates = Vec::with_capacity(groups.len());
    let mut grad_reps = Vec::with_capacity(groups.len());
    let (mut sliced_value, mut ungated) = (0.0, 0.0);
    let mut pair_costs = Vec::new();
    for contexts in groups {
        let f: Vec<Vec<NodeForward>> = contexts
            .iter()
            .map(|cs| cs.par_iter().map(|c| model.forward(c, Tower::A)).collect())
            .collect();
        let gf: Vec<Vec<GateForward>> = f
            .iter()
            .map(|fs| fs.iter().map(|x| gate.forward(&x.rep)).collect())
            .collect();
        let reps: Vec<Vec<Vec<f64>>> = f
            .iter()
            .map(|fs| fs.iter().map(|x| x.rep.clone()).collect())
            .collect();
        let g: Vec<Vec<Vec<f64>>> = gf
            .iter()
            .map(|gs| gs.iter().map(|x| x.gates.clone()).collect())
            .collect();
        let mut sliced = sliced_align_loss(&reps, &g, projections, None)?;
        sliced_value += sliced.value / k;
        ungated += sliced.ungated / k;
        pair_costs.extend(sliced.pair_costs.iter().copied());
        for per_source in sliced.grad_gates.iter_mut().chain(sliced.grad_reps.iter_mut()) {
            for v in per_source.iter_mut().flatten() {
                *v /= k;
            }
        }
        fwd.push(f);
        gfwd.push(gf);
        gates.push(g);
        grad_gates.push(sliced.grad_gates);
        grad_reps.push(sliced.grad_reps);
    }

    let mut gl = 0.0;
    for j in 0..m {
        if gates.iter().all(|g| g[j].is_empty()) {
            continue;
        }
        for slot in 0..m.saturating_sub(1) {
            let pop: Vec<f64> = gates.iter().flat_map(|g| g[j].iter().map(|t| t[slot])).collect();
            let (v, grad) = gate_loss(&pop)?;
            gl += v;
            let mut it = grad.into_iter();
            for gg in grad_gates.iter_mut() {
                for node in gg[j].iter_mut() {
                    node[slot] += it.next().unwrap();
                }
            }
        }
    }

    let mut grad_model = model.zeros_like();
    let mut grad_gate = gate.zeros_like();
    for (q, contexts) in groups.iter().enumerate() {
        for j in 0..m {
            for i in 0..contexts[j].len() {
                let mut g_rep = gate.backward(&gfwd[q][j][i], &grad_gates[q][j][i], &mut grad_gate);
                for (a, b) in g_rep.iter_mut().zip(&grad_reps[q][j][i]) {
                    *a += b;
                }
                model.backward(&contexts[j][i], Tower::A, &fwd[q][j][i], &g_rep, &mut grad_model);
            }
        }
    }
    let mean_gates = (0..m)
        .map(|j| {
            let all: Vec<f64> = gates.iter().flat_map(|g| g[j].iter().flatten().copied()).collect();
            (!all.is_empty()).then(|| all.iter().sum::<f64>() / all.len() as f64)
        })
        .collect();
    Ok(AlignOutcome {
        value: sliced_value + gl,
        sliced: sliced_value,
        ungated,
        gate_loss: gl,
        pair_costs,
        mean_gates,
        grad_model,
        grad_gate,
    })
}

/// Alignment term with the matching and gates fixed by a frozen model: the
/// frozen model's representations decide the sort orders and, through the
/// frozen gate network, the gate values, while the cost is evaluated on the
/// trainee's representations. Only the trainee receives gradients.
pub fn frozen_alignment(
    model: &ModelParams,
    frozen_model: &ModelParams,
    frozen_gate: &GateParams,
    contexts: &[Vec<NodeContext>],
    projections: &ProjectionSet,
) -> Result<(f64, ModelParams)> {
    let fwd: Vec<Vec<NodeForward>> = contexts
        .iter()
        .map(|cs| cs.par_iter().map(|c| model.forward(c, Tower::A)).collect())
        .collect();
    let reps: Vec<Vec<Vec<f64>>> = fwd
        .iter()
        .map(|fs| fs.iter().map(|f| f.rep.clone()).collect())
        .collect();
    let plan: Vec<Vec<Vec<f64>>> = contexts
        .iter()
        .map(|cs| {
            cs.par_iter()
                .map(|c| frozen_model.forward(c, Tower::A).rep)
                .collect()
        })
        .collect();
    let gates: Vec<Vec<Vec<f64>>> = plan
        .iter()
        .map(|ps| ps.iter().map(|p| frozen_gate.gates(p)).collect())
        .collect();
    let sliced = sliced_align_loss(&reps, &gates, projections, Some(&plan))?;
    let mut grads = model.zeros_like();
    for j in 0..contexts.len() {
        for i in 0..contexts[j].len() {
            model.backward(&contexts[j][i], Tower::A, &fwd[j][i], &sliced.grad_reps[j][i], &mut grads);
        }
    }
    Ok((sliced.value, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn ones(reps: &[Vec<Vec<f64>>], m: usize) -> Vec<Vec<Vec<f64>>> {
        reps.iter()
            .map(|r| r.iter().map(|_| vec![1.0; m - 1]).collect())
            .collect()
    }

    #[test]
    fn interpolation() {
        assert_eq!(interpolate_indices(4, 4), vec![0, 1, 2, 3]);
        assert_eq!(interpolate_indices(3, 1), vec![0, 0, 0]);
        let up = interpolate_indices(1024, 512);
        assert_eq!(up.len(), 1024);
        for (k, &i) in up.iter().enumerate() {
            assert_eq!(i, k / 2);
        }
        let down = interpolate_indices(3, 7);
        assert!(down.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(*down.last().unwrap(), 6);
    }

    #[test]
    fn projections_are_unit() {
        let p = ProjectionSet::new(128, 16, 5);
        assert_eq!(p.len(), 128);
        for v in &p.vectors {
            assert!((nn::dot(v, v).sqrt() - 1.0).abs() < 1e-9);
        }
        assert_eq!(p, ProjectionSet::new(128, 16, 5));
    }

    #[test]
    fn shifted_pair_costs_two() {
        let xi = ProjectionSet::from_vectors(vec![vec![1.0, 0.0]]);
        let reps = vec![
            vec![vec![2.0, 0.0], vec![0.0, 0.0]],
            vec![vec![1.0, 0.0], vec![3.0, 0.0]],
        ];
        let out = sliced_align_loss(&reps, &ones(&reps, 2), &xi, None).unwrap();
        assert!((out.value - 2.0).abs() < 1e-12);
        assert_eq!(out.pair_costs, vec![(0, 1, 2.0)]);
    }

    #[test]
    fn identical_sets_and_closed_gates_cost_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let set: Vec<Vec<f64>> = (0..6).map(|_| (0..3).map(|_| rng.random::<f64>()).collect()).collect();
        let mut shuffled = set.clone();
        shuffled.reverse();
        let reps = vec![set.clone(), shuffled];
        let p = ProjectionSet::new(16, 3, 2);
        assert!(sliced_align_loss(&reps, &ones(&reps, 2), &p, None).unwrap().value.abs() < 1e-15);
        let other = vec![set, (0..6).map(|_| vec![5.0, -1.0, 2.0]).collect()];
        let zeros: Vec<Vec<Vec<f64>>> = other.iter().map(|r| r.iter().map(|_| vec![0.0]).collect()).collect();
        assert_eq!(sliced_align_loss(&other, &zeros, &p, None).unwrap().value, 0.0);
    }

    #[test]
    fn single_source_is_skipped() {
        let reps = vec![vec![vec![1.0]], vec![]];
        let gates = vec![vec![vec![0.5]], vec![]];
        let out = sliced_align_loss(&reps, &gates, &ProjectionSet::new(4, 1, 0), None).unwrap();
        assert_eq!(out.value, 0.0);
    }

    #[test]
    fn sliced_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let sizes = [5usize, 3, 4];
        let reps: Vec<Vec<Vec<f64>>> = sizes
            .iter()
            .map(|&n| (0..n).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect())
            .collect();
        let gates: Vec<Vec<Vec<f64>>> = sizes
            .iter()
            .map(|&n| (0..n).map(|_| (0..2).map(|_| rng.random_range(0.1..0.9)).collect()).collect())
            .collect();
        let p = ProjectionSet::new(8, 3, 4);
        let base = sliced_align_loss(&reps, &gates, &p, None).unwrap();
        let h = 1e-6;
        for j in 0..3 {
            for i in 0..sizes[j] {
                for d in 0..3 {
                    let mut up = reps.clone();
                    up[j][i][d] += h;
                    let mut dn = reps.clone();
                    dn[j][i][d] -= h;
                    let fd = (sliced_align_loss(&up, &gates, &p, None).unwrap().value
                        - sliced_align_loss(&dn, &gates, &p, None).unwrap().value)
                        / (2.0 * h);
                    assert!((fd - base.grad_reps[j][i][d]).abs() < 1e-7);
                }
                for s in 0..2 {
                    let mut up = gates.clone();
                    up[j][i][s] += h;
                    let mut dn = gates.clone();
                    dn[j][i][s] -= h;
                    let fd = (sliced_align_loss(&reps, &up, &p, None).unwrap().value
                        - sliced_align_loss(&reps, &dn, &p, None).unwrap().value)
                        / (2.0 * h);
                    assert!((fd - base.grad_gates[j][i][s]).abs() < 1e-7);
                }
            }
        }
    }

    #[test]
    fn gate_loss_values() {
        let (v, _) = gate_loss(&[0.5; 7]).unwrap();
        assert!(v.abs() < 1e-12);
        let (v, _) = gate_loss(&[0.5, 1e-12, 1.0 - 1e-12]).unwrap();
        assert!((v - (std::f64::consts::LN_2 / 3.0 - std::f64::consts::LN_2)).abs() < 1e-9);
        let (v, _) = gate_loss(&[1e-12, 1.0 - 1e-12]).unwrap();
        assert!((v + std::f64::consts::LN_2).abs() < 1e-9);
        assert!(matches!(gate_loss(&[0.5, 1.0]), Err(IcpaError::GateOutOfRange(_))));
    }

    #[test]
    fn gate_loss_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t: Vec<f64> = (0..9).map(|_| rng.random_range(0.05..0.95)).collect();
        let (_, g) = gate_loss(&t).unwrap();
        let h = 1e-6;
        for i in 0..t.len() {
            let mut up = t.clone();
            up[i] += h;
            let mut dn = t.clone();
            dn[i] -= h;
            let fd = (gate_loss(&up).unwrap().0 - gate_loss(&dn).unwrap().0) / (2.0 * h);
            assert!((fd - g[i]).abs() / fd.abs().max(1e-3) < 1e-4);
        }
    }

    #[test]
    fn gate_slots() {
        assert_eq!(gate_slot(0, 1), 0);
        assert_eq!(gate_slot(1, 0), 0);
        assert_eq!(gate_slot(2, 1), 1);
        assert_eq!(gate_slot(1, 2), 1);
    }
}
