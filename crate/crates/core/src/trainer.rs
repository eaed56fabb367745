//! Two-phase training: a shared alignment model first, then a model for one
//! target source trained with preference-constrained weights against the
//! frozen alignment. Also runs the single-source baselines.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::align::{alignment_objective, frozen_alignment, GateParams, ProjectionSet};
use crate::error::{IcpaError, Result};
use crate::eval::{empirical_risk, fixed_triples, ranking_metrics, split_edges, EvalSplit};
use crate::graph::MultiSourceGraph;
use crate::model::{ModelConfig, ModelParams, NodeContext, TripleContext};
use crate::nn::{hex, Parameters};
use crate::pareto::{pmtl_weights, sample_lambda, tnt, Preference};
use crate::report::{
    AlignmentDiagnostic, CategoryGate, EvalPoint, FrozenCheck, GraphSummary, PhaseReport, RunReport,
    RunTimings, SooReport, TargetReport,
};
use crate::sampler::{CategoryBatch, Sampler, SamplerConfig};

/// Which parts of the method to switch off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    /// No alignment term in either phase.
    NoAlign,
    /// Fixed uniform loss weights in the second phase.
    NoPareto,
    /// One phase that learns the alignment and the preference weights together.
    NoFront,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default)]
pub struct TrainConfig {
    pub beta: f64,
    pub learning_rate: f64,
    pub adagrad_eps: f64,
    pub phase1_steps: usize,
    pub phase2_steps: usize,
    pub eps_pref: f64,
    pub seed: u64,
    pub target: usize,
    /// Early stop after this many evaluations without improvement.
    pub patience: Option<usize>,
    pub eval_every: usize,
    pub eval_triples: usize,
    pub heldout_fraction: f64,
    pub num_projections: usize,
    pub metric_k: usize,
    /// Start the second phase from the frozen representation model.
    pub warm_start: bool,
    pub ablation: Ablation,
    pub soo_only: bool,
    pub model: ModelConfig,
    pub sampler: SamplerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            learning_rate: 0.02,
            adagrad_eps: 1e-8,
            phase1_steps: 300,
            phase2_steps: 300,
            eps_pref: 0.05,
            seed: 0,
            target: 0,
            patience: Some(10),
            eval_every: 10,
            eval_triples: 256,
            heldout_fraction: 0.1,
            num_projections: 128,
            metric_k: 3,
            warm_start: true,
            ablation: Ablation::Full,
            soo_only: false,
            model: ModelConfig::default(),
            sampler: SamplerConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, num_sources: usize) -> Result<()> {
        let bad = |m: &str| Err(IcpaError::Config(m.to_string()));
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return bad("beta must be a non-negative finite number");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(self.eps_pref >= 0.0) {
            return bad("eps_pref must be non-negative");
        }
        if self.target >= num_sources {
            return Err(IcpaError::UnknownSource(self.target));
        }
        if self.eval_every == 0 || self.eval_triples == 0 {
            return bad("eval_every and eval_triples must be positive");
        }
        if self.num_projections == 0 || self.metric_k == 0 {
            return bad("num_projections and metric_k must be positive");
        }
        self.model.validate()
    }

    /// Short digest of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(&bytes))[..16].to_string()
    }

    /// Digest of the fields that determine a single-source baseline.
    pub fn baseline_hash(&self) -> String {
        let key = serde_json::json!({
            "learning_rate": self.learning_rate,
            "adagrad_eps": self.adagrad_eps,
            "steps": self.phase1_steps + self.phase2_steps,
            "patience": self.patience,
            "eval_every": self.eval_every,
            "eval_triples": self.eval_triples,
            "heldout_fraction": self.heldout_fraction,
            "model": self.model,
            "sampler": self.sampler,
        });
        hex(&Sha256::digest(key.to_string().as_bytes()))[..16].to_string()
    }
}

/// Per-parameter step sizes from accumulated squared gradients.
#[derive(Debug, Clone)]
pub struct Adagrad<P: Parameters> {
    pub learning_rate: f64,
    pub eps: f64,
    accum: P,
}

impl<P: Parameters> Adagrad<P> {
    pub fn new(params: &P, learning_rate: f64, eps: f64) -> Self {
        Self {
            learning_rate,
            eps,
            accum: params.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut P, grads: &P) {
        let lr = self.learning_rate;
        let eps = self.eps;
        let g = grads.tensors();
        for ((p, a), t) in params.slices_mut().into_iter().zip(self.accum.slices_mut()).zip(g) {
            for ((pi, ai), gi) in p.iter_mut().zip(a.iter_mut()).zip(t.data) {
                *ai += gi * gi;
                *pi -= lr * gi / (ai.sqrt() + eps);
            }
        }
    }
}

/// Independent random streams derived from one seed.
fn stream(seed: u64, tag: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag);
    rng
}

fn sub_seed(seed: u64, tag: u64) -> u64 {
    stream(seed, tag).next_u64()
}

const TAG_MODEL: u64 = 1;
const TAG_GATE: u64 = 2;
const TAG_SPLIT: u64 = 3;
const TAG_EVAL: u64 = 4;
const TAG_EVAL_PROJ: u64 = 5;
const TAG_PHASE1: u64 = 32;
const TAG_PHASE2: u64 = 48;
const TAG_SINGLE: u64 = 64;

struct EarlyStop {
    patience: Option<usize>,
    best: f64,
    since: usize,
}

impl EarlyStop {
    fn new(patience: Option<usize>) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            since: 0,
        }
    }

    /// Returns `(improved, stop)`.
    fn observe(&mut self, value: f64) -> (bool, bool) {
        if value < self.best {
            self.best = value;
            self.since = 0;
            (true, false)
        } else {
            self.since += 1;
            (false, self.patience.is_some_and(|p| self.since >= p))
        }
    }
}

/// Fixed per-source triples on which the per-source losses are measured.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub triples: Vec<Vec<crate::sampler::Triple>>,
    /// Fixed directions for measuring the alignment objective.
    pub projections: ProjectionSet,
}

impl EvalSet {
    pub fn new(graph: &MultiSourceGraph, cfg: &TrainConfig) -> Result<Self> {
        let triples = (0..graph.num_sources())
            .map(|j| fixed_triples(graph, j, cfg.eval_triples, &cfg.sampler, sub_seed(cfg.seed, TAG_EVAL + ((j as u64) << 8))))
            .collect::<Result<_>>()?;
        let projections = ProjectionSet::new(cfg.num_projections, cfg.model.rep_dim(), sub_seed(cfg.seed, TAG_EVAL_PROJ));
        Ok(Self { triples, projections })
    }

    /// Alignment objective averaged over categories, on every node.
    pub fn alignment(&self, model: &ModelParams, gate: &GateParams, graph: &MultiSourceGraph) -> Result<f64> {
        let d = alignment_diagnostics(model, gate, graph, &self.projections)?;
        Ok(d.iter().map(|a| a.sliced + a.gate_loss).sum::<f64>() / d.len().max(1) as f64)
    }

    /// Loss of every source under `model`.
    pub fn losses(&self, model: &ModelParams, graph: &MultiSourceGraph) -> Result<Vec<f64>> {
        self.triples
            .par_iter()
            .map(|t| empirical_risk(model, graph, t))
            .collect()
    }
}

/// Sampling state shared by every training loop.
struct Loop<'a> {
    graph: &'a MultiSourceGraph,
    cfg: &'a TrainConfig,
    sampler: Sampler,
    batch_rng: ChaCha8Rng,
    lambda_rng: ChaCha8Rng,
    align_rng: ChaCha8Rng,
    proj_seed: u64,
    projections: ProjectionSet,
    epoch_steps: usize,
}

impl<'a> Loop<'a> {
    fn new(graph: &'a MultiSourceGraph, cfg: &'a TrainConfig, tag: u64) -> Result<Self> {
        let sampler = Sampler::new(graph, cfg.sampler.clone())?;
        let total: usize = graph.sources().iter().map(|s| s.len()).sum();
        let proj_seed = sub_seed(cfg.seed, tag + 3);
        Ok(Self {
            graph,
            cfg,
            sampler,
            batch_rng: stream(cfg.seed, tag),
            lambda_rng: stream(cfg.seed, tag + 1),
            align_rng: stream(cfg.seed, tag + 2),
            proj_seed,
            projections: ProjectionSet::new(cfg.num_projections, cfg.model.rep_dim(), proj_seed),
            epoch_steps: total.div_ceil(cfg.sampler.batch_size).max(1),
        })
    }

    fn batch(&mut self) -> CategoryBatch {
        self.sampler.next_batch(self.graph, &mut self.batch_rng)
    }

    /// Projections are redrawn at the start of every epoch.
    fn refresh_projections(&mut self, step: usize) {
        if step > 0 && step % self.epoch_steps == 0 {
            let epoch = (step / self.epoch_steps) as u64;
            self.projections = ProjectionSet::new(
                self.cfg.num_projections,
                self.cfg.model.rep_dim(),
                self.proj_seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15),
            );
        }
    }

    /// Loss and gradient of each source present in the batch.
    fn source_losses(
        &mut self,
        model: &ModelParams,
        batch: &CategoryBatch,
        only: Option<usize>,
    ) -> Result<Vec<Option<(f64, ModelParams)>>> {
        let mut ctx: Vec<Option<Vec<TripleContext>>> = Vec::with_capacity(batch.triples.len());
        for (j, t) in batch.triples.iter().enumerate() {
            if t.is_empty() || only.is_some_and(|o| o != j) {
                ctx.push(None);
            } else {
                ctx.push(Some(model.triple_contexts(self.graph, t, &mut self.batch_rng)?));
            }
        }
        ctx.par_iter()
            .map(|c| c.as_ref().map(|c| model.edge_loss_contexts(c)).transpose())
            .collect()
    }

    fn align_contexts(&mut self, model: &ModelParams, batch: &CategoryBatch) -> Result<Vec<Vec<NodeContext>>> {
        batch
            .align_nodes
            .iter()
            .enumerate()
            .map(|(j, nodes)| {
                nodes
                    .iter()
                    .map(|&n| model.sample_context(self.graph, j, n, &mut self.align_rng))
                    .collect()
            })
            .collect()
    }
}

/// Outcome of one training loop.
#[derive(Debug, Clone)]
pub struct PhaseOutcome {
    pub model: ModelParams,
    pub gate: Option<GateParams>,
    pub report: PhaseReport,
    /// Per-source losses at every evaluation.
    pub population: Vec<Vec<f64>>,
}

fn check_finite<P: Parameters>(p: &P) -> Result<()> {
    p.check_finite()
}

fn init_model(graph: &MultiSourceGraph, cfg: &TrainConfig) -> Result<ModelParams> {
    ModelParams::new(cfg.model.clone(), graph, sub_seed(cfg.seed, TAG_MODEL))
}

fn init_gate(graph: &MultiSourceGraph, cfg: &TrainConfig) -> GateParams {
    GateParams::new(
        cfg.model.rep_dim(),
        &cfg.model.gate_hidden,
        graph.num_sources(),
        sub_seed(cfg.seed, TAG_GATE),
    )
}

#[derive(Default)]
struct Window {
    objective: Vec<f64>,
    ungated: Vec<f64>,
    gate_mean: Vec<f64>,
    restricted: usize,
    weights: Vec<Vec<f64>>,
}

impl Window {
    fn mean(v: &[f64]) -> Option<f64> {
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    fn mean_weights(&self) -> Option<Vec<f64>> {
        let first = self.weights.first()?;
        let n = self.weights.len() as f64;
        Some(
            (0..first.len())
                .map(|j| self.weights.iter().map(|w| w[j]).sum::<f64>() / n)
                .collect(),
        )
    }

    fn flush(&mut self, step: usize, losses: Vec<f64>, validation: f64) -> EvalPoint {
        let p = EvalPoint {
            step,
            losses,
            validation,
            train_objective: Self::mean(&self.objective),
            ungated_alignment: Self::mean(&self.ungated),
            mean_gate: Self::mean(&self.gate_mean),
            mean_weights: self.mean_weights(),
            restricted_steps: self.restricted,
        };
        *self = Self::default();
        p
    }
}

/// Trains on source `j` alone. Batches are drawn exactly as in the joint
/// loops, and only source `j`'s triples are used, so each step sees as many
/// examples of `j` as a joint step does.
pub fn run_soo(graph: &MultiSourceGraph, j: usize, cfg: &TrainConfig, eval: &EvalSet) -> Result<(ModelParams, SooReport)> {
    let s = graph.source(j)?;
    if s.is_empty() {
        return Err(IcpaError::Empty("source has no nodes"));
    }
    let mut model = init_model(graph, cfg)?;
    let mut opt = Adagrad::new(&model, cfg.learning_rate, cfg.adagrad_eps);
    // Same batch stream as the first joint phase.
    let mut lp = Loop::new(graph, cfg, TAG_PHASE1)?;
    let steps = cfg.phase1_steps + cfg.phase2_steps;
    let initial = empirical_risk(&model, graph, &eval.triples[j])?;
    let mut best = (initial, model.clone(), 0usize);
    let mut stop = EarlyStop::new(cfg.patience);
    stop.observe(initial);
    let mut curve = vec![EvalPoint::initial(vec![initial], initial)];
    let mut window = Window::default();
    let mut ran = 0;
    for step in 1..=steps {
        let batch = lp.batch();
        let mut losses = lp.source_losses(&model, &batch, Some(j))?;
        if let Some((l, g)) = losses[j].take() {
            opt.step(&mut model, &g);
            window.objective.push(l);
        }
        ran = step;
        if step % cfg.eval_every == 0 || step == steps {
            check_finite(&model)?;
            let v = empirical_risk(&model, graph, &eval.triples[j])?;
            curve.push(window.flush(step, vec![v], v));
            let (improved, halt) = stop.observe(v);
            if improved {
                best = (v, model.clone(), step);
            }
            if halt {
                break;
            }
        }
    }
    let (nu0, best_model, best_step) = best;
    Ok((
        best_model,
        SooReport {
            source: j,
            nu0,
            initial_loss: initial,
            best_step,
            steps_run: ran,
            curve,
        },
    ))
}

/// Baselines keyed by `(graph, baseline config hash, seed, source)`. A hit
/// skips the single-source run.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct BaselineCache {
    pub entries: BTreeMap<String, SooReport>,
}

impl BaselineCache {
    fn key(graph: &str, cfg: &TrainConfig, j: usize) -> String {
        format!("{}:{}:{}:{}", &graph[..16], cfg.baseline_hash(), cfg.seed, j)
    }

    pub fn get(&self, graph: &str, cfg: &TrainConfig, j: usize) -> Option<&SooReport> {
        self.entries.get(&Self::key(graph, cfg, j))
    }

    pub fn insert(&mut self, graph: &str, cfg: &TrainConfig, j: usize, r: SooReport) {
        self.entries.insert(Self::key(graph, cfg, j), r);
    }
}

fn combine(parts: &[(f64, &ModelParams)], template: &ModelParams) -> ModelParams {
    let mut g = template.zeros_like();
    for &(w, p) in parts {
        if w != 0.0 {
            g.axpy(w, p);
        }
    }
    g
}

/// First phase: random convex combinations of the per-source losses plus
/// the weighted alignment objective.
pub fn run_phase1(graph: &MultiSourceGraph, cfg: &TrainConfig, eval: &EvalSet) -> Result<PhaseOutcome> {
    let m = graph.num_sources();
    let mut model = init_model(graph, cfg)?;
    let mut gate = init_gate(graph, cfg);
    let mut opt = Adagrad::new(&model, cfg.learning_rate, cfg.adagrad_eps);
    let mut gopt = Adagrad::new(&gate, cfg.learning_rate, cfg.adagrad_eps);
    let mut lp = Loop::new(graph, cfg, TAG_PHASE1)?;
    let align_on = cfg.ablation != Ablation::NoAlign && m >= 2 && cfg.beta > 0.0;

    // The plateau watch follows the objective being trained.
    let validation = |l: &[f64], model: &ModelParams, gate: &GateParams| -> Result<f64> {
        let mean = l.iter().sum::<f64>() / m as f64;
        Ok(if align_on { mean + cfg.beta * eval.alignment(model, gate, graph)? } else { mean })
    };
    let initial = eval.losses(&model, graph)?;
    let v0 = validation(&initial, &model, &gate)?;
    let mut population = vec![initial.clone()];
    let mut curve = vec![EvalPoint::initial(initial, v0)];
    let mut stop = EarlyStop::new(cfg.patience);
    stop.observe(v0);
    let mut best = (model.clone(), gate.clone(), 0usize);
    let mut window = Window::default();
    let mut ran = 0;
    for step in 1..=cfg.phase1_steps {
        lp.refresh_projections(step);
        let batch = lp.batch();
        let losses = lp.source_losses(&model, &batch, None)?;
        let lambda = sample_lambda(m, &mut lp.lambda_rng);
        let mut objective = 0.0;
        let parts: Vec<(f64, &ModelParams)> = losses
            .iter()
            .zip(&lambda)
            .filter_map(|(l, &w)| l.as_ref().map(|(v, g)| {
                objective += w * v;
                (w, g)
            }))
            .collect();
        let mut grad = combine(&parts, &model);
        if align_on {
            let ctx = lp.align_contexts(&model, &batch)?;
            let out = alignment_objective(&model, &gate, &ctx, &lp.projections)?;
            objective += cfg.beta * out.value;
            grad.axpy(cfg.beta, &out.grad_model);
            let mut gg = out.grad_gate;
            gg.scale(cfg.beta);
            gopt.step(&mut gate, &gg);
            if out.pair_costs.len() > 0 {
                window.ungated.push(out.ungated);
            }
            let gm: Vec<f64> = out.mean_gates.iter().flatten().copied().collect();
            if let Some(x) = Window::mean(&gm) {
                window.gate_mean.push(x);
            }
        }
        opt.step(&mut model, &grad);
        window.objective.push(objective);
        ran = step;
        if step % cfg.eval_every == 0 || step == cfg.phase1_steps {
            check_finite(&model)?;
            check_finite(&gate)?;
            let l = eval.losses(&model, graph)?;
            let v = validation(&l, &model, &gate)?;
            population.push(l.clone());
            curve.push(window.flush(step, l, v));
            let (improved, halt) = stop.observe(v);
            if improved {
                best = (model.clone(), gate.clone(), step);
            }
            if halt {
                break;
            }
        }
    }
    let (model, gate, best_step) = best;
    Ok(PhaseOutcome {
        model,
        gate: Some(gate),
        report: PhaseReport {
            steps_run: ran,
            best_step,
            curve,
        },
        population,
    })
}

fn flat_grads(losses: &[Option<(f64, ModelParams)>], model: &ModelParams) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = model.num_params();
    let mut l = Vec::with_capacity(losses.len());
    let mut g = Vec::with_capacity(losses.len());
    for x in losses {
        match x {
            Some((v, p)) => {
                l.push(*v);
                g.push(p.flatten());
            }
            None => {
                l.push(0.0);
                g.push(vec![0.0; n]);
            }
        }
    }
    (l, g)
}

/// Frozen state of the first phase.
#[derive(Debug, Clone)]
pub struct Frozen {
    pub model: ModelParams,
    pub gate: GateParams,
}

/// Second phase for `cfg.target`: preference-weighted losses plus the
/// alignment term whose matching and gates come from the frozen model.
pub fn run_phase2(graph: &MultiSourceGraph, frozen: &Frozen, cfg: &TrainConfig, eval: &EvalSet) -> Result<(PhaseOutcome, FrozenCheck)> {
    let m = graph.num_sources();
    let j = cfg.target;
    let pref = Preference::new(m, j, cfg.eps_pref)?;
    let before = FrozenFingerprint::of(frozen);
    let mut model = if cfg.warm_start {
        frozen.model.clone()
    } else {
        init_model(graph, cfg)?
    };
    let mut opt = Adagrad::new(&model, cfg.learning_rate, cfg.adagrad_eps);
    let mut lp = Loop::new(graph, cfg, TAG_PHASE2 + ((j as u64) << 8))?;
    let align_on = cfg.ablation != Ablation::NoAlign && m >= 2 && cfg.beta > 0.0;

    let initial = eval.losses(&model, graph)?;
    let v0 = initial[j];
    let mut population = vec![initial.clone()];
    let mut curve = vec![EvalPoint::initial(initial, v0)];
    let mut stop = EarlyStop::new(cfg.patience);
    stop.observe(v0);
    let mut best = (model.clone(), 0usize);
    let mut window = Window::default();
    let mut ran = 0;
    for step in 1..=cfg.phase2_steps {
        lp.refresh_projections(step);
        let batch = lp.batch();
        let losses = lp.source_losses(&model, &batch, None)?;
        let w = step_weights(&losses, &model, &pref, cfg, &mut window)?;
        let mut objective = 0.0;
        let parts: Vec<(f64, &ModelParams)> = losses
            .iter()
            .zip(&w)
            .filter_map(|(l, &wj)| l.as_ref().map(|(v, g)| {
                objective += wj * v;
                (wj, g)
            }))
            .collect();
        let mut grad = combine(&parts, &model);
        if align_on {
            let ctx = lp.align_contexts(&model, &batch)?;
            let (v, g) = frozen_alignment(&model, &frozen.model, &frozen.gate, &ctx, &lp.projections)?;
            objective += cfg.beta * v;
            grad.axpy(cfg.beta, &g);
        }
        opt.step(&mut model, &grad);
        window.objective.push(objective);
        window.weights.push(w);
        ran = step;
        if step % cfg.eval_every == 0 || step == cfg.phase2_steps {
            check_finite(&model)?;
            let l = eval.losses(&model, graph)?;
            let v = l[j];
            population.push(l.clone());
            curve.push(window.flush(step, l, v));
            let (improved, halt) = stop.observe(v);
            if improved {
                best = (model.clone(), step);
            }
            if halt {
                break;
            }
        }
    }
    let after = FrozenFingerprint::of(frozen);
    let (model, best_step) = best;
    Ok((
        PhaseOutcome {
            model,
            gate: None,
            report: PhaseReport {
                steps_run: ran,
                best_step,
                curve,
            },
            population,
        },
        FrozenCheck {
            unchanged: before == after,
            model_before: before.model,
            gate_before: before.gate,
            model_after: after.model,
            gate_after: after.gate,
        },
    ))
}

/// Loss weights of one step: preference-constrained, or uniform when the
/// ablation asks for it.
fn step_weights(
    losses: &[Option<(f64, ModelParams)>],
    model: &ModelParams,
    pref: &Preference,
    cfg: &TrainConfig,
    window: &mut Window,
) -> Result<Vec<f64>> {
    let m = losses.len();
    if cfg.ablation == Ablation::NoPareto {
        return Ok(vec![1.0 / m as f64; m]);
    }
    let (l, g) = flat_grads(losses, model);
    let out = pmtl_weights(&l, &g, pref)?;
    if out.restricted {
        window.restricted += 1;
    }
    Ok(out.w)
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct FrozenFingerprint {
    model: String,
    gate: String,
}

impl FrozenFingerprint {
    fn of(f: &Frozen) -> Self {
        Self {
            model: f.model.fingerprint(),
            gate: f.gate.fingerprint(),
        }
    }
}

/// One phase that learns the alignment (with gates) while stepping on
/// preference-constrained weights.
pub fn run_single_phase(graph: &MultiSourceGraph, cfg: &TrainConfig, eval: &EvalSet) -> Result<PhaseOutcome> {
    let m = graph.num_sources();
    let j = cfg.target;
    let pref = Preference::new(m, j, cfg.eps_pref)?;
    let mut model = init_model(graph, cfg)?;
    let mut gate = init_gate(graph, cfg);
    let mut opt = Adagrad::new(&model, cfg.learning_rate, cfg.adagrad_eps);
    let mut gopt = Adagrad::new(&gate, cfg.learning_rate, cfg.adagrad_eps);
    let mut lp = Loop::new(graph, cfg, TAG_SINGLE)?;
    let steps = cfg.phase1_steps + cfg.phase2_steps;
    let align_on = m >= 2 && cfg.beta > 0.0;

    let initial = eval.losses(&model, graph)?;
    let v0 = initial[j];
    let mut population = vec![initial.clone()];
    let mut curve = vec![EvalPoint::initial(initial, v0)];
    let mut stop = EarlyStop::new(cfg.patience);
    stop.observe(v0);
    let mut best = (model.clone(), gate.clone(), 0usize);
    let mut window = Window::default();
    let mut ran = 0;
    for step in 1..=steps {
        lp.refresh_projections(step);
        let batch = lp.batch();
        let losses = lp.source_losses(&model, &batch, None)?;
        let w = step_weights(&losses, &model, &pref, cfg, &mut window)?;
        let mut objective = 0.0;
        let parts: Vec<(f64, &ModelParams)> = losses
            .iter()
            .zip(&w)
            .filter_map(|(l, &wj)| l.as_ref().map(|(v, g)| {
                objective += wj * v;
                (wj, g)
            }))
            .collect();
        let mut grad = combine(&parts, &model);
        if align_on {
            let ctx = lp.align_contexts(&model, &batch)?;
            let out = alignment_objective(&model, &gate, &ctx, &lp.projections)?;
            objective += cfg.beta * out.value;
            grad.axpy(cfg.beta, &out.grad_model);
            let mut gg = out.grad_gate;
            gg.scale(cfg.beta);
            gopt.step(&mut gate, &gg);
            window.ungated.push(out.ungated);
        }
        opt.step(&mut model, &grad);
        window.objective.push(objective);
        window.weights.push(w);
        ran = step;
        if step % cfg.eval_every == 0 || step == steps {
            check_finite(&model)?;
            let l = eval.losses(&model, graph)?;
            let v = l[j];
            population.push(l.clone());
            curve.push(window.flush(step, l, v));
            let (improved, halt) = stop.observe(v);
            if improved {
                best = (model.clone(), gate.clone(), step);
            }
            if halt {
                break;
            }
        }
    }
    let (model, gate, best_step) = best;
    Ok(PhaseOutcome {
        model,
        gate: Some(gate),
        report: PhaseReport {
            steps_run: ran,
            best_step,
            curve,
        },
        population,
    })
}

/// Mean gate per category over every node, with inference contexts.
pub fn gate_statistics(model: &ModelParams, gate: &GateParams, graph: &MultiSourceGraph) -> Result<Vec<CategoryGate>> {
    (0..graph.num_categories())
        .map(|c| {
            let part = graph.category_partition(c)?;
            let per_source: Vec<Option<f64>> = part
                .par_iter()
                .enumerate()
                .map(|(j, nodes)| {
                    if nodes.is_empty() || graph.num_sources() < 2 {
                        return Ok(None);
                    }
                    let mut s = 0.0;
                    let mut n = 0usize;
                    for &v in nodes {
                        let ctx = model.inference_context(graph, j, v)?;
                        let g = gate.gates(&model.represent(&ctx, crate::model::Tower::A).0);
                        s += g.iter().sum::<f64>();
                        n += g.len();
                    }
                    Ok((n > 0).then(|| s / n as f64))
                })
                .collect::<Result<_>>()?;
            let present: Vec<f64> = per_source.iter().flatten().copied().collect();
            Ok(CategoryGate {
                category: c,
                mean_gate: (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64),
                per_source,
            })
        })
        .collect()
}

/// Alignment objective of each category over all its nodes.
pub fn alignment_diagnostics(
    model: &ModelParams,
    gate: &GateParams,
    graph: &MultiSourceGraph,
    projections: &ProjectionSet,
) -> Result<Vec<AlignmentDiagnostic>> {
    let mut out = Vec::new();
    for c in 0..graph.num_categories() {
        let part = graph.category_partition(c)?;
        if part.iter().filter(|p| !p.is_empty()).count() < 2 {
            continue;
        }
        let ctx: Vec<Vec<NodeContext>> = part
            .iter()
            .enumerate()
            .map(|(j, nodes)| nodes.iter().map(|&v| model.inference_context(graph, j, v)).collect())
            .collect::<Result<_>>()?;
        let o = alignment_objective(model, gate, &ctx, projections)?;
        out.push(AlignmentDiagnostic {
            category: c,
            sliced: o.sliced,
            ungated: o.ungated,
            gate_loss: o.gate_loss,
            pair_costs: o.pair_costs,
        });
    }
    Ok(out)
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub report: RunReport,
    pub timings: RunTimings,
    pub frozen: Option<Frozen>,
    pub model: ModelParams,
    /// `None` where the baseline came from the cache.
    pub soo_models: Vec<Option<ModelParams>>,
}

/// Baselines, both phases (or the requested ablation) and the report.
pub fn run_icpa(graph: &MultiSourceGraph, cfg: &TrainConfig, cache: Option<&mut BaselineCache>) -> Result<RunArtifacts> {
    let m = graph.num_sources();
    cfg.validate(m)?;
    let mut timings = RunTimings::default();
    let t0 = Instant::now();

    let (train, split) = if cfg.heldout_fraction > 0.0 {
        split_edges(graph, cfg.heldout_fraction, cfg.sampler.num_negatives, sub_seed(cfg.seed, TAG_SPLIT))?
    } else {
        (
            graph.clone(),
            EvalSplit {
                seed: 0,
                triples: vec![Vec::new(); m],
            },
        )
    };
    let eval = EvalSet::new(&train, cfg)?;

    let t = Instant::now();
    let mut soo = Vec::with_capacity(m);
    let mut soo_models = Vec::with_capacity(m);
    let mut local = BaselineCache::default();
    let cache = cache.unwrap_or(&mut local);
    let need_models = m == 1 || cfg.soo_only;
    let graph_id = graph.fingerprint();
    for j in 0..m {
        match cache.get(&graph_id, cfg, j) {
            Some(hit) if !need_models => {
                soo.push(hit.clone());
                soo_models.push(None);
            }
            _ => {
                let (model, rep) = run_soo(&train, j, cfg, &eval)?;
                cache.insert(&graph_id, cfg, j, rep.clone());
                soo.push(rep);
                soo_models.push(Some(model));
            }
        }
    }
    timings.soo_seconds = t.elapsed().as_secs_f64();
    let nu0: Vec<f64> = soo.iter().map(|r| r.nu0).collect();

    let summary = GraphSummary::of(graph, &train);
    let mut report = RunReport::new(cfg, summary, soo, nu0.clone());

    if m == 1 || cfg.soo_only {
        let j = cfg.target;
        let model = soo_models[j].clone().expect("baselines are trained when their models are needed");
        let losses = eval.losses(&model, &train)?;
        let mut target = TargetReport::new(j, losses.clone(), tnt(&losses, &nu0)?);
        if m == 1 {
            target.tnt.epsilon = vec![0.0];
        }
        attach_heldout(&mut target, &model, &train, &split, cfg)?;
        report.target = Some(target);
        report.finish(vec![])?;
        timings.total_seconds = t0.elapsed().as_secs_f64();
        return Ok(RunArtifacts {
            report,
            timings,
            frozen: None,
            model,
            soo_models,
        });
    }

    let mut population = Vec::new();
    let (final_model, frozen) = if cfg.ablation == Ablation::NoFront {
        let t = Instant::now();
        let out = run_single_phase(&train, cfg, &eval)?;
        timings.phase2_seconds = t.elapsed().as_secs_f64();
        population.extend(out.population.iter().cloned());
        let gate = out.gate.clone().expect("single phase learns gates");
        report.gates = gate_statistics(&out.model, &gate, &train)?;
        report.phase2 = Some(out.report);
        (out.model, None)
    } else {
        let t = Instant::now();
        let p1 = run_phase1(&train, cfg, &eval)?;
        timings.phase1_seconds = t.elapsed().as_secs_f64();
        population.extend(p1.population.iter().cloned());
        let frozen = Frozen {
            model: p1.model.clone(),
            gate: p1.gate.clone().expect("phase 1 learns gates"),
        };
        report.gates = gate_statistics(&frozen.model, &frozen.gate, &train)?;
        let proj = ProjectionSet::new(cfg.num_projections, cfg.model.rep_dim(), sub_seed(cfg.seed, TAG_PHASE1 + 3));
        report.alignment = alignment_diagnostics(&frozen.model, &frozen.gate, &train, &proj)?;
        report.phase1 = Some(p1.report);
        let t = Instant::now();
        let (p2, check) = run_phase2(&train, &frozen, cfg, &eval)?;
        timings.phase2_seconds = t.elapsed().as_secs_f64();
        population.extend(p2.population.iter().cloned());
        report.phase2 = Some(p2.report);
        report.frozen_check = Some(check);
        (p2.model, Some(frozen))
    };

    let losses = eval.losses(&final_model, &train)?;
    let mut target = TargetReport::new(cfg.target, losses.clone(), tnt(&losses, &nu0)?);
    attach_heldout(&mut target, &final_model, &train, &split, cfg)?;
    report.target = Some(target);
    report.finish(population)?;
    timings.total_seconds = t0.elapsed().as_secs_f64();
    Ok(RunArtifacts {
        report,
        timings,
        frozen,
        model: final_model,
        soo_models,
    })
}

fn attach_heldout(
    target: &mut TargetReport,
    model: &ModelParams,
    train: &MultiSourceGraph,
    split: &EvalSplit,
    cfg: &TrainConfig,
) -> Result<()> {
    target.heldout_risk = split
        .triples
        .iter()
        .map(|t| if t.is_empty() { Ok(None) } else { empirical_risk(model, train, t).map(Some) })
        .collect::<Result<_>>()?;
    let t = &split.triples[cfg.target];
    if !t.is_empty() {
        target.ranking = Some(ranking_metrics(model, train, t, cfg.metric_k)?);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{generate_synthetic, SyntheticSpec};

    fn small(conflict: f64, sources: usize) -> MultiSourceGraph {
        generate_synthetic(&SyntheticSpec {
            sources,
            categories: 2,
            nodes_per_source: 40,
            conflict_rate: conflict,
            seed: 1,
            ..Default::default()
        })
        .unwrap()
        .graph
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            phase1_steps: 20,
            phase2_steps: 20,
            eval_every: 5,
            eval_triples: 32,
            num_projections: 8,
            patience: None,
            sampler: SamplerConfig {
                batch_size: 16,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn adagrad_first_step_is_signed_lr() {
        let g = small(0.0, 1);
        let mut p = ModelParams::new(ModelConfig::default(), &g, 0).unwrap();
        let start = p.clone();
        let mut grads = p.zeros_like();
        grads.embeddings[0] = 3.0;
        grads.embeddings[1] = -0.5;
        let mut opt = Adagrad::new(&p, 0.02, 1e-8);
        opt.step(&mut p, &grads);
        assert!((start.embeddings[0] - p.embeddings[0] - 0.02).abs() < 1e-9);
        assert!((p.embeddings[1] - start.embeddings[1] - 0.02).abs() < 1e-9);
        assert_eq!(p.embeddings[2], start.embeddings[2]);
    }

    #[test]
    fn soo_zero_steps_returns_initial_loss() {
        let g = small(0.0, 2);
        let cfg = TrainConfig {
            phase1_steps: 0,
            phase2_steps: 0,
            ..quick()
        };
        let eval = EvalSet::new(&g, &cfg).unwrap();
        let (model, rep) = run_soo(&g, 0, &cfg, &eval).unwrap();
        assert_eq!(rep.nu0, rep.initial_loss);
        assert_eq!(model, init_model(&g, &cfg).unwrap());
    }

    #[test]
    fn soo_is_deterministic_and_learns() {
        let g = small(0.0, 2);
        let cfg = TrainConfig {
            phase1_steps: 60,
            phase2_steps: 60,
            ..quick()
        };
        let eval = EvalSet::new(&g, &cfg).unwrap();
        let (_, a) = run_soo(&g, 1, &cfg, &eval).unwrap();
        let (_, b) = run_soo(&g, 1, &cfg, &eval).unwrap();
        assert_eq!(a, b);
        assert!(a.nu0 < a.initial_loss);
    }

    #[test]
    fn phase1_without_alignment_on_one_source_is_soo() {
        let g = small(0.0, 1);
        let cfg = TrainConfig {
            beta: 0.0,
            phase2_steps: 0,
            ..quick()
        };
        let eval = EvalSet::new(&g, &cfg).unwrap();
        let p1 = run_phase1(&g, &cfg, &eval).unwrap();
        let (_, soo) = run_soo(&g, 0, &cfg, &eval).unwrap();
        assert_eq!(p1.report.curve.len(), soo.curve.len());
        for (a, b) in p1.report.curve.iter().zip(&soo.curve) {
            assert_eq!(a.losses, b.losses);
            assert_eq!(a.train_objective, b.train_objective);
        }
    }

    #[test]
    fn phase2_leaves_frozen_state_untouched() {
        let g = small(0.5, 2);
        let cfg = quick();
        let eval = EvalSet::new(&g, &cfg).unwrap();
        let p1 = run_phase1(&g, &cfg, &eval).unwrap();
        let frozen = Frozen {
            model: p1.model,
            gate: p1.gate.unwrap(),
        };
        let (_, check) = run_phase2(&g, &frozen, &cfg, &eval).unwrap();
        assert!(check.unchanged);
        assert_eq!(check.model_before, check.model_after);
    }

    #[test]
    fn run_is_deterministic_and_ablations_differ() {
        let g = small(0.5, 2);
        let cfg = quick();
        let a = run_icpa(&g, &cfg, None).unwrap();
        let b = run_icpa(&g, &cfg, None).unwrap();
        assert_eq!(
            serde_json::to_string(&a.report).unwrap(),
            serde_json::to_string(&b.report).unwrap()
        );
        let mut fps = vec![a.model.fingerprint()];
        for ab in [Ablation::NoAlign, Ablation::NoPareto, Ablation::NoFront] {
            let r = run_icpa(&g, &TrainConfig { ablation: ab, ..cfg.clone() }, None).unwrap();
            fps.push(r.model.fingerprint());
        }
        fps.sort();
        fps.dedup();
        assert_eq!(fps.len(), 4);
    }

    #[test]
    fn single_source_run_reports_zero_transfer() {
        let g = small(0.0, 1);
        let r = run_icpa(&g, &quick(), None).unwrap();
        assert!(r.report.phase1.is_none());
        assert_eq!(r.report.target.unwrap().tnt.epsilon, vec![0.0]);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { target: 3, ..quick() }.validate(2).is_err());
        assert!(TrainConfig { beta: -1.0, ..quick() }.validate(2).is_err());
        assert_eq!(quick().hash(), quick().hash());
        assert_ne!(quick().hash(), TrainConfig { seed: 9, ..quick() }.hash());
    }
}
