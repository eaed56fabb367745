//! Serializable run report. Everything here is a deterministic function of
//! the graph and the configuration; wall-clock timings live separately in
//! [`RunTimings`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{IcpaError, Result};
use crate::eval::RankingMetrics;
use crate::graph::MultiSourceGraph;
use crate::pareto::{componentwise_max, convexity_diagnostic, extract_front, huf, v_rec, TntReport};
use crate::trainer::TrainConfig;

pub const REPORT_FORMAT: &str = "icpa-report/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct EvalPoint {
    pub step: usize,
    /// Loss of every source on its fixed evaluation triples.
    pub losses: Vec<f64>,
    /// Value the early-stopping rule watches.
    pub validation: f64,
    /// Mean training objective since the previous evaluation.
    pub train_objective: Option<f64>,
    pub ungated_alignment: Option<f64>,
    pub mean_gate: Option<f64>,
    pub mean_weights: Option<Vec<f64>>,
    pub restricted_steps: usize,
}

impl EvalPoint {
    pub fn initial(losses: Vec<f64>, validation: f64) -> Self {
        Self {
            step: 0,
            losses,
            validation,
            train_objective: None,
            ungated_alignment: None,
            mean_gate: None,
            mean_weights: None,
            restricted_steps: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct PhaseReport {
    pub steps_run: usize,
    /// Step of the kept parameters.
    pub best_step: usize,
    pub curve: Vec<EvalPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct SooReport {
    pub source: usize,
    pub nu0: f64,
    pub initial_loss: f64,
    pub best_step: usize,
    pub steps_run: usize,
    pub curve: Vec<EvalPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct BaselineInfo {
    pub config_hash: String,
    pub seed: u64,
    pub steps: usize,
    pub nu0: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct GraphSummary {
    pub fingerprint: String,
    pub sources: usize,
    pub categories: usize,
    pub type_names: Vec<String>,
    pub nodes: Vec<usize>,
    pub edges: Vec<usize>,
    pub train_edges: Vec<usize>,
}

impl GraphSummary {
    pub fn of(graph: &MultiSourceGraph, train: &MultiSourceGraph) -> Self {
        Self {
            fingerprint: graph.fingerprint(),
            sources: graph.num_sources(),
            categories: graph.num_categories(),
            type_names: graph.type_names().to_vec(),
            nodes: graph.sources().iter().map(|s| s.len()).collect(),
            edges: graph.sources().iter().map(|s| s.edges().len()).collect(),
            train_edges: train.sources().iter().map(|s| s.edges().len()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct TargetReport {
    pub target: usize,
    /// Final per-source losses on the evaluation triples.
    pub losses: Vec<f64>,
    pub tnt: TntReport,
    pub heldout_risk: Vec<Option<f64>>,
    pub ranking: Option<RankingMetrics>,
}

impl TargetReport {
    pub fn new(target: usize, losses: Vec<f64>, tnt: TntReport) -> Self {
        Self {
            target,
            losses,
            tnt,
            heldout_risk: Vec::new(),
            ranking: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct CategoryGate {
    pub category: usize,
    pub mean_gate: Option<f64>,
    pub per_source: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct AlignmentDiagnostic {
    pub category: usize,
    pub sliced: f64,
    pub ungated: f64,
    pub gate_loss: f64,
    /// `(source_a, source_b, mean gated cost)`.
    pub pair_costs: Vec<(usize, usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct FrozenCheck {
    pub model_before: String,
    pub model_after: String,
    pub gate_before: String,
    pub gate_after: String,
    pub unchanged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct FrontReport {
    /// Per-source losses of every evaluated checkpoint.
    pub points: Vec<Vec<f64>>,
    pub front: Vec<usize>,
    /// Componentwise minimum of the baselines and the points.
    pub baseline: Vec<f64>,
    /// True when some checkpoint beat a baseline and the floor was lowered.
    pub baseline_lowered: bool,
    pub ceiling: Vec<f64>,
    pub huf: f64,
    pub huf_std_error: f64,
    pub v_rec: f64,
    pub v_rec_bound: f64,
    pub convexity: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct RunTimings {
    pub soo_seconds: f64,
    pub phase1_seconds: f64,
    pub phase2_seconds: f64,
    pub total_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct RunReport {
    pub format: String,
    pub config: TrainConfig,
    pub config_hash: String,
    pub seed: u64,
    pub graph: GraphSummary,
    pub baseline: BaselineInfo,
    pub soo: Vec<SooReport>,
    pub phase1: Option<PhaseReport>,
    pub phase2: Option<PhaseReport>,
    pub frozen_check: Option<FrozenCheck>,
    pub target: Option<TargetReport>,
    pub front: Option<FrontReport>,
    pub gates: Vec<CategoryGate>,
    pub alignment: Vec<AlignmentDiagnostic>,
    pub ndcg_gain: String,
}

impl RunReport {
    pub fn new(cfg: &TrainConfig, graph: GraphSummary, soo: Vec<SooReport>, nu0: Vec<f64>) -> Self {
        Self {
            format: REPORT_FORMAT.to_string(),
            config: cfg.clone(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            graph,
            baseline: BaselineInfo {
                config_hash: cfg.baseline_hash(),
                seed: cfg.seed,
                steps: cfg.phase1_steps + cfg.phase2_steps,
                nu0,
            },
            soo,
            phase1: None,
            phase2: None,
            frozen_check: None,
            target: None,
            front: None,
            gates: Vec::new(),
            alignment: Vec::new(),
            ndcg_gain: "linear".to_string(),
        }
    }

    /// Computes the front metrics over the checkpoint population. Fails on
    /// non-finite losses, which JSON cannot represent.
    pub fn finish(&mut self, population: Vec<Vec<f64>>) -> Result<()> {
        let target_losses = self.target.iter().flat_map(|t| t.losses.iter());
        if population
            .iter()
            .flatten()
            .chain(&self.baseline.nu0)
            .chain(target_losses)
            .any(|x| !x.is_finite())
        {
            return Err(IcpaError::NonFinite("run report losses".into()));
        }
        if !population.is_empty() {
            let nu0 = &self.baseline.nu0;
            let baseline: Vec<f64> = (0..nu0.len())
                .map(|j| population.iter().map(|p| p[j]).fold(nu0[j], f64::min))
                .collect();
            let lowered = baseline != *nu0;
            let idx = extract_front(&population);
            let front: Vec<Vec<f64>> = idx.iter().map(|&i| population[i].clone()).collect();
            let ceiling = componentwise_max(&population);
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            let vol = huf(&front, &baseline, &ceiling, &mut rng)?;
            let last = self
                .target
                .as_ref()
                .map(|t| t.losses.clone())
                .unwrap_or_else(|| population.last().unwrap().clone());
            let floor: Vec<f64> = baseline.iter().zip(&last).map(|(b, l)| b.min(*l)).collect();
            let (v, bound) = v_rec(&last, &floor)?;
            self.front = Some(FrontReport {
                convexity: convexity_diagnostic(&front),
                points: population,
                front: idx,
                baseline,
                baseline_lowered: lowered,
                ceiling,
                huf: vol.value,
                huf_std_error: vol.std_error,
                v_rec: v,
                v_rec_bound: bound,
            });
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

/// JSON Schema of [`RunReport`].
pub fn report_schema() -> serde_json::Value {
    serde_json::to_value(schemars::schema_for!(RunReport)).expect("schema serializes")
}
