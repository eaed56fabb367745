//! Named cross-checks of the fast paths against the brute-force oracles.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::{pooled_alignment_objective, sliced_align_loss, GateParams, ProjectionSet};
use crate::error::Result;
use crate::graph::{generate_synthetic, SyntheticSpec};
use crate::model::{ModelConfig, ModelParams, NodeContext, TripleContext};
use crate::nn::Parameters;
use crate::oracle::{
    achievable_deltas, central_difference, enumerate_front, exact_ot_1d, grid_hypervolume, verify_constrained_minimum,
    verify_minima_on_front, ConstrainedOutcome,
};
use crate::pareto::{extract_front, huf, huf_with_samples, sample_lambda};
use crate::sampler::{Sampler, SamplerConfig};

/// Failures kept per check; the count is always complete.
const MAX_DUMPS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Test hook: inflates every HUF value so the HUF checks must fail.
    pub corrupt_huf: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            corrupt_huf: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub trials: usize,
    pub failures: usize,
    /// Worst observed error, where the check measures one.
    pub worst: Option<f64>,
    pub tolerance: Option<f64>,
    /// Descriptions of the first failing instances.
    pub dumps: Vec<String>,
}

impl CheckResult {
    fn new(name: &str, tolerance: Option<f64>) -> Self {
        Self {
            name: name.to_string(),
            trials: 0,
            failures: 0,
            worst: None,
            tolerance,
            dumps: Vec::new(),
        }
    }

    pub fn passed(&self) -> bool {
        self.failures == 0 && self.trials > 0
    }

    fn record(&mut self, ok: bool, dump: impl FnOnce() -> String) {
        self.trials += 1;
        if !ok {
            self.failures += 1;
            if self.dumps.len() < MAX_DUMPS {
                self.dumps.push(dump());
            }
        }
    }

    fn observe(&mut self, err: f64) {
        self.worst = Some(self.worst.map_or(err, |w: f64| w.max(err)));
    }
}

fn rng_for(opts: &VerifyOptions, check: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(check);
    rng
}

fn corrupt(opts: &VerifyOptions, v: f64) -> f64 {
    if opts.corrupt_huf {
        v * 1.1 + 0.1
    } else {
        v
    }
}

fn unit(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Sorted matching under one projection equals the exact 1D transport cost.
pub fn check_sorted_match(opts: &VerifyOptions, instances: usize) -> Result<CheckResult> {
    let tol = 1e-9;
    let mut out = CheckResult::new("sorted_match_equals_exact_ot", Some(tol));
    let mut rng = rng_for(opts, 1);
    for _ in 0..instances {
        let n = rng.random_range(1..=8);
        let dim = rng.random_range(1..=4);
        let reps: Vec<Vec<Vec<f64>>> = (0..2)
            .map(|_| (0..n).map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect()).collect())
            .collect();
        let dir = unit(dim, &mut rng);
        let gates = vec![vec![vec![1.0]; n]; 2];
        let sliced = sliced_align_loss(&reps, &gates, &ProjectionSet::from_vectors(vec![dir.clone()]), None)?;
        let proj = |r: &Vec<f64>| r.iter().zip(&dir).map(|(a, b)| a * b).sum::<f64>();
        let a: Vec<f64> = reps[0].iter().map(proj).collect();
        let b: Vec<f64> = reps[1].iter().map(proj).collect();
        let exact = exact_ot_1d(&a, &b)?;
        let err = (sliced.value - exact).abs();
        out.observe(err);
        out.record(err <= tol, || format!("a={a:?} b={b:?} sliced={} exact={exact}", sliced.value));
    }
    Ok(out)
}

fn random_space(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Vec<Vec<f64>> {
    // Coarse grid values make ties and duplicates common.
    let levels = rng.random_range(3..=40);
    (0..n)
        .map(|_| (0..m).map(|_| rng.random_range(0..levels) as f64).collect())
        .collect()
}

/// Front extraction agrees with the pairwise scan.
pub fn check_front_extraction(opts: &VerifyOptions, trials: usize) -> Result<CheckResult> {
    let mut out = CheckResult::new("front_matches_pairwise_scan", None);
    let mut rng = rng_for(opts, 2);
    for _ in 0..trials {
        let m = rng.random_range(2..=4);
        let space = random_space(&mut rng, m, 500);
        let fast = extract_front(&space);
        let slow = enumerate_front(&space);
        out.record(fast == slow, || format!("m={m} fast={fast:?} scan={slow:?}"));
    }
    Ok(out)
}

/// Every objective's minimum is attained on the front.
pub fn check_minima_on_front(opts: &VerifyOptions, trials: usize) -> Result<CheckResult> {
    let mut out = CheckResult::new("front_attains_every_minimum", None);
    let mut rng = rng_for(opts, 3);
    for _ in 0..trials {
        let m = rng.random_range(2..=4);
        let n = rng.random_range(1..=1000);
        let space = random_space(&mut rng, m, n);
        let res = verify_minima_on_front(&space);
        out.record(res.is_ok(), || format!("m={m} n={n}: {}", res.unwrap_err()));
    }
    Ok(out)
}

/// Constrained minimizers of the excess loss meet the front.
pub fn check_constrained_minimum(opts: &VerifyOptions, trials: usize) -> Result<CheckResult> {
    let mut out = CheckResult::new("constrained_minimizer_on_front", None);
    let mut rng = rng_for(opts, 4);
    for _ in 0..trials {
        let m = rng.random_range(2..=4);
        let n = rng.random_range(2..=300);
        let space = random_space(&mut rng, m, n);
        let j = rng.random_range(0..m);
        let f1 = rng.random_range(0..n);
        let options = achievable_deltas(&space, j, f1);
        // f1 is dominated by or equal to some front point, so options is never empty.
        let picked = &options[rng.random_range(0..options.len())];
        let shrink: f64 = rng.random_range(0.0..=1.0);
        let delta: Vec<f64> = picked.iter().map(|d| d * shrink).collect();
        let res = verify_constrained_minimum(&space, j, f1, &delta);
        let ok = matches!(res, Ok(ConstrainedOutcome::Witness { .. }));
        out.record(ok, || format!("m={m} n={n} j={j} f1={f1} delta={delta:?}: {res:?}"));
    }
    Ok(out)
}

/// Exact two-objective volumes against inclusion-exclusion hand values.
pub fn check_huf_exact(opts: &VerifyOptions) -> Result<CheckResult> {
    let tol = 1e-12;
    let mut out = CheckResult::new("huf_exact_hand_cases", Some(tol));
    let mut rng = rng_for(opts, 5);
    let cases: Vec<(Vec<Vec<f64>>, Vec<f64>, Vec<f64>, f64)> = vec![
        (vec![vec![2.0, 3.0]], vec![0.0, 0.0], vec![2.0, 3.0], 6.0),
        (vec![vec![1.0, 3.0], vec![3.0, 1.0]], vec![0.0, 0.0], vec![3.0, 3.0], 5.0),
        (
            vec![vec![1.0, 4.0], vec![2.0, 2.0], vec![4.0, 1.0]],
            vec![0.0, 0.0],
            vec![4.0, 4.0],
            4.0 + 4.0 + 4.0 - 2.0 - 2.0,
        ),
        (vec![vec![1.0, 1.0]], vec![1.0, 1.0], vec![1.0, 1.0], 0.0),
        (vec![vec![3.0, 5.0]], vec![1.0, 2.0], vec![3.0, 5.0], 6.0),
    ];
    for (front, base, ceil, want) in cases {
        let got = corrupt(opts, huf(&front, &base, &ceil, &mut rng)?.value);
        let err = (got - want).abs();
        out.observe(err);
        out.record(err <= tol, || format!("front={front:?} base={base:?} got={got} want={want}"));
    }
    Ok(out)
}

/// Samples drawn by [`check_huf_monte_carlo`]. At this budget the standard
/// error stays above the discretization error of a 200-per-axis grid, so
/// the grid is a fair reference. The production sample count is checked
/// against [`crate::oracle::exact_hypervolume`] in the unit tests instead.
pub const HUF_CHECK_SAMPLES: usize = 20_000;

/// Three-objective Monte Carlo volumes against a grid count.
pub fn check_huf_monte_carlo(opts: &VerifyOptions, fronts: usize, resolution: usize) -> Result<CheckResult> {
    let mut out = CheckResult::new("huf_monte_carlo_within_3_se", Some(3.0));
    let mut rng = rng_for(opts, 6);
    for _ in 0..fronts {
        let n = rng.random_range(1..=6);
        let pts: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..3).map(|_| rng.random_range(0.5..4.0)).collect())
            .collect();
        let front: Vec<Vec<f64>> = extract_front(&pts).into_iter().map(|i| pts[i].clone()).collect();
        let base = vec![0.0; 3];
        let ceil = crate::pareto::componentwise_max(&front);
        let vol = huf_with_samples(&front, &base, &ceil, HUF_CHECK_SAMPLES, &mut rng)?;
        let grid = grid_hypervolume(&front, &base, &ceil, resolution)?;
        let got = corrupt(opts, vol.value);
        let z = (got - grid).abs() / vol.std_error.max(1e-12);
        out.observe(z);
        out.record(z <= 3.0, || format!("front={front:?} mc={got}±{} grid={grid}", vol.std_error));
    }
    Ok(out)
}

fn micro_setup(seed: u64) -> Result<(crate::graph::MultiSourceGraph, ModelParams, GateParams)> {
    let graph = generate_synthetic(&SyntheticSpec {
        sources: 2,
        categories: 2,
        nodes_per_source: 8,
        edge_density: 0.6,
        conflict_rate: 0.5,
        clusters_per_category: 2,
        cross_links: 1,
        seed,
    })?
    .graph;
    let config = ModelConfig {
        embed_dim: 4,
        hidden_dims: vec![6, 4],
        gate_hidden: vec![3],
        ..ModelConfig::default()
    };
    let model = ModelParams::new(config.clone(), &graph, seed)?;
    let gate = GateParams::new(config.rep_dim(), &config.gate_hidden, 2, seed ^ 0x5eed);
    Ok((graph, model, gate))
}

fn assign<P: Parameters>(p: &mut P, flat: &[f64]) {
    let mut at = 0;
    for s in p.slices_mut() {
        let n = s.len();
        s.copy_from_slice(&flat[at..at + n]);
        at += n;
    }
}

/// Value and analytic gradient of the first-phase objective on fixed
/// contexts: weighted edge losses plus `beta` times the alignment
/// objective.
struct MicroObjective {
    triples: Vec<Vec<TripleContext>>,
    groups: Vec<Vec<Vec<NodeContext>>>,
    lambda: Vec<f64>,
    projections: ProjectionSet,
    beta: f64,
}

impl MicroObjective {
    fn value_and_grad(&self, model: &ModelParams, gate: &GateParams) -> Result<(f64, Vec<f64>)> {
        let mut total = 0.0;
        let mut gm = model.zeros_like();
        for (t, &w) in self.triples.iter().zip(&self.lambda) {
            let (v, g) = model.edge_loss_contexts(t)?;
            total += w * v;
            gm.axpy(w, &g);
        }
        let groups: Vec<&[Vec<NodeContext>]> = self.groups.iter().map(|g| g.as_slice()).collect();
        let a = pooled_alignment_objective(model, gate, &groups, &self.projections)?;
        total += self.beta * a.value;
        gm.axpy(self.beta, &a.grad_model);
        let mut gg = a.grad_gate;
        gg.scale(self.beta);
        let mut flat = gm.flatten();
        flat.extend(gg.flatten());
        Ok((total, flat))
    }
}

/// Analytic gradients of the first-phase objective against central
/// differences on a micro configuration.
pub fn check_gradient_audit(opts: &VerifyOptions, seeds: usize) -> Result<CheckResult> {
    let tol = 1e-4;
    let mut out = CheckResult::new("phase1_gradient_matches_finite_differences", Some(tol));
    for s in 0..seeds as u64 {
        let seed = opts.seed.wrapping_mul(1000).wrapping_add(s);
        let (graph, model, gate) = micro_setup(seed)?;
        let mut rng = rng_for(opts, 100 + s);
        let sampler = Sampler::new(
            &graph,
            SamplerConfig {
                batch_size: 8,
                ..SamplerConfig::default()
            },
        )?;
        let mut triples = Vec::new();
        for j in 0..graph.num_sources() {
            let mut t = Vec::new();
            for c in 0..graph.num_categories() {
                t.extend(sampler.triples_in(&graph, j, c, 3, &mut rng));
            }
            triples.push(model.triple_contexts(&graph, &t, &mut rng)?);
        }
        let picks = sampler.align_sample(&graph, &mut rng);
        let mut groups: Vec<Vec<Vec<NodeContext>>> = Vec::with_capacity(picks.len());
        for per_source in &picks {
            let mut g = Vec::with_capacity(per_source.len());
            for (j, nodes) in per_source.iter().enumerate() {
                g.push(
                    nodes
                        .iter()
                        .map(|&n| model.sample_context(&graph, j, n, &mut rng))
                        .collect::<Result<Vec<_>>>()?,
                );
            }
            groups.push(g);
        }
        let obj = MicroObjective {
            triples,
            groups,
            lambda: sample_lambda(graph.num_sources(), &mut rng),
            projections: ProjectionSet::new(16, model.rep_dim(), seed),
            beta: 1.0,
        };
        let (_, analytic) = obj.value_and_grad(&model, &gate)?;
        let split = model.num_params();
        let x0: Vec<f64> = model.flatten().into_iter().chain(gate.flatten()).collect();
        let mut probe_model = model.clone();
        let mut probe_gate = gate.clone();
        let numeric = central_difference(
            |x| {
                assign(&mut probe_model, &x[..split]);
                assign(&mut probe_gate, &x[split..]);
                obj.value_and_grad(&probe_model, &probe_gate).map(|r| r.0).unwrap_or(f64::NAN)
            },
            &x0,
            1e-6,
        );
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let norm = analytic
            .iter()
            .map(|a| a * a)
            .sum::<f64>()
            .sqrt()
            .max(numeric.iter().map(|a| a * a).sum::<f64>().sqrt())
            .max(1e-12);
        let err = diff / norm;
        out.observe(err);
        out.record(err < tol, || format!("seed={seed} relative error {err:e} over {} parameters", x0.len()));
    }
    Ok(out)
}

/// Sizes of the suite. The defaults are the full acceptance sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteSizes {
    pub ot_instances: usize,
    pub front_trials: usize,
    pub minima_trials: usize,
    pub constrained_trials: usize,
    pub huf_fronts: usize,
    pub huf_resolution: usize,
    pub gradient_seeds: usize,
}

impl Default for SuiteSizes {
    fn default() -> Self {
        Self {
            ot_instances: 500,
            front_trials: 20,
            minima_trials: 100,
            constrained_trials: 100,
            huf_fronts: 20,
            huf_resolution: 200,
            gradient_seeds: 10,
        }
    }
}

/// Runs every check; `only` restricts the run to the named checks.
pub fn run_suite(opts: &VerifyOptions, sizes: &SuiteSizes, only: Option<&BTreeSet<String>>) -> Result<Vec<CheckResult>> {
    type Check<'a> = (&'static str, Box<dyn Fn() -> Result<CheckResult> + 'a>);
    let checks: Vec<Check> = vec![
        ("sorted_match_equals_exact_ot", Box::new(|| check_sorted_match(opts, sizes.ot_instances))),
        ("front_matches_pairwise_scan", Box::new(|| check_front_extraction(opts, sizes.front_trials))),
        ("front_attains_every_minimum", Box::new(|| check_minima_on_front(opts, sizes.minima_trials))),
        ("constrained_minimizer_on_front", Box::new(|| check_constrained_minimum(opts, sizes.constrained_trials))),
        ("huf_exact_hand_cases", Box::new(|| check_huf_exact(opts))),
        (
            "huf_monte_carlo_within_3_se",
            Box::new(|| check_huf_monte_carlo(opts, sizes.huf_fronts, sizes.huf_resolution)),
        ),
        (
            "phase1_gradient_matches_finite_differences",
            Box::new(|| check_gradient_audit(opts, sizes.gradient_seeds)),
        ),
    ];
    checks
        .into_iter()
        .filter(|(name, _)| only.is_none_or(|o| o.contains(*name)))
        .map(|(_, f)| f())
        .collect()
}

pub fn check_names() -> [&'static str; 7] {
    [
        "sorted_match_equals_exact_ot",
        "front_matches_pairwise_scan",
        "front_attains_every_minimum",
        "constrained_minimizer_on_front",
        "huf_exact_hand_cases",
        "huf_monte_carlo_within_3_se",
        "phase1_gradient_matches_finite_differences",
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SuiteSizes {
        SuiteSizes {
            ot_instances: 50,
            front_trials: 3,
            minima_trials: 10,
            constrained_trials: 10,
            huf_fronts: 3,
            huf_resolution: 200,
            gradient_seeds: 1,
        }
    }

    #[test]
    fn small_suite_passes() {
        for r in run_suite(&VerifyOptions::default(), &small(), None).unwrap() {
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn corrupted_huf_is_caught_by_name() {
        let opts = VerifyOptions {
            corrupt_huf: true,
            ..VerifyOptions::default()
        };
        let only: BTreeSet<String> = ["huf_exact_hand_cases", "huf_monte_carlo_within_3_se", "sorted_match_equals_exact_ot"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let res = run_suite(&opts, &small(), Some(&only)).unwrap();
        let failed: Vec<&str> = res.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
        assert_eq!(failed, vec!["huf_exact_hand_cases", "huf_monte_carlo_within_3_se"]);
    }
}
