use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use icpa_core::checkpoint::Checkpoint;
use icpa_core::graph::{self, generate_synthetic, SyntheticSpec};
use icpa_core::report::{report_schema, RunReport, REPORT_FORMAT};
use icpa_core::trainer::{run_icpa, Ablation, BaselineCache, TrainConfig};
use icpa_core::verify::{check_names, run_suite, SuiteSizes, VerifyOptions};

#[derive(Parser)]
#[command(name = "icpa", version, about = "Multi-source graph entity matching with Pareto-aligned training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic multi-source graph with planted clusters.
    Generate(GenerateArgs),
    /// Train baselines and the two-phase model, then write a report.
    Train(TrainArgs),
    /// Cross-check the fast paths against brute-force oracles.
    Verify(VerifyArgs),
    /// Summarize a report, or print the report schema.
    Report(ReportArgs),
}

fn unit_interval(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("{s:?} is not a number"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside [0, 1]"))
    }
}

fn positive(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("{s:?} is not a number"))?;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("{v} must be positive"))
    }
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 2)]
    sources: usize,
    #[arg(long, default_value_t = 4)]
    categories: usize,
    /// Nodes per source.
    #[arg(long, default_value_t = 200)]
    nodes: usize,
    /// Fraction of categories whose cluster correspondence is permuted.
    #[arg(long, default_value_t = 0.0, value_parser = unit_interval)]
    conflict: f64,
    /// Edge probability inside a cluster.
    #[arg(long, default_value_t = 0.3, value_parser = unit_interval)]
    density: f64,
    #[arg(long, default_value_t = 2)]
    clusters: usize,
    /// Cross-category links per node.
    #[arg(long, default_value_t = 2)]
    cross_links: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum AblateArg {
    Align,
    Pareto,
    Front,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory holding nodes.tsv and edges.tsv.
    #[arg(long)]
    data: PathBuf,
    /// TOML file with training settings; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    target: Option<usize>,
    #[arg(long, value_parser = positive)]
    beta: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    ablate: Option<AblateArg>,
    /// Only train the single-source baselines.
    #[arg(long)]
    soo_only: bool,
    #[arg(long)]
    phase1_steps: Option<usize>,
    #[arg(long)]
    phase2_steps: Option<usize>,
    #[arg(long)]
    eps_pref: Option<f64>,
    /// Baseline cache file, read if present and rewritten afterwards.
    #[arg(long)]
    baseline_cache: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Run only the named check; repeatable.
    #[arg(long = "only", value_parser = clap::builder::PossibleValuesParser::new(check_names()))]
    only: Vec<String>,
    /// Print the results as JSON.
    #[arg(long)]
    json: bool,
    /// Test hook: corrupt every HUF value.
    #[arg(long, hide = true)]
    corrupt_huf: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Report to summarize.
    #[arg(required_unless_present = "schema")]
    path: Option<PathBuf>,
    /// Print the report JSON Schema instead.
    #[arg(long)]
    schema: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Verify(a) => verify(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("ICPA_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .with_context(|| format!("ICPA_THREADS={raw:?} is not a positive integer"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn generate(a: GenerateArgs) -> Result<ExitCode> {
    let spec = SyntheticSpec {
        sources: a.sources,
        categories: a.categories,
        nodes_per_source: a.nodes,
        edge_density: a.density,
        conflict_rate: a.conflict,
        clusters_per_category: a.clusters,
        cross_links: a.cross_links,
        seed: a.seed,
    };
    let g = generate_synthetic(&spec)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    graph::write(&g.graph, a.out.join("nodes.tsv"), a.out.join("edges.tsv"))?;
    graph::write_correspondence(&g.correspondence, a.out.join("correspondence.tsv"))?;
    let conflicted: Vec<usize> = (0..spec.categories).filter(|&c| g.conflicted[c]).collect();
    println!(
        "wrote {} sources, {} categories, conflicted categories {conflicted:?} to {}",
        spec.sources,
        spec.categories,
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn load_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => TrainConfig::default(),
    };
    if let Some(v) = a.target {
        cfg.target = v;
    }
    if let Some(v) = a.beta {
        cfg.beta = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.ablate {
        cfg.ablation = match v {
            AblateArg::Align => Ablation::NoAlign,
            AblateArg::Pareto => Ablation::NoPareto,
            AblateArg::Front => Ablation::NoFront,
        };
    }
    if a.soo_only {
        cfg.soo_only = true;
    }
    if let Some(v) = a.phase1_steps {
        cfg.phase1_steps = v;
    }
    if let Some(v) = a.phase2_steps {
        cfg.phase2_steps = v;
    }
    if let Some(v) = a.eps_pref {
        cfg.eps_pref = v;
    }
    if !(cfg.beta > 0.0) {
        bail!("beta must be positive");
    }
    Ok(cfg)
}

fn write_json(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn train(a: TrainArgs) -> Result<ExitCode> {
    let cfg = load_config(&a)?;
    let g = graph::load(a.data.join("nodes.tsv"), a.data.join("edges.tsv"))?;
    let mut cache = match &a.baseline_cache {
        Some(p) if p.exists() => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        _ => BaselineCache::default(),
    };
    let run = run_icpa(&g, &cfg, Some(&mut cache))?;

    let ckpt = a.out.join("checkpoints");
    fs::create_dir_all(&ckpt).with_context(|| format!("creating {}", ckpt.display()))?;
    write_json(&a.out.join("report.json"), &run.report.to_json()?)?;
    write_json(&a.out.join("timings.json"), &(serde_json::to_string_pretty(&run.timings)? + "\n"))?;
    Checkpoint::of_model(&run.model).save(&ckpt.join("model.json"))?;
    if let Some(f) = &run.frozen {
        Checkpoint::of_model(&f.model).save(&ckpt.join("frozen_model.json"))?;
        Checkpoint::of_gate(&f.gate).save(&ckpt.join("frozen_gate.json"))?;
    }
    for (j, m) in run.soo_models.iter().enumerate() {
        if let Some(m) = m {
            Checkpoint::of_model(m).save(&ckpt.join(format!("soo_{j}.json")))?;
        }
    }
    if let Some(p) = &a.baseline_cache {
        write_json(p, &(serde_json::to_string_pretty(&cache)? + "\n"))?;
    }
    print_summary(&run.report);
    println!("wrote {}", a.out.join("report.json").display());
    Ok(ExitCode::SUCCESS)
}

fn verify(a: VerifyArgs) -> Result<ExitCode> {
    let opts = VerifyOptions {
        seed: a.seed,
        corrupt_huf: a.corrupt_huf,
    };
    let only: Option<BTreeSet<String>> = (!a.only.is_empty()).then(|| a.only.into_iter().collect());
    let results = run_suite(&opts, &SuiteSizes::default(), only.as_ref())?;
    let ok = results.iter().all(|r| r.passed());
    if a.json {
        println!("{}", serde_json::to_string_pretty(&results)?);
    } else {
        for r in &results {
            let verdict = if r.passed() { "PASS" } else { "FAIL" };
            let worst = r.worst.map(|w| format!(" worst={w:.3e}")).unwrap_or_default();
            let tol = r.tolerance.map(|t| format!(" tol={t:e}")).unwrap_or_default();
            println!("{verdict} {} trials={} failures={}{worst}{tol}", r.name, r.trials, r.failures);
            for d in &r.dumps {
                println!("    {d}");
            }
        }
        println!("{}", if ok { "all checks passed" } else { "some checks failed" });
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
}

fn print_summary(r: &RunReport) {
    println!("config {} seed {}", r.config_hash, r.seed);
    println!("baseline nu0 {:?}", r.baseline.nu0.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>());
    if let Some(t) = &r.target {
        println!(
            "target {} losses {:?} tnt {:?}",
            t.target,
            t.losses.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>(),
            t.tnt.epsilon.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>()
        );
        if let Some(m) = &t.ranking {
            println!("ranking ndcg@{} {:.4} f@{} {:.4} over {} queries", m.k, m.ndcg, m.k, m.f_measure, m.queries);
        }
    }
    if let Some(f) = &r.front {
        println!(
            "front {} of {} points huf {:.4} (se {:.4}) v_rec {:.4} (bound {:.4}) convexity {}",
            f.front.len(),
            f.points.len(),
            f.huf,
            f.huf_std_error,
            f.v_rec,
            f.v_rec_bound,
            fmt_opt(f.convexity)
        );
    }
    for g in &r.gates {
        println!("category {} mean gate {}", g.category, fmt_opt(g.mean_gate));
    }
}

fn report(a: ReportArgs) -> Result<ExitCode> {
    if a.schema {
        println!("{}", serde_json::to_string_pretty(&report_schema())?);
        return Ok(ExitCode::SUCCESS);
    }
    let path = a.path.expect("clap requires a path without --schema");
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let r: RunReport = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if r.format != REPORT_FORMAT {
        bail!("unsupported report format {:?}", r.format);
    }
    print_summary(&r);
    Ok(ExitCode::SUCCESS)
}
