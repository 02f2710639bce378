//! Command-line front end: `tune` searches schedules for a graph's
//! operators, `optimize` assembles the best-per-node plan, `run` executes
//! a plan over tensor files, and `report` folds the artifacts into CSV
//! tables. Every artifact embeds the hash of the manifest that produced
//! it plus the seed, so a result can always be traced to its exact
//! invocation; with the synthetic evaluator, reruns of the same manifest
//! reproduce artifacts byte for byte.
//!
//! Exit codes: 0 success, 2 configuration error (bad flags, unreadable
//! files), 3 evaluation failure (kernel or search machinery).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cache::CacheStore;
use crate::error::{Error, Result};
use crate::evaluator::MeasureOptions;
use crate::graph::json::{load_graph, save_graph};
use crate::graph::passes::{constant_fold, fuse_operators, transform_layout};
use crate::graph::{Graph, Layout};
use crate::planner::{
    optimize_graph, EvaluatorChoice, InferencePlan, NodeTuneReport, PlannerOptions,
    SearchStrategy, TuneOptions,
};
use crate::report::{
    write_ledger_csv, write_node_histories, write_per_op_speedup_csv,
    write_strategy_comparison_csv, Provenance,
};
use crate::runtime::{compare_with_reference, execute};
use crate::schedule::{load_templates, ScheduleTemplate};
use crate::tensor_io::{read_tensor, write_tensor};

#[derive(Parser)]
#[command(name = "wpt", version, about = "Operator auto-tuning and inference-plan optimization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Search schedules for every tunable operator of a graph.
    Tune(TuneArgs),
    /// Tune, select the best implementation per node, and emit a plan.
    Optimize(OptimizeArgs),
    /// Execute a plan over input tensor files.
    Run(RunArgs),
    /// Aggregate tuning artifacts into CSV tables.
    Report(ReportArgs),
}

#[derive(Args)]
struct SearchFlags {
    /// Graph JSON file.
    #[arg(long)]
    graph: PathBuf,
    /// Schedule template file (TOML or JSON); built-in conv template when
    /// omitted.
    #[arg(long)]
    templates: Option<PathBuf>,
    /// genetic, rl, random, all, or a comma-separated subset.
    #[arg(long, default_value = "all")]
    strategy: String,
    /// synthetic or measured.
    #[arg(long, default_value = "synthetic")]
    evaluator: String,
    /// Synthetic-surface noise amplitude.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Evaluation cap per strategy per operator.
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Tuning-cache directory; WPT_CACHE_DIR is the fallback. No cache
    /// when neither is set.
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Output directory for artifacts.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TuneArgs {
    #[command(flatten)]
    search: SearchFlags,
}

#[derive(Args)]
struct OptimizeArgs {
    #[command(flatten)]
    search: SearchFlags,
    /// Convert the graph to this layout (nchw or nhwc) before tuning.
    #[arg(long)]
    layout: Option<String>,
}

#[derive(Args)]
struct RunArgs {
    /// Graph JSON file (the optimized graph the plan was built for).
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    templates: Option<PathBuf>,
    /// Plan JSON produced by `optimize`.
    #[arg(long)]
    plan: PathBuf,
    /// Input tensor binding, `node_id=file.npy`; repeatable.
    #[arg(long = "input")]
    inputs: Vec<String>,
    /// Also run the reference interpreter and record the max-abs
    /// difference.
    #[arg(long)]
    verify: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory holding tune/optimize summaries.
    #[arg(long)]
    logs: PathBuf,
    /// Output directory; defaults to the log directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Everything that determines a command's behavior, hashed into the
/// provenance stamp carried by all artifacts.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub graph: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub templates: Option<String>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub strategies: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub evaluator: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub budget: Option<usize>,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layout: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub plan: Option<String>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub inputs: Vec<String>,
    pub out: String,
}

impl RunManifest {
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("manifest serializes");
        let mut h = Sha256::new();
        h.update(text.as_bytes());
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TuneSummary {
    pub manifest_hash: String,
    pub seed: u64,
    pub evaluator: String,
    pub strategies: Vec<String>,
    pub total_evaluations: usize,
    pub reports: Vec<NodeTuneReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizeSummary {
    pub manifest_hash: String,
    pub seed: u64,
    pub evaluator: String,
    pub strategies: Vec<String>,
    pub evaluations: usize,
    pub static_estimate_ms: f64,
    pub plan_file: String,
    pub graph_file: String,
    pub reports: Vec<NodeTuneReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub manifest_hash: String,
    pub seed: u64,
    pub plan_file: String,
    pub static_estimate_ms: f64,
    pub measured_total_ms: f64,
    pub output_files: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_abs_diff_vs_reference: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportSummary {
    pub manifest_hash: String,
    pub seed: u64,
    pub source_summary: String,
    pub files: Vec<String>,
}

/// Parses the CLI and runs the chosen command, returning the process exit
/// code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Tune(args) => cmd_tune(&args),
        Command::Optimize(args) => cmd_optimize(&args),
        Command::Run(args) => cmd_run(&args),
        Command::Report(args) => cmd_report(&args),
    };
    match result {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            if err.is_evaluation_failure() {
                3
            } else {
                2
            }
        }
    }
}

fn parse_strategies(text: &str) -> Result<Vec<SearchStrategy>> {
    if text == "all" {
        return Ok(vec![SearchStrategy::Genetic, SearchStrategy::Rl, SearchStrategy::Random]);
    }
    let mut out = Vec::new();
    for part in text.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        out.push(SearchStrategy::parse(part)?);
    }
    if out.is_empty() {
        return Err(Error::EmptyStrategySet);
    }
    Ok(out)
}

fn parse_evaluator(name: &str, noise: f64) -> Result<EvaluatorChoice> {
    match name {
        "synthetic" => Ok(EvaluatorChoice::Synthetic { noise }),
        "measured" => Ok(EvaluatorChoice::Measured { opts: MeasureOptions::default() }),
        other => Err(Error::InvalidParams(format!("unknown evaluator '{other}'"))),
    }
}

fn parse_layout(name: &str) -> Result<Layout> {
    match name {
        "nchw" => Ok(Layout::Nchw),
        "nhwc" => Ok(Layout::Nhwc),
        other => Err(Error::InvalidParams(format!("unknown layout '{other}'"))),
    }
}

fn load_template_set(path: &Option<PathBuf>) -> Result<Vec<ScheduleTemplate>> {
    match path {
        Some(p) => {
            let templates = load_templates(p)?;
            if templates.is_empty() {
                return Err(Error::malformed("template file", format!("{}: empty", p.display())));
            }
            Ok(templates)
        }
        None => Ok(vec![ScheduleTemplate::conv_default()]),
    }
}

fn resolve_cache(flag: &Option<PathBuf>) -> Result<Option<CacheStore>> {
    let dir = flag
        .clone()
        .or_else(|| std::env::var_os("WPT_CACHE_DIR").map(PathBuf::from));
    dir.map(CacheStore::open).transpose()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
    }
    let text =
        serde_json::to_string_pretty(value).map_err(|e| Error::malformed("summary", e))?;
    fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::malformed("summary", format!("{}: {e}", path.display())))
}

/// Trajectory data lives in the per-node history files; the embedded
/// reports keep only the per-strategy bests.
fn strip_details(reports: &[NodeTuneReport]) -> Vec<NodeTuneReport> {
    let mut out = reports.to_vec();
    for report in &mut out {
        for outcome in report.outcome.per_strategy.values_mut() {
            outcome.detail = None;
        }
    }
    out
}

fn manifest_for_search(command: &str, args: &SearchFlags, layout: Option<&String>) -> RunManifest {
    RunManifest {
        command: command.to_string(),
        graph: Some(args.graph.display().to_string()),
        templates: args.templates.as_ref().map(|p| p.display().to_string()),
        strategies: match parse_strategies(&args.strategy) {
            Ok(list) => list.iter().map(|s| s.name().to_string()).collect(),
            Err(_) => vec![args.strategy.clone()],
        },
        evaluator: Some(args.evaluator.clone()),
        noise: Some(args.noise),
        budget: args.budget,
        seed: args.seed,
        cache_dir: args.cache_dir.as_ref().map(|p| p.display().to_string()),
        layout: layout.cloned(),
        plan: None,
        inputs: Vec::new(),
        out: args.out.display().to_string(),
    }
}

fn run_search(
    graph: &Graph,
    args: &SearchFlags,
    provenance: &Provenance,
) -> Result<crate::planner::OptimizeOutcome> {
    let strategies = parse_strategies(&args.strategy)?;
    let evaluator = parse_evaluator(&args.evaluator, args.noise)?;
    let templates = load_template_set(&args.templates)?;
    let cache = resolve_cache(&args.cache_dir)?;
    let options = PlannerOptions {
        strategies,
        evaluator,
        tune: TuneOptions { budget: args.budget, seed: args.seed },
    };
    let outcome = optimize_graph(graph, &templates[0], &options, cache.as_ref())?;
    let history_dir = args.out.join("history");
    for report in &outcome.tuned {
        write_node_histories(&history_dir, provenance, report)?;
    }
    Ok(outcome)
}

fn cmd_tune(args: &TuneArgs) -> Result<()> {
    let manifest = manifest_for_search("tune", &args.search, None);
    let provenance = Provenance { manifest_hash: manifest.hash(), seed: args.search.seed };
    let graph = load_graph(&args.search.graph)?;
    let outcome = run_search(&graph, &args.search, &provenance)?;

    let summary = TuneSummary {
        manifest_hash: provenance.manifest_hash.clone(),
        seed: args.search.seed,
        evaluator: args.search.evaluator.clone(),
        strategies: manifest.strategies.clone(),
        total_evaluations: outcome.evaluations,
        reports: strip_details(&outcome.tuned),
    };
    write_json(&args.search.out.join("tune_summary.json"), &summary)?;
    println!(
        "tuned {} operators, {} evaluations",
        summary.reports.len(),
        summary.total_evaluations
    );
    Ok(())
}

fn cmd_optimize(args: &OptimizeArgs) -> Result<()> {
    let manifest = manifest_for_search("optimize", &args.search, args.layout.as_ref());
    let provenance = Provenance { manifest_hash: manifest.hash(), seed: args.search.seed };

    let mut graph = load_graph(&args.search.graph)?;
    graph = constant_fold(&graph)?;
    graph = fuse_operators(&graph)?;
    if let Some(layout) = &args.layout {
        graph = transform_layout(&graph, parse_layout(layout)?)?;
    }

    let mut outcome = run_search(&graph, &args.search, &provenance)?;
    outcome.plan.manifest_hash = provenance.manifest_hash.clone();
    outcome.plan.seed = args.search.seed;

    let plan_file = args.search.out.join("plan.json");
    write_json(&plan_file, &outcome.plan)?;
    let graph_file = args.search.out.join("optimized_graph.json");
    save_graph(&graph, &graph_file)?;

    let summary = OptimizeSummary {
        manifest_hash: provenance.manifest_hash.clone(),
        seed: args.search.seed,
        evaluator: args.search.evaluator.clone(),
        strategies: manifest.strategies.clone(),
        evaluations: outcome.evaluations,
        static_estimate_ms: outcome.plan.static_estimate_ms,
        plan_file: plan_file.display().to_string(),
        graph_file: graph_file.display().to_string(),
        reports: strip_details(&outcome.tuned),
    };
    write_json(&args.search.out.join("optimize_summary.json"), &summary)?;
    println!(
        "plan over {} nodes, static estimate {:.4} ms, {} evaluations",
        outcome.plan.nodes.len(),
        outcome.plan.static_estimate_ms,
        outcome.evaluations
    );
    Ok(())
}

fn parse_input_bindings(specs: &[String]) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for spec in specs {
        let (id, path) = spec.split_once('=').ok_or_else(|| {
            Error::InvalidParams(format!("input '{spec}' is not of the form node_id=file.npy"))
        })?;
        out.insert(id.to_string(), PathBuf::from(path));
    }
    Ok(out)
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let manifest = RunManifest {
        command: "run".to_string(),
        graph: Some(args.graph.display().to_string()),
        templates: args.templates.as_ref().map(|p| p.display().to_string()),
        strategies: Vec::new(),
        evaluator: None,
        noise: None,
        budget: None,
        seed: 0,
        cache_dir: None,
        layout: None,
        plan: Some(args.plan.display().to_string()),
        inputs: args.inputs.clone(),
        out: args.out.display().to_string(),
    };
    let graph = load_graph(&args.graph)?;
    let templates = load_template_set(&args.templates)?;
    let plan: InferencePlan = read_json(&args.plan)?;
    // Artifacts stay traceable to the optimize run that made the plan.
    let provenance =
        Provenance { manifest_hash: manifest.hash(), seed: plan.seed };

    let mut inputs = BTreeMap::new();
    for (id, path) in parse_input_bindings(&args.inputs)? {
        inputs.insert(id, read_tensor(&path)?);
    }

    let outcome = execute(&graph, &plan, &templates, &inputs)?;
    let verify_diff = if args.verify {
        Some(compare_with_reference(&graph, &plan, &templates, &inputs)?)
    } else {
        None
    };

    let out_dir = args.out.join("outputs");
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let mut output_files = BTreeMap::new();
    for (id, tensor) in &outcome.outputs {
        let path = out_dir.join(format!("{id}.npy"));
        write_tensor(&path, tensor)?;
        output_files.insert(id.clone(), path.display().to_string());
    }
    write_ledger_csv(&args.out.join("ledger.csv"), &provenance, &outcome.ledger)?;

    let summary = RunSummary {
        manifest_hash: provenance.manifest_hash.clone(),
        seed: plan.seed,
        plan_file: args.plan.display().to_string(),
        static_estimate_ms: plan.static_estimate_ms,
        measured_total_ms: outcome.ledger.iter().map(|e| e.runtime_ms).sum(),
        output_files,
        max_abs_diff_vs_reference: verify_diff,
    };
    write_json(&args.out.join("run_summary.json"), &summary)?;
    match verify_diff {
        Some(diff) => println!(
            "executed {} nodes, total {:.4} ms, max abs diff vs reference {diff:.3e}",
            outcome.ledger.len(),
            summary.measured_total_ms
        ),
        None => println!(
            "executed {} nodes, total {:.4} ms",
            outcome.ledger.len(),
            summary.measured_total_ms
        ),
    }
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> Result<()> {
    let out = args.out.clone().unwrap_or_else(|| args.logs.clone());
    let manifest = RunManifest {
        command: "report".to_string(),
        graph: None,
        templates: None,
        strategies: Vec::new(),
        evaluator: None,
        noise: None,
        budget: None,
        seed: 0,
        cache_dir: None,
        layout: None,
        plan: None,
        inputs: Vec::new(),
        out: out.display().to_string(),
    };

    let optimize_path = args.logs.join("optimize_summary.json");
    let tune_path = args.logs.join("tune_summary.json");
    let (reports, seed, source) = if optimize_path.exists() {
        let summary: OptimizeSummary = read_json(&optimize_path)?;
        (summary.reports, summary.seed, optimize_path)
    } else if tune_path.exists() {
        let summary: TuneSummary = read_json(&tune_path)?;
        (summary.reports, summary.seed, tune_path)
    } else {
        return Err(Error::InvalidParams(format!(
            "no tune_summary.json or optimize_summary.json under {}",
            args.logs.display()
        )));
    };

    let provenance = Provenance { manifest_hash: manifest.hash(), seed };
    let speedup = out.join("per_op_speedup.csv");
    let comparison = out.join("strategy_comparison.csv");
    write_per_op_speedup_csv(&speedup, &provenance, &reports)?;
    write_strategy_comparison_csv(&comparison, &provenance, &reports)?;

    let summary = ReportSummary {
        manifest_hash: provenance.manifest_hash.clone(),
        seed,
        source_summary: source.display().to_string(),
        files: vec![speedup.display().to_string(), comparison.display().to_string()],
    };
    write_json(&out.join("report_summary.json"), &summary)?;
    println!("wrote {} and {}", summary.files[0], summary.files[1]);
    Ok(())
}
