//! Per-operator strategy tuning and plan assembly. For every tunable node
//! the planner runs the requested search strategies (consulting the tuning
//! cache first), registers the winners alongside the reference kernel as
//! implementation candidates, picks the fastest per node, and binds the
//! choices into a topologically ordered inference plan whose summed
//! runtimes form the plan's static cost estimate.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cache::{hardware_tag, cache_key, CacheEntry, CacheStore, CachedResult};
use crate::error::{Error, Result};
use crate::evaluator::{
    synthetic_node_cost, Evaluate, EvalResult, MeasureOptions, MeasuredEvaluator,
    SyntheticEvaluator,
};
use crate::genetic::{run_genetic, GaOutcome, GeneticConfig};
use crate::graph::{op_signature, Graph, Layout, NodeId, OperatorSpec, TensorSpec};
use crate::interp;
use crate::kernels::Tensor;
use crate::rl::{run_rl, RlConfig, RlOutcome};
use crate::schedule::{ScheduleConfig, ScheduleTemplate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchStrategy {
    Genetic,
    Rl,
    Random,
}

impl SearchStrategy {
    pub fn name(self) -> &'static str {
        match self {
            SearchStrategy::Genetic => "genetic",
            SearchStrategy::Rl => "rl",
            SearchStrategy::Random => "random",
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "genetic" => Ok(SearchStrategy::Genetic),
            "rl" => Ok(SearchStrategy::Rl),
            "random" => Ok(SearchStrategy::Random),
            other => Err(Error::InvalidParams(format!("unknown strategy '{other}'"))),
        }
    }
}

/// Where a selected implementation came from. The declared order is the
/// tie-break rule: on equal runtime a generated kernel beats the reference
/// library, and genetic beats RL.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StrategySource {
    #[serde(rename = "genetic")]
    GeneratedGenetic,
    #[serde(rename = "rl")]
    GeneratedRl,
    #[serde(rename = "reference")]
    ReferenceLibrary,
}

impl StrategySource {
    pub fn name(self) -> &'static str {
        match self {
            StrategySource::GeneratedGenetic => "genetic",
            StrategySource::GeneratedRl => "rl",
            StrategySource::ReferenceLibrary => "reference",
        }
    }
}

/// One implementation of an operator, registered for selection. Generated
/// candidates carry the schedule config that instantiates them; the
/// reference kernel carries none.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImplementationCandidate {
    pub source: StrategySource,
    pub config: Option<ScheduleConfig>,
    pub measured: Option<EvalResult>,
}

/// Fastest measured candidate; exact runtime ties fall back to the source
/// order so selection is deterministic.
pub fn select_best(candidates: &[ImplementationCandidate]) -> Result<&ImplementationCandidate> {
    if candidates.is_empty() {
        return Err(Error::NoCandidates);
    }
    let mut best: Option<(&ImplementationCandidate, f64)> = None;
    for cand in candidates {
        let measured = cand.measured.ok_or_else(|| {
            Error::InvalidParams(format!("{} candidate is unmeasured", cand.source.name()))
        })?;
        let better = match best {
            None => true,
            Some((cur, cur_ms)) => match measured.runtime_ms.total_cmp(&cur_ms) {
                std::cmp::Ordering::Less => true,
                std::cmp::Ordering::Equal => cand.source < cur.source,
                std::cmp::Ordering::Greater => false,
            },
        };
        if better {
            best = Some((cand, measured.runtime_ms));
        }
    }
    Ok(best.expect("nonempty candidates").0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomStep {
    pub eval: usize,
    pub runtime_ms: f64,
    pub best_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomOutcome {
    pub best: ScheduleConfig,
    pub best_runtime_ms: f64,
    pub evaluations: usize,
    pub history: Vec<RandomStep>,
}

/// Baseline search: independent uniform draws from the template, best-ever
/// kept. No seeding with known-good configs; this is the yardstick the
/// guided searches are compared against.
pub fn run_random(
    template: &ScheduleTemplate,
    evaluator: &dyn Evaluate,
    budget: usize,
    seed: u64,
) -> Result<RandomOutcome> {
    use rand::SeedableRng;
    template.validate_template()?;
    if budget == 0 {
        return Err(Error::InvalidParams("random search needs a positive budget".into()));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(ScheduleConfig, f64)> = None;
    let mut history = Vec::with_capacity(budget);
    for eval in 0..budget {
        let cfg = template.random_config(&mut rng)?;
        let result = evaluator.evaluate(&cfg)?;
        let ms = result.runtime_ms;
        if best.as_ref().is_none_or(|(_, b)| ms < *b) {
            best = Some((cfg, ms));
        }
        history.push(RandomStep { eval, runtime_ms: ms, best_ms: best.as_ref().unwrap().1 });
    }
    let (best, best_runtime_ms) = best.unwrap();
    Ok(RandomOutcome { best, best_runtime_ms, evaluations: budget, history })
}

/// Full trace of one strategy run, kept so the caller can write history
/// logs; cache hits have no trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RunDetail {
    Genetic(GaOutcome),
    Rl(RlOutcome),
    Random(RandomOutcome),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyOutcome {
    pub config: ScheduleConfig,
    pub runtime_ms: f64,
    /// Evaluator calls this strategy spent; 0 when served from cache.
    pub evaluations: usize,
    pub from_cache: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<RunDetail>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneOutcome {
    pub op_signature: String,
    pub template_id: String,
    pub per_strategy: BTreeMap<SearchStrategy, StrategyOutcome>,
}

impl TuneOutcome {
    pub fn total_evaluations(&self) -> usize {
        self.per_strategy.values().map(|s| s.evaluations).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TuneOptions {
    /// Evaluation cap applied to each strategy individually.
    pub budget: Option<usize>,
    pub seed: u64,
}

impl Default for TuneOptions {
    fn default() -> Self {
        Self { budget: None, seed: 0 }
    }
}

/// Decorrelates the per-strategy RNG streams that share one user seed.
fn derive_seed(base: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(tag.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

fn run_strategy(
    strategy: SearchStrategy,
    op: &OperatorSpec,
    template: &ScheduleTemplate,
    evaluator: &dyn Evaluate,
    opts: &TuneOptions,
) -> Result<StrategyOutcome> {
    let seed = derive_seed(opts.seed, strategy.name());
    let baseline = template.baseline_config();
    match strategy {
        SearchStrategy::Genetic => {
            let cfg = GeneticConfig {
                seed,
                max_evaluations: opts.budget,
                ..GeneticConfig::default()
            };
            let out = run_genetic(template, evaluator, &cfg, &[baseline])?;
            Ok(StrategyOutcome {
                config: out.best.clone(),
                runtime_ms: out.best_runtime_ms,
                evaluations: out.evaluations,
                from_cache: false,
                detail: Some(RunDetail::Genetic(out)),
            })
        }
        SearchStrategy::Rl => {
            let conv = op.conv_spec().ok_or_else(|| {
                Error::Unsupported(format!("RL search needs a conv operator, got {}", op.kind()))
            })?;
            let mut cfg =
                RlConfig { seed, max_evaluations: opts.budget, ..RlConfig::default() };
            if let Some(budget) = opts.budget {
                cfg.episodes = budget.div_ceil(cfg.horizon).max(1);
            }
            let out = run_rl(template, conv, evaluator, &cfg, Some(baseline))?;
            Ok(StrategyOutcome {
                config: out.best.clone(),
                runtime_ms: out.best_runtime_ms,
                evaluations: out.evaluations,
                from_cache: false,
                detail: Some(RunDetail::Rl(out)),
            })
        }
        SearchStrategy::Random => {
            let budget = opts.budget.unwrap_or(512);
            let out = run_random(template, evaluator, budget, seed)?;
            Ok(StrategyOutcome {
                config: out.best.clone(),
                runtime_ms: out.best_runtime_ms,
                evaluations: out.evaluations,
                from_cache: false,
                detail: Some(RunDetail::Random(out)),
            })
        }
    }
}

/// Tunes one operator with every requested strategy. The cache is
/// consulted first: strategies already stored under a matching evaluator
/// fingerprint return with zero evaluations, only the missing ones run,
/// and fresh results are merged back. A fingerprint mismatch discards the
/// stale entry wholesale.
pub fn tune_operator(
    op: &OperatorSpec,
    template: &ScheduleTemplate,
    strategies: &[SearchStrategy],
    evaluator: &dyn Evaluate,
    cache: Option<&CacheStore>,
    opts: &TuneOptions,
) -> Result<TuneOutcome> {
    if strategies.is_empty() {
        return Err(Error::EmptyStrategySet);
    }
    let mut wanted: Vec<SearchStrategy> = strategies.to_vec();
    wanted.sort();
    wanted.dedup();

    let signature = evaluator.op_signature().to_string();
    let template_id = template.template_id();
    let fingerprint = evaluator.fingerprint();
    let hardware = hardware_tag();
    let key = cache_key(&signature, &template_id, &hardware);

    let cached_entry = match cache {
        Some(store) => store.lookup(&key)?.filter(|e| e.fingerprint == fingerprint),
        None => None,
    };

    let mut per_strategy = BTreeMap::new();
    let mut fresh: BTreeMap<String, CachedResult> = BTreeMap::new();
    for strategy in wanted {
        let hit = cached_entry.as_ref().and_then(|e| e.best.get(strategy.name()));
        let outcome = match hit {
            Some(stored) => StrategyOutcome {
                config: stored.config.clone(),
                runtime_ms: stored.runtime_ms,
                evaluations: 0,
                from_cache: true,
                detail: None,
            },
            None => {
                let out = run_strategy(strategy, op, template, evaluator, opts)?;
                fresh.insert(
                    strategy.name().to_string(),
                    CachedResult {
                        config: out.config.clone(),
                        runtime_ms: out.runtime_ms,
                        evaluations: out.evaluations,
                    },
                );
                out
            }
        };
        per_strategy.insert(strategy, outcome);
    }

    if let (Some(store), false) = (cache, fresh.is_empty()) {
        let mut entry = cached_entry.unwrap_or(CacheEntry {
            op_signature: signature.clone(),
            template_id: template_id.clone(),
            hardware,
            fingerprint,
            best: BTreeMap::new(),
        });
        entry.best.extend(fresh);
        store.store(&entry)?;
    }

    Ok(TuneOutcome { op_signature: signature, template_id, per_strategy })
}

/// Registry for one node: the strategy winners plus the reference kernel.
/// Random-search bests are benchmark baselines, not deployable kernels, so
/// they stay out of the candidate list.
pub fn candidates_from(outcome: &TuneOutcome, reference: EvalResult) -> Vec<ImplementationCandidate> {
    let mut out = Vec::new();
    for (strategy, result) in &outcome.per_strategy {
        let source = match strategy {
            SearchStrategy::Genetic => StrategySource::GeneratedGenetic,
            SearchStrategy::Rl => StrategySource::GeneratedRl,
            SearchStrategy::Random => continue,
        };
        out.push(ImplementationCandidate {
            source,
            config: Some(result.config.clone()),
            measured: Some(
                EvalResult::new(result.runtime_ms, reference.source).expect("positive runtime"),
            ),
        });
    }
    out.push(ImplementationCandidate {
        source: StrategySource::ReferenceLibrary,
        config: None,
        measured: Some(reference),
    });
    out
}

/// One node's binding in the plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanNode {
    pub id: NodeId,
    pub op_kind: String,
    pub source: StrategySource,
    pub runtime_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<ScheduleConfig>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct InferencePlan {
    /// Provenance of the run that produced the plan; filled by the CLI.
    #[serde(default)]
    pub manifest_hash: String,
    #[serde(default)]
    pub seed: u64,
    /// Template the tuned configs index into; empty when nothing is tuned.
    #[serde(default)]
    pub template_id: String,
    pub nodes: Vec<PlanNode>,
    pub static_estimate_ms: f64,
}

impl InferencePlan {
    pub fn node(&self, id: &str) -> Result<&PlanNode> {
        self.nodes
            .iter()
            .find(|n| n.id == id)
            .ok_or_else(|| Error::UnboundNode(id.to_string()))
    }
}

/// What selection decided for one node, before plan assembly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub source: StrategySource,
    pub runtime_ms: f64,
    pub config: Option<ScheduleConfig>,
}

/// Binds selections to the graph in topological order. Every node must be
/// covered; the summed runtimes become the plan's static estimate.
pub fn build_plan(
    graph: &Graph,
    template_id: &str,
    selections: &BTreeMap<NodeId, Selection>,
) -> Result<InferencePlan> {
    let order = graph.topo_order()?;
    let mut nodes = Vec::with_capacity(order.len());
    let mut total = 0.0;
    for id in order {
        let sel = selections.get(&id).ok_or_else(|| Error::UnboundNode(id.clone()))?;
        let node = graph.node(&id)?;
        total += sel.runtime_ms;
        nodes.push(PlanNode {
            id,
            op_kind: node.op.kind().to_string(),
            source: sel.source,
            runtime_ms: sel.runtime_ms,
            config: sel.config.clone(),
        });
    }
    Ok(InferencePlan {
        manifest_hash: String::new(),
        seed: 0,
        template_id: template_id.to_string(),
        nodes,
        static_estimate_ms: total,
    })
}

/// Cost model the planner tunes against.
#[derive(Debug, Clone)]
pub enum EvaluatorChoice {
    /// Deterministic analytic surface; runs anywhere, reproducible.
    Synthetic { noise: f64 },
    /// Times the real kernels on the host.
    Measured { opts: MeasureOptions },
}

impl EvaluatorChoice {
    fn build(
        &self,
        op: &OperatorSpec,
        input_specs: &[&TensorSpec],
        layout: Layout,
        template: &ScheduleTemplate,
        seed: u64,
    ) -> Result<Box<dyn Evaluate>> {
        match self {
            EvaluatorChoice::Synthetic { noise } => {
                let signature = op_signature(op, input_specs);
                Ok(Box::new(SyntheticEvaluator::new(signature, template, seed, *noise)?))
            }
            EvaluatorChoice::Measured { opts } => {
                Ok(Box::new(MeasuredEvaluator::new(op, layout, template, seed, *opts)?))
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlannerOptions {
    pub strategies: Vec<SearchStrategy>,
    pub evaluator: EvaluatorChoice,
    pub tune: TuneOptions,
}

/// Per-node record of what tuning did, for logs and reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeTuneReport {
    pub node_id: NodeId,
    pub op_kind: String,
    pub reference_ms: f64,
    pub outcome: TuneOutcome,
    pub selected: Selection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizeOutcome {
    pub plan: InferencePlan,
    pub tuned: Vec<NodeTuneReport>,
    pub evaluations: usize,
}

fn is_tunable(op: &OperatorSpec) -> bool {
    matches!(op, OperatorSpec::Conv2D(_) | OperatorSpec::FusedConvBiasReLU(_))
}

/// Median wall time of the reference interpreter on one node, over seeded
/// random inputs, using the same warmup/run protocol as the measured
/// evaluator.
fn bench_node(
    op: &OperatorSpec,
    input_specs: &[&TensorSpec],
    opts: &MeasureOptions,
    seed: u64,
) -> Result<f64> {
    use rand::SeedableRng;
    let signature = op_signature(op, input_specs);
    let mut h = Sha256::new();
    h.update(signature.as_bytes());
    h.update(seed.to_le_bytes());
    let digest: [u8; 32] = h.finalize().into();
    let mut rng = rand_chacha::ChaCha8Rng::from_seed(digest);
    let inputs: Vec<Tensor> =
        input_specs.iter().map(|spec| Tensor::random((*spec).clone(), &mut rng)).collect();
    let refs: Vec<&Tensor> = inputs.iter().collect();
    for _ in 0..opts.warmups {
        interp::eval_node(op, &refs)?;
    }
    let mut times = Vec::with_capacity(opts.runs.max(1));
    for _ in 0..opts.runs.max(1) {
        let start = std::time::Instant::now();
        interp::eval_node(op, &refs)?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    Ok(times[times.len() / 2].max(f64::MIN_POSITIVE))
}

/// Tunes every tunable node of `graph`, prices the rest with the chosen
/// cost model, selects the best implementation per node, and assembles the
/// plan. The graph is taken as-is; run the optimization passes first.
pub fn optimize_graph(
    graph: &Graph,
    template: &ScheduleTemplate,
    options: &PlannerOptions,
    cache: Option<&CacheStore>,
) -> Result<OptimizeOutcome> {
    graph.validate()?;
    let shapes = graph.infer_shapes()?;
    let mut selections: BTreeMap<NodeId, Selection> = BTreeMap::new();
    let mut tuned = Vec::new();
    let mut evaluations = 0;

    for (id, node) in &graph.nodes {
        let input_specs: Vec<&TensorSpec> =
            node.inputs.iter().map(|i| &shapes[i]).collect();

        if node.is_input() || matches!(node.op, OperatorSpec::Constant) {
            selections.insert(
                id.clone(),
                Selection { source: StrategySource::ReferenceLibrary, runtime_ms: 0.0, config: None },
            );
            continue;
        }

        if is_tunable(&node.op) {
            let layout = input_specs.first().and_then(|s| s.layout).unwrap_or(Layout::Nchw);
            let evaluator =
                options.evaluator.build(&node.op, &input_specs, layout, template, options.tune.seed)?;
            let outcome = tune_operator(
                &node.op,
                template,
                &options.strategies,
                evaluator.as_ref(),
                cache,
                &options.tune,
            )?;
            let reference = evaluator.bench_reference()?;
            evaluations += outcome.total_evaluations();
            let candidates = candidates_from(&outcome, reference);
            let best = select_best(&candidates)?.clone();
            let selection = Selection {
                source: best.source,
                runtime_ms: best.measured.expect("measured").runtime_ms,
                config: best.config,
            };
            tuned.push(NodeTuneReport {
                node_id: id.clone(),
                op_kind: node.op.kind().to_string(),
                reference_ms: reference.runtime_ms,
                outcome,
                selected: selection.clone(),
            });
            selections.insert(id.clone(), selection);
            continue;
        }

        let runtime_ms = match &options.evaluator {
            EvaluatorChoice::Synthetic { .. } => {
                synthetic_node_cost(&op_signature(&node.op, &input_specs), options.tune.seed)
            }
            EvaluatorChoice::Measured { opts } => {
                bench_node(&node.op, &input_specs, opts, options.tune.seed)?
            }
        };
        selections.insert(
            id.clone(),
            Selection { source: StrategySource::ReferenceLibrary, runtime_ms, config: None },
        );
    }

    let template_id = if tuned.is_empty() { String::new() } else { template.template_id() };
    let plan = build_plan(graph, &template_id, &selections)?;
    Ok(OptimizeOutcome { plan, tuned, evaluations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluator::ResultSource;

    fn cand(source: StrategySource, ms: f64) -> ImplementationCandidate {
        ImplementationCandidate {
            source,
            config: (source != StrategySource::ReferenceLibrary)
                .then(|| ScheduleConfig::new(vec![1, 2])),
            measured: Some(EvalResult::new(ms, ResultSource::Synthetic).unwrap()),
        }
    }

    #[test]
    fn selection_is_argmin_over_runtime() {
        let cands = vec![
            cand(StrategySource::GeneratedGenetic, 1.2),
            cand(StrategySource::ReferenceLibrary, 0.9),
        ];
        let best = select_best(&cands).unwrap();
        assert_eq!(best.source, StrategySource::ReferenceLibrary);
    }

    #[test]
    fn single_candidate_selects_itself() {
        let cands = vec![cand(StrategySource::GeneratedRl, 2.0)];
        assert_eq!(select_best(&cands).unwrap().source, StrategySource::GeneratedRl);
    }

    #[test]
    fn exact_ties_prefer_generated_then_genetic() {
        let cands = vec![
            cand(StrategySource::ReferenceLibrary, 1.0),
            cand(StrategySource::GeneratedRl, 1.0),
            cand(StrategySource::GeneratedGenetic, 1.0),
        ];
        assert_eq!(select_best(&cands).unwrap().source, StrategySource::GeneratedGenetic);
        let no_ga = vec![cand(StrategySource::ReferenceLibrary, 1.0), cand(StrategySource::GeneratedRl, 1.0)];
        assert_eq!(select_best(&no_ga).unwrap().source, StrategySource::GeneratedRl);
    }

    #[test]
    fn empty_candidate_list_is_an_error() {
        assert!(matches!(select_best(&[]), Err(Error::NoCandidates)));
    }

    #[test]
    fn unmeasured_candidate_is_rejected() {
        let mut c = cand(StrategySource::GeneratedGenetic, 1.0);
        c.measured = None;
        assert!(matches!(select_best(&[c]), Err(Error::InvalidParams(_))));
    }

    #[test]
    fn random_search_tracks_best_ever() {
        let template = ScheduleTemplate::conv_default();
        let eval = SyntheticEvaluator::new("conv", &template, 9, 0.0).unwrap();
        let out = run_random(&template, &eval, 64, 3).unwrap();
        assert_eq!(out.evaluations, 64);
        assert_eq!(out.history.len(), 64);
        let mut best = f64::INFINITY;
        for step in &out.history {
            best = best.min(step.runtime_ms);
            assert_eq!(step.best_ms, best);
        }
        assert_eq!(out.best_runtime_ms, best);
        let again = run_random(&template, &eval, 64, 3).unwrap();
        assert_eq!(again.best, out.best);
    }

    #[test]
    fn empty_strategy_set_is_an_error() {
        let template = ScheduleTemplate::conv_default();
        let eval = SyntheticEvaluator::new("conv", &template, 9, 0.0).unwrap();
        let op = OperatorSpec::MatMul;
        let err = tune_operator(&op, &template, &[], &eval, None, &TuneOptions::default());
        assert!(matches!(err, Err(Error::EmptyStrategySet)));
    }

    #[test]
    fn warm_cache_rerun_spends_zero_evaluations() {
        let dir = tempfile::tempdir().unwrap();
        let store = CacheStore::open(dir.path()).unwrap();
        let template = ScheduleTemplate::conv_default();
        let eval = SyntheticEvaluator::new("Conv2D(test)", &template, 11, 0.0).unwrap();
        let op = OperatorSpec::MatMul;
        let opts = TuneOptions { budget: Some(40), seed: 5 };
        let strategies = [SearchStrategy::Genetic];

        let cold = tune_operator(&op, &template, &strategies, &eval, Some(&store), &opts).unwrap();
        assert!(cold.total_evaluations() > 0);
        assert!(!cold.per_strategy[&SearchStrategy::Genetic].from_cache);

        // Fresh store handle over the same directory: a process restart.
        let store2 = CacheStore::open(dir.path()).unwrap();
        let warm = tune_operator(&op, &template, &strategies, &eval, Some(&store2), &opts).unwrap();
        assert_eq!(warm.total_evaluations(), 0);
        let hit = &warm.per_strategy[&SearchStrategy::Genetic];
        assert!(hit.from_cache);
        assert_eq!(hit.config, cold.per_strategy[&SearchStrategy::Genetic].config);
        assert_eq!(hit.runtime_ms, cold.per_strategy[&SearchStrategy::Genetic].runtime_ms);
    }

    #[test]
    fn partial_cache_hit_runs_only_missing_strategies() {
        let dir = tempfile::tempdir().unwrap();
        let store = CacheStore::open(dir.path()).unwrap();
        let template = ScheduleTemplate::conv_default();
        let eval = SyntheticEvaluator::new("Conv2D(test)", &template, 11, 0.0).unwrap();
        let op = OperatorSpec::MatMul;
        let opts = TuneOptions { budget: Some(40), seed: 5 };

        tune_operator(&op, &template, &[SearchStrategy::Genetic], &eval, Some(&store), &opts)
            .unwrap();
        let both = tune_operator(
            &op,
            &template,
            &[SearchStrategy::Genetic, SearchStrategy::Random],
            &eval,
            Some(&store),
            &opts,
        )
        .unwrap();
        assert!(both.per_strategy[&SearchStrategy::Genetic].from_cache);
        assert!(!both.per_strategy[&SearchStrategy::Random].from_cache);
        assert_eq!(both.per_strategy[&SearchStrategy::Genetic].evaluations, 0);
        assert_eq!(both.per_strategy[&SearchStrategy::Random].evaluations, 40);

        // Both strategies are now stored.
        let warm = tune_operator(
            &op,
            &template,
            &[SearchStrategy::Genetic, SearchStrategy::Random],
            &eval,
            Some(&store),
            &opts,
        )
        .unwrap();
        assert_eq!(warm.total_evaluations(), 0);
    }

    #[test]
    fn changed_fingerprint_invalidates_cached_entry() {
        let dir = tempfile::tempdir().unwrap();
        let store = CacheStore::open(dir.path()).unwrap();
        let template = ScheduleTemplate::conv_default();
        let op = OperatorSpec::MatMul;
        let opts = TuneOptions { budget: Some(30), seed: 5 };
        let strategies = [SearchStrategy::Genetic];

        let eval_a = SyntheticEvaluator::new("Conv2D(test)", &template, 11, 0.0).unwrap();
        tune_operator(&op, &template, &strategies, &eval_a, Some(&store), &opts).unwrap();

        // Same signature, different surface seed: the fingerprint changes,
        // so the stale entry must not be served.
        let eval_b = SyntheticEvaluator::new("Conv2D(test)", &template, 12, 0.0).unwrap();
        let fresh = tune_operator(&op, &template, &strategies, &eval_b, Some(&store), &opts).unwrap();
        assert!(!fresh.per_strategy[&SearchStrategy::Genetic].from_cache);
        assert!(fresh.total_evaluations() > 0);

        // The overwrite installed the new fingerprint.
        let warm = tune_operator(&op, &template, &strategies, &eval_b, Some(&store), &opts).unwrap();
        assert_eq!(warm.total_evaluations(), 0);
    }

    #[test]
    fn random_results_stay_out_of_the_candidate_registry() {
        let template = ScheduleTemplate::conv_default();
        let eval = SyntheticEvaluator::new("conv", &template, 9, 0.0).unwrap();
        let op = OperatorSpec::MatMul;
        let opts = TuneOptions { budget: Some(20), seed: 1 };
        let outcome = tune_operator(
            &op,
            &template,
            &[SearchStrategy::Genetic, SearchStrategy::Random],
            &eval,
            None,
            &opts,
        )
        .unwrap();
        let cands = candidates_from(&outcome, eval.bench_reference().unwrap());
        let sources: Vec<StrategySource> = cands.iter().map(|c| c.source).collect();
        assert_eq!(
            sources,
            vec![StrategySource::GeneratedGenetic, StrategySource::ReferenceLibrary]
        );
    }

    fn conv_spec() -> crate::graph::ConvSpec {
        crate::graph::ConvSpec {
            n: 1,
            c_in: 3,
            c_out: 4,
            k_h: 3,
            k_w: 3,
            h: 8,
            w: 8,
            stride: 1,
            padding: crate::graph::Padding::Same,
        }
    }

    #[test]
    fn plan_binds_every_node_in_topo_order() {
        use crate::graph::builder::GraphBuilder;
        let mut b = GraphBuilder::new();
        let x = b.input("x", TensorSpec::rank4([1, 3, 8, 8], Layout::Nchw));
        let w = b.zero_constant("w", TensorSpec::new(vec![4, 3, 3, 3]));
        let c = b.conv2d("c", &x, &w, conv_spec());
        let r = b.relu("r", &c);
        let graph = b.outputs([r.clone()]).build().unwrap();

        let mut selections = BTreeMap::new();
        for id in graph.nodes.keys() {
            selections.insert(
                id.clone(),
                Selection {
                    source: StrategySource::ReferenceLibrary,
                    runtime_ms: if id == &c { 2.0 } else { 0.25 },
                    config: None,
                },
            );
        }
        let plan = build_plan(&graph, "", &selections).unwrap();
        assert_eq!(plan.nodes.len(), 4);
        let pos = |id: &str| plan.nodes.iter().position(|n| n.id == id).unwrap();
        assert!(pos(&x) < pos(&c));
        assert!(pos(&w) < pos(&c));
        assert!(pos(&c) < pos(&r));
        assert!((plan.static_estimate_ms - 2.75).abs() < 1e-12);

        selections.remove(&r);
        assert!(matches!(
            build_plan(&graph, "", &selections),
            Err(Error::UnboundNode(id)) if id == r
        ));
    }

    #[test]
    fn empty_graph_builds_an_empty_plan() {
        let graph = Graph::new();
        let plan = build_plan(&graph, "", &BTreeMap::new()).unwrap();
        assert!(plan.nodes.is_empty());
        assert_eq!(plan.static_estimate_ms, 0.0);
    }

    #[test]
    fn plan_estimate_never_exceeds_all_reference_estimate() {
        use crate::graph::builder::GraphBuilder;
        let mut b = GraphBuilder::new();
        let x = b.input("x", TensorSpec::rank4([1, 3, 8, 8], Layout::Nchw));
        let w = b.zero_constant("w", TensorSpec::new(vec![4, 3, 3, 3]));
        let c = b.conv2d("c", &x, &w, conv_spec());
        let r = b.relu("r", &c);
        let graph = b.outputs([r]).build().unwrap();

        let template = ScheduleTemplate::conv_default();
        let options = PlannerOptions {
            strategies: vec![SearchStrategy::Genetic],
            evaluator: EvaluatorChoice::Synthetic { noise: 0.0 },
            tune: TuneOptions { budget: Some(60), seed: 7 },
        };
        let out = optimize_graph(&graph, &template, &options, None).unwrap();

        let mut all_reference = 0.0;
        for node in &out.plan.nodes {
            if node.source == StrategySource::ReferenceLibrary {
                all_reference += node.runtime_ms;
            } else {
                let report = out.tuned.iter().find(|t| t.node_id == node.id).unwrap();
                all_reference += report.reference_ms;
            }
        }
        assert!(out.plan.static_estimate_ms <= all_reference + 1e-12);

        let conv = out.plan.node(&c).unwrap();
        assert!(conv.config.is_some() || conv.source == StrategySource::ReferenceLibrary);
        assert_eq!(out.plan.node(&x).unwrap().runtime_ms, 0.0);
        assert!(out.evaluations > 0);
    }

    #[test]
    fn plan_json_uses_short_source_names() {
        let node = PlanNode {
            id: "c".into(),
            op_kind: "Conv2D".into(),
            source: StrategySource::GeneratedGenetic,
            runtime_ms: 1.5,
            config: Some(ScheduleConfig::new(vec![1, 2, 4])),
        };
        let text = serde_json::to_string(&node).unwrap();
        assert!(text.contains("\"source\":\"genetic\""));
        let reference = PlanNode { source: StrategySource::ReferenceLibrary, config: None, ..node };
        let text = serde_json::to_string(&reference).unwrap();
        assert!(text.contains("\"source\":\"reference\""));
        assert!(!text.contains("config"));
        let back: PlanNode = serde_json::from_str(&text).unwrap();
        assert_eq!(back.source, StrategySource::ReferenceLibrary);
    }
}
