//! Genetic schedule search. Each individual is one config; selection is
//! fitness-proportional roulette over a parent pool, children come from
//! uniform per-gene crossover plus per-gene mutation, and constraint
//! violations are repaired by resampling only the genes the violated
//! constraint names. The top `elite` individuals survive generations
//! untouched, results included, so nothing is re-evaluated.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluator::Evaluate;
use crate::schedule::{ScheduleConfig, ScheduleTemplate};

/// Maps a runtime to a selection weight; both variants are positive and
/// decrease with runtime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitnessMode {
    /// 1 / runtime_ms.
    InverseRuntime,
    /// 1 / runtime_ms^2; sharpens selection pressure toward fast configs.
    InverseRuntimeSquared,
}

impl FitnessMode {
    fn fitness(self, runtime_ms: f64) -> f64 {
        match self {
            FitnessMode::InverseRuntime => 1.0 / runtime_ms,
            FitnessMode::InverseRuntimeSquared => 1.0 / (runtime_ms * runtime_ms),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneticConfig {
    /// Individuals per generation.
    pub population: usize,
    /// Best individuals copied unchanged into the next generation.
    pub elite: usize,
    /// Parents are drawn from the fittest `parent_pool` individuals.
    pub parent_pool: usize,
    /// Per-gene probability of replacing a crossover gene with a fresh
    /// domain sample.
    pub mutation_rate: f64,
    /// Convergence threshold on (max - min) / min runtime within a
    /// generation; 0 disables early convergence.
    pub epsilon: f64,
    pub max_generations: usize,
    pub fitness: FitnessMode,
    /// Bounded retries when repairing a constraint-violating child.
    pub repair_attempts: usize,
    pub seed: u64,
    /// Hard cap on evaluator calls; the final generation is truncated to
    /// consume exactly this budget.
    pub max_evaluations: Option<usize>,
    /// Optional per-generation population sizes; generations beyond the
    /// schedule reuse its last entry.
    pub population_schedule: Option<Vec<usize>>,
}

impl Default for GeneticConfig {
    fn default() -> Self {
        Self {
            population: 48,
            elite: 4,
            parent_pool: 24,
            mutation_rate: 0.1,
            epsilon: 0.02,
            max_generations: 50,
            fitness: FitnessMode::InverseRuntime,
            repair_attempts: 100,
            seed: 0,
            max_evaluations: None,
            population_schedule: None,
        }
    }
}

impl GeneticConfig {
    fn validate(&self) -> Result<()> {
        if self.population == 0 {
            return Err(Error::InvalidParams("population must be positive".into()));
        }
        if self.elite >= self.population {
            return Err(Error::InvalidParams(format!(
                "elite ({}) must be smaller than population ({})",
                self.elite, self.population
            )));
        }
        if self.parent_pool == 0 {
            return Err(Error::InvalidParams("parent pool must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.mutation_rate) {
            return Err(Error::InvalidParams("mutation rate must lie in [0, 1]".into()));
        }
        if self.max_generations == 0 {
            return Err(Error::InvalidParams("need at least one generation".into()));
        }
        Ok(())
    }

    fn population_for(&self, generation: usize) -> usize {
        match &self.population_schedule {
            Some(s) if !s.is_empty() => s[generation.min(s.len() - 1)].max(1),
            _ => self.population,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationStats {
    pub gen: usize,
    pub best_runtime: f64,
    pub mean_runtime: f64,
    /// (max - min) / min within the generation; the convergence measure.
    pub spread: f64,
    pub population_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaOutcome {
    pub best: ScheduleConfig,
    pub best_runtime_ms: f64,
    pub evaluations: usize,
    pub generations: usize,
    pub converged: bool,
    pub history: Vec<GenerationStats>,
}

#[derive(Clone)]
struct Individual {
    config: ScheduleConfig,
    runtime_ms: Option<f64>,
}

/// Normalizes fitness weights into selection probabilities, p_i =
/// f_i / sum(f).
pub fn selection_probabilities(weights: &[f64]) -> Vec<f64> {
    let total: f64 = weights.iter().sum();
    weights.iter().map(|w| w / total).collect()
}

/// Picks the first index whose cumulative weight reaches `v`; boundaries
/// belong to the lower index (cumulative [0.5, 0.8, 1.0] with v = 0.5
/// picks index 0, v = 0.6 picks index 1).
pub fn roulette_pick(cumulative: &[f64], v: f64) -> usize {
    for (i, &edge) in cumulative.iter().enumerate() {
        if v <= edge {
            return i;
        }
    }
    cumulative.len() - 1
}

fn select_parent(pool: &[Individual], fitness: FitnessMode, rng: &mut ChaCha8Rng) -> usize {
    let weights: Vec<f64> = pool
        .iter()
        .map(|ind| fitness.fitness(ind.runtime_ms.expect("pool members are evaluated")))
        .collect();
    let mut cumulative = selection_probabilities(&weights);
    let mut acc = 0.0;
    for p in cumulative.iter_mut() {
        acc += *p;
        *p = acc;
    }
    *cumulative.last_mut().expect("non-empty pool") = 1.0;
    // Sample in (0, 1] so a boundary hit selects the index whose interval
    // ends there.
    let v = 1.0 - rng.gen::<f64>();
    roulette_pick(&cumulative, v)
}

/// Crossover, mutation, and bounded constraint repair for one child.
fn make_child(
    template: &ScheduleTemplate,
    p1: &ScheduleConfig,
    p2: &ScheduleConfig,
    mutation_rate: f64,
    repair_attempts: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ScheduleConfig> {
    let mut genes: Vec<u64> = p1
        .values
        .iter()
        .zip(&p2.values)
        .map(|(&a, &b)| if rng.gen::<bool>() { a } else { b })
        .collect();
    for (i, gene) in genes.iter_mut().enumerate() {
        if rng.gen::<f64>() < mutation_rate {
            *gene = template.sample_param(i, rng);
        }
    }
    let mut child = ScheduleConfig::new(genes);
    for _ in 0..=repair_attempts {
        let report = template.validate(&child)?;
        if report.ok() {
            return Ok(child);
        }
        for violation in &report.violations {
            for var in &violation.vars {
                if let Some(idx) = template.param_index(var) {
                    child.values[idx] = template.sample_param(idx, rng);
                }
            }
        }
    }
    Err(Error::ExhaustedSampling {
        attempts: repair_attempts,
        detail: format!("could not repair child in template '{}'", template.name),
    })
}

/// Runs the search. `seeds` are injected into the initial population ahead
/// of random members (the planner passes the baseline config here so the
/// search can never return something slower than what it was given).
pub fn run_genetic(
    template: &ScheduleTemplate,
    evaluator: &dyn Evaluate,
    cfg: &GeneticConfig,
    seeds: &[ScheduleConfig],
) -> Result<GaOutcome> {
    cfg.validate()?;
    template.validate_template()?;
    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);

    let first_size = cfg.population_for(0);
    let mut population: Vec<Individual> = Vec::with_capacity(first_size);
    for seed_cfg in seeds.iter().take(first_size) {
        let report = template.validate(seed_cfg)?;
        if !report.ok() {
            return Err(Error::InvalidConfig(format!(
                "seed config violates '{}'",
                report.violations[0].constraint
            )));
        }
        population.push(Individual { config: seed_cfg.clone(), runtime_ms: None });
    }
    while population.len() < first_size {
        population.push(Individual { config: template.random_config(&mut master)?, runtime_ms: None });
    }

    let mut budget = cfg.max_evaluations;
    let mut evaluations = 0usize;
    let mut history = Vec::new();
    let mut best: Option<(ScheduleConfig, f64)> = None;
    let mut converged = false;
    let mut generations = 0usize;

    'outer: for gen in 0..cfg.max_generations {
        generations = gen + 1;
        // Evaluate members lacking results, truncating if the budget runs
        // out mid-generation.
        let mut evaluated: Vec<Individual> = Vec::with_capacity(population.len());
        let mut truncated = false;
        for mut ind in population {
            if ind.runtime_ms.is_none() {
                if budget == Some(0) {
                    truncated = true;
                    continue;
                }
                let result = evaluator.evaluate(&ind.config)?;
                evaluations += 1;
                if let Some(b) = &mut budget {
                    *b -= 1;
                }
                ind.runtime_ms = Some(result.runtime_ms);
            }
            evaluated.push(ind);
        }
        if evaluated.is_empty() {
            break;
        }

        let runtimes: Vec<f64> = evaluated.iter().map(|i| i.runtime_ms.expect("evaluated")).collect();
        let min = runtimes.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = runtimes.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mean = runtimes.iter().sum::<f64>() / runtimes.len() as f64;
        let spread = (max - min) / min;
        history.push(GenerationStats {
            gen,
            best_runtime: min,
            mean_runtime: mean,
            spread,
            population_size: evaluated.len(),
        });
        for ind in &evaluated {
            let rt = ind.runtime_ms.expect("evaluated");
            if best.as_ref().map_or(true, |(_, b)| rt < *b) {
                best = Some((ind.config.clone(), rt));
            }
        }

        if cfg.epsilon > 0.0 && spread < cfg.epsilon {
            converged = true;
            break;
        }
        if truncated || budget == Some(0) || gen + 1 == cfg.max_generations {
            break;
        }

        // Next generation: elites keep their results; children are bred
        // from the fittest parent_pool members.
        evaluated.sort_by(|a, b| {
            a.runtime_ms
                .partial_cmp(&b.runtime_ms)
                .expect("runtimes are finite")
                .then_with(|| a.config.values.cmp(&b.config.values))
        });
        let pool: Vec<Individual> =
            evaluated.iter().take(cfg.parent_pool.max(1)).cloned().collect();
        let next_size = cfg.population_for(gen + 1);
        let mut next: Vec<Individual> =
            evaluated.iter().take(cfg.elite.min(next_size)).cloned().collect();

        let mut child_rng = ChaCha8Rng::seed_from_u64(master.gen::<u64>());
        while next.len() < next_size {
            let a = select_parent(&pool, cfg.fitness, &mut child_rng);
            let b = select_parent(&pool, cfg.fitness, &mut child_rng);
            let child = match make_child(
                template,
                &pool[a].config,
                &pool[b].config,
                cfg.mutation_rate,
                cfg.repair_attempts,
                &mut child_rng,
            ) {
                Ok(c) => c,
                Err(e @ Error::ExhaustedSampling { .. }) => {
                    if next.is_empty() {
                        return Err(e);
                    }
                    break 'outer;
                }
                Err(e) => return Err(e),
            };
            next.push(Individual { config: child, runtime_ms: None });
        }
        population = next;
    }

    let (best, best_runtime_ms) = best.ok_or(Error::NoCandidates)?;
    Ok(GaOutcome { best, best_runtime_ms, evaluations, generations, converged, history })
}
