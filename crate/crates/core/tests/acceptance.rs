//! End-to-end checks for the tuning pipeline, one per release criterion.
//! Each test prints a single verdict line before asserting so a full run
//! reads as a checklist.

mod common;

use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::tempdir;
use wpt_core::cache::CacheStore;
use wpt_core::evaluator::{
    AverageMode, Evaluate, EvalResult, MeasureOptions, MeasuredEvaluator, RecordingEvaluator,
    ResultSource, RuntimeTracker, SyntheticEvaluator,
};
use wpt_core::genetic::{self, GeneticConfig};
use wpt_core::graph::passes::{constant_fold, fuse_operators, transform_layout};
use wpt_core::graph::{op_signature, ConvSpec, Layout, OperatorSpec, Padding};
use wpt_core::interp;
use wpt_core::kernels::{conv2d_reference, conv2d_tuned, max_abs_diff, Tensor, TileConfig};
use wpt_core::planner::{
    self, EvaluatorChoice, ImplementationCandidate, PlannerOptions, SearchStrategy,
    StrategySource, TuneOptions,
};
use wpt_core::rl::mlp::{Activation, Mlp, MlpSpec};
use wpt_core::rl::ppo::{gae_advantages, ppo_loss, PpoBatch, PpoSettings};
use wpt_core::rl::{self, RlConfig};
use wpt_core::runtime;
use wpt_core::schedule::{Constraint, ParamDomain, ScheduleConfig, ScheduleTemplate};

fn verdict(n: usize, name: &str, pass: bool, detail: &str) {
    println!("criterion {n} ({name}): {} ({detail})", if pass { "PASS" } else { "FAIL" });
}

/// Same shape as the default conv template with the tile domains trimmed
/// to 4 values each, so the whole space stays enumerable.
fn enumerable_conv_template() -> ScheduleTemplate {
    let dom = |name: &str, values: Vec<u64>| ParamDomain { name: name.into(), values };
    ScheduleTemplate {
        name: "conv2d_tiled_small".into(),
        params: vec![
            dom("T_x", vec![1, 2, 4, 8, 16, 32]),
            dom("T_y", vec![1, 2, 4, 8, 16, 32]),
            dom("T_z", vec![1, 2]),
            dom("Tile_x", vec![1, 2, 4]),
            dom("Tile_y", vec![1, 2, 4]),
            dom("Tile_z", vec![1, 2, 4]),
            dom("Tile_rz", vec![1, 2, 4]),
        ],
        constraints: vec![Constraint::parse("T_x*T_y*T_z <= 1024").expect("literal parses")],
    }
}

#[test]
fn genetic_search_recovers_enumerated_optimum() {
    let template = enumerable_conv_template();
    assert!(template.raw_size() <= 10_000);
    let start = Instant::now();
    let configs = template.enumerate(10_000).expect("space fits the cap");

    let trials = 20;
    let mut hits = 0;
    for trial in 0..trials {
        let eval = SyntheticEvaluator::new("conv2d/opt", &template, trial, 0.0).unwrap();
        let oracle = configs
            .iter()
            .map(|c| eval.evaluate(c).unwrap().runtime_ms)
            .fold(f64::INFINITY, f64::min);
        let cfg = GeneticConfig { seed: trial, ..Default::default() };
        let out =
            genetic::run_genetic(&template, &eval, &cfg, &[template.baseline_config()]).unwrap();
        if out.best_runtime_ms <= oracle * 1.05 {
            hits += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = hits >= 18 && secs < 60.0;
    verdict(
        1,
        "genetic search recovers the enumerated optimum",
        pass,
        &format!("{hits}/{trials} seeds within 5%, {secs:.1}s"),
    );
    assert!(pass, "{hits}/{trials} seeds found the optimum in {secs:.1}s");
}

#[test]
fn guided_search_beats_random_at_equal_budget() {
    let template = ScheduleTemplate::conv_default();
    let conv = ConvSpec {
        n: 1,
        c_in: 96,
        c_out: 128,
        k_h: 3,
        k_w: 3,
        h: 54,
        w: 46,
        stride: 2,
        padding: Padding::Same,
    };
    let budget = 512;
    let trials = 20;
    let mut ga_wins = 0;
    let mut rl_wins = 0;
    for trial in 0..trials {
        let eval = SyntheticEvaluator::new("conv2d/dom", &template, 1000 + trial, 0.0).unwrap();
        let baseline = template.baseline_config();

        let ga_cfg = GeneticConfig {
            seed: trial,
            max_evaluations: Some(budget),
            ..Default::default()
        };
        let ga = genetic::run_genetic(&template, &eval, &ga_cfg, &[baseline.clone()]).unwrap();

        let rl_cfg = RlConfig {
            episodes: 8,
            horizon: 64,
            seed: trial,
            max_evaluations: Some(budget),
            ..Default::default()
        };
        let rl = rl::run_rl(&template, &conv, &eval, &rl_cfg, Some(baseline)).unwrap();

        let random = planner::run_random(&template, &eval, budget, trial).unwrap();

        if ga.best_runtime_ms <= random.best_runtime_ms {
            ga_wins += 1;
        }
        if rl.best_runtime_ms <= random.best_runtime_ms {
            rl_wins += 1;
        }
    }
    let pass = ga_wins >= 18 && rl_wins >= 18;
    verdict(
        2,
        "guided search beats random at a 512-eval budget",
        pass,
        &format!("genetic {ga_wins}/{trials}, rl {rl_wins}/{trials}"),
    );
    assert!(
        pass,
        "genetic won {ga_wins}/{trials}, rl won {rl_wins}/{trials}; both need 18"
    );
}

#[test]
fn policy_gradients_match_finite_differences() {
    let spec = MlpSpec {
        input_dim: 6,
        hidden: vec![(4, Activation::Tanh), (8, Activation::Tanh), (4, Activation::Selu)],
        policy_dim: 5,
        keep_prob: 1.0,
        dropout_after: None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut net = Mlp::new(spec, &mut rng).unwrap();
    // The heads start at zero; random weights everywhere keep the check
    // from passing on degenerate zeros.
    let params: Vec<f64> =
        (0..net.param_vector().len()).map(|_| rng.gen_range(-0.5..0.5)).collect();
    net.set_param_vector(&params).unwrap();

    let n = 5;
    let observations: Vec<f64> = (0..n * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let actions: Vec<usize> = (0..n).map(|_| rng.gen_range(0..5)).collect();
    let advantages: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let value_targets: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    // Sampling the old log probs from the current policy pins the ratio at
    // 1, safely inside the clip window, so the loss is smooth at every
    // probe the finite differences take.
    let old_log_probs: Vec<f64> = (0..n)
        .map(|i| {
            let cache = net.forward(&observations[i * 6..(i + 1) * 6], 1, None);
            wpt_core::rl::ppo::log_softmax(&cache.policy_logits)[actions[i]]
        })
        .collect();
    let batch = PpoBatch {
        observations: &observations,
        actions: &actions,
        advantages: &advantages,
        value_targets: &value_targets,
        old_log_probs: &old_log_probs,
    };
    let settings = PpoSettings::default();
    let analytic = ppo_loss(&net, &batch, &settings, None).unwrap().1.to_vector();

    let h = 1e-6;
    let mut worst = 0.0f64;
    for idx in sample(&mut rng, params.len(), 100).into_iter() {
        let mut probe = params.clone();
        probe[idx] += h;
        net.set_param_vector(&probe).unwrap();
        let up = ppo_loss(&net, &batch, &settings, None).unwrap().0.total;
        probe[idx] = params[idx] - h;
        net.set_param_vector(&probe).unwrap();
        let down = ppo_loss(&net, &batch, &settings, None).unwrap().0.total;
        let numeric = (up - down) / (2.0 * h);
        let denom = analytic[idx].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic[idx] - numeric).abs() / denom);
    }
    let pass = worst < 1e-4;
    verdict(
        3,
        "policy gradients match finite differences",
        pass,
        &format!("max rel err {worst:.2e} over 100 parameters"),
    );
    assert!(pass, "max rel err {worst:.2e}");
}

#[test]
fn advantage_recursion_matches_double_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let t = rng.gen_range(1..=16);
        let rewards: Vec<f64> = (0..t).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let values: Vec<f64> = (0..=t).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let gamma = rng.gen_range(0.5..1.0);
        let lambda = rng.gen_range(0.5..1.0);
        let fast = gae_advantages(&rewards, &values, gamma, lambda).unwrap();
        for s in 0..t {
            let mut acc = 0.0;
            for l in s..t {
                let delta = rewards[l] + gamma * values[l + 1] - values[l];
                acc += (gamma * lambda).powi((l - s) as i32) * delta;
            }
            worst = worst.max((acc - fast[s]).abs());
        }
    }
    let pass = worst < 1e-10;
    verdict(
        4,
        "advantage recursion matches the explicit double sum",
        pass,
        &format!("max abs err {worst:.2e} over 1000 episodes"),
    );
    assert!(pass, "max abs err {worst:.2e}");
}

#[test]
fn closed_form_update_rules_hold() {
    let mut ok = true;

    // Selection probabilities are the normalized fitness weights.
    let probs = genetic::selection_probabilities(&[1.0, 3.0, 6.0]);
    ok &= (probs[0] - 0.1).abs() < 1e-12
        && (probs[1] - 0.3).abs() < 1e-12
        && (probs[2] - 0.6).abs() < 1e-12;
    ok &= (probs.iter().sum::<f64>() - 1.0).abs() < 1e-12;

    // Roulette boundaries belong to the lower index.
    let cumulative = [0.25, 0.5, 1.0];
    ok &= genetic::roulette_pick(&cumulative, 1e-12) == 0;
    ok &= genetic::roulette_pick(&cumulative, 0.25) == 0;
    ok &= genetic::roulette_pick(&cumulative, 0.25 + 1e-9) == 1;
    ok &= genetic::roulette_pick(&cumulative, 0.5) == 1;
    ok &= genetic::roulette_pick(&cumulative, 1.0) == 2;

    // Rewards clamp regressions at twice the running average.
    ok &= rl::step_reward(10.0, 25.0) == -10.0;
    ok &= rl::step_reward(10.0, 12.0) == -2.0;
    ok &= rl::step_reward(10.0, 4.0) == 6.0;

    // Damped averaging follows a_t = (a_{t-1} * w + b_t) / t.
    let betas = [5.0, 3.0, 4.0, 2.5, 7.0];
    let mut tracker = RuntimeTracker::new(AverageMode::Damped { weight: 0.8 });
    let mut expected = 0.0;
    for (i, &beta) in betas.iter().enumerate() {
        expected = (expected * 0.8 + beta) / (i + 1) as f64;
        ok &= tracker.update(beta) == expected;
    }

    // Exponential averaging starts on the first observation, then decays.
    let mut tracker = RuntimeTracker::new(AverageMode::Exponential { rho: 0.9 });
    let mut expected = betas[0];
    tracker.update(betas[0]);
    ok &= tracker.alpha() == expected;
    for &beta in &betas[1..] {
        expected = 0.9 * expected + 0.1 * beta;
        ok &= tracker.update(beta) == expected;
    }

    verdict(5, "closed-form update rules hold", ok, "selection, roulette, reward, averaging");
    assert!(ok);
}

#[test]
fn passes_and_plans_preserve_graph_semantics() {
    let template = ScheduleTemplate::conv_default();
    let mut worst_pass = 0.0f64;
    let mut worst_plan = 0.0f64;
    for seed in 0..50 {
        let (graph, feeds) = common::random_graph(seed);
        let reference = interp::interpret(&graph, &feeds).unwrap();

        for transformed in [
            constant_fold(&graph).unwrap(),
            fuse_operators(&graph).unwrap(),
            transform_layout(&graph, Layout::Nhwc).unwrap(),
            fuse_operators(&constant_fold(&graph).unwrap()).unwrap(),
        ] {
            let got = interp::interpret(&transformed, &feeds).unwrap();
            let diff =
                common::paired_output_diff(&graph, &reference, &transformed, &got).unwrap();
            assert!(diff <= 1e-5, "pass diverged by {diff:.2e} on graph {seed}");
            worst_pass = worst_pass.max(diff);
        }

        let staged = fuse_operators(&constant_fold(&graph).unwrap()).unwrap();
        let options = PlannerOptions {
            strategies: vec![SearchStrategy::Genetic],
            evaluator: EvaluatorChoice::Synthetic { noise: 0.0 },
            tune: TuneOptions { budget: Some(24), seed },
        };
        let outcome = planner::optimize_graph(&staged, &template, &options, None).unwrap();
        let exec =
            runtime::execute(&staged, &outcome.plan, &[template.clone()], &feeds).unwrap();
        let tuned_kernels = outcome
            .plan
            .nodes
            .iter()
            .any(|n| n.source != StrategySource::ReferenceLibrary);
        let tol = if tuned_kernels { 1e-4 } else { 1e-5 };
        let diff =
            common::paired_output_diff(&graph, &reference, &staged, &exec.outputs).unwrap();
        assert!(diff <= tol, "plan diverged by {diff:.2e} on graph {seed}");
        worst_plan = worst_plan.max(diff);
    }
    verdict(
        6,
        "passes and plans preserve graph semantics",
        true,
        &format!("50 graphs, pass diff <= {worst_pass:.2e}, plan diff <= {worst_plan:.2e}"),
    );
}

#[test]
fn tuned_conv_matches_reference_kernel() {
    let template = ScheduleTemplate::conv_default();
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let k = if rng.gen_bool(0.7) { 3 } else { 1 };
        let h = rng.gen_range(k.max(4)..=10);
        let w = rng.gen_range(k.max(4)..=10);
        let cs = ConvSpec {
            n: rng.gen_range(1..=2),
            c_in: rng.gen_range(1..=5),
            c_out: rng.gen_range(1..=6),
            k_h: k,
            k_w: k,
            h,
            w,
            stride: rng.gen_range(1..=2),
            padding: if rng.gen_bool(0.5) { Padding::Same } else { Padding::Valid },
        };
        let layout = if rng.gen_bool(0.5) { Layout::Nchw } else { Layout::Nhwc };
        let input = Tensor::random(cs.input_spec(layout), &mut rng);
        let filter = Tensor::random(cs.filter_spec(), &mut rng);
        let tile = template.tile_config(&template.random_config(&mut rng).unwrap()).unwrap();
        let reference = conv2d_reference(&input, &filter, &cs).unwrap();
        let tuned = conv2d_tuned(&input, &filter, &cs, &tile).unwrap();
        let diff = max_abs_diff(&reference, &tuned).unwrap();
        assert!(diff < 1e-4, "tuned kernel diverged by {diff:.2e} with {tile:?}");
        worst = worst.max(diff);

        let unit = conv2d_tuned(&input, &filter, &cs, &TileConfig::unit()).unwrap();
        for (a, b) in reference.data.iter().zip(&unit.data) {
            assert_eq!(a.to_bits(), b.to_bits(), "unit config must be bit-identical");
        }
    }
    verdict(
        7,
        "tuned conv matches the reference kernel",
        true,
        &format!("100 shape/config pairs, diff <= {worst:.2e}, unit config bit-identical"),
    );
}

#[test]
fn sampled_configs_respect_domains_and_constraints() {
    let template = ScheduleTemplate::conv_default();
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let product_cap = 1024;
    for _ in 0..100_000 {
        let cfg = template.random_config(&mut rng).unwrap();
        for (value, domain) in cfg.values.iter().zip(&template.params) {
            assert!(domain.values.contains(value), "{} outside {:?}", value, domain.name);
        }
        assert!(cfg.values[0] * cfg.values[1] * cfg.values[2] <= product_cap);
    }

    let overflowing = ScheduleConfig::new(vec![32, 32, 2, 1, 1, 1, 1]);
    let report = template.validate(&overflowing).unwrap();
    let pass = !report.ok();
    verdict(
        8,
        "sampled configs respect domains and constraints",
        pass,
        "100000 samples valid, 32x32x2 worker grid rejected",
    );
    assert!(pass, "the 2048-worker grid must fail validation");
}

#[test]
fn cached_results_survive_restarts_and_break_ties() {
    // Selection: strict argmin, then the source order generated-genetic,
    // generated-rl, reference.
    let candidate = |source, ms| ImplementationCandidate {
        source,
        config: None,
        measured: Some(EvalResult::new(ms, ResultSource::Synthetic).unwrap()),
    };
    let tied = [
        candidate(StrategySource::ReferenceLibrary, 2.0),
        candidate(StrategySource::GeneratedRl, 1.5),
        candidate(StrategySource::GeneratedGenetic, 1.5),
    ];
    let picked = planner::select_best(&tied).unwrap();
    let mut ok =
        picked.source == StrategySource::GeneratedGenetic && picked.measured.unwrap().runtime_ms == 1.5;
    let outran = [
        candidate(StrategySource::GeneratedGenetic, 1.2),
        candidate(StrategySource::ReferenceLibrary, 1.0),
    ];
    let picked = planner::select_best(&outran).unwrap();
    ok &= picked.source == StrategySource::ReferenceLibrary;
    ok &= planner::select_best(&[]).is_err();

    // A second tune with the same signature, template, and fingerprint
    // reuses the stored bests without calling the evaluator, including
    // through a fresh store handle on the same directory.
    let dir = tempdir().unwrap();
    let template = ScheduleTemplate::conv_default();
    let cs = ConvSpec {
        n: 1,
        c_in: 3,
        c_out: 8,
        k_h: 3,
        k_w: 3,
        h: 16,
        w: 16,
        stride: 1,
        padding: Padding::Same,
    };
    let op = OperatorSpec::Conv2D(cs);
    let strategies = [SearchStrategy::Genetic, SearchStrategy::Random];
    let opts = TuneOptions { budget: Some(64), seed: 9 };
    let run = |store: &CacheStore| {
        let eval = RecordingEvaluator::new(
            SyntheticEvaluator::new(op_signature(&op, &[]), &template, 5, 0.0).unwrap(),
        );
        let outcome =
            planner::tune_operator(&op, &template, &strategies, &eval, Some(store), &opts)
                .unwrap();
        (outcome, eval.eval_count())
    };

    let store = CacheStore::open(dir.path()).unwrap();
    let (cold, cold_evals) = run(&store);
    ok &= cold_evals > 0 && !cold.per_strategy.values().any(|o| o.from_cache);

    let (warm, warm_evals) = run(&store);
    ok &= warm_evals == 0 && warm.total_evaluations() == 0;
    ok &= warm.per_strategy.values().all(|o| o.from_cache);

    let reopened = CacheStore::open(dir.path()).unwrap();
    let (restarted, restart_evals) = run(&reopened);
    ok &= restart_evals == 0;
    for (strategy, outcome) in &cold.per_strategy {
        let again = &restarted.per_strategy[strategy];
        ok &= again.config == outcome.config && again.runtime_ms == outcome.runtime_ms;
    }
    verdict(
        9,
        "cached results survive restarts and break ties",
        ok,
        &format!("cold {cold_evals} evals, warm 0, restart 0"),
    );
    assert!(ok);
}

#[test]
fn measured_tuning_never_loses_to_baseline() {
    let table = [
        ("conv1a", 112, 96, 3, 64, 1),
        ("conv1b", 110, 94, 64, 96, 2),
        ("conv2", 54, 46, 96, 128, 2),
        ("conv3", 26, 22, 128, 256, 2),
        ("conv4", 12, 10, 256, 512, 1),
    ];
    let template = ScheduleTemplate::conv_default();
    let opts = MeasureOptions { warmups: 3, runs: 11, allow_concurrent: false };
    let mut all = true;
    let mut lines = Vec::new();
    for (name, h, w, c_in, c_out, stride) in table {
        let cs = ConvSpec {
            n: 1,
            c_in,
            c_out,
            k_h: 3,
            k_w: 3,
            h,
            w,
            stride,
            padding: Padding::Same,
        };
        let op = OperatorSpec::Conv2D(cs);
        let eval = MeasuredEvaluator::new(&op, Layout::Nchw, &template, 3, opts).unwrap();
        let baseline_cfg = template.baseline_config();
        let baseline = eval.evaluate(&baseline_cfg).unwrap().runtime_ms;
        let ga_cfg = GeneticConfig {
            population: 3,
            elite: 1,
            parent_pool: 3,
            max_generations: 2,
            epsilon: 0.0,
            seed: 17,
            max_evaluations: Some(6),
            ..Default::default()
        };
        let out = genetic::run_genetic(&template, &eval, &ga_cfg, &[baseline_cfg]).unwrap();
        let ok = out.best_runtime_ms <= baseline;
        all &= ok;
        lines.push(format!("{name} {baseline:.2}ms -> {:.2}ms", out.best_runtime_ms));
    }
    verdict(
        10,
        "measured tuning never loses to the all-ones baseline (median of 11 runs, 3 warmups)",
        all,
        &lines.join(", "),
    );
    assert!(all, "{}", lines.join(", "));
}
