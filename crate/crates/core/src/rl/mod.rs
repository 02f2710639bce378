//! Reinforcement-learning schedule search. The agent walks the config
//! space one parameter change at a time: an action picks (parameter,
//! value) from the flattened template domains, the evaluator prices the
//! resulting config, and the reward compares that cost against a damped
//! running average of everything seen so far. A policy/value MLP is
//! trained on-policy between episodes.

pub mod mlp;
pub mod ppo;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluator::{AverageMode, Evaluate, RuntimeTracker};
use crate::graph::{ConvSpec, Padding};
use crate::schedule::{ScheduleConfig, ScheduleTemplate};
use mlp::{Mlp, MlpSpec};
use ppo::{log_softmax, PpoSettings, PpoTrainer, RolloutBuffer, Transition};

pub const OBSERVATION_DIM: usize = 17;

/// Order of the seven schedule parameters inside the observation.
pub const SCHEDULE_PARAM_ORDER: [&str; 7] =
    ["T_x", "T_y", "T_z", "Tile_x", "Tile_y", "Tile_z", "Tile_rz"];

/// Builds the 17-feature observation: conv geometry, padding flag, current
/// schedule values, and the running-average runtime. Counts are log2
/// scaled; the padding flag (0 = VALID, 1 = SAME) and the average in
/// milliseconds stay raw.
pub fn observation(
    conv: &ConvSpec,
    named_cfg: &BTreeMap<String, u64>,
    alpha_ms: f64,
) -> Result<[f64; OBSERVATION_DIM]> {
    let mut raw = [0.0f64; OBSERVATION_DIM];
    raw[0] = conv.n as f64;
    raw[1] = conv.c_in as f64;
    raw[2] = conv.c_out as f64;
    raw[3] = conv.k_h as f64;
    raw[4] = conv.k_w as f64;
    raw[5] = conv.h as f64;
    raw[6] = conv.w as f64;
    raw[7] = conv.stride as f64;
    raw[8] = match conv.padding {
        Padding::Valid => 0.0,
        Padding::Same => 1.0,
    };
    for (i, name) in SCHEDULE_PARAM_ORDER.iter().enumerate() {
        let value = *named_cfg.get(*name).ok_or_else(|| {
            Error::InvalidParams(format!("schedule config lacks parameter '{name}'"))
        })?;
        if value == 0 {
            return Err(Error::InvalidParams(format!("parameter '{name}' must be positive")));
        }
        raw[9 + i] = value as f64;
    }
    raw[16] = alpha_ms;

    let mut out = raw;
    for (i, slot) in out.iter_mut().enumerate() {
        if i != 8 && i != 16 {
            *slot = slot.log2();
        }
    }
    Ok(out)
}

/// Splits a flat action index into (parameter index, value index). Actions
/// enumerate every parameter's domain back to back in template order.
pub fn decode_action(template: &ScheduleTemplate, action: usize) -> Result<(usize, usize)> {
    let size = template.flat_size();
    let mut offset = 0;
    for (param_idx, p) in template.params.iter().enumerate() {
        if action < offset + p.values.len() {
            return Ok((param_idx, action - offset));
        }
        offset += p.values.len();
    }
    Err(Error::IndexOutOfRange { action, size })
}

/// Reward for observing cost `beta` when the damped average so far is
/// `alpha_prev`: improvement over the average, with regressions clamped at
/// twice the average so one disastrous config cannot dominate the episode.
pub fn step_reward(alpha_prev: f64, beta: f64) -> f64 {
    alpha_prev - beta.min(2.0 * alpha_prev)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RlConfig {
    pub episodes: usize,
    /// Steps per episode (the rollout length).
    pub horizon: usize,
    pub settings: PpoSettings,
    pub average: AverageMode,
    pub seed: u64,
    /// Hard cap on evaluator calls across the whole search.
    pub max_evaluations: Option<usize>,
    /// Hidden architecture override; None uses the default trunk.
    pub hidden_override: Option<MlpSpec>,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            episodes: 10,
            horizon: 64,
            settings: PpoSettings::default(),
            average: AverageMode::default(),
            seed: 0,
            max_evaluations: None,
            hidden_override: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub beta_ms: f64,
    pub alpha_ms: f64,
    pub reward: f64,
    /// Mean loss of the most recent policy update; 0 before the first.
    pub loss: f64,
    pub entropy: f64,
    pub best_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RlOutcome {
    pub best: ScheduleConfig,
    pub best_runtime_ms: f64,
    pub evaluations: usize,
    pub episodes_run: usize,
    pub curve: Vec<CurvePoint>,
}

/// Samples an action from the policy; returns (action, log prob, value).
fn sample_action(
    net: &Mlp,
    obs: &[f64],
    rng: &mut ChaCha8Rng,
) -> (usize, f64, f64) {
    let cache = net.forward(obs, 1, None);
    let log_probs = log_softmax(&cache.policy_logits);
    let v = rng.gen::<f64>();
    let mut acc = 0.0;
    let mut action = log_probs.len() - 1;
    for (i, lp) in log_probs.iter().enumerate() {
        acc += lp.exp();
        if v < acc {
            action = i;
            break;
        }
    }
    (action, log_probs[action], cache.values[0])
}

/// Runs the search. The starting config (the template baseline unless
/// `start` overrides it) is benchmarked once up front, so the returned
/// best can never be worse than the seed. The working config and the
/// running average both persist across episode boundaries; only the
/// rollout buffer resets.
pub fn run_rl(
    template: &ScheduleTemplate,
    conv: &ConvSpec,
    evaluator: &dyn Evaluate,
    cfg: &RlConfig,
    start: Option<ScheduleConfig>,
) -> Result<RlOutcome> {
    template.validate_template()?;
    if cfg.horizon == 0 || cfg.episodes == 0 {
        return Err(Error::InvalidParams("episodes and horizon must be positive".into()));
    }
    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
    let net_seed: u64 = master.gen();
    let action_seed: u64 = master.gen();
    let trainer_seed: u64 = master.gen();

    let spec = match &cfg.hidden_override {
        Some(s) => {
            let mut s = s.clone();
            s.input_dim = OBSERVATION_DIM;
            s.policy_dim = template.flat_size();
            s
        }
        None => MlpSpec::policy_default(OBSERVATION_DIM, template.flat_size()),
    };
    let net = Mlp::new(spec, &mut ChaCha8Rng::seed_from_u64(net_seed))?;
    let mut trainer = PpoTrainer::new(net, cfg.settings.clone(), trainer_seed);
    let mut action_rng = ChaCha8Rng::seed_from_u64(action_seed);

    let mut current = match start {
        Some(c) => {
            let report = template.validate(&c)?;
            if !report.ok() {
                return Err(Error::InvalidConfig(format!(
                    "start config violates '{}'",
                    report.violations[0].constraint
                )));
            }
            c
        }
        None => template.baseline_config(),
    };

    let mut budget = cfg.max_evaluations;
    let mut evaluations = 0usize;
    let take_budget = |budget: &mut Option<usize>| -> bool {
        match budget {
            Some(0) => false,
            Some(n) => {
                *n -= 1;
                true
            }
            None => true,
        }
    };

    // Seed measurement: prices the starting config and starts the
    // best-ever tracking.
    if !take_budget(&mut budget) {
        return Err(Error::InvalidParams("evaluation budget too small to start".into()));
    }
    let seed_result = evaluator.evaluate(&current)?;
    evaluations += 1;
    let mut best = (current.clone(), seed_result.runtime_ms);

    let mut tracker = RuntimeTracker::new(cfg.average);
    let mut curve = Vec::new();
    let mut last_loss = 0.0;
    let mut last_entropy = 0.0;
    let mut global_step = 0usize;
    let mut episodes_run = 0usize;

    'episodes: for _ in 0..cfg.episodes {
        let mut buffer = RolloutBuffer::default();
        let mut obs = observation(conv, &template.named(&current)?, tracker.alpha())?;
        for _ in 0..cfg.horizon {
            if !take_budget(&mut budget) {
                break 'episodes;
            }
            let (action, log_prob, value) = sample_action(&trainer.net, &obs, &mut action_rng);
            // Invalid moves (constraint violations) leave the config in
            // place; the step still pays for an evaluation of whatever
            // config we hold, mirroring a tuner that must run something
            // every iteration.
            let (param_idx, value_idx) = decode_action(template, action)?;
            let mut candidate = current.clone();
            candidate.values[param_idx] = template.params[param_idx].values[value_idx];
            if template.validate(&candidate)?.ok() {
                current = candidate;
            }
            let result = evaluator.evaluate(&current)?;
            evaluations += 1;
            let beta = result.runtime_ms;
            if beta < best.1 {
                best = (current.clone(), beta);
            }
            let alpha_prev = tracker.alpha();
            let alpha = tracker.update(beta);
            let reward = step_reward(alpha_prev, beta);
            global_step += 1;
            curve.push(CurvePoint {
                step: global_step,
                beta_ms: beta,
                alpha_ms: alpha,
                reward,
                loss: last_loss,
                entropy: last_entropy,
                best_ms: best.1,
            });
            buffer.transitions.push(Transition {
                observation: obs.to_vec(),
                action,
                reward,
                value,
                log_prob,
                done: false,
            });
            obs = observation(conv, &template.named(&current)?, tracker.alpha())?;
        }
        if buffer.len() < cfg.horizon {
            break;
        }
        // Bootstrap with the value of the state after the last step.
        let cache = trainer.net.forward(&obs, 1, None);
        buffer.bootstrap_value = Some(cache.values[0]);
        let stats = trainer.update(&buffer)?;
        last_loss = stats.total;
        last_entropy = stats.entropy;
        episodes_run += 1;
    }

    Ok(RlOutcome {
        best: best.0,
        best_runtime_ms: best.1,
        evaluations,
        episodes_run,
        curve,
    })
}
