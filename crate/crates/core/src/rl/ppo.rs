//! Clipped-surrogate policy optimization over rollouts collected by the
//! schedule-tuning environment. The loss minimized is
//! -mean(L_clip) + c1*mean((V - V_target)^2) - c2*mean(entropy); its
//! gradient is derived by hand and checked against finite differences in
//! the tests.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rl::mlp::{Gradients, Mlp};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpoSettings {
    /// Clip radius for the probability ratio.
    pub clip: f64,
    /// c1, weight of the squared value error.
    pub value_coeff: f64,
    /// c2, weight of the entropy term.
    pub entropy_coeff: f64,
    pub gamma: f64,
    /// GAE decay (the mu in the advantage recursion).
    pub lambda: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub learning_rate: f64,
    /// Multiplicative step-size decay applied after each update.
    pub lr_decay: f64,
    pub normalize_advantages: bool,
}

impl Default for PpoSettings {
    fn default() -> Self {
        Self {
            clip: 0.2,
            value_coeff: 0.15,
            entropy_coeff: 20.0,
            gamma: 0.99,
            lambda: 0.95,
            epochs: 4,
            minibatch: 16,
            learning_rate: 3e-4,
            lr_decay: 0.97,
            normalize_advantages: true,
        }
    }
}

/// One environment step as the learner sees it. The tuning environment
/// never terminates, so `done` stays false; it is kept so rollouts from
/// episodic environments fit the same buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub observation: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub value: f64,
    pub log_prob: f64,
    pub done: bool,
}

#[derive(Debug, Clone, Default)]
pub struct RolloutBuffer {
    pub transitions: Vec<Transition>,
    /// V(s_T) for the state after the last transition.
    pub bootstrap_value: Option<f64>,
}

impl RolloutBuffer {
    pub fn clear(&mut self) {
        self.transitions.clear();
        self.bootstrap_value = None;
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// Advantages via the backward recursion, plus value targets
    /// (advantage + rollout value).
    pub fn advantages_and_targets(&self, gamma: f64, lambda: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        let bootstrap = self.bootstrap_value.ok_or_else(|| {
            Error::InvalidParams("rollout buffer needs a bootstrap value before the update".into())
        })?;
        let rewards: Vec<f64> = self.transitions.iter().map(|t| t.reward).collect();
        let mut values: Vec<f64> = self.transitions.iter().map(|t| t.value).collect();
        values.push(bootstrap);
        let advantages = gae_advantages(&rewards, &values, gamma, lambda)?;
        let targets: Vec<f64> =
            advantages.iter().zip(&values).map(|(a, v)| a + v).collect();
        Ok((advantages, targets))
    }
}

/// Generalized advantage estimates. `values` carries one extra trailing
/// entry, the bootstrap V for the state after the final reward. With
/// delta_t = r_t + gamma*V_{t+1} - V_t, advantages follow
/// A_t = delta_t + gamma*lambda*A_{t+1}.
pub fn gae_advantages(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Result<Vec<f64>> {
    if values.len() != rewards.len() + 1 {
        return Err(Error::LengthMismatch { expected: rewards.len() + 1, got: values.len() });
    }
    let mut advantages = vec![0.0; rewards.len()];
    let mut carry = 0.0;
    for t in (0..rewards.len()).rev() {
        let delta = rewards[t] + gamma * values[t + 1] - values[t];
        carry = delta + gamma * lambda * carry;
        advantages[t] = carry;
    }
    Ok(advantages)
}

/// Row-wise log-softmax, numerically stabilized by the row max.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|v| v - log_sum).collect()
}

/// Minibatch view the loss consumes: observations are row-major
/// [batch * obs_dim].
pub struct PpoBatch<'a> {
    pub observations: &'a [f64],
    pub actions: &'a [usize],
    pub advantages: &'a [f64],
    pub value_targets: &'a [f64],
    pub old_log_probs: &'a [f64],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossStats {
    pub total: f64,
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
}

/// Loss and parameter gradient for one minibatch. `dropout_rng` follows
/// the forward-pass convention: Some enables training-mode dropout.
pub fn ppo_loss(
    net: &Mlp,
    batch: &PpoBatch,
    settings: &PpoSettings,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(LossStats, Gradients)> {
    let n = batch.actions.len();
    if n == 0 {
        return Err(Error::InvalidParams("empty minibatch".into()));
    }
    let a_dim = net.spec.policy_dim;
    assert_eq!(batch.observations.len(), n * net.spec.input_dim);
    assert_eq!(batch.advantages.len(), n);
    assert_eq!(batch.value_targets.len(), n);
    assert_eq!(batch.old_log_probs.len(), n);

    let cache = net.forward(batch.observations, n, dropout_rng);
    let inv_n = 1.0 / n as f64;
    let mut d_logits = vec![0.0; n * a_dim];
    let mut d_values = vec![0.0; n];
    let (mut clip_sum, mut value_sum, mut entropy_sum) = (0.0, 0.0, 0.0);

    for i in 0..n {
        let logits = &cache.policy_logits[i * a_dim..(i + 1) * a_dim];
        let log_probs = log_softmax(logits);
        let probs: Vec<f64> = log_probs.iter().map(|lp| lp.exp()).collect();
        let action = batch.actions[i];
        if action >= a_dim {
            return Err(Error::IndexOutOfRange { action, size: a_dim });
        }
        let adv = batch.advantages[i];
        let ratio = (log_probs[action] - batch.old_log_probs[i]).exp();
        let surr1 = ratio * adv;
        let clipped = ratio.clamp(1.0 - settings.clip, 1.0 + settings.clip);
        let surr2 = clipped * adv;
        clip_sum += surr1.min(surr2);
        // The surrogate only propagates gradient when the unclipped branch
        // is active: either it is the minimum, or the ratio sits inside the
        // clip window (where both branches coincide).
        let in_window = (1.0 - settings.clip..=1.0 + settings.clip).contains(&ratio);
        let coeff = if surr1 <= surr2 || in_window { ratio * adv } else { 0.0 };

        let entropy: f64 = -log_probs.iter().zip(&probs).map(|(lp, p)| p * lp).sum::<f64>();
        entropy_sum += entropy;

        let v = cache.values[i];
        let v_err = v - batch.value_targets[i];
        value_sum += v_err * v_err;
        d_values[i] = 2.0 * settings.value_coeff * v_err * inv_n;

        let row = &mut d_logits[i * a_dim..(i + 1) * a_dim];
        for k in 0..a_dim {
            let indicator = if k == action { 1.0 } else { 0.0 };
            // d(-L_clip)/dz_k
            let policy_term = -coeff * (indicator - probs[k]);
            // d(-c2 * S)/dz_k with dS/dz_k = -p_k (ln p_k + S)
            let entropy_term = settings.entropy_coeff * probs[k] * (log_probs[k] + entropy);
            row[k] = (policy_term + entropy_term) * inv_n;
        }
    }

    let stats = LossStats {
        policy: -clip_sum * inv_n,
        value: value_sum * inv_n,
        entropy: entropy_sum * inv_n,
        total: -clip_sum * inv_n + settings.value_coeff * value_sum * inv_n
            - settings.entropy_coeff * entropy_sum * inv_n,
    };
    if !stats.total.is_finite() {
        return Err(Error::NonFiniteLoss(format!(
            "policy {} value {} entropy {}",
            stats.policy, stats.value, stats.entropy
        )));
    }
    let grads = net.backward(&cache, &d_logits, &d_values);
    Ok((stats, grads))
}

/// Owns the network and optimizer state across updates.
pub struct PpoTrainer {
    pub net: Mlp,
    pub settings: PpoSettings,
    lr: f64,
    updates: usize,
    shuffle_rng: ChaCha8Rng,
}

impl PpoTrainer {
    pub fn new(net: Mlp, settings: PpoSettings, seed: u64) -> Self {
        let mut master = ChaCha8Rng::seed_from_u64(seed);
        let shuffle_rng = ChaCha8Rng::seed_from_u64(rand::Rng::gen(&mut master));
        let lr = settings.learning_rate;
        Self { net, settings, lr, updates: 0, shuffle_rng }
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    pub fn updates(&self) -> usize {
        self.updates
    }

    /// One PPO update over the buffer: `epochs` passes of shuffled
    /// minibatches, plain SGD, then step-size decay. Returns mean loss
    /// statistics across minibatches.
    pub fn update(&mut self, buffer: &RolloutBuffer) -> Result<LossStats> {
        if buffer.is_empty() {
            return Err(Error::InvalidParams("update on an empty rollout".into()));
        }
        let (mut advantages, targets) =
            buffer.advantages_and_targets(self.settings.gamma, self.settings.lambda)?;
        if self.settings.normalize_advantages {
            normalize_in_place(&mut advantages);
        }
        let n = buffer.len();
        let obs_dim = self.net.spec.input_dim;
        let mut flat_obs = vec![0.0; n * obs_dim];
        for (i, t) in buffer.transitions.iter().enumerate() {
            flat_obs[i * obs_dim..(i + 1) * obs_dim].copy_from_slice(&t.observation);
        }
        let actions: Vec<usize> = buffer.transitions.iter().map(|t| t.action).collect();
        let old_log_probs: Vec<f64> = buffer.transitions.iter().map(|t| t.log_prob).collect();

        let mut indices: Vec<usize> = (0..n).collect();
        let mut sums = LossStats { total: 0.0, policy: 0.0, value: 0.0, entropy: 0.0 };
        let mut steps = 0usize;
        for _ in 0..self.settings.epochs {
            indices.shuffle(&mut self.shuffle_rng);
            for chunk in indices.chunks(self.settings.minibatch.max(1)) {
                let mb_obs: Vec<f64> = chunk
                    .iter()
                    .flat_map(|&i| flat_obs[i * obs_dim..(i + 1) * obs_dim].iter().copied())
                    .collect();
                let mb_actions: Vec<usize> = chunk.iter().map(|&i| actions[i]).collect();
                let mb_adv: Vec<f64> = chunk.iter().map(|&i| advantages[i]).collect();
                let mb_targets: Vec<f64> = chunk.iter().map(|&i| targets[i]).collect();
                let mb_old: Vec<f64> = chunk.iter().map(|&i| old_log_probs[i]).collect();
                let batch = PpoBatch {
                    observations: &mb_obs,
                    actions: &mb_actions,
                    advantages: &mb_adv,
                    value_targets: &mb_targets,
                    old_log_probs: &mb_old,
                };
                let (stats, grads) = ppo_loss(&self.net, &batch, &self.settings, None)?;
                self.net.apply_gradients(&grads, self.lr);
                sums.total += stats.total;
                sums.policy += stats.policy;
                sums.value += stats.value;
                sums.entropy += stats.entropy;
                steps += 1;
            }
        }
        self.lr *= self.settings.lr_decay;
        self.updates += 1;
        let inv = 1.0 / steps.max(1) as f64;
        Ok(LossStats {
            total: sums.total * inv,
            policy: sums.policy * inv,
            value: sums.value * inv,
            entropy: sums.entropy * inv,
        })
    }
}

fn normalize_in_place(values: &mut [f64]) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    values.iter_mut().for_each(|v| *v = (*v - mean) / std);
}
