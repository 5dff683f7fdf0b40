//! Proximal policy optimization with a diagonal Gaussian policy.
//!
//! One network carries both heads: its last layer emits `n` action means
//! followed by one state value, so every hidden layer is shared. The log
//! standard deviations are free parameters, independent of the state.
//!
//! The loss is minimized:
//!
//! ```text
//! L = -E[min(rho A, clip(rho, 1-eps, 1+eps) A)] + c1 E[(V - V_target)^2] - c2 E[H]
//! ```

use std::f64::consts::{E, PI};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{AgentError, NetError};
use crate::kv::KvConfig;
use crate::mdp::{ActionDelta, Decision, Episode, Observation, Policy};
use crate::nn::{read_f64, AdamConfig, AdamState, Mlp};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 1.0;

/// What the value head regresses onto.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueTarget {
    /// GAE return `A + V_old`.
    Return,
    /// The value recorded at collection time.
    RolloutValue,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PpoHyper {
    pub clip_eps: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub gae_lambda: f64,
    pub gamma: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub rollout_frames: usize,
    pub lr: f64,
    /// Rewards are multiplied by this before advantages and returns are
    /// formed; it only conditions the value regression.
    pub reward_scale: f64,
    /// Global L2 bound on each minibatch gradient; 0 disables.
    pub max_grad_norm: f64,
    pub value_target: ValueTarget,
    pub hidden: Vec<usize>,
    pub init_log_std: f64,
}

impl Default for PpoHyper {
    fn default() -> Self {
        Self {
            clip_eps: 0.2,
            value_coef: 0.5,
            entropy_coef: 0.01,
            gae_lambda: 0.95,
            gamma: 0.99,
            epochs: 4,
            minibatch: 256,
            rollout_frames: 2048,
            lr: 3e-4,
            reward_scale: 0.1,
            max_grad_norm: 0.5,
            value_target: ValueTarget::Return,
            hidden: vec![256],
            init_log_std: 0.0,
        }
    }
}

impl PpoHyper {
    /// Hidden layout for the four-muscle agent.
    pub fn four_muscle() -> Self {
        Self {
            hidden: vec![250, 250, 250],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        let ok = self.clip_eps > 0.0
            && self.clip_eps < 1.0
            && self.value_coef >= 0.0
            && self.entropy_coef >= 0.0
            && self.gae_lambda > 0.0
            && self.gae_lambda <= 1.0
            && self.gamma > 0.0
            && self.gamma <= 1.0
            && self.epochs > 0
            && self.minibatch > 0
            && self.rollout_frames > 0
            && self.lr > 0.0
            && self.reward_scale > 0.0
            && self.max_grad_norm >= 0.0
            && !self.hidden.is_empty();
        if ok {
            Ok(())
        } else {
            Err(crate::error::ConfigError::Constraint(format!(
                "invalid PPO hyperparameters: {self:?}"
            ))
            .into())
        }
    }

    pub fn apply_kv(&mut self, kv: &KvConfig) -> Result<(), AgentError> {
        self.clip_eps = kv.get_or("ppo.clip_eps", self.clip_eps)?;
        self.value_coef = kv.get_or("ppo.value_coef", self.value_coef)?;
        self.entropy_coef = kv.get_or("ppo.entropy_coef", self.entropy_coef)?;
        self.gae_lambda = kv.get_or("ppo.gae_lambda", self.gae_lambda)?;
        self.gamma = kv.get_or("gamma", self.gamma)?;
        self.epochs = kv.get_or("ppo.epochs", self.epochs)?;
        self.minibatch = kv.get_or("ppo.minibatch", self.minibatch)?;
        self.rollout_frames = kv.get_or("ppo.rollout_frames", self.rollout_frames)?;
        self.lr = kv.get_or("ppo.lr", self.lr)?;
        self.reward_scale = kv.get_or("ppo.reward_scale", self.reward_scale)?;
        self.max_grad_norm = kv.get_or("ppo.max_grad_norm", self.max_grad_norm)?;
        self.init_log_std = kv.get_or("ppo.init_log_std", self.init_log_std)?;
        if kv.contains("ppo.hidden") {
            self.hidden = kv.require_list("ppo.hidden")?;
        }
        if let Some(v) = kv.get_str("ppo.value_target") {
            self.value_target = match v {
                "return" => ValueTarget::Return,
                "rollout_value" => ValueTarget::RolloutValue,
                other => {
                    return Err(crate::error::ConfigError::Invalid {
                        key: "ppo.value_target".into(),
                        value: other.into(),
                    }
                    .into())
                }
            };
        }
        self.validate()
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("ppo.clip_eps", self.clip_eps.to_string());
        kv.set("ppo.value_coef", self.value_coef.to_string());
        kv.set("ppo.entropy_coef", self.entropy_coef.to_string());
        kv.set("ppo.gae_lambda", self.gae_lambda.to_string());
        kv.set("gamma", self.gamma.to_string());
        kv.set("ppo.epochs", self.epochs.to_string());
        kv.set("ppo.minibatch", self.minibatch.to_string());
        kv.set("ppo.rollout_frames", self.rollout_frames.to_string());
        kv.set("ppo.lr", self.lr.to_string());
        kv.set("ppo.reward_scale", self.reward_scale.to_string());
        kv.set("ppo.max_grad_norm", self.max_grad_norm.to_string());
        kv.set("ppo.init_log_std", self.init_log_std.to_string());
        let hidden: Vec<String> = self.hidden.iter().map(|h| h.to_string()).collect();
        kv.set("ppo.hidden", hidden.join(", "));
        kv.set(
            "ppo.value_target",
            match self.value_target {
                ValueTarget::Return => "return",
                ValueTarget::RolloutValue => "rollout_value",
            },
        );
        kv
    }
}

/// Sum over dimensions of the diagonal Gaussian log density.
pub fn gaussian_logprob(mean: &[f64], log_std: &[f64], action: &[f64]) -> f64 {
    mean.iter()
        .zip(log_std)
        .zip(action)
        .map(|((m, ls), a)| {
            let z = (a - m) / ls.exp();
            -0.5 * z * z - ls - 0.5 * (2.0 * PI).ln()
        })
        .sum()
}

/// Differential entropy of the diagonal Gaussian.
pub fn gaussian_entropy(log_std: &[f64]) -> f64 {
    log_std
        .iter()
        .map(|ls| ls + 0.5 * (2.0 * PI * E).ln())
        .sum()
}

/// Generalized advantage estimates over one contiguous segment.
///
/// Step `t` bootstraps from `values[t + 1]`, the last step from `bootstrap`.
/// A `true` in `dones` marks a terminal step: nothing is bootstrapped past it
/// and the recursion restarts. Returns `(advantages, advantages + values)`.
pub fn gae_advantages(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    assert!(values.len() == n && dones.len() == n, "equal lengths");
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let next_value = if t + 1 < n { values[t + 1] } else { bootstrap };
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        running = delta + gamma * lambda * live * running;
        adv[t] = running;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// Shared-trunk policy/value network plus state-independent log-stds.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyValueNet {
    mlp: Mlp,
    log_std: Vec<f64>,
}

impl PolicyValueNet {
    pub fn new(
        n_muscles: usize,
        hidden: &[usize],
        init_log_std: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, NetError> {
        let mut dims = vec![4 + n_muscles];
        dims.extend_from_slice(hidden);
        dims.push(n_muscles + 1);
        let mut mlp = Mlp::new(&dims, rng)?;
        // Start with action means near zero.
        let last = mlp.n_layers() - 1;
        let fan_in = dims[dims.len() - 2];
        for w in &mut mlp.weights_mut(last)[..n_muscles * fan_in] {
            *w *= 0.01;
        }
        Ok(Self {
            mlp,
            log_std: vec![init_log_std.clamp(LOG_STD_MIN, LOG_STD_MAX); n_muscles],
        })
    }

    pub fn from_parts(mlp: Mlp, log_std: Vec<f64>) -> Result<Self, NetError> {
        let n = log_std.len();
        if n == 0 || mlp.input_dim() != 4 + n || mlp.output_dim() != n + 1 {
            return Err(NetError::Format(format!(
                "policy net dims {:?} do not fit {n} muscles",
                mlp.dims()
            )));
        }
        Ok(Self {
            mlp,
            log_std: log_std
                .into_iter()
                .map(|l| l.clamp(LOG_STD_MIN, LOG_STD_MAX))
                .collect(),
        })
    }

    pub fn n_muscles(&self) -> usize {
        self.log_std.len()
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp {
        &mut self.mlp
    }

    pub fn log_std(&self) -> &[f64] {
        &self.log_std
    }

    pub fn set_log_std(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.log_std.len());
        for (dst, v) in self.log_std.iter_mut().zip(values) {
            *dst = v.clamp(LOG_STD_MIN, LOG_STD_MAX);
        }
    }

    pub fn n_params(&self) -> usize {
        self.mlp.n_params() + self.log_std.len()
    }

    /// `(means, value)` for one observation.
    pub fn evaluate(&self, obs: &Observation) -> (Vec<f64>, f64) {
        let mut out = self
            .mlp
            .forward(&obs.network_input())
            .expect("observation width matches network");
        let value = out.pop().unwrap();
        (out, value)
    }

    pub fn value(&self, obs: &Observation) -> f64 {
        self.evaluate(obs).1
    }

    /// Samples (or takes the mean) and clamps into the action box. The
    /// log-probability is that of the unclamped sample.
    pub fn act(&self, obs: &Observation, deterministic: bool, rng: &mut ChaCha8Rng) -> Decision {
        let (mean, value) = self.evaluate(obs);
        let sample: Vec<f64> = if deterministic {
            mean.clone()
        } else {
            mean.iter()
                .zip(&self.log_std)
                .map(|(m, ls)| {
                    let xi: f64 = StandardNormal.sample(rng);
                    m + ls.exp() * xi
                })
                .collect()
        };
        let logprob = gaussian_logprob(&mean, &self.log_std, &sample);
        Decision {
            action: ActionDelta::clamped(sample.clone()),
            sample,
            logprob,
            value,
            index: None,
        }
    }

    /// Checkpoint: the network in the standard binary format, then the
    /// log-stds as little-endian `f64`. The network's last layer holds the
    /// action means in its first `n` rows and the value in its last row.
    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<(), NetError> {
        self.mlp.write_to(out)?;
        for ls in &self.log_std {
            out.write_all(&ls.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(input: &mut R) -> Result<Self, NetError> {
        let mlp = Mlp::read_from(input)?;
        let n = mlp.output_dim().saturating_sub(1);
        let log_std = (0..n)
            .map(|_| read_f64(input))
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_parts(mlp, log_std)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NetError> {
        let mut out = BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, NetError> {
        Self::read_from(&mut BufReader::new(std::fs::File::open(path)?))
    }
}

/// Read-only policy used while a rollout is collected.
#[derive(Debug, Clone)]
pub struct PolicySnapshot {
    pub id: u64,
    pub net: Arc<PolicyValueNet>,
    pub deterministic: bool,
}

impl Policy for PolicySnapshot {
    fn n_muscles(&self) -> usize {
        self.net.n_muscles()
    }

    fn decide(&self, obs: &Observation, rng: &mut ChaCha8Rng) -> Decision {
        self.net.act(obs, self.deterministic, rng)
    }
}

/// Episodes gathered under one snapshot.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub snapshot_id: u64,
    pub episodes: Vec<Episode>,
}

impl Rollout {
    pub fn frames(&self) -> usize {
        self.episodes.iter().map(Episode::len).sum()
    }
}

/// Flattened training samples.
#[derive(Debug, Clone, Default)]
pub struct PpoBatch {
    pub obs_dim: usize,
    pub n_muscles: usize,
    /// `len x obs_dim`, already scaled for the network.
    pub inputs: Vec<f64>,
    /// `len x n_muscles`, the unclamped samples.
    pub actions: Vec<f64>,
    pub old_logprobs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub value_targets: Vec<f64>,
}

impl PpoBatch {
    pub fn len(&self) -> usize {
        self.old_logprobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.old_logprobs.is_empty()
    }

    /// Rescales advantages to zero mean and unit standard deviation.
    pub fn normalize_advantages(&mut self) {
        let n = self.advantages.len() as f64;
        if n < 2.0 {
            return;
        }
        let mean = self.advantages.iter().sum::<f64>() / n;
        let var = self
            .advantages
            .iter()
            .map(|a| (a - mean).powi(2))
            .sum::<f64>()
            / n;
        let std = var.sqrt() + 1e-8;
        for a in &mut self.advantages {
            *a = (*a - mean) / std;
        }
    }

    fn select(&self, idx: &[usize]) -> PpoBatch {
        let mut out = PpoBatch {
            obs_dim: self.obs_dim,
            n_muscles: self.n_muscles,
            ..Default::default()
        };
        for &i in idx {
            out.inputs
                .extend_from_slice(&self.inputs[i * self.obs_dim..(i + 1) * self.obs_dim]);
            out.actions
                .extend_from_slice(&self.actions[i * self.n_muscles..(i + 1) * self.n_muscles]);
            out.old_logprobs.push(self.old_logprobs[i]);
            out.advantages.push(self.advantages[i]);
            out.value_targets.push(self.value_targets[i]);
        }
        out
    }
}

/// Loss value and its parts, all in minimized form.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub total: f64,
    /// `-E[min(rho A, clip(rho) A)]`.
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
}

/// PPO loss on `batch` and its gradient with respect to every parameter
/// (network parameters first, then the log-stds).
pub fn ppo_loss(net: &PolicyValueNet, batch: &PpoBatch, hyper: &PpoHyper) -> (LossParts, Vec<f64>) {
    let b = batch.len();
    let n = net.n_muscles();
    let out_dim = n + 1;
    let cache = net
        .mlp
        .forward_batch(&batch.inputs, b)
        .expect("batch inputs match network width");
    let out = cache.output();
    let stds: Vec<f64> = net.log_std.iter().map(|l| l.exp()).collect();
    let inv_b = 1.0 / b as f64;
    let (lo, hi) = (1.0 - hyper.clip_eps, 1.0 + hyper.clip_eps);

    let mut upstream = vec![0.0; b * out_dim];
    let mut log_std_grad = vec![0.0; n];
    let mut surrogate_sum = 0.0;
    let mut value_sum = 0.0;
    let mut clipped = 0usize;
    for i in 0..b {
        let row = &out[i * out_dim..(i + 1) * out_dim];
        let mean = &row[..n];
        let value = row[n];
        let action = &batch.actions[i * n..(i + 1) * n];
        let logprob = gaussian_logprob(mean, &net.log_std, action);
        let ratio = (logprob - batch.old_logprobs[i]).exp();
        let adv = batch.advantages[i];
        let clipped_ratio = ratio.clamp(lo, hi);
        let unclipped_term = ratio * adv;
        let clipped_term = clipped_ratio * adv;
        if ratio < lo || ratio > hi {
            clipped += 1;
        }
        // d(-surrogate)/d logprob
        let dlogp = if unclipped_term <= clipped_term {
            surrogate_sum += unclipped_term;
            -inv_b * adv * ratio
        } else {
            surrogate_sum += clipped_term;
            0.0
        };
        let grad_row = &mut upstream[i * out_dim..(i + 1) * out_dim];
        for j in 0..n {
            let z = (action[j] - mean[j]) / stds[j];
            grad_row[j] = dlogp * z / stds[j];
            log_std_grad[j] += dlogp * (z * z - 1.0);
        }
        let err = value - batch.value_targets[i];
        value_sum += err * err;
        grad_row[n] = hyper.value_coef * 2.0 * err * inv_b;
    }
    for g in &mut log_std_grad {
        *g -= hyper.entropy_coef;
    }
    let entropy = gaussian_entropy(&net.log_std);
    let policy = -surrogate_sum * inv_b;
    let value = value_sum * inv_b;
    let parts = LossParts {
        total: policy + hyper.value_coef * value - hyper.entropy_coef * entropy,
        policy,
        value,
        entropy,
        clip_fraction: clipped as f64 * inv_b,
    };
    let mut grads = net.mlp.backward(&cache, &upstream);
    grads.extend_from_slice(&log_std_grad);
    (parts, grads)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct UpdateStats {
    pub loss: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub clip_fraction: f64,
    pub entropy: f64,
    pub minibatches: usize,
}

pub struct PpoAgent {
    net: PolicyValueNet,
    adam: AdamState,
    pub hyper: PpoHyper,
    snapshot_id: u64,
    shuffle_rng: ChaCha8Rng,
}

impl PpoAgent {
    pub fn new(n_muscles: usize, hyper: PpoHyper, seed: u64) -> Result<Self, AgentError> {
        hyper.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = PolicyValueNet::new(n_muscles, &hyper.hidden, hyper.init_log_std, &mut rng)?;
        Ok(Self::from_net(net, hyper, seed))
    }

    pub fn from_net(net: PolicyValueNet, hyper: PpoHyper, seed: u64) -> Self {
        let adam = AdamState::new(net.n_params(), AdamConfig::with_lr(hyper.lr));
        Self {
            net,
            adam,
            hyper,
            snapshot_id: 0,
            shuffle_rng: ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15),
        }
    }

    pub fn net(&self) -> &PolicyValueNet {
        &self.net
    }

    pub fn snapshot_id(&self) -> u64 {
        self.snapshot_id
    }

    /// Frozen copy of the current policy for rollout collection.
    pub fn snapshot(&self, deterministic: bool) -> PolicySnapshot {
        PolicySnapshot {
            id: self.snapshot_id,
            net: Arc::new(self.net.clone()),
            deterministic,
        }
    }

    /// Turns complete episodes into a training batch with GAE advantages.
    pub fn build_batch(&self, rollout: &Rollout) -> PpoBatch {
        let n = self.net.n_muscles();
        let mut batch = PpoBatch {
            obs_dim: 4 + n,
            n_muscles: n,
            ..Default::default()
        };
        let scale = self.hyper.reward_scale;
        for ep in &rollout.episodes {
            if ep.is_empty() {
                continue;
            }
            let rewards: Vec<f64> = ep
                .steps
                .iter()
                .map(|s| s.transition.reward * scale)
                .collect();
            let values: Vec<f64> = ep.steps.iter().map(|s| s.value).collect();
            let dones: Vec<bool> = ep.steps.iter().map(|s| s.transition.crashed).collect();
            let last = &ep.steps[ep.len() - 1].transition;
            let bootstrap = if last.crashed {
                0.0
            } else {
                self.net.value(&last.next_obs)
            };
            let (adv, returns) = gae_advantages(
                &rewards,
                &values,
                &dones,
                bootstrap,
                self.hyper.gamma,
                self.hyper.gae_lambda,
            );
            for (k, step) in ep.steps.iter().enumerate() {
                batch.inputs.extend(step.transition.obs.network_input());
                batch.actions.extend_from_slice(&step.sample);
                batch.old_logprobs.push(step.logprob);
                batch.advantages.push(adv[k]);
                batch.value_targets.push(match self.hyper.value_target {
                    ValueTarget::Return => returns[k],
                    ValueTarget::RolloutValue => step.value,
                });
            }
        }
        batch
    }

    /// K epochs of minibatch Adam steps on one on-policy rollout. The rollout
    /// must come from the current snapshot; afterwards the snapshot id
    /// advances so the rollout cannot be reused.
    pub fn update(&mut self, rollout: &Rollout) -> Result<UpdateStats, AgentError> {
        if rollout.snapshot_id != self.snapshot_id {
            return Err(AgentError::StaleRollout {
                rollout: rollout.snapshot_id,
                current: self.snapshot_id,
            });
        }
        let mut batch = self.build_batch(rollout);
        if batch.is_empty() {
            return Err(AgentError::EmptyRollout);
        }
        batch.normalize_advantages();
        let stats = self.update_on_batch(&batch);
        self.snapshot_id += 1;
        Ok(stats)
    }

    /// Runs the optimization epochs on an already prepared batch.
    pub fn update_on_batch(&mut self, batch: &PpoBatch) -> UpdateStats {
        let mut order: Vec<usize> = (0..batch.len()).collect();
        let mut stats = UpdateStats::default();
        let mlp_len = self.net.mlp.n_params();
        let mut flat = Vec::with_capacity(self.net.n_params());
        for _ in 0..self.hyper.epochs {
            order.shuffle(&mut self.shuffle_rng);
            for chunk in order.chunks(self.hyper.minibatch) {
                let mb = batch.select(chunk);
                let (parts, mut grads) = ppo_loss(&self.net, &mb, &self.hyper);
                clip_grad_norm(&mut grads, self.hyper.max_grad_norm);
                flat.clear();
                flat.extend_from_slice(self.net.mlp.params());
                flat.extend_from_slice(&self.net.log_std);
                self.adam.step(&mut flat, &grads);
                self.net.mlp.params_mut().copy_from_slice(&flat[..mlp_len]);
                let log_std = flat[mlp_len..].to_vec();
                self.net.set_log_std(&log_std);
                stats.loss += parts.total;
                stats.policy_loss += parts.policy;
                stats.value_loss += parts.value;
                stats.clip_fraction += parts.clip_fraction;
                stats.entropy += parts.entropy;
                stats.minibatches += 1;
            }
        }
        let m = stats.minibatches.max(1) as f64;
        stats.loss /= m;
        stats.policy_loss /= m;
        stats.value_loss /= m;
        stats.clip_fraction /= m;
        stats.entropy /= m;
        stats
    }
}

/// Scales `grads` so their L2 norm is at most `max_norm` (0 disables).
pub fn clip_grad_norm(grads: &mut [f64], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads {
            *g *= s;
        }
    }
}
