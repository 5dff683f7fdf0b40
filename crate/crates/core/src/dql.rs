//! Double deep Q-learning over a 21-way quantized activation delta.

use std::collections::VecDeque;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{AgentError, ConfigError, NetError};
use crate::kv::KvConfig;
use crate::mdp::{ActionDelta, Decision, Observation, Policy, Transition};
use crate::nn::{AdamConfig, AdamState, Mlp};

pub const N_ACTIONS: usize = 21;

/// The quantized action set `{-1.0, -0.9, ..., 1.0}` percent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DiscreteActionTable;

impl DiscreteActionTable {
    pub fn len(&self) -> usize {
        N_ACTIONS
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn value(&self, index: usize) -> f64 {
        assert!(index < N_ACTIONS, "action index {index} out of range");
        (index as f64 - 10.0) / 10.0
    }

    pub fn values(&self) -> [f64; N_ACTIONS] {
        std::array::from_fn(|i| self.value(i))
    }

    pub fn delta(&self, index: usize) -> ActionDelta {
        ActionDelta::clamped(vec![self.value(index)])
    }

    /// Index of the closest table entry.
    pub fn nearest(&self, value: f64) -> usize {
        ((value.clamp(-1.0, 1.0) * 10.0).round() + 10.0) as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayItem {
    pub obs: Observation,
    pub action: usize,
    pub reward: f64,
    pub next_obs: Observation,
    /// Only crashes end the return; time-limit truncation still bootstraps.
    pub terminal: bool,
}

impl ReplayItem {
    pub fn from_transition(t: &Transition, action: usize, reward_scale: f64) -> Self {
        Self {
            obs: t.obs.clone(),
            action,
            reward: t.reward * reward_scale,
            next_obs: t.next_obs.clone(),
            terminal: t.crashed,
        }
    }
}

/// FIFO ring of past transitions.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    items: VecDeque<ReplayItem>,
    capacity: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            items: VecDeque::with_capacity(capacity.min(1 << 20)),
            capacity,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, item: ReplayItem) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(item);
    }

    pub fn get(&self, i: usize) -> Option<&ReplayItem> {
        self.items.get(i)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ReplayItem> {
        self.items.iter()
    }

    /// Uniform draw of `min(batch, len)` distinct items.
    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Vec<&ReplayItem> {
        let k = batch.min(self.items.len());
        sample(rng, self.items.len(), k)
            .into_iter()
            .map(|i| &self.items[i])
            .collect()
    }
}

fn stack_inputs<'a>(obs: impl Iterator<Item = &'a Observation>, width: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for o in obs {
        let start = out.len();
        out.resize(start + width, 0.0);
        o.write_network_input(&mut out[start..]);
    }
    out
}

/// Lowest index among the maxima.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Double-DQN regression targets: the online net picks the next action, the
/// target net scores it.
pub fn q_target(batch: &[&ReplayItem], online: &Mlp, target: &Mlp, gamma: f64) -> Vec<f64> {
    assert!(!batch.is_empty(), "q_target on empty batch");
    let width = online.input_dim();
    let k = online.output_dim();
    let inputs = stack_inputs(batch.iter().map(|it| &it.next_obs), width);
    let q_online = online
        .forward_batch(&inputs, batch.len())
        .expect("input width");
    let q_target = target
        .forward_batch(&inputs, batch.len())
        .expect("input width");
    let (qo, qt) = (q_online.output(), q_target.output());
    batch
        .iter()
        .enumerate()
        .map(|(i, it)| {
            if it.terminal {
                it.reward
            } else {
                let a = argmax(&qo[i * k..(i + 1) * k]);
                it.reward + gamma * qt[i * k + a]
            }
        })
        .collect()
}

/// Epsilon-greedy choice over the Q outputs.
pub fn select_action<R: Rng + ?Sized>(
    obs: &Observation,
    online: &Mlp,
    epsilon: f64,
    rng: &mut R,
) -> usize {
    if epsilon > 0.0 && rng.random::<f64>() < epsilon {
        return rng.random_range(0..online.output_dim());
    }
    let q = online.forward(&obs.network_input()).expect("input width");
    argmax(&q)
}

/// One MSE step of the online net toward `y`. Returns the pre-step loss.
pub fn dql_step(
    batch: &[&ReplayItem],
    targets: &[f64],
    online: &mut Mlp,
    adam: &mut AdamState,
    max_grad_norm: f64,
) -> f64 {
    let b = batch.len();
    let k = online.output_dim();
    let inputs = stack_inputs(batch.iter().map(|it| &it.obs), online.input_dim());
    let cache = online.forward_batch(&inputs, b).expect("input width");
    let q = cache.output();
    let mut upstream = vec![0.0; b * k];
    let mut loss = 0.0;
    for (i, it) in batch.iter().enumerate() {
        let err = q[i * k + it.action] - targets[i];
        loss += err * err;
        upstream[i * k + it.action] = 2.0 * err / b as f64;
    }
    let mut grads = online.backward(&cache, &upstream);
    crate::ppo::clip_grad_norm(&mut grads, max_grad_norm);
    adam.step(online.params_mut(), &grads);
    loss / b as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct DqlHyper {
    pub hidden: Vec<usize>,
    pub buffer_capacity: usize,
    pub batch: usize,
    pub warmup: usize,
    pub target_copy_every: usize,
    pub eps_start: f64,
    pub eps_end: f64,
    /// Fraction of the frame budget over which epsilon is annealed.
    pub eps_fraction: f64,
    pub lr: f64,
    pub gamma: f64,
    pub reward_scale: f64,
    /// Global L2 bound on each gradient; 0 disables.
    pub max_grad_norm: f64,
}

impl Default for DqlHyper {
    fn default() -> Self {
        Self {
            hidden: vec![256],
            buffer_capacity: 100_000,
            batch: 64,
            warmup: 1000,
            target_copy_every: 500,
            eps_start: 1.0,
            eps_end: 0.05,
            eps_fraction: 0.2,
            lr: 1e-3,
            gamma: 0.99,
            reward_scale: 0.1,
            max_grad_norm: 10.0,
        }
    }
}

impl DqlHyper {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let ok = !self.hidden.is_empty()
            && self.buffer_capacity > 0
            && self.batch > 0
            && self.warmup >= 1
            && self.target_copy_every > 0
            && (0.0..=1.0).contains(&self.eps_start)
            && (0.0..=1.0).contains(&self.eps_end)
            && self.eps_fraction >= 0.0
            && self.lr > 0.0
            && self.gamma > 0.0
            && self.gamma <= 1.0
            && self.reward_scale > 0.0
            && self.max_grad_norm >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(ConfigError::Constraint(format!(
                "invalid DQL hyperparameters: {self:?}"
            )))
        }
    }

    /// Linear anneal from `eps_start` to `eps_end`, then flat.
    pub fn epsilon(&self, frame: usize, total_frames: usize) -> f64 {
        let horizon = self.eps_fraction * total_frames as f64;
        if horizon <= 0.0 {
            return self.eps_end;
        }
        let f = (frame as f64 / horizon).min(1.0);
        self.eps_start + f * (self.eps_end - self.eps_start)
    }

    pub fn apply_kv(&mut self, kv: &KvConfig) -> Result<(), ConfigError> {
        if kv.contains("dql.hidden") {
            self.hidden = kv.require_list("dql.hidden")?;
        }
        self.buffer_capacity = kv.get_or("dql.buffer_capacity", self.buffer_capacity)?;
        self.batch = kv.get_or("dql.batch", self.batch)?;
        self.warmup = kv.get_or("dql.warmup", self.warmup)?;
        self.target_copy_every = kv.get_or("dql.target_copy_every", self.target_copy_every)?;
        self.eps_start = kv.get_or("dql.eps_start", self.eps_start)?;
        self.eps_end = kv.get_or("dql.eps_end", self.eps_end)?;
        self.eps_fraction = kv.get_or("dql.eps_fraction", self.eps_fraction)?;
        self.lr = kv.get_or("dql.lr", self.lr)?;
        self.gamma = kv.get_or("gamma", self.gamma)?;
        self.reward_scale = kv.get_or("dql.reward_scale", self.reward_scale)?;
        self.max_grad_norm = kv.get_or("dql.max_grad_norm", self.max_grad_norm)?;
        self.validate()
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        let hidden: Vec<String> = self.hidden.iter().map(|h| h.to_string()).collect();
        kv.set("dql.hidden", hidden.join(", "));
        kv.set("dql.buffer_capacity", self.buffer_capacity.to_string());
        kv.set("dql.batch", self.batch.to_string());
        kv.set("dql.warmup", self.warmup.to_string());
        kv.set("dql.target_copy_every", self.target_copy_every.to_string());
        kv.set("dql.eps_start", self.eps_start.to_string());
        kv.set("dql.eps_end", self.eps_end.to_string());
        kv.set("dql.eps_fraction", self.eps_fraction.to_string());
        kv.set("dql.lr", self.lr.to_string());
        kv.set("gamma", self.gamma.to_string());
        kv.set("dql.reward_scale", self.reward_scale.to_string());
        kv.set("dql.max_grad_norm", self.max_grad_norm.to_string());
        kv
    }
}

pub struct DqlAgent {
    online: Mlp,
    target: Mlp,
    adam: AdamState,
    pub hyper: DqlHyper,
    buffer: ReplayBuffer,
    updates: u64,
    rng: ChaCha8Rng,
}

impl DqlAgent {
    pub fn new(n_muscles: usize, hyper: DqlHyper, seed: u64) -> Result<Self, AgentError> {
        if n_muscles != 1 {
            return Err(AgentError::TooManyMuscles { n: n_muscles });
        }
        hyper.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dims = vec![4 + n_muscles];
        dims.extend_from_slice(&hyper.hidden);
        dims.push(N_ACTIONS);
        let online = Mlp::new(&dims, &mut rng)?;
        Ok(Self::from_net(online, hyper, seed))
    }

    pub fn from_net(online: Mlp, hyper: DqlHyper, seed: u64) -> Self {
        Self {
            target: online.clone(),
            adam: AdamState::new(online.n_params(), AdamConfig::with_lr(hyper.lr)),
            buffer: ReplayBuffer::new(hyper.buffer_capacity),
            online,
            hyper,
            updates: 0,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x0dd1_5ea5_e0f0_0d11),
        }
    }

    pub fn online(&self) -> &Mlp {
        &self.online
    }

    pub fn target(&self) -> &Mlp {
        &self.target
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    /// Stores one environment transition. The action index is recovered
    /// from the decision that produced it.
    pub fn observe(&mut self, t: &Transition, action: usize) {
        self.buffer.push(ReplayItem::from_transition(
            t,
            action,
            self.hyper.reward_scale,
        ));
    }

    /// One minibatch update once the buffer holds `warmup` items; the target
    /// net is overwritten with the online net every `target_copy_every`
    /// updates. Returns the loss, or `None` while warming up.
    pub fn update(&mut self) -> Option<f64> {
        if self.buffer.len() < self.hyper.warmup {
            return None;
        }
        let batch = self.buffer.sample(self.hyper.batch, &mut self.rng);
        let y = q_target(&batch, &self.online, &self.target, self.hyper.gamma);
        let loss = dql_step(
            &batch,
            &y,
            &mut self.online,
            &mut self.adam,
            self.hyper.max_grad_norm,
        );
        self.updates += 1;
        if self
            .updates
            .is_multiple_of(self.hyper.target_copy_every as u64)
        {
            self.target = self.online.clone();
        }
        Some(loss)
    }

    pub fn policy(&self, epsilon: f64) -> QPolicy {
        QPolicy {
            net: self.online.clone(),
            epsilon,
        }
    }
}

/// Epsilon-greedy policy over a frozen Q network.
#[derive(Debug, Clone)]
pub struct QPolicy {
    pub net: Mlp,
    pub epsilon: f64,
}

impl QPolicy {
    pub fn new(net: Mlp, epsilon: f64) -> Result<Self, AgentError> {
        if net.input_dim() != 5 || net.output_dim() != N_ACTIONS {
            return Err(AgentError::ShapeMismatch {
                expected: vec![5, N_ACTIONS],
                found: vec![net.input_dim(), net.output_dim()],
            });
        }
        Ok(Self { net, epsilon })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NetError> {
        let mut out = BufWriter::new(std::fs::File::create(path)?);
        self.net.write_to(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Mlp, NetError> {
        Mlp::read_from(&mut BufReader::new(std::fs::File::open(path)?))
    }
}

impl Policy for QPolicy {
    fn n_muscles(&self) -> usize {
        1
    }

    fn decide(&self, obs: &Observation, rng: &mut ChaCha8Rng) -> Decision {
        let index = select_action(obs, &self.net, self.epsilon, rng);
        let mut d = Decision::plain(DiscreteActionTable.delta(index));
        d.index = Some(index);
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::{Activations, JointState};

    fn obs(phi: f64) -> Observation {
        Observation::new(
            JointState { phi, phi_dot: 0.0 },
            (phi, 0.0),
            &Activations::new(vec![0.2]).unwrap(),
        )
    }

    fn item(phi: f64, action: usize, reward: f64, terminal: bool) -> ReplayItem {
        ReplayItem {
            obs: obs(phi),
            action,
            reward,
            next_obs: obs(phi + 1.0),
            terminal,
        }
    }

    /// Network whose output equals `bias` for every input.
    fn constant_net(bias: &[f64]) -> Mlp {
        let mut m = Mlp::zeros(&[5, bias.len()]).unwrap();
        m.bias_mut(0).copy_from_slice(bias);
        m
    }

    #[test]
    fn action_table() {
        let t = DiscreteActionTable;
        let v = t.values();
        assert_eq!(v.len(), 21);
        assert_eq!(v[0], -1.0);
        assert_eq!(v[10], 0.0);
        assert_eq!(v[20], 1.0);
        for i in 0..21 {
            assert!((v[i] + v[20 - i]).abs() < 1e-15);
            assert_eq!(t.nearest(v[i]), i);
        }
        for w in v.windows(2) {
            assert!((w[1] - w[0] - 0.1).abs() < 1e-12);
        }
    }

    #[test]
    fn targets_terminal_and_gamma_zero() {
        let online = constant_net(&[1.0, 3.0, 2.0]);
        let target = constant_net(&[10.0, 20.0, 30.0]);
        let a = item(30.0, 0, -5.0, true);
        let b = item(30.0, 1, -2.0, false);
        assert_eq!(
            q_target(&[&a, &b], &online, &target, 0.9),
            vec![-5.0, -2.0 + 0.9 * 20.0]
        );
        assert_eq!(q_target(&[&a, &b], &online, &target, 0.0), vec![-5.0, -2.0]);
    }

    #[test]
    fn greedy_and_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut q = vec![0.0; 21];
        q[7] = 1.0;
        let net = constant_net(&q);
        assert!((0..100).all(|_| select_action(&obs(40.0), &net, 0.0, &mut rng) == 7));
        q[7] = 0.0;
        q[3] = 2.0;
        q[9] = 2.0;
        assert_eq!(
            select_action(&obs(40.0), &constant_net(&q), 0.0, &mut rng),
            3
        );
    }

    #[test]
    fn uniform_exploration_chi_square() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = constant_net(&[0.0; 21]);
        let mut counts = [0usize; 21];
        let n = 10_000;
        for _ in 0..n {
            counts[select_action(&obs(40.0), &net, 1.0, &mut rng)] += 1;
        }
        let e = n as f64 / 21.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        // 99.9th percentile of chi-square with 20 degrees of freedom.
        assert!(chi2 < 45.31, "chi2 {chi2}");
    }

    #[test]
    fn buffer_fifo_and_sampling() {
        let mut buf = ReplayBuffer::new(3);
        for k in 0..5 {
            buf.push(item(k as f64, 0, 0.0, false));
        }
        assert_eq!(buf.len(), 3);
        let phis: Vec<f64> = buf.iter().map(|it| it.obs.state().phi).collect();
        assert_eq!(phis, vec![2.0, 3.0, 4.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = buf.sample(3, &mut rng);
        let mut seen: Vec<f64> = s.iter().map(|it| it.obs.state().phi).collect();
        seen.sort_by(f64::total_cmp);
        assert_eq!(seen, vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn single_transition_loss_by_hand() {
        let mut online = constant_net(&[0.5, -1.0, 2.0]);
        let target = constant_net(&[1.0, 4.0, 0.0]);
        let it = item(30.0, 1, -3.0, false);
        let y = q_target(&[&it], &online, &target, 0.5);
        // argmax online at s' is 2; target scores it 0.0
        assert_eq!(y, vec![-3.0]);
        let mut adam = AdamState::new(online.n_params(), AdamConfig::default());
        let loss = dql_step(&[&it], &y, &mut online, &mut adam, 0.0);
        assert_eq!(loss, 4.0);
    }

    #[test]
    fn zero_loss_leaves_net_nearly_unchanged() {
        let mut online = constant_net(&[0.5, -1.0, 2.0]);
        let before = online.clone();
        let it = item(30.0, 0, 0.5, true);
        let mut adam = AdamState::new(online.n_params(), AdamConfig::default());
        let loss = dql_step(&[&it], &[0.5], &mut online, &mut adam, 0.0);
        assert_eq!(loss, 0.0);
        assert_eq!(online, before);
    }

    #[test]
    fn target_changes_only_at_copies() {
        let hyper = DqlHyper {
            hidden: vec![8],
            warmup: 4,
            batch: 4,
            target_copy_every: 3,
            ..Default::default()
        };
        let mut agent = DqlAgent::new(1, hyper, 3).unwrap();
        for k in 0..10 {
            agent
                .buffer
                .push(item(30.0 + k as f64, k % 21, -(k as f64), k == 9));
        }
        let initial = agent.target().clone();
        for u in 1..=7u64 {
            agent.update().unwrap();
            if u % 3 == 0 {
                assert_eq!(agent.target(), agent.online());
            } else if u < 3 {
                assert_eq!(agent.target(), &initial);
            } else {
                assert_ne!(agent.target(), agent.online());
            }
        }
    }

    #[test]
    fn refuses_multi_muscle() {
        assert!(matches!(
            DqlAgent::new(4, DqlHyper::default(), 0),
            Err(AgentError::TooManyMuscles { n: 4 })
        ));
    }

    #[test]
    fn epsilon_schedule() {
        let h = DqlHyper::default();
        assert_eq!(h.epsilon(0, 1000), 1.0);
        assert!((h.epsilon(100, 1000) - 0.525).abs() < 1e-12);
        assert!((h.epsilon(200, 1000) - 0.05).abs() < 1e-12);
        assert!((h.epsilon(900, 1000) - 0.05).abs() < 1e-12);
    }
}
