//! The control problem seen by the learner: observations, actions, reward,
//! and the episode loop.

use std::io::{self, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ConfigError, EnvError};
use crate::plant::{Activations, JointState};
use crate::trajectory::Trajectory;

/// Angles and angular velocities are divided by this before entering a
/// network.
pub const ANGLE_SCALE: f64 = 90.0;

/// `[phi, phi_dot, phi_hat(t+dt), phi_dot_hat(t+dt), activations...]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation(Vec<f64>);

impl Observation {
    pub fn new(state: JointState, target: (f64, f64), acts: &Activations) -> Self {
        let mut v = Vec::with_capacity(4 + acts.len());
        v.extend_from_slice(&[state.phi, state.phi_dot, target.0, target.1]);
        v.extend_from_slice(acts.as_slice());
        Self(v)
    }

    pub fn from_vec(values: Vec<f64>) -> Option<Self> {
        (values.len() >= 5 && values.iter().all(|v| v.is_finite())).then_some(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn n_muscles(&self) -> usize {
        self.0.len() - 4
    }

    pub fn state(&self) -> JointState {
        JointState {
            phi: self.0[0],
            phi_dot: self.0[1],
        }
    }

    pub fn target(&self) -> (f64, f64) {
        (self.0[2], self.0[3])
    }

    pub fn activations(&self) -> Activations {
        Activations::clamped(self.0[4..].to_vec())
    }

    /// Fixed scaling used as network input.
    pub fn network_input(&self) -> Vec<f64> {
        let mut v = self.0.clone();
        self.write_network_input(&mut v);
        v
    }

    pub fn write_network_input(&self, out: &mut [f64]) {
        out.copy_from_slice(&self.0);
        for x in &mut out[..4] {
            *x /= ANGLE_SCALE;
        }
    }
}

/// Per-muscle activation change in percent; every entry lies in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionDelta(Vec<f64>);

impl ActionDelta {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn new(values: Vec<f64>) -> Option<Self> {
        values
            .iter()
            .all(|w| (-1.0..=1.0).contains(w))
            .then_some(Self(values))
    }

    /// Clamps into `[-1, 1]`; NaN maps to 0.
    pub fn clamped(values: Vec<f64>) -> Self {
        Self(
            values
                .into_iter()
                .map(|w| if w.is_nan() { 0.0 } else { w.clamp(-1.0, 1.0) })
                .collect(),
        )
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `Omega_i <- clamp(Omega_i + 0.01 * omega_i, 0, 1)`.
pub fn apply_action(acts: &Activations, delta: &ActionDelta) -> Activations {
    assert_eq!(acts.len(), delta.len(), "one delta per muscle");
    Activations::clamped(
        acts.as_slice()
            .iter()
            .zip(delta.as_slice())
            .map(|(a, w)| a + 0.01 * w)
            .collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardParams {
    /// Lasso weight per percent of activation change.
    pub alpha: f64,
    /// Threshold above which an action component counts as saturated, percent.
    pub omega_max: f64,
    pub crash_penalty: f64,
    pub gamma: f64,
}

impl Default for RewardParams {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            omega_max: 0.95,
            crash_penalty: -100.0,
            gamma: 0.99,
        }
    }
}

impl RewardParams {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let ok = self.omega_max > 0.0
            && self.omega_max < 1.0
            && self.alpha >= 0.0
            && self.crash_penalty < 0.0
            && self.gamma > 0.0
            && self.gamma < 1.0;
        if ok {
            Ok(())
        } else {
            Err(ConfigError::Constraint(format!(
                "reward params out of range: {self:?}"
            )))
        }
    }
}

/// Tracking error, Lasso on the action, and the saturation indicator.
pub fn reward(phi_next: f64, phi_hat_next: f64, delta: &ActionDelta, p: &RewardParams) -> f64 {
    let n = delta.len() as f64;
    let lasso: f64 = delta.as_slice().iter().map(|w| w.abs()).sum();
    let saturated = delta
        .as_slice()
        .iter()
        .filter(|w| w.abs() > p.omega_max)
        .count() as f64;
    -(phi_next - phi_hat_next).abs() - p.alpha * lasso - saturated / n
}

/// Tracking error alone.
pub fn single_muscle_reward(phi_next: f64, phi_hat_next: f64) -> f64 {
    -(phi_next - phi_hat_next).abs()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    /// All three terms.
    Full,
    /// Tracking error only, for the single-muscle comparison.
    TrackingOnly,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardConfig {
    pub kind: RewardKind,
    pub params: RewardParams,
}

impl RewardConfig {
    pub fn full(params: RewardParams) -> Self {
        Self {
            kind: RewardKind::Full,
            params,
        }
    }

    pub fn tracking_only(params: RewardParams) -> Self {
        Self {
            kind: RewardKind::TrackingOnly,
            params,
        }
    }

    pub fn evaluate(&self, phi_next: f64, phi_hat_next: f64, delta: &ActionDelta) -> f64 {
        match self.kind {
            RewardKind::Full => reward(phi_next, phi_hat_next, delta, &self.params),
            RewardKind::TrackingOnly => single_muscle_reward(phi_next, phi_hat_next),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub obs: Observation,
    pub action: ActionDelta,
    pub reward: f64,
    /// On a crash there is no successor state; `next_obs` repeats `obs`.
    pub next_obs: Observation,
    pub done: bool,
    pub crashed: bool,
}

impl Transition {
    /// Episode ended by the time limit rather than a crash.
    pub fn truncated(&self) -> bool {
        self.done && !self.crashed
    }
}

/// What the plant reported after one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EnvStep {
    Ok(JointState),
    Crashed,
}

/// A plant the learner can drive one step at a time, in-process or remote.
pub trait Environment {
    fn n_muscles(&self) -> usize;

    fn dt(&self) -> f64;

    /// Starts an episode at rest at `initial_phi`; returns the state and the
    /// activations the plant starts from.
    fn reset(&mut self, seed: u64, initial_phi: f64)
        -> Result<(JointState, Activations), EnvError>;

    /// Applies `delta` to the current activations, then advances one step.
    fn step(&mut self, delta: &ActionDelta) -> Result<EnvStep, EnvError>;
}

/// What a policy decided for one observation.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub action: ActionDelta,
    /// The policy's raw output before clamping into the action box.
    pub sample: Vec<f64>,
    /// Log density of `sample` (0 for deterministic policies).
    pub logprob: f64,
    /// State-value estimate (0 when the policy has no critic).
    pub value: f64,
    /// Discrete action index, for policies over a finite table.
    pub index: Option<usize>,
}

impl Decision {
    pub fn plain(action: ActionDelta) -> Self {
        Self {
            sample: action.as_slice().to_vec(),
            action,
            logprob: 0.0,
            value: 0.0,
            index: None,
        }
    }
}

pub trait Policy: Send + Sync {
    fn n_muscles(&self) -> usize;

    fn decide(&self, obs: &Observation, rng: &mut ChaCha8Rng) -> Decision;
}

/// Wraps a plain function of the observation.
pub struct FnPolicy<F> {
    n: usize,
    f: F,
}

impl<F> FnPolicy<F>
where
    F: Fn(&Observation) -> ActionDelta + Send + Sync,
{
    pub fn new(n_muscles: usize, f: F) -> Self {
        Self { n: n_muscles, f }
    }
}

impl<F> Policy for FnPolicy<F>
where
    F: Fn(&Observation) -> ActionDelta + Send + Sync,
{
    fn n_muscles(&self) -> usize {
        self.n
    }

    fn decide(&self, obs: &Observation, _rng: &mut ChaCha8Rng) -> Decision {
        Decision::plain((self.f)(obs))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeStep {
    pub transition: Transition,
    pub sample: Vec<f64>,
    pub logprob: f64,
    pub value: f64,
    pub index: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub steps: Vec<EpisodeStep>,
    /// Undiscounted sum of rewards.
    pub total_reward: f64,
    pub crashed: bool,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn transitions(&self) -> impl Iterator<Item = &Transition> {
        self.steps.iter().map(|s| &s.transition)
    }

    /// Writes `t, phi, phi_hat, Omega_1..n, omega_1..n, reward`, one row per
    /// transition. `Omega` is the activation after the action was applied.
    pub fn write_trace<W: Write>(&self, mut out: W, dt: f64) -> io::Result<()> {
        let n = self
            .steps
            .first()
            .map(|s| s.transition.action.len())
            .unwrap_or(0);
        let mut header = vec!["t".to_string(), "phi".into(), "phi_hat".into()];
        header.extend((1..=n).map(|i| format!("Omega_{i}")));
        header.extend((1..=n).map(|i| format!("omega_{i}")));
        header.push("reward".into());
        writeln!(out, "{}", header.join(","))?;
        for (k, step) in self.steps.iter().enumerate() {
            let tr = &step.transition;
            let acts = apply_action(&tr.obs.activations(), &tr.action);
            let mut row = vec![
                ((k + 1) as f64 * dt).to_string(),
                tr.next_obs.state().phi.to_string(),
                tr.obs.target().0.to_string(),
            ];
            row.extend(acts.as_slice().iter().map(f64::to_string));
            row.extend(tr.action.as_slice().iter().map(f64::to_string));
            row.push(tr.reward.to_string());
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Episode-level knobs shared by in-process and remote collection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeSpec {
    pub frames: usize,
    pub reward: RewardConfig,
}

/// Runs one episode: reset at the trajectory's start, then up to `frames`
/// steps, each observing the target one `dt` ahead. A crash appends a final
/// transition carrying the crash penalty and ends the episode.
pub fn run_episode<E: Environment + ?Sized, P: Policy + ?Sized>(
    env: &mut E,
    traj: &Trajectory,
    policy: &P,
    spec: &EpisodeSpec,
    seed: u64,
) -> Result<Episode, EnvError> {
    let dt = env.dt();
    let target_at = |k: usize| {
        traj.sample(k as f64 * dt)
            .map_err(|e| EnvError::Protocol(format!("trajectory too short for episode: {e}")))
    };
    let (mut state, mut acts) = env.reset(seed, traj.start_position())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut steps = Vec::with_capacity(spec.frames);
    let mut total = 0.0;
    let mut crashed = false;
    for k in 0..spec.frames {
        let target = target_at(k + 1)?;
        let obs = Observation::new(state, target, &acts);
        let decision = policy.decide(&obs, &mut rng);
        let next_acts = apply_action(&acts, &decision.action);
        let (reward, next_obs, done) = match env.step(&decision.action)? {
            EnvStep::Ok(next) => {
                let r = spec.reward.evaluate(next.phi, target.0, &decision.action);
                let done = k + 1 == spec.frames;
                let next_target = if done { target } else { target_at(k + 2)? };
                state = next;
                (r, Observation::new(next, next_target, &next_acts), done)
            }
            EnvStep::Crashed => {
                crashed = true;
                (spec.reward.params.crash_penalty, obs.clone(), true)
            }
        };
        acts = next_acts;
        total += reward;
        steps.push(EpisodeStep {
            transition: Transition {
                obs,
                action: decision.action,
                reward,
                next_obs,
                done,
                crashed,
            },
            sample: decision.sample,
            logprob: decision.logprob,
            value: decision.value,
            index: decision.index,
        });
        if crashed {
            break;
        }
    }
    Ok(Episode {
        steps,
        total_reward: total,
        crashed,
    })
}
