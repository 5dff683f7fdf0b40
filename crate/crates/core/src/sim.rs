//! In-process environment hosting one plant instance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::EnvError;
use crate::mdp::{apply_action, ActionDelta, EnvStep, Environment};
use crate::plant::{Activations, JointState, PlantConfig, StepOutcome};

/// Artificial crashes for resilience testing. Whether an episode crashes, and
/// at which step, is a pure function of the reset seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrashInjection {
    /// Fraction of episodes that crash.
    pub probability: f64,
    /// The crash happens at a uniformly drawn step in `0..horizon`.
    pub horizon: usize,
}

impl CrashInjection {
    pub fn crash_step(&self, seed: u64) -> Option<usize> {
        if self.probability <= 0.0 || self.horizon == 0 {
            return None;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c0de_dead_beef);
        let hit = rng.random::<f64>() < self.probability;
        let at = rng.random_range(0..self.horizon);
        hit.then_some(at)
    }
}

#[derive(Debug, Clone)]
pub struct LocalEnv {
    cfg: PlantConfig,
    state: JointState,
    acts: Activations,
    steps: usize,
    live: bool,
    injection: Option<CrashInjection>,
    forced_crash_at: Option<usize>,
    pending_crash: Option<usize>,
}

impl LocalEnv {
    pub fn new(cfg: PlantConfig) -> Self {
        let n = cfg.n_muscles();
        Self {
            cfg,
            state: JointState::default(),
            acts: Activations::zeros(n),
            steps: 0,
            live: false,
            injection: None,
            forced_crash_at: None,
            pending_crash: None,
        }
    }

    pub fn with_crash_injection(mut self, injection: CrashInjection) -> Self {
        self.injection = Some(injection);
        self
    }

    /// Every episode crashes on step `k` (0-based), after `k` good steps.
    pub fn with_forced_crash_at(mut self, k: usize) -> Self {
        self.forced_crash_at = Some(k);
        self
    }

    pub fn config(&self) -> &PlantConfig {
        &self.cfg
    }

    pub fn state(&self) -> JointState {
        self.state
    }

    pub fn activations(&self) -> &Activations {
        &self.acts
    }
}

impl Environment for LocalEnv {
    fn n_muscles(&self) -> usize {
        self.cfg.n_muscles()
    }

    fn dt(&self) -> f64 {
        self.cfg.dt
    }

    fn reset(
        &mut self,
        seed: u64,
        initial_phi: f64,
    ) -> Result<(JointState, Activations), EnvError> {
        let state = JointState::at_rest(initial_phi);
        if self.cfg.is_crash(state) {
            return Err(EnvError::Protocol(format!(
                "initial angle {initial_phi} outside crash bounds"
            )));
        }
        self.state = state;
        self.acts = self.cfg.resting_activations(initial_phi);
        self.steps = 0;
        self.live = true;
        self.pending_crash = self
            .forced_crash_at
            .or_else(|| self.injection.and_then(|inj| inj.crash_step(seed)));
        Ok((self.state, self.acts.clone()))
    }

    fn step(&mut self, delta: &ActionDelta) -> Result<EnvStep, EnvError> {
        if !self.live {
            return Err(EnvError::Protocol("step before reset".into()));
        }
        if delta.len() != self.cfg.n_muscles() {
            return Err(EnvError::Protocol(format!(
                "expected {} action components, got {}",
                self.cfg.n_muscles(),
                delta.len()
            )));
        }
        let step_index = self.steps;
        self.steps += 1;
        self.acts = apply_action(&self.acts, delta);
        if self.pending_crash == Some(step_index) {
            self.live = false;
            return Ok(EnvStep::Crashed);
        }
        match self.cfg.step(self.state, &self.acts) {
            StepOutcome::Ok(next) => {
                self.state = next;
                Ok(EnvStep::Ok(next))
            }
            StepOutcome::Crashed => {
                self.live = false;
                Ok(EnvStep::Crashed)
            }
        }
    }
}
