//! Lumped single-axis shoulder abduction plant.
//!
//! A rigid humerus rotating about one revolute joint, driven by muscles whose
//! torque is `sign * torque_scale * d(phi) * activation` with an
//! angle-dependent moment arm `d(phi) = c0 + c1 * cos(phi)`. Gravity pulls
//! toward the hanging position (`phi = 0`) and viscous damping opposes motion.
//!
//! Angles cross the public surface in degrees; trig and dynamics run in
//! radians.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::kv::KvConfig;

/// Four-muscle reference plant.
pub const REFERENCE_CONFIG: &str = include_str!("../../../configs/plant_reference.conf");
/// Single-muscle (ssp only) plant used by the one-muscle experiments.
pub const SINGLE_MUSCLE_CONFIG: &str = include_str!("../../../configs/plant_single.conf");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MuscleName {
    Ssp,
    Isp,
    Dmi,
    Ld,
}

impl MuscleName {
    pub fn as_str(self) -> &'static str {
        match self {
            MuscleName::Ssp => "ssp",
            MuscleName::Isp => "isp",
            MuscleName::Dmi => "dmi",
            MuscleName::Ld => "ld",
        }
    }
}

impl fmt::Display for MuscleName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MuscleName {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ssp" => Ok(MuscleName::Ssp),
            "isp" => Ok(MuscleName::Isp),
            "dmi" => Ok(MuscleName::Dmi),
            "ld" => Ok(MuscleName::Ld),
            other => Err(ConfigError::Invalid {
                key: "muscles".into(),
                value: other.into(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MuscleParams {
    pub name: MuscleName,
    /// Torque at full activation and unit moment arm, N·m.
    pub torque_scale: f64,
    /// `(c0, c1)` of `d(phi) = c0 + c1 cos(phi)`.
    pub arm_coeffs: (f64, f64),
    /// +1 abductor, -1 adductor.
    pub sign: f64,
}

impl MuscleParams {
    pub fn moment_arm(&self, phi_rad: f64) -> f64 {
        self.arm_coeffs.0 + self.arm_coeffs.1 * phi_rad.cos()
    }

    /// Signed joint torque per unit activation at `phi_rad`.
    pub fn torque_gain(&self, phi_rad: f64) -> f64 {
        self.sign * self.torque_scale * self.moment_arm(phi_rad)
    }

    pub fn is_abductor(&self) -> bool {
        self.sign > 0.0
    }

    fn validate(&self) -> Result<(), ConfigError> {
        if !(self.torque_scale > 0.0) {
            return Err(ConfigError::Constraint(format!(
                "{}: torque_scale must be positive",
                self.name
            )));
        }
        if self.sign != 1.0 && self.sign != -1.0 {
            return Err(ConfigError::Constraint(format!(
                "{}: sign must be +1 or -1",
                self.name
            )));
        }
        // |c0 + c1 cos| on [0, pi] peaks at an endpoint.
        let (c0, c1) = self.arm_coeffs;
        if (c0 + c1).abs() > 2.0 || (c0 - c1).abs() > 2.0 {
            return Err(ConfigError::Constraint(format!(
                "{}: moment arm exceeds 2 on [0°, 180°]",
                self.name
            )));
        }
        Ok(())
    }
}

/// Humerus angle (degrees from hanging) and angular velocity (degrees/s).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct JointState {
    pub phi: f64,
    pub phi_dot: f64,
}

impl JointState {
    pub fn at_rest(phi: f64) -> Self {
        Self { phi, phi_dot: 0.0 }
    }

    pub fn is_finite(&self) -> bool {
        self.phi.is_finite() && self.phi_dot.is_finite()
    }
}

/// Per-muscle activation levels, each in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Activations(Vec<f64>);

impl Activations {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    /// Builds activations, clamping each entry into `[0, 1]`.
    pub fn clamped(values: Vec<f64>) -> Self {
        Self(values.into_iter().map(|a| a.clamp(0.0, 1.0)).collect())
    }

    /// Returns `None` if any entry lies outside `[0, 1]` or is non-finite.
    pub fn new(values: Vec<f64>) -> Option<Self> {
        values
            .iter()
            .all(|a| (0.0..=1.0).contains(a))
            .then_some(Self(values))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantConfig {
    pub muscles: Vec<MuscleParams>,
    /// kg·m²
    pub inertia: f64,
    /// m·g·r, N·m
    pub mass_arm_term: f64,
    /// N·m·s/rad
    pub damping: f64,
    /// seconds
    pub dt: f64,
    /// degrees
    pub crash_angle_bounds: (f64, f64),
    /// degrees/s
    pub crash_speed_bound: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepOutcome {
    Ok(JointState),
    Crashed,
}

impl StepOutcome {
    pub fn state(self) -> Option<JointState> {
        match self {
            StepOutcome::Ok(s) => Some(s),
            StepOutcome::Crashed => None,
        }
    }

    pub fn is_crashed(self) -> bool {
        matches!(self, StepOutcome::Crashed)
    }
}

impl PlantConfig {
    pub fn reference() -> Self {
        Self::parse(REFERENCE_CONFIG).expect("reference plant config is valid")
    }

    pub fn single_muscle() -> Self {
        Self::parse(SINGLE_MUSCLE_CONFIG).expect("single-muscle plant config is valid")
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        Self::from_kv(&KvConfig::parse(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        Self::from_kv(&KvConfig::load(path)?)
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self, ConfigError> {
        let names: Vec<MuscleName> = kv.require_list("muscles")?;
        let mut muscles = Vec::with_capacity(names.len());
        for name in names {
            let coeffs: Vec<f64> = kv.require_list(&format!("{name}.arm_coeffs"))?;
            if coeffs.len() != 2 {
                return Err(ConfigError::Invalid {
                    key: format!("{name}.arm_coeffs"),
                    value: format!("{coeffs:?}"),
                });
            }
            muscles.push(MuscleParams {
                name,
                torque_scale: kv.require(&format!("{name}.torque_scale"))?,
                arm_coeffs: (coeffs[0], coeffs[1]),
                sign: kv.require(&format!("{name}.sign"))?,
            });
        }
        let bounds: Vec<f64> = kv.require_list("crash_angle_bounds")?;
        if bounds.len() != 2 {
            return Err(ConfigError::Invalid {
                key: "crash_angle_bounds".into(),
                value: format!("{bounds:?}"),
            });
        }
        let cfg = Self {
            muscles,
            inertia: kv.require("inertia")?,
            mass_arm_term: kv.require("mass_arm_term")?,
            damping: kv.require("damping")?,
            dt: kv.require("dt")?,
            crash_angle_bounds: (bounds[0], bounds[1]),
            crash_speed_bound: kv.require("crash_speed_bound")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        let names: Vec<&str> = self.muscles.iter().map(|m| m.name.as_str()).collect();
        kv.set("muscles", names.join(", "));
        for m in &self.muscles {
            kv.set(
                &format!("{}.torque_scale", m.name),
                m.torque_scale.to_string(),
            );
            kv.set(
                &format!("{}.arm_coeffs", m.name),
                format!("{}, {}", m.arm_coeffs.0, m.arm_coeffs.1),
            );
            kv.set(&format!("{}.sign", m.name), m.sign.to_string());
        }
        kv.set("inertia", self.inertia.to_string());
        kv.set("mass_arm_term", self.mass_arm_term.to_string());
        kv.set("damping", self.damping.to_string());
        kv.set("dt", self.dt.to_string());
        kv.set(
            "crash_angle_bounds",
            format!(
                "{}, {}",
                self.crash_angle_bounds.0, self.crash_angle_bounds.1
            ),
        );
        kv.set("crash_speed_bound", self.crash_speed_bound.to_string());
        kv
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.muscles.is_empty() {
            return Err(ConfigError::Constraint(
                "plant needs at least one muscle".into(),
            ));
        }
        for m in &self.muscles {
            m.validate()?;
        }
        if !(self.dt > 0.0) || !(self.inertia > 0.0) || !(self.damping >= 0.0) {
            return Err(ConfigError::Constraint(
                "need dt > 0, inertia > 0, damping >= 0".into(),
            ));
        }
        if !(self.crash_angle_bounds.0 < self.crash_angle_bounds.1) {
            return Err(ConfigError::Constraint(
                "crash_angle_bounds must be (low, high) with low < high".into(),
            ));
        }
        if !(self.crash_speed_bound > 0.0) {
            return Err(ConfigError::Constraint(
                "crash_speed_bound must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn n_muscles(&self) -> usize {
        self.muscles.len()
    }

    /// Net joint torque in N·m at `state` under `acts`.
    pub fn net_torque(&self, state: JointState, acts: &Activations) -> f64 {
        let phi = state.phi.to_radians();
        let muscle: f64 = self
            .muscles
            .iter()
            .zip(acts.as_slice())
            .map(|(m, a)| m.torque_gain(phi) * a)
            .sum();
        muscle - self.mass_arm_term * phi.sin() - self.damping * state.phi_dot.to_radians()
    }

    /// Advances the plant by one `dt` with semi-implicit Euler.
    pub fn step(&self, state: JointState, acts: &Activations) -> StepOutcome {
        debug_assert_eq!(acts.len(), self.n_muscles());
        let torque = self.net_torque(state, acts);
        let phi_dot = state.phi_dot.to_radians() + self.dt * torque / self.inertia;
        let phi = state.phi.to_radians() + self.dt * phi_dot;
        let next = JointState {
            phi: phi.to_degrees(),
            phi_dot: phi_dot.to_degrees(),
        };
        if self.is_crash(next) {
            StepOutcome::Crashed
        } else {
            StepOutcome::Ok(next)
        }
    }

    pub fn is_crash(&self, state: JointState) -> bool {
        let (lo, hi) = self.crash_angle_bounds;
        !state.is_finite()
            || state.phi < lo
            || state.phi > hi
            || state.phi_dot.abs() > self.crash_speed_bound
    }

    /// Whether some activation vector in `[0,1]^n` holds `target_phi` at rest.
    pub fn is_equilibrium_reachable(&self, target_phi: f64) -> bool {
        let phi = target_phi.to_radians();
        let needed = self.mass_arm_term * phi.sin();
        let (lo, hi) = self.torque_range(phi);
        lo <= needed && needed <= hi
    }

    /// Smallest and largest total muscle torque available at `phi_rad`.
    fn torque_range(&self, phi_rad: f64) -> (f64, f64) {
        self.muscles.iter().fold((0.0, 0.0), |(lo, hi), m| {
            let g = m.torque_gain(phi_rad);
            (lo + g.min(0.0), hi + g.max(0.0))
        })
    }

    /// Activations used when an episode starts at rest at `phi`: every muscle
    /// that currently pulls toward abduction gets the same level, just enough
    /// to balance gravity (capped at 1); the rest stay at 0.
    pub fn resting_activations(&self, phi: f64) -> Activations {
        let phi_rad = phi.to_radians();
        let needed = self.mass_arm_term * phi_rad.sin();
        let gains: Vec<f64> = self
            .muscles
            .iter()
            .map(|m| m.torque_gain(phi_rad))
            .collect();
        let lift: f64 = gains.iter().filter(|g| **g > 0.0).sum();
        let level = if needed > 0.0 && lift > 0.0 {
            (needed / lift).min(1.0)
        } else {
            0.0
        };
        Activations::clamped(
            gains
                .iter()
                .map(|g| if *g > 0.0 { level } else { 0.0 })
                .collect(),
        )
    }
}
