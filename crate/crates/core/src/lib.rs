//! Learned inverse-dynamics muscle control for a single-axis shoulder
//! abduction plant.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod distrib;
pub mod dql;
pub mod error;
pub mod harness;
pub mod kv;
pub mod mdp;
pub mod nn;
pub mod plant;
pub mod ppo;
pub mod sim;
pub mod trajectory;

pub use error::{AgentError, ConfigError, EnvError, HarnessError, NetError, TrajectoryError};
pub use kv::KvConfig;
pub use nn::{AdamConfig, AdamState, Mlp};
pub use plant::{Activations, JointState, MuscleName, MuscleParams, PlantConfig, StepOutcome};
pub use trajectory::{QuinticSection, Trajectory};
