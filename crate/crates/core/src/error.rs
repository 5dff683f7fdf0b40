use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("missing config key `{0}`")]
    Missing(String),
    #[error("invalid value {value:?} for key `{key}`")]
    Invalid { key: String, value: String },
    #[error("{0}")]
    Constraint(String),
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error, PartialEq)]
pub enum TrajectoryError {
    #[error("section duration must be positive, got {0}")]
    NonPositiveDuration(f64),
    #[error("time {t} outside trajectory span [0, {total}]")]
    OutOfRange { t: f64, total: f64 },
    #[error("total duration {total} is not a positive multiple of section duration {section}")]
    BadSectionCount { total: f64, section: f64 },
    #[error("trajectory has no sections")]
    Empty,
}

#[derive(Debug, Error)]
pub enum NetError {
    #[error("input has length {got}, network expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("network needs at least an input and an output layer")]
    TooFewLayers,
    #[error("bad checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Errors raised while driving environments, locally or over the wire.
#[derive(Debug, Error)]
pub enum EnvError {
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("remote error: {0}")]
    Remote(String),
    #[error("no workers available")]
    NoWorkers,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("discrete Q-learning supports a single muscle; joint action space of {n} muscles has 21^{n} actions")]
    TooManyMuscles { n: usize },
    #[error("rollout collected under snapshot {rollout}, current policy is snapshot {current}")]
    StaleRollout { rollout: u64, current: u64 },
    #[error("rollout is empty")]
    EmptyRollout,
    #[error("checkpoint shape {found:?} does not match expected {expected:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

/// Top-level failure of a train/evaluate/trace run.
#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("workers: {0}")]
    Env(#[from] EnvError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl HarnessError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit status: 2 for worker failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Env(_) => 2,
            _ => 1,
        }
    }
}
