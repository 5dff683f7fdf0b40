//! Training, evaluation and trace emission on top of the rollout fabric.
//!
//! Run configuration is a flat `key = value` file; every key has a default.
//!
//! | key | default | meaning |
//! |---|---|---|
//! | `experiment` | `run` | label used in logs |
//! | `agent` | `ppo` | `ppo` or `dql` |
//! | `n_muscles` | from plant | must match the plant |
//! | `plant` | `single` | `single`, `reference`, or a plant config path |
//! | `reward` | `tracking` | `tracking` (first term only) or `full` |
//! | `reward.alpha`, `reward.omega_max`, `reward.crash_penalty` | 0.1, 0.95, -100 | reward weights |
//! | `total_frames` | 300000 | training budget |
//! | `seed` | 0 | training seed |
//! | `test_seed` | 2021 | frozen test set seed |
//! | `test.count`, `test.seconds` | 100, 20 | frozen test set size |
//! | `test.range` | `20, 100` | test waypoint range, degrees |
//! | `train.range` | `30, 90` | training waypoint range, degrees |
//! | `train.seconds`, `section_seconds` | 10, 5 | episode and section lengths |
//! | `workers` | 8 | local env servers to spawn |
//! | `worker_addrs` | empty | external env servers; overrides `workers` |
//! | `transport` | `tcp` | `tcp` or `inprocess` |
//! | `crash_injection` | 0 | fraction of training episodes forced to crash |
//! | `checkpoint_every` | 100000 | frames between periodic checkpoints |
//! | `out_dir` | `runs/<experiment>` | output directory |
//!
//! Agent hyperparameters use the `ppo.*` and `dql.*` keys plus `gamma`.

use std::collections::VecDeque;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::info;

use crate::distrib::{
    collect, CollectPlan, Collected, LocalWorkers, RetryPolicy, ServeOptions, WorkerPool,
};
use crate::dql::{DqlAgent, DqlHyper, QPolicy, N_ACTIONS};
use crate::error::{AgentError, ConfigError, EnvError, HarnessError, NetError};
use crate::kv::KvConfig;
use crate::mdp::{
    apply_action, Episode, EpisodeSpec, Policy, RewardConfig, RewardKind, RewardParams,
};
use crate::nn::Mlp;
use crate::plant::PlantConfig;
use crate::ppo::{PolicySnapshot, PolicyValueNet, PpoAgent, PpoHyper, Rollout};
use crate::sim::{CrashInjection, LocalEnv};
use crate::trajectory::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AgentKind {
    Dql,
    Ppo,
}

impl AgentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Dql => "dql",
            Self::Ppo => "ppo",
        }
    }
}

impl std::str::FromStr for AgentKind {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "dql" => Ok(Self::Dql),
            "ppo" => Ok(Self::Ppo),
            _ => Err(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transport {
    Tcp,
    InProcess,
}

/// Parameters of a family of random trajectories.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectorySet {
    pub seed: u64,
    pub seconds: f64,
    pub section_seconds: f64,
    pub range: (f64, f64),
}

impl TrajectorySet {
    pub fn get(&self, index: u64) -> Trajectory {
        Trajectory::random(
            mix_seed(self.seed, index),
            self.seconds,
            self.section_seconds,
            self.range,
        )
        .expect("trajectory set parameters validated")
    }

    pub fn frames(&self, dt: f64) -> usize {
        (self.seconds / dt).round() as usize
    }
}

/// SplitMix64 finalizer over a base seed and an index.
pub fn mix_seed(base: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(index.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const TRAIN_TRAJ_SALT: u64 = 0x7472_6169_6e00_0000;
const TRAIN_EPISODE_SALT: u64 = 0x6570_6973_6f64_6500;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub experiment: String,
    pub agent: AgentKind,
    pub plant: PlantConfig,
    pub plant_source: String,
    pub reward: RewardConfig,
    pub total_frames: usize,
    pub seed: u64,
    pub test_seed: u64,
    pub test_count: usize,
    pub test_seconds: f64,
    pub test_range: (f64, f64),
    pub train_range: (f64, f64),
    pub train_seconds: f64,
    pub section_seconds: f64,
    pub workers: usize,
    pub worker_addrs: Vec<String>,
    pub transport: Transport,
    pub crash_injection: f64,
    pub checkpoint_every: usize,
    pub out_dir: PathBuf,
    pub ppo: PpoHyper,
    pub dql: DqlHyper,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::from_kv(&KvConfig::new()).expect("defaults are valid")
    }
}

fn parse_range(kv: &KvConfig, key: &str, default: (f64, f64)) -> Result<(f64, f64), ConfigError> {
    if !kv.contains(key) {
        return Ok(default);
    }
    let v: Vec<f64> = kv.require_list(key)?;
    match v.as_slice() {
        [lo, hi] if lo <= hi => Ok((*lo, *hi)),
        _ => Err(ConfigError::Invalid {
            key: key.into(),
            value: kv.get_str(key).unwrap_or_default().into(),
        }),
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        Self::from_kv(&KvConfig::load(path)?)
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self, ConfigError> {
        let experiment = kv.get_str("experiment").unwrap_or("run").to_string();
        let agent_str = kv.get_str("agent").unwrap_or("ppo");
        let agent = agent_str.parse().map_err(|_| ConfigError::Invalid {
            key: "agent".into(),
            value: agent_str.into(),
        })?;
        let plant_source = kv.get_str("plant").unwrap_or("single").to_string();
        let plant = match plant_source.as_str() {
            "single" => PlantConfig::single_muscle(),
            "reference" => PlantConfig::reference(),
            path => PlantConfig::load(path)?,
        };
        if kv.contains("n_muscles") {
            let n: usize = kv.require("n_muscles")?;
            if n != plant.n_muscles() {
                return Err(ConfigError::Constraint(format!(
                    "n_muscles = {n} but plant `{plant_source}` has {} muscles",
                    plant.n_muscles()
                )));
            }
        }
        let mut params = RewardParams::default();
        params.alpha = kv.get_or("reward.alpha", params.alpha)?;
        params.omega_max = kv.get_or("reward.omega_max", params.omega_max)?;
        params.crash_penalty = kv.get_or("reward.crash_penalty", params.crash_penalty)?;
        params.gamma = kv.get_or("gamma", params.gamma)?;
        params.validate()?;
        let reward = match kv.get_str("reward").unwrap_or("tracking") {
            "tracking" => RewardConfig::tracking_only(params),
            "full" => RewardConfig::full(params),
            other => {
                return Err(ConfigError::Invalid {
                    key: "reward".into(),
                    value: other.into(),
                })
            }
        };
        let transport = match kv.get_str("transport").unwrap_or("tcp") {
            "tcp" => Transport::Tcp,
            "inprocess" => Transport::InProcess,
            other => {
                return Err(ConfigError::Invalid {
                    key: "transport".into(),
                    value: other.into(),
                })
            }
        };
        let mut ppo = if plant.n_muscles() > 1 {
            PpoHyper::four_muscle()
        } else {
            PpoHyper::default()
        };
        ppo.apply_kv(kv).map_err(|e| match e {
            AgentError::Config(c) => c,
            other => ConfigError::Constraint(other.to_string()),
        })?;
        let mut dql = DqlHyper::default();
        dql.apply_kv(kv)?;
        let worker_addrs: Vec<String> = if kv.contains("worker_addrs") {
            kv.require_list("worker_addrs")?
        } else {
            Vec::new()
        };
        let cfg = Self {
            out_dir: kv
                .get_str("out_dir")
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("runs").join(&experiment)),
            experiment,
            agent,
            plant,
            plant_source,
            reward,
            total_frames: kv.get_or("total_frames", 300_000)?,
            seed: kv.get_or("seed", 0)?,
            test_seed: kv.get_or("test_seed", 2021)?,
            test_count: kv.get_or("test.count", 100)?,
            test_seconds: kv.get_or("test.seconds", 20.0)?,
            test_range: parse_range(kv, "test.range", (20.0, 100.0))?,
            train_range: parse_range(kv, "train.range", (30.0, 90.0))?,
            train_seconds: kv.get_or("train.seconds", 10.0)?,
            section_seconds: kv.get_or("section_seconds", 5.0)?,
            workers: kv.get_or("workers", 8)?,
            worker_addrs,
            transport,
            crash_injection: kv.get_or("crash_injection", 0.0)?,
            checkpoint_every: kv.get_or("checkpoint_every", 100_000)?,
            ppo,
            dql,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.agent == AgentKind::Dql && self.n_muscles() != 1 {
            return Err(ConfigError::Constraint(
                AgentError::TooManyMuscles {
                    n: self.n_muscles(),
                }
                .to_string(),
            ));
        }
        if self.workers == 0 && self.worker_addrs.is_empty() {
            return Err(ConfigError::Constraint("workers must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.crash_injection) {
            return Err(ConfigError::Constraint(
                "crash_injection must lie in [0, 1]".into(),
            ));
        }
        if self.checkpoint_every == 0 || self.test_count == 0 {
            return Err(ConfigError::Constraint(
                "checkpoint_every and test.count must be positive".into(),
            ));
        }
        for set in [self.train_set(), self.test_set()] {
            Trajectory::random(0, set.seconds, set.section_seconds, set.range)
                .map_err(|e| ConfigError::Constraint(e.to_string()))?;
        }
        Ok(())
    }

    pub fn n_muscles(&self) -> usize {
        self.plant.n_muscles()
    }

    pub fn train_set(&self) -> TrajectorySet {
        TrajectorySet {
            seed: self.seed ^ TRAIN_TRAJ_SALT,
            seconds: self.train_seconds,
            section_seconds: self.section_seconds,
            range: self.train_range,
        }
    }

    pub fn test_set(&self) -> TrajectorySet {
        TrajectorySet {
            seed: self.test_seed,
            seconds: self.test_seconds,
            section_seconds: self.section_seconds,
            range: self.test_range,
        }
    }

    pub fn train_spec(&self) -> EpisodeSpec {
        EpisodeSpec {
            frames: self.train_set().frames(self.plant.dt),
            reward: self.reward,
        }
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("experiment", self.experiment.clone());
        kv.set("agent", self.agent.as_str());
        kv.set("plant", self.plant_source.clone());
        kv.set("n_muscles", self.n_muscles().to_string());
        kv.set(
            "reward",
            match self.reward.kind {
                RewardKind::Full => "full",
                RewardKind::TrackingOnly => "tracking",
            },
        );
        let p = &self.reward.params;
        kv.set("reward.alpha", p.alpha.to_string());
        kv.set("reward.omega_max", p.omega_max.to_string());
        kv.set("reward.crash_penalty", p.crash_penalty.to_string());
        kv.set("total_frames", self.total_frames.to_string());
        kv.set("seed", self.seed.to_string());
        kv.set("test_seed", self.test_seed.to_string());
        kv.set("test.count", self.test_count.to_string());
        kv.set("test.seconds", self.test_seconds.to_string());
        kv.set(
            "test.range",
            format!("{}, {}", self.test_range.0, self.test_range.1),
        );
        kv.set(
            "train.range",
            format!("{}, {}", self.train_range.0, self.train_range.1),
        );
        kv.set("train.seconds", self.train_seconds.to_string());
        kv.set("section_seconds", self.section_seconds.to_string());
        kv.set("workers", self.workers.to_string());
        if !self.worker_addrs.is_empty() {
            kv.set("worker_addrs", self.worker_addrs.join(", "));
        }
        kv.set(
            "transport",
            match self.transport {
                Transport::Tcp => "tcp",
                Transport::InProcess => "inprocess",
            },
        );
        kv.set("crash_injection", self.crash_injection.to_string());
        kv.set("checkpoint_every", self.checkpoint_every.to_string());
        kv.set("out_dir", self.out_dir.display().to_string());
        match self.agent {
            AgentKind::Ppo => kv.merge(&self.ppo.to_kv()),
            AgentKind::Dql => kv.merge(&self.dql.to_kv()),
        }
        kv
    }
}

/// Source of completed episodes, local or remote.
pub trait Collector {
    fn collect(&mut self, policy: &dyn Policy, plan: &CollectPlan) -> Result<Collected, EnvError>;
}

impl Collector for WorkerPool {
    fn collect(&mut self, policy: &dyn Policy, plan: &CollectPlan) -> Result<Collected, EnvError> {
        WorkerPool::collect(self, policy, plan)
    }
}

/// In-process environments, one per slot.
pub struct LocalPool {
    slots: Vec<Option<LocalEnv>>,
}

impl LocalPool {
    pub fn new(cfg: &PlantConfig, k: usize, injection: Option<CrashInjection>) -> Self {
        let slots = (0..k.max(1))
            .map(|_| {
                let env = LocalEnv::new(cfg.clone());
                Some(match injection {
                    Some(inj) => env.with_crash_injection(inj),
                    None => env,
                })
            })
            .collect();
        Self { slots }
    }
}

impl Collector for LocalPool {
    fn collect(&mut self, policy: &dyn Policy, plan: &CollectPlan) -> Result<Collected, EnvError> {
        collect(&mut self.slots, policy, plan)
    }
}

/// Workers a run talks to; locally spawned servers are shut down on close.
pub enum Fabric {
    InProcess(LocalPool),
    Tcp {
        pool: WorkerPool,
        local: Option<LocalWorkers>,
    },
}

impl Fabric {
    /// Opens the configured transport. `injection` applies to locally
    /// spawned plants only; external servers carry their own settings.
    pub fn open(cfg: &RunConfig, injection: Option<CrashInjection>) -> Result<Self, EnvError> {
        if cfg.transport == Transport::InProcess {
            return Ok(Self::InProcess(LocalPool::new(
                &cfg.plant,
                cfg.workers,
                injection,
            )));
        }
        let (addrs, local) = if cfg.worker_addrs.is_empty() {
            let opts = ServeOptions {
                crash_injection: injection,
                die_after_steps: None,
            };
            let local = LocalWorkers::spawn(cfg.workers, &cfg.plant, opts)?;
            let addrs: Vec<String> = local.addrs().iter().map(|a| a.to_string()).collect();
            (addrs, Some(local))
        } else {
            (cfg.worker_addrs.clone(), None)
        };
        let pool = WorkerPool::connect(&addrs, RetryPolicy::default())?;
        if pool.n_muscles() != Some(cfg.n_muscles()) {
            return Err(EnvError::Protocol(format!(
                "workers host {:?} muscles, run expects {}",
                pool.n_muscles(),
                cfg.n_muscles()
            )));
        }
        Ok(Self::Tcp { pool, local })
    }

    pub fn close(self) {
        if let Self::Tcp {
            pool,
            local: Some(local),
        } = self
        {
            pool.shutdown();
            local.join();
        }
    }
}

impl Collector for Fabric {
    fn collect(&mut self, policy: &dyn Policy, plan: &CollectPlan) -> Result<Collected, EnvError> {
        match self {
            Self::InProcess(p) => p.collect(policy, plan),
            Self::Tcp { pool, .. } => pool.collect(policy, plan),
        }
    }
}

/// A trained (or freshly initialized) agent's network.
#[derive(Debug, Clone, PartialEq)]
pub enum Checkpoint {
    Ppo(PolicyValueNet),
    Dql(Mlp),
}

impl Checkpoint {
    pub fn kind(&self) -> AgentKind {
        match self {
            Self::Ppo(_) => AgentKind::Ppo,
            Self::Dql(_) => AgentKind::Dql,
        }
    }

    pub fn n_muscles(&self) -> usize {
        match self {
            Self::Ppo(net) => net.n_muscles(),
            Self::Dql(net) => net.input_dim() - 4,
        }
    }

    /// Greedy policy: mean action for PPO, argmax for DQL.
    pub fn greedy_policy(&self) -> Box<dyn Policy> {
        match self {
            Self::Ppo(net) => Box::new(PolicySnapshot {
                id: 0,
                net: Arc::new(net.clone()),
                deterministic: true,
            }),
            Self::Dql(net) => Box::new(QPolicy {
                net: net.clone(),
                epsilon: 0.0,
            }),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NetError> {
        match self {
            Self::Ppo(net) => net.save(path),
            Self::Dql(net) => {
                let mut out = BufWriter::new(fs::File::create(path)?);
                net.write_to(&mut out)?;
                out.flush()?;
                Ok(())
            }
        }
    }

    /// Loads a checkpoint. The agent kind comes from the sidecar when one
    /// exists, otherwise from the network shape: a PPO net maps `4 + n`
    /// inputs to `n + 1` outputs, a DQL net maps 5 inputs to 21 outputs.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let sidecar_kind = match KvConfig::load(sidecar_path(path)) {
            Ok(kv) => kv.get_str("agent").and_then(|a| a.parse().ok()),
            Err(_) => None,
        };
        let bytes = fs::read(path).map_err(|e| HarnessError::io(path, e))?;
        let mut input = bytes.as_slice();
        let mlp = Mlp::read_from(&mut input)?;
        let kind =
            sidecar_kind.unwrap_or(if mlp.input_dim() == 5 && mlp.output_dim() == N_ACTIONS {
                AgentKind::Dql
            } else {
                AgentKind::Ppo
            });
        match kind {
            AgentKind::Dql => {
                if !input.is_empty() {
                    return Err(NetError::Format("trailing bytes after Q network".into()).into());
                }
                QPolicy::new(mlp.clone(), 0.0)?;
                Ok(Self::Dql(mlp))
            }
            AgentKind::Ppo => Ok(Self::Ppo(PolicyValueNet::read_from(&mut bytes.as_slice())?)),
        }
    }
}

/// `<checkpoint>.conf`: run configuration plus the frame count.
pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".conf");
    PathBuf::from(s)
}

fn write_checkpoint(
    cfg: &RunConfig,
    ckpt: &Checkpoint,
    path: &Path,
    frames: usize,
) -> Result<(), HarnessError> {
    ckpt.save(path)?;
    let mut kv = cfg.to_kv();
    kv.set("frames", frames.to_string());
    fs::write(sidecar_path(path), kv.to_string())
        .map_err(|e| HarnessError::io(sidecar_path(path), e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub frames: usize,
    pub episodes: usize,
    pub updates: usize,
    /// Mean episode reward under the initial policy.
    pub baseline_reward: f64,
    /// Mean reward of the last 10 training episodes.
    pub final_reward: f64,
    pub crashed_episodes: usize,
    pub checkpoint: PathBuf,
}

struct StatsWriter {
    out: BufWriter<fs::File>,
    path: PathBuf,
}

impl StatsWriter {
    fn create(path: PathBuf, header: &str) -> Result<Self, HarnessError> {
        let file = fs::File::create(&path).map_err(|e| HarnessError::io(&path, e))?;
        let mut w = Self {
            out: BufWriter::new(file),
            path,
        };
        w.row(header)?;
        Ok(w)
    }

    fn row(&mut self, line: &str) -> Result<(), HarnessError> {
        writeln!(self.out, "{line}")
            .and_then(|_| self.out.flush())
            .map_err(|e| HarnessError::io(&self.path, e))
    }
}

#[derive(Default)]
struct RewardWindow {
    last: VecDeque<f64>,
}

impl RewardWindow {
    fn push(&mut self, r: f64) {
        if self.last.len() == 10 {
            self.last.pop_front();
        }
        self.last.push_back(r);
    }

    fn mean(&self) -> f64 {
        if self.last.is_empty() {
            f64::NAN
        } else {
            self.last.iter().sum::<f64>() / self.last.len() as f64
        }
    }
}

fn mean_reward(episodes: &[(u64, Episode)]) -> f64 {
    if episodes.is_empty() {
        return f64::NAN;
    }
    episodes.iter().map(|(_, e)| e.total_reward).sum::<f64>() / episodes.len() as f64
}

/// Trains the configured agent for `total_frames` frames.
///
/// Writes `stats.csv`, `checkpoint.bin` (final), `checkpoints/frames_<N>.bin`
/// every `checkpoint_every` frames, and a `.conf` sidecar next to each
/// checkpoint.
pub fn train<C: Collector + ?Sized>(
    cfg: &RunConfig,
    collector: &mut C,
) -> Result<TrainSummary, HarnessError> {
    fs::create_dir_all(cfg.out_dir.join("checkpoints"))
        .map_err(|e| HarnessError::io(&cfg.out_dir, e))?;
    fs::write(cfg.out_dir.join("run.conf"), cfg.to_kv().to_string())
        .map_err(|e| HarnessError::io(cfg.out_dir.join("run.conf"), e))?;
    info!(
        "[{}] training {} on {} muscle(s) for {} frames",
        cfg.experiment,
        cfg.agent.as_str(),
        cfg.n_muscles(),
        cfg.total_frames
    );
    match cfg.agent {
        AgentKind::Ppo => train_ppo(cfg, collector),
        AgentKind::Dql => train_dql(cfg, collector),
    }
}

fn periodic_checkpoint(
    cfg: &RunConfig,
    ckpt: &Checkpoint,
    frames: usize,
    next_mark: &mut usize,
) -> Result<(), HarnessError> {
    while frames >= *next_mark {
        let path = cfg
            .out_dir
            .join("checkpoints")
            .join(format!("frames_{next_mark}.bin"));
        write_checkpoint(cfg, ckpt, &path, frames)?;
        *next_mark += cfg.checkpoint_every;
    }
    Ok(())
}

fn train_ppo<C: Collector + ?Sized>(
    cfg: &RunConfig,
    collector: &mut C,
) -> Result<TrainSummary, HarnessError> {
    let mut agent = PpoAgent::new(cfg.n_muscles(), cfg.ppo.clone(), cfg.seed)?;
    let mut stats = StatsWriter::create(
        cfg.out_dir.join("stats.csv"),
        "frames,mean_episode_reward_last10,loss,clip_fraction,entropy",
    )?;
    let train_set = cfg.train_set();
    let trajectory = |i: u64| train_set.get(i);
    let seed_base = cfg.seed ^ TRAIN_EPISODE_SALT;
    let seed = |i: u64| mix_seed(seed_base, i);
    let spec = cfg.train_spec();
    let mut window = RewardWindow::default();
    let (mut frames, mut episodes, mut updates, mut crashed) = (0usize, 0usize, 0usize, 0usize);
    let mut next_index = 0u64;
    let mut baseline = f64::NAN;
    let mut next_mark = cfg.checkpoint_every;
    while frames < cfg.total_frames {
        let snapshot = agent.snapshot(false);
        let plan = CollectPlan {
            first_index: next_index,
            max_episodes: None,
            min_frames: Some(cfg.ppo.rollout_frames.min(cfg.total_frames - frames)),
            trajectory: &trajectory,
            seed: &seed,
            spec,
        };
        let got = collector.collect(&snapshot, &plan)?;
        next_index = got.next_index;
        if baseline.is_nan() {
            baseline = mean_reward(&got.episodes);
        }
        for (_, ep) in &got.episodes {
            window.push(ep.total_reward);
            crashed += usize::from(ep.crashed);
        }
        episodes += got.episodes.len();
        let rollout = Rollout {
            snapshot_id: snapshot.id,
            episodes: got.episodes.into_iter().map(|(_, e)| e).collect(),
        };
        frames += rollout.frames();
        let s = agent.update(&rollout)?;
        updates += 1;
        stats.row(&format!(
            "{frames},{},{},{},{}",
            window.mean(),
            s.loss,
            s.clip_fraction,
            s.entropy
        ))?;
        info!(
            "[{}] frames {frames} reward(last10) {:.2} clip {:.3} entropy {:.3}",
            cfg.experiment,
            window.mean(),
            s.clip_fraction,
            s.entropy
        );
        periodic_checkpoint(
            cfg,
            &Checkpoint::Ppo(agent.net().clone()),
            frames,
            &mut next_mark,
        )?;
    }
    let path = cfg.out_dir.join("checkpoint.bin");
    write_checkpoint(cfg, &Checkpoint::Ppo(agent.net().clone()), &path, frames)?;
    Ok(TrainSummary {
        frames,
        episodes,
        updates,
        baseline_reward: baseline,
        final_reward: window.mean(),
        crashed_episodes: crashed,
        checkpoint: path,
    })
}

/// Episodes per DQL collection round; the Q net is frozen within a round.
fn dql_round_episodes(cfg: &RunConfig) -> u64 {
    cfg.workers.max(cfg.worker_addrs.len()).max(1) as u64
}

fn train_dql<C: Collector + ?Sized>(
    cfg: &RunConfig,
    collector: &mut C,
) -> Result<TrainSummary, HarnessError> {
    let mut agent = DqlAgent::new(cfg.n_muscles(), cfg.dql.clone(), cfg.seed)?;
    let mut stats = StatsWriter::create(
        cfg.out_dir.join("stats.csv"),
        "frames,mean_episode_reward_last10,loss,epsilon,updates",
    )?;
    let train_set = cfg.train_set();
    let trajectory = |i: u64| train_set.get(i);
    let seed_base = cfg.seed ^ TRAIN_EPISODE_SALT;
    let seed = |i: u64| mix_seed(seed_base, i);
    let spec = cfg.train_spec();
    let mut window = RewardWindow::default();
    let (mut frames, mut episodes, mut crashed) = (0usize, 0usize, 0usize);
    let mut next_index = 0u64;
    let mut baseline = f64::NAN;
    let mut next_mark = cfg.checkpoint_every;
    let round = dql_round_episodes(cfg);
    while frames < cfg.total_frames {
        let epsilon = cfg.dql.epsilon(frames, cfg.total_frames);
        let policy = agent.policy(epsilon);
        let plan = CollectPlan {
            first_index: next_index,
            max_episodes: Some(round),
            min_frames: None,
            trajectory: &trajectory,
            seed: &seed,
            spec,
        };
        let got = collector.collect(&policy, &plan)?;
        next_index = got.next_index;
        if baseline.is_nan() {
            baseline = mean_reward(&got.episodes);
        }
        let (mut loss_sum, mut loss_n) = (0.0, 0usize);
        'episodes: for (_, ep) in &got.episodes {
            window.push(ep.total_reward);
            crashed += usize::from(ep.crashed);
            episodes += 1;
            for step in &ep.steps {
                if frames >= cfg.total_frames {
                    break 'episodes;
                }
                let index = step.index.expect("Q policy records action indices");
                agent.observe(&step.transition, index);
                frames += 1;
                if let Some(l) = agent.update() {
                    loss_sum += l;
                    loss_n += 1;
                }
            }
        }
        if got.episodes.is_empty() {
            return Err(EnvError::NoWorkers.into());
        }
        let loss = if loss_n > 0 {
            loss_sum / loss_n as f64
        } else {
            f64::NAN
        };
        stats.row(&format!(
            "{frames},{},{loss},{epsilon},{}",
            window.mean(),
            agent.updates()
        ))?;
        periodic_checkpoint(
            cfg,
            &Checkpoint::Dql(agent.online().clone()),
            frames,
            &mut next_mark,
        )?;
    }
    info!(
        "[{}] DQL done: {frames} frames, {} updates",
        cfg.experiment,
        agent.updates()
    );
    let path = cfg.out_dir.join("checkpoint.bin");
    write_checkpoint(cfg, &Checkpoint::Dql(agent.online().clone()), &path, frames)?;
    Ok(TrainSummary {
        frames,
        episodes,
        updates: agent.updates() as usize,
        baseline_reward: baseline,
        final_reward: window.mean(),
        crashed_episodes: crashed,
        checkpoint: path,
    })
}

/// Per-trajectory tracking errors, degrees.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryScore {
    pub index: u64,
    pub rmse: f64,
    pub mae: f64,
    pub crashed: bool,
}

/// Order statistics of a sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub min: f64,
    pub max: f64,
}

impl Summary {
    /// Quartiles by linear interpolation between order statistics.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let h = p * (v.len() - 1) as f64;
            let lo = h.floor() as usize;
            let hi = h.ceil() as usize;
            v[lo] + (h - lo as f64) * (v[hi] - v[lo])
        };
        Some(Self {
            mean: v.iter().sum::<f64>() / v.len() as f64,
            median: q(0.5),
            q1: q(0.25),
            q3: q(0.75),
            min: v[0],
            max: v[v.len() - 1],
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub scores: Vec<TrajectoryScore>,
    pub crash_count: usize,
    /// Fraction of action components with magnitude above `omega_max`.
    pub bang_bang_fraction: f64,
}

impl EvalReport {
    fn completed(&self, f: impl Fn(&TrajectoryScore) -> f64) -> Vec<f64> {
        self.scores.iter().filter(|s| !s.crashed).map(f).collect()
    }

    pub fn rmse(&self) -> Option<Summary> {
        Summary::of(&self.completed(|s| s.rmse))
    }

    pub fn mae(&self) -> Option<Summary> {
        Summary::of(&self.completed(|s| s.mae))
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "trajectory,rmse,mae,crashed")?;
        for s in &self.scores {
            writeln!(
                out,
                "{},{},{},{}",
                s.index,
                s.rmse,
                s.mae,
                u8::from(s.crashed)
            )?;
        }
        Ok(())
    }

    pub fn write_summary<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "metric,mean,median,q1,q3,min,max")?;
        for (name, s) in [("rmse", self.rmse()), ("mae", self.mae())] {
            match s {
                Some(s) => writeln!(
                    out,
                    "{name},{},{},{},{},{},{}",
                    s.mean, s.median, s.q1, s.q3, s.min, s.max
                )?,
                None => writeln!(out, "{name},NaN,NaN,NaN,NaN,NaN,NaN")?,
            }
        }
        writeln!(out, "crashes,{}", self.crash_count)?;
        writeln!(out, "bang_bang_fraction,{}", self.bang_bang_fraction)
    }
}

/// Tracking error of one episode: at every frame, the reached angle against
/// the desired angle at the same instant.
pub fn score_episode(index: u64, ep: &Episode) -> TrajectoryScore {
    let errors: Vec<f64> = ep
        .steps
        .iter()
        .filter(|s| !s.transition.crashed)
        .map(|s| s.transition.next_obs.state().phi - s.transition.obs.target().0)
        .collect();
    let n = errors.len().max(1) as f64;
    TrajectoryScore {
        index,
        rmse: (errors.iter().map(|e| e * e).sum::<f64>() / n).sqrt(),
        mae: errors.iter().map(|e| e.abs()).sum::<f64>() / n,
        crashed: ep.crashed,
    }
}

/// Runs `policy` on every trajectory of `set` and scores it.
pub fn evaluate_policy<C: Collector + ?Sized>(
    policy: &dyn Policy,
    set: &TrajectorySet,
    count: usize,
    reward: RewardConfig,
    dt: f64,
    collector: &mut C,
) -> Result<(EvalReport, Vec<Episode>), HarnessError> {
    let trajectory = |i: u64| set.get(i);
    let seed = |i: u64| mix_seed(set.seed, i);
    let plan = CollectPlan {
        first_index: 0,
        max_episodes: Some(count as u64),
        min_frames: None,
        trajectory: &trajectory,
        seed: &seed,
        spec: EpisodeSpec {
            frames: set.frames(dt),
            reward,
        },
    };
    let got = collector.collect(policy, &plan)?;
    if !got.dropped.is_empty() {
        return Err(EnvError::Protocol(format!(
            "evaluation episodes {:?} lost to worker failures",
            got.dropped
        ))
        .into());
    }
    let omega_max = reward.params.omega_max;
    let (mut big, mut total) = (0usize, 0usize);
    let mut scores = Vec::with_capacity(count);
    let mut episodes = Vec::with_capacity(count);
    for (index, ep) in got.episodes {
        for s in &ep.steps {
            let a = s.transition.action.as_slice();
            total += a.len();
            big += a.iter().filter(|w| w.abs() > omega_max).count();
        }
        scores.push(score_episode(index, &ep));
        episodes.push(ep);
    }
    let report = EvalReport {
        crash_count: scores.iter().filter(|s| s.crashed).count(),
        scores,
        bang_bang_fraction: if total > 0 {
            big as f64 / total as f64
        } else {
            0.0
        },
    };
    Ok((report, episodes))
}

/// Greedy evaluation of a checkpoint on the frozen test set.
pub fn evaluate<C: Collector + ?Sized>(
    cfg: &RunConfig,
    ckpt: &Checkpoint,
    collector: &mut C,
) -> Result<(EvalReport, Vec<Episode>), HarnessError> {
    if ckpt.n_muscles() != cfg.n_muscles() {
        return Err(AgentError::ShapeMismatch {
            expected: vec![4 + cfg.n_muscles()],
            found: vec![4 + ckpt.n_muscles()],
        }
        .into());
    }
    let policy = ckpt.greedy_policy();
    evaluate_policy(
        policy.as_ref(),
        &cfg.test_set(),
        cfg.test_count,
        cfg.reward,
        cfg.plant.dt,
        collector,
    )
}

/// Deterministic rollout of `ckpt` along `traj`, in-process, written as a
/// trace CSV.
pub fn emit_trace<W: Write>(
    cfg: &RunConfig,
    ckpt: &Checkpoint,
    traj: &Trajectory,
    out: W,
) -> Result<Episode, HarnessError> {
    if ckpt.n_muscles() != cfg.n_muscles() {
        return Err(AgentError::ShapeMismatch {
            expected: vec![4 + cfg.n_muscles()],
            found: vec![4 + ckpt.n_muscles()],
        }
        .into());
    }
    let policy = ckpt.greedy_policy();
    let mut env = LocalEnv::new(cfg.plant.clone());
    let spec = EpisodeSpec {
        frames: (traj.duration() / cfg.plant.dt).round() as usize,
        reward: cfg.reward,
    };
    let ep = crate::mdp::run_episode(&mut env, traj, policy.as_ref(), &spec, 0)?;
    ep.write_trace(out, cfg.plant.dt)
        .map_err(|e| HarnessError::io("trace output", e))?;
    Ok(ep)
}

/// Writes each trajectory of the frozen test set to `dir/traj_NNN.csv`.
pub fn write_test_set(cfg: &RunConfig, dir: &Path) -> Result<usize, HarnessError> {
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let set = cfg.test_set();
    for i in 0..cfg.test_count {
        let path = dir.join(format!("traj_{i:03}.csv"));
        let file = fs::File::create(&path).map_err(|e| HarnessError::io(&path, e))?;
        let mut out = BufWriter::new(file);
        set.get(i as u64)
            .write_csv(&mut out, cfg.plant.dt)
            .and_then(|_| out.flush())
            .map_err(|e| HarnessError::io(&path, e))?;
    }
    Ok(cfg.test_count)
}

/// Mean summed activation of `muscles` over the first `early_s` seconds and
/// over the last `late_s` seconds of an episode.
pub fn early_late_activation(
    ep: &Episode,
    muscles: &[usize],
    dt: f64,
    early_s: f64,
    late_s: f64,
) -> (f64, f64) {
    let acts: Vec<f64> = ep
        .steps
        .iter()
        .map(|s| {
            let a = apply_action(&s.transition.obs.activations(), &s.transition.action);
            muscles.iter().map(|&m| a.as_slice()[m]).sum()
        })
        .collect();
    let early_n = ((early_s / dt).round() as usize).clamp(1, acts.len().max(1));
    let late_n = ((late_s / dt).round() as usize).clamp(1, acts.len().max(1));
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len().max(1) as f64;
    (
        mean(&acts[..early_n.min(acts.len())]),
        mean(&acts[acts.len().saturating_sub(late_n)..]),
    )
}
