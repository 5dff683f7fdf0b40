//! TCP rollout fabric.
//!
//! Each environment server hosts one plant and answers strict request/reply
//! frames: a 4-byte big-endian body length followed by a UTF-8 JSON object
//! whose `type` field names the message. The learner connects as a client,
//! drives episodes step by step, and owns rewards and trajectories.
//!
//! | request                          | reply                                      |
//! |----------------------------------|--------------------------------------------|
//! | `HELLO {version}`                | `HELLO {version, n_muscles, dt}`           |
//! | `RESET {seed, initial_phi}`      | `RESET_OK {phi, phi_dot, activations}`     |
//! | `STEP {omega}`                   | `STEP_OK {phi, phi_dot}` or `CRASHED`      |
//! | `SHUTDOWN`                       | connection closed, server exits            |
//! | anything unusable                | `ERROR {message}`                          |

use std::collections::BTreeMap;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};

use crate::error::EnvError;
use crate::mdp::{run_episode, ActionDelta, EnvStep, Environment, Episode, EpisodeSpec, Policy};
use crate::plant::{Activations, JointState, PlantConfig};
use crate::sim::{CrashInjection, LocalEnv};
use crate::trajectory::Trajectory;

pub const PROTOCOL_VERSION: u32 = 1;
pub const MAX_FRAME_BYTES: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum WireMessage {
    Hello {
        version: u32,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        n_muscles: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dt: Option<f64>,
    },
    Reset {
        seed: u64,
        initial_phi: f64,
    },
    ResetOk {
        phi: f64,
        phi_dot: f64,
        activations: Vec<f64>,
    },
    Step {
        omega: Vec<f64>,
    },
    StepOk {
        phi: f64,
        phi_dot: f64,
    },
    Crashed,
    Shutdown,
    Error {
        message: String,
    },
}

const KNOWN_TYPES: [&str; 8] = [
    "HELLO", "RESET", "RESET_OK", "STEP", "STEP_OK", "CRASHED", "SHUTDOWN", "ERROR",
];

#[derive(Debug, thiserror::Error)]
pub enum WireError {
    #[error("connection closed")]
    Closed,
    #[error("frame of {0} bytes exceeds limit")]
    TooLarge(usize),
    #[error("malformed frame: {0}")]
    Malformed(String),
    /// Well-formed JSON naming a type outside the protocol; the stream is
    /// still in sync.
    #[error("unknown message type {0:?}")]
    UnknownType(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl From<WireError> for EnvError {
    fn from(e: WireError) -> Self {
        match e {
            WireError::Io(io) => EnvError::Io(io),
            WireError::Closed => EnvError::Io(io::Error::new(
                io::ErrorKind::UnexpectedEof,
                "connection closed",
            )),
            other => EnvError::Protocol(other.to_string()),
        }
    }
}

pub fn encode(msg: &WireMessage) -> Vec<u8> {
    let body = serde_json::to_vec(msg).expect("wire messages always serialize");
    let mut out = Vec::with_capacity(4 + body.len());
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
    out
}

pub fn decode_body(body: &[u8]) -> Result<WireMessage, WireError> {
    let value: serde_json::Value =
        serde_json::from_slice(body).map_err(|e| WireError::Malformed(e.to_string()))?;
    let ty = value
        .get("type")
        .and_then(|t| t.as_str())
        .ok_or_else(|| WireError::Malformed("missing \"type\"".into()))?;
    if !KNOWN_TYPES.contains(&ty) {
        return Err(WireError::UnknownType(ty.to_string()));
    }
    serde_json::from_value(value).map_err(|e| WireError::Malformed(e.to_string()))
}

pub fn write_message<W: Write>(out: &mut W, msg: &WireMessage) -> Result<(), WireError> {
    out.write_all(&encode(msg))?;
    out.flush()?;
    Ok(())
}

pub fn read_message<R: Read>(input: &mut R) -> Result<WireMessage, WireError> {
    let mut len = [0u8; 4];
    match input.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Err(WireError::Closed),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME_BYTES {
        return Err(WireError::TooLarge(len));
    }
    let mut body = vec![0u8; len];
    input.read_exact(&mut body)?;
    decode_body(&body)
}

/// Server-side knobs beyond the plant itself.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ServeOptions {
    pub crash_injection: Option<CrashInjection>,
    /// Fault injection: drop the connection without a reply on this STEP
    /// (counted across the server's lifetime) and stop serving.
    pub die_after_steps: Option<usize>,
}

enum ConnectionEnd {
    Closed,
    Shutdown,
    Died,
}

/// Serves connections one at a time until a SHUTDOWN arrives.
pub fn serve_env(
    listener: TcpListener,
    cfg: PlantConfig,
    opts: ServeOptions,
) -> Result<(), EnvError> {
    cfg.validate()
        .map_err(|e| EnvError::Protocol(e.to_string()))?;
    let mut env = LocalEnv::new(cfg);
    if let Some(inj) = opts.crash_injection {
        env = env.with_crash_injection(inj);
    }
    let mut steps_served = 0usize;
    info!("env server listening on {}", listener.local_addr()?);
    for stream in listener.incoming() {
        let stream = match stream {
            Ok(s) => s,
            Err(e) => {
                warn!("accept failed: {e}");
                continue;
            }
        };
        let peer = stream.peer_addr().ok();
        match serve_connection(stream, &mut env, &opts, &mut steps_served) {
            Ok(ConnectionEnd::Closed) => debug!("client {peer:?} disconnected"),
            Ok(ConnectionEnd::Shutdown) => {
                info!("shutdown requested by {peer:?}");
                return Ok(());
            }
            Ok(ConnectionEnd::Died) => {
                warn!("injected fault: server exiting");
                return Ok(());
            }
            Err(e) => warn!("connection {peer:?} ended with error: {e}"),
        }
    }
    Ok(())
}

fn serve_connection(
    stream: TcpStream,
    env: &mut LocalEnv,
    opts: &ServeOptions,
    steps_served: &mut usize,
) -> Result<ConnectionEnd, WireError> {
    stream.set_nodelay(true)?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream.try_clone()?);
    let mut greeted = false;
    let mut reset = false;
    let reply_error = |w: &mut BufWriter<TcpStream>, message: String| {
        write_message(w, &WireMessage::Error { message })
    };
    loop {
        let msg = match read_message(&mut reader) {
            Ok(m) => m,
            Err(WireError::Closed) => return Ok(ConnectionEnd::Closed),
            Err(WireError::UnknownType(t)) => {
                reply_error(&mut writer, format!("unknown message type {t:?}"))?;
                continue;
            }
            Err(e @ (WireError::Malformed(_) | WireError::TooLarge(_))) => {
                let _ = reply_error(&mut writer, e.to_string());
                let _ = stream.shutdown(Shutdown::Both);
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        match msg {
            WireMessage::Hello { version, .. } => {
                if version != PROTOCOL_VERSION {
                    let _ = reply_error(
                        &mut writer,
                        format!("protocol version {version} unsupported, server speaks {PROTOCOL_VERSION}"),
                    );
                    let _ = stream.shutdown(Shutdown::Both);
                    return Ok(ConnectionEnd::Closed);
                }
                greeted = true;
                write_message(
                    &mut writer,
                    &WireMessage::Hello {
                        version: PROTOCOL_VERSION,
                        n_muscles: Some(env.n_muscles()),
                        dt: Some(env.dt()),
                    },
                )?;
            }
            _ if !greeted => reply_error(&mut writer, "HELLO required first".into())?,
            WireMessage::Reset { seed, initial_phi } => match env.reset(seed, initial_phi) {
                Ok((s, a)) => {
                    reset = true;
                    write_message(
                        &mut writer,
                        &WireMessage::ResetOk {
                            phi: s.phi,
                            phi_dot: s.phi_dot,
                            activations: a.as_slice().to_vec(),
                        },
                    )?;
                }
                Err(e) => reply_error(&mut writer, e.to_string())?,
            },
            WireMessage::Step { omega } => {
                if !reset {
                    reply_error(&mut writer, "STEP before RESET".into())?;
                    continue;
                }
                if opts.die_after_steps == Some(*steps_served) {
                    let _ = stream.shutdown(Shutdown::Both);
                    return Ok(ConnectionEnd::Died);
                }
                *steps_served += 1;
                let Some(delta) = ActionDelta::new(omega) else {
                    reply_error(&mut writer, "omega components must lie in [-1, 1]".into())?;
                    continue;
                };
                match env.step(&delta) {
                    Ok(EnvStep::Ok(s)) => write_message(
                        &mut writer,
                        &WireMessage::StepOk {
                            phi: s.phi,
                            phi_dot: s.phi_dot,
                        },
                    )?,
                    Ok(EnvStep::Crashed) => {
                        reset = false;
                        write_message(&mut writer, &WireMessage::Crashed)?
                    }
                    Err(e) => reply_error(&mut writer, e.to_string())?,
                }
            }
            WireMessage::Shutdown => return Ok(ConnectionEnd::Shutdown),
            other => reply_error(&mut writer, format!("unexpected request {other:?}"))?,
        }
    }
}

/// Learner-side handle on one environment server.
#[derive(Debug)]
pub struct RemoteEnv {
    addr: SocketAddr,
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
    n_muscles: usize,
    dt: f64,
}

impl RemoteEnv {
    pub fn connect(addr: SocketAddr, timeout: Duration) -> Result<Self, EnvError> {
        let stream = TcpStream::connect_timeout(&addr, timeout)?;
        stream.set_nodelay(true)?;
        stream.set_read_timeout(Some(Duration::from_secs(30)))?;
        let mut env = Self {
            addr,
            reader: BufReader::new(stream.try_clone()?),
            writer: BufWriter::new(stream),
            n_muscles: 0,
            dt: 0.0,
        };
        match env.request(&WireMessage::Hello {
            version: PROTOCOL_VERSION,
            n_muscles: None,
            dt: None,
        })? {
            WireMessage::Hello {
                version: PROTOCOL_VERSION,
                n_muscles: Some(n),
                dt: Some(dt),
            } => {
                env.n_muscles = n;
                env.dt = dt;
                Ok(env)
            }
            other => Err(EnvError::Protocol(format!("bad HELLO reply {other:?}"))),
        }
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    fn request(&mut self, msg: &WireMessage) -> Result<WireMessage, EnvError> {
        write_message(&mut self.writer, msg)?;
        match read_message(&mut self.reader)? {
            WireMessage::Error { message } => Err(EnvError::Remote(message)),
            reply => Ok(reply),
        }
    }

    /// Asks the server to exit.
    pub fn shutdown(mut self) -> Result<(), EnvError> {
        write_message(&mut self.writer, &WireMessage::Shutdown)?;
        Ok(())
    }
}

impl Environment for RemoteEnv {
    fn n_muscles(&self) -> usize {
        self.n_muscles
    }

    fn dt(&self) -> f64 {
        self.dt
    }

    fn reset(
        &mut self,
        seed: u64,
        initial_phi: f64,
    ) -> Result<(JointState, Activations), EnvError> {
        match self.request(&WireMessage::Reset { seed, initial_phi })? {
            WireMessage::ResetOk {
                phi,
                phi_dot,
                activations,
            } => {
                let acts = Activations::new(activations)
                    .filter(|a| a.len() == self.n_muscles)
                    .ok_or_else(|| EnvError::Protocol("RESET_OK activations invalid".into()))?;
                Ok((JointState { phi, phi_dot }, acts))
            }
            other => Err(EnvError::Protocol(format!(
                "expected RESET_OK, got {other:?}"
            ))),
        }
    }

    fn step(&mut self, delta: &ActionDelta) -> Result<EnvStep, EnvError> {
        match self.request(&WireMessage::Step {
            omega: delta.as_slice().to_vec(),
        })? {
            WireMessage::StepOk { phi, phi_dot } => Ok(EnvStep::Ok(JointState { phi, phi_dot })),
            WireMessage::Crashed => Ok(EnvStep::Crashed),
            other => Err(EnvError::Protocol(format!(
                "expected STEP_OK or CRASHED, got {other:?}"
            ))),
        }
    }
}

/// Which episodes to run and how to set them up. Episode `i` is fully
/// determined by `trajectory(i)` and `seed(i)`.
pub struct CollectPlan<'a> {
    pub first_index: u64,
    /// Stop starting episodes once this many have been assigned.
    pub max_episodes: Option<u64>,
    /// Stop starting episodes once finished ones hold this many frames.
    pub min_frames: Option<usize>,
    pub trajectory: &'a (dyn Fn(u64) -> Trajectory + Sync),
    pub seed: &'a (dyn Fn(u64) -> u64 + Sync),
    pub spec: EpisodeSpec,
}

#[derive(Debug, Clone, Default)]
pub struct Collected {
    /// Completed episodes in index order.
    pub episodes: Vec<(u64, Episode)>,
    /// Indices of episodes lost to a worker failure.
    pub dropped: Vec<u64>,
    /// First index not yet handed out.
    pub next_index: u64,
}

impl Collected {
    pub fn frames(&self) -> usize {
        self.episodes.iter().map(|(_, e)| e.len()).sum()
    }
}

/// Runs episodes concurrently, one thread per live environment slot. A slot
/// whose environment fails is emptied and its in-flight episode dropped.
///
/// With `min_frames`, the result is the shortest index-ordered prefix of
/// completed episodes reaching the frame count; completed episodes past it
/// are discarded so the result does not depend on worker timing.
pub fn collect<E, P>(
    slots: &mut [Option<E>],
    policy: &P,
    plan: &CollectPlan,
) -> Result<Collected, EnvError>
where
    E: Environment + Send,
    P: Policy + ?Sized,
{
    if slots.iter().all(Option::is_none) {
        return Err(EnvError::NoWorkers);
    }
    // (next offset, frames finished, episodes in flight)
    let state = Mutex::new((0u64, 0usize, 0usize));
    let results: Mutex<BTreeMap<u64, Option<Episode>>> = Mutex::new(BTreeMap::new());
    // Stop handing out episodes once finished frames plus full-length
    // in-flight episodes would reach the target.
    let claim = || -> Option<u64> {
        let mut st = state.lock().unwrap();
        let (next, done, in_flight) = *st;
        if plan.max_episodes.is_some_and(|m| next >= m) {
            return None;
        }
        if plan
            .min_frames
            .is_some_and(|m| done + in_flight * plan.spec.frames >= m)
        {
            return None;
        }
        *st = (next + 1, done, in_flight + 1);
        Some(plan.first_index + next)
    };
    let finish = |frames: usize| {
        let mut st = state.lock().unwrap();
        st.1 += frames;
        st.2 -= 1;
    };
    thread::scope(|scope| {
        for slot in slots.iter_mut().filter(|s| s.is_some()) {
            let (claim, finish, results) = (&claim, &finish, &results);
            scope.spawn(move || {
                while let Some(index) = claim() {
                    let env = slot.as_mut().expect("live slot");
                    let traj = (plan.trajectory)(index);
                    match run_episode(env, &traj, policy, &plan.spec, (plan.seed)(index)) {
                        Ok(ep) => {
                            finish(ep.len());
                            results.lock().unwrap().insert(index, Some(ep));
                        }
                        Err(e) => {
                            warn!("episode {index} dropped: worker failed: {e}");
                            finish(0);
                            results.lock().unwrap().insert(index, None);
                            *slot = None;
                            return;
                        }
                    }
                }
            });
        }
    });
    let results = results.into_inner().unwrap();
    let mut out = Collected {
        next_index: plan.first_index + state.into_inner().unwrap().0,
        ..Default::default()
    };
    let mut frames = 0usize;
    for (index, ep) in results {
        if plan.min_frames.is_some_and(|m| frames >= m) {
            break;
        }
        match ep {
            Some(ep) => {
                frames += ep.len();
                out.episodes.push((index, ep));
            }
            None => out.dropped.push(index),
        }
    }
    if slots.iter().all(Option::is_none) && plan.min_frames.is_some_and(|m| frames < m) {
        return Err(EnvError::NoWorkers);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub connect_timeout: Duration,
    pub base_backoff: Duration,
    pub max_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            connect_timeout: Duration::from_secs(2),
            base_backoff: Duration::from_millis(100),
            max_backoff: Duration::from_secs(10),
        }
    }
}

#[derive(Debug)]
struct Endpoint {
    addr: SocketAddr,
    failures: u32,
    next_retry: Instant,
}

/// Connections to a fixed set of environment servers.
#[derive(Debug)]
pub struct WorkerPool {
    endpoints: Vec<Endpoint>,
    slots: Vec<Option<RemoteEnv>>,
    retry: RetryPolicy,
}

impl WorkerPool {
    /// Connects to every address; fails only if none answers.
    pub fn connect<A: ToSocketAddrs>(addrs: &[A], retry: RetryPolicy) -> Result<Self, EnvError> {
        let mut resolved = Vec::new();
        for a in addrs {
            resolved.extend(a.to_socket_addrs()?.take(1));
        }
        let now = Instant::now();
        let mut pool = Self {
            endpoints: resolved
                .into_iter()
                .map(|addr| Endpoint {
                    addr,
                    failures: 0,
                    next_retry: now,
                })
                .collect(),
            slots: Vec::new(),
            retry,
        };
        pool.slots = (0..pool.endpoints.len()).map(|_| None).collect();
        pool.heal();
        if pool.live() == 0 {
            return Err(EnvError::NoWorkers);
        }
        Ok(pool)
    }

    /// Configured maximum number of workers.
    pub fn capacity(&self) -> usize {
        self.endpoints.len()
    }

    pub fn live(&self) -> usize {
        self.slots.iter().filter(|s| s.is_some()).count()
    }

    pub fn addrs(&self) -> Vec<SocketAddr> {
        self.endpoints.iter().map(|e| e.addr).collect()
    }

    pub fn n_muscles(&self) -> Option<usize> {
        self.slots.iter().flatten().map(|e| e.n_muscles()).next()
    }

    /// Reconnects dead endpoints whose backoff has expired. Failures double
    /// the endpoint's backoff up to the configured cap. Returns the number
    /// of live workers.
    pub fn heal(&mut self) -> usize {
        let now = Instant::now();
        for (ep, slot) in self.endpoints.iter_mut().zip(self.slots.iter_mut()) {
            if slot.is_some() || now < ep.next_retry {
                continue;
            }
            match RemoteEnv::connect(ep.addr, self.retry.connect_timeout) {
                Ok(env) => {
                    if ep.failures > 0 {
                        info!("worker {} rejoined", ep.addr);
                    }
                    ep.failures = 0;
                    *slot = Some(env);
                }
                Err(e) => {
                    ep.failures += 1;
                    let backoff = self
                        .retry
                        .base_backoff
                        .saturating_mul(1 << ep.failures.min(16))
                        .min(self.retry.max_backoff);
                    ep.next_retry = now + backoff;
                    warn!("worker {} unavailable ({e}); retry in {backoff:?}", ep.addr);
                }
            }
        }
        self.live()
    }

    /// Forces every dead endpoint to be retried on the next heal.
    pub fn reset_backoff(&mut self) {
        let now = Instant::now();
        for ep in &mut self.endpoints {
            ep.next_retry = now;
        }
    }

    pub fn collect<P: Policy + ?Sized>(
        &mut self,
        policy: &P,
        plan: &CollectPlan,
    ) -> Result<Collected, EnvError> {
        self.heal();
        let out = collect(&mut self.slots, policy, plan)?;
        if !out.dropped.is_empty() {
            let now = Instant::now();
            for (ep, slot) in self.endpoints.iter_mut().zip(&self.slots) {
                if slot.is_none() && ep.failures == 0 {
                    ep.next_retry = now;
                }
            }
        }
        Ok(out)
    }

    /// Sends SHUTDOWN to every live worker.
    pub fn shutdown(self) {
        for env in self.slots.into_iter().flatten() {
            let addr = env.addr();
            if let Err(e) = env.shutdown() {
                debug!("shutdown of {addr} failed: {e}");
            }
        }
    }
}

/// In-process environment servers on ephemeral localhost ports.
pub struct LocalWorkers {
    addrs: Vec<SocketAddr>,
    handles: Vec<thread::JoinHandle<Result<(), EnvError>>>,
}

impl LocalWorkers {
    pub fn spawn(k: usize, cfg: &PlantConfig, opts: ServeOptions) -> Result<Self, EnvError> {
        let mut addrs = Vec::with_capacity(k);
        let mut handles = Vec::with_capacity(k);
        for _ in 0..k {
            let listener = TcpListener::bind("127.0.0.1:0")?;
            addrs.push(listener.local_addr()?);
            let cfg = cfg.clone();
            handles.push(thread::spawn(move || serve_env(listener, cfg, opts)));
        }
        Ok(Self { addrs, handles })
    }

    pub fn addrs(&self) -> &[SocketAddr] {
        &self.addrs
    }

    /// Waits for every server thread; call after the pool sent SHUTDOWN.
    pub fn join(self) {
        for h in self.handles {
            match h.join() {
                Ok(Ok(())) => {}
                Ok(Err(e)) => warn!("env server failed: {e}"),
                Err(_) => warn!("env server panicked"),
            }
        }
    }
}
