//! TCP fabric against the in-process oracle.

use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::thread;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use musctl_core::distrib::{
    collect, encode, read_message, serve_env, CollectPlan, LocalWorkers, RemoteEnv, RetryPolicy,
    ServeOptions, WireMessage, WorkerPool, PROTOCOL_VERSION,
};
use musctl_core::harness::{mix_seed, LocalPool};
use musctl_core::mdp::{
    ActionDelta, EnvStep, Environment, EpisodeSpec, RewardConfig, RewardParams,
};
use musctl_core::ppo::{PolicySnapshot, PolicyValueNet};
use musctl_core::sim::LocalEnv;
use musctl_core::{PlantConfig, Trajectory};

fn stochastic_policy(n: usize) -> PolicySnapshot {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    PolicySnapshot {
        id: 0,
        net: std::sync::Arc::new(PolicyValueNet::new(n, &[16], 0.0, &mut rng).unwrap()),
        deterministic: false,
    }
}

fn spec() -> EpisodeSpec {
    EpisodeSpec {
        frames: 100,
        reward: RewardConfig::full(RewardParams::default()),
    }
}

fn traj(i: u64) -> Trajectory {
    Trajectory::random(mix_seed(5, i), 10.0, 5.0, (30.0, 90.0)).unwrap()
}

fn seed(i: u64) -> u64 {
    mix_seed(11, i)
}

fn fast_retry() -> RetryPolicy {
    RetryPolicy {
        connect_timeout: Duration::from_millis(500),
        base_backoff: Duration::from_millis(10),
        max_backoff: Duration::from_millis(50),
    }
}

fn plan(max_episodes: u64) -> CollectPlan<'static> {
    CollectPlan {
        first_index: 0,
        max_episodes: Some(max_episodes),
        min_frames: None,
        trajectory: &traj,
        seed: &seed,
        spec: spec(),
    }
}

#[test]
fn single_worker_tcp_matches_in_process() {
    for plant in [PlantConfig::single_muscle(), PlantConfig::reference()] {
        let policy = stochastic_policy(plant.n_muscles());
        let workers = LocalWorkers::spawn(1, &plant, ServeOptions::default()).unwrap();
        let mut pool = WorkerPool::connect(workers.addrs(), fast_retry()).unwrap();
        let remote = pool.collect(&policy, &plan(10)).unwrap();
        pool.shutdown();
        workers.join();

        let mut slots = vec![Some(LocalEnv::new(plant.clone()))];
        let local = collect(&mut slots, &policy, &plan(10)).unwrap();
        assert_eq!(remote.episodes.len(), 10);
        assert!(remote.dropped.is_empty());
        assert_eq!(remote.episodes, local.episodes);
    }
}

#[test]
fn many_workers_give_the_same_prefix_as_one() {
    let plant = PlantConfig::single_muscle();
    let policy = stochastic_policy(1);
    let frame_plan = CollectPlan {
        first_index: 0,
        max_episodes: None,
        min_frames: Some(1234),
        trajectory: &traj,
        seed: &seed,
        spec: spec(),
    };
    let workers = LocalWorkers::spawn(4, &plant, ServeOptions::default()).unwrap();
    let mut pool = WorkerPool::connect(workers.addrs(), fast_retry()).unwrap();
    let four = pool.collect(&policy, &frame_plan).unwrap();
    pool.shutdown();
    workers.join();
    let one = LocalPool::new(&plant, 1, None);
    let mut one = one;
    let one = musctl_core::harness::Collector::collect(&mut one, &policy, &frame_plan).unwrap();
    assert_eq!(four.episodes, one.episodes);
    assert!(four.frames() >= 1234);
    assert!(four
        .episodes
        .iter()
        .all(|(_, e)| e.len() == 100 || e.crashed));
    assert!(four.frames() - four.episodes.last().unwrap().1.len() < 1234);
}

#[test]
fn killed_worker_loses_exactly_its_episode() {
    let plant = PlantConfig::single_muscle();
    let policy = stochastic_policy(1);
    let healthy = LocalWorkers::spawn(1, &plant, ServeOptions::default()).unwrap();
    let doomed = LocalWorkers::spawn(
        1,
        &plant,
        ServeOptions {
            crash_injection: None,
            die_after_steps: Some(50),
        },
    )
    .unwrap();
    let addrs = vec![doomed.addrs()[0], healthy.addrs()[0]];
    let mut pool = WorkerPool::connect(&addrs, fast_retry()).unwrap();
    let got = pool.collect(&policy, &plan(10)).unwrap();
    assert_eq!(got.dropped.len(), 1);
    assert_eq!(got.episodes.len(), 9);
    let lost = got.dropped[0];
    assert!(got.episodes.iter().all(|(i, _)| *i != lost));

    let mut slots = vec![Some(LocalEnv::new(plant.clone()))];
    let oracle = collect(&mut slots, &policy, &plan(10)).unwrap();
    for (i, ep) in &got.episodes {
        assert_eq!(ep.len(), 100);
        assert_eq!(ep, &oracle.episodes[*i as usize].1, "episode {i}");
    }
    assert_eq!(pool.live(), 1);
    pool.shutdown();
    healthy.join();
    doomed.join();
}

#[test]
fn scripted_steps_match_plant() {
    let plant = PlantConfig::reference();
    let workers = LocalWorkers::spawn(1, &plant, ServeOptions::default()).unwrap();
    let mut remote = RemoteEnv::connect(workers.addrs()[0], Duration::from_secs(1)).unwrap();
    let mut local = LocalEnv::new(plant.clone());
    assert_eq!(remote.n_muscles(), 4);
    assert_eq!(remote.dt(), plant.dt);
    assert_eq!(
        remote.reset(3, 42.0).unwrap(),
        local.reset(3, 42.0).unwrap()
    );
    for k in 0..10 {
        let w = k as f64 / 10.0;
        let delta = ActionDelta::new(vec![w, -w, 0.5 - w, 1.0]).unwrap();
        assert_eq!(remote.step(&delta).unwrap(), local.step(&delta).unwrap());
    }
    remote.shutdown().unwrap();
    workers.join();
}

#[test]
fn equilibrium_stream_is_constant() {
    let plant = PlantConfig::single_muscle();
    let workers = LocalWorkers::spawn(1, &plant, ServeOptions::default()).unwrap();
    let mut remote = RemoteEnv::connect(workers.addrs()[0], Duration::from_secs(1)).unwrap();
    remote.reset(0, 55.0).unwrap();
    for _ in 0..20 {
        match remote.step(&ActionDelta::zeros(1)).unwrap() {
            EnvStep::Ok(s) => assert!((s.phi - 55.0).abs() < 1e-9 && s.phi_dot.abs() < 1e-9),
            EnvStep::Crashed => panic!("crashed at equilibrium"),
        }
    }
    remote.shutdown().unwrap();
    workers.join();
}

fn raw_request(stream: &mut TcpStream, body: &[u8]) -> WireMessage {
    let mut frame = (body.len() as u32).to_be_bytes().to_vec();
    frame.extend_from_slice(body);
    stream.write_all(&frame).unwrap();
    read_message(stream).unwrap()
}

fn spawn_server() -> (SocketAddr, thread::JoinHandle<()>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let h = thread::spawn(move || {
        serve_env(
            listener,
            PlantConfig::single_muscle(),
            ServeOptions::default(),
        )
        .unwrap();
    });
    (addr, h)
}

#[test]
fn protocol_errors() {
    let (addr, handle) = spawn_server();
    let mut s = TcpStream::connect(addr).unwrap();
    // Requests before HELLO are refused.
    let step = encode(&WireMessage::Step { omega: vec![0.0] });
    assert!(matches!(
        raw_request(&mut s, &step[4..]),
        WireMessage::Error { .. }
    ));
    let hello = encode(&WireMessage::Hello {
        version: PROTOCOL_VERSION,
        n_muscles: None,
        dt: None,
    });
    assert!(matches!(
        raw_request(&mut s, &hello[4..]),
        WireMessage::Hello {
            n_muscles: Some(1),
            ..
        }
    ));
    // Unknown type: ERROR, and the connection keeps working.
    assert!(matches!(
        raw_request(&mut s, br#"{"type":"DANCE"}"#),
        WireMessage::Error { .. }
    ));
    assert!(matches!(
        raw_request(&mut s, &step[4..]),
        WireMessage::Error { .. }
    ));
    let reset = encode(&WireMessage::Reset {
        seed: 1,
        initial_phi: 45.0,
    });
    assert!(matches!(
        raw_request(&mut s, &reset[4..]),
        WireMessage::ResetOk { .. }
    ));
    assert!(matches!(
        raw_request(&mut s, &step[4..]),
        WireMessage::StepOk { .. }
    ));
    // Out-of-range action component.
    let bad = encode(&WireMessage::Step { omega: vec![3.0] });
    assert!(matches!(
        raw_request(&mut s, &bad[4..]),
        WireMessage::Error { .. }
    ));
    // Malformed JSON: ERROR, then the server closes the connection.
    assert!(matches!(
        raw_request(&mut s, b"{oops"),
        WireMessage::Error { .. }
    ));
    let mut rest = Vec::new();
    assert_eq!(s.read_to_end(&mut rest).unwrap_or(0), 0);

    // Version mismatch: ERROR and close.
    let mut s = TcpStream::connect(addr).unwrap();
    let old = encode(&WireMessage::Hello {
        version: PROTOCOL_VERSION + 1,
        n_muscles: None,
        dt: None,
    });
    assert!(matches!(
        raw_request(&mut s, &old[4..]),
        WireMessage::Error { .. }
    ));
    let mut rest = Vec::new();
    assert_eq!(s.read_to_end(&mut rest).unwrap_or(0), 0);

    let remote = RemoteEnv::connect(addr, Duration::from_secs(1)).unwrap();
    remote.shutdown().unwrap();
    handle.join().unwrap();
}

#[test]
fn pool_heals_after_restart() {
    let plant = PlantConfig::single_muscle();
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let healthy = LocalWorkers::spawn(1, &plant, ServeOptions::default()).unwrap();
    // One endpoint is down at startup.
    let mut pool = WorkerPool::connect(&[addr, healthy.addrs()[0]], fast_retry()).unwrap();
    assert_eq!(pool.capacity(), 2);
    assert_eq!(pool.live(), 1);
    // All alive apart from the refused one: healing changes nothing yet.
    pool.reset_backoff();
    assert_eq!(pool.heal(), 1);

    // Bring a server up on the refused address; it rejoins.
    let listener = TcpListener::bind(addr).unwrap();
    let restarted = thread::spawn({
        let plant = plant.clone();
        move || serve_env(listener, plant, ServeOptions::default()).unwrap()
    });
    pool.reset_backoff();
    assert_eq!(pool.heal(), 2);
    assert!(pool.live() <= pool.capacity());
    let policy = stochastic_policy(1);
    let got = pool.collect(&policy, &plan(4)).unwrap();
    assert_eq!(got.episodes.len(), 4);
    pool.shutdown();
    healthy.join();
    restarted.join().unwrap();
}

#[test]
fn no_workers_is_an_error() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    assert!(WorkerPool::connect(&[addr], fast_retry()).is_err());
}
