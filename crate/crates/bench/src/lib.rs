//! Shared fixtures for the benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use musctl_core::mdp::{run_episode, EpisodeSpec, RewardConfig, RewardParams};
use musctl_core::ppo::{PolicyValueNet, PpoAgent, PpoBatch, PpoHyper, Rollout};
use musctl_core::sim::LocalEnv;
use musctl_core::{PlantConfig, Trajectory};

/// A policy network for `n` muscles with the given hidden layout.
pub fn policy_net(n: usize, hidden: &[usize]) -> PolicyValueNet {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    PolicyValueNet::new(n, hidden, 0.0, &mut rng).expect("valid layout")
}

/// A PPO batch of at least `frames` samples collected in-process with a
/// fresh policy.
pub fn ppo_batch(
    plant: &PlantConfig,
    hidden: &[usize],
    frames: usize,
) -> (PolicyValueNet, PpoBatch) {
    let n = plant.n_muscles();
    let hyper = PpoHyper {
        hidden: hidden.to_vec(),
        ..PpoHyper::default()
    };
    let agent = PpoAgent::new(n, hyper, 3).expect("valid hyperparameters");
    let snapshot = agent.snapshot(false);
    let mut env = LocalEnv::new(plant.clone());
    let spec = EpisodeSpec {
        frames: 100,
        reward: RewardConfig::full(RewardParams::default()),
    };
    let mut episodes = Vec::new();
    let mut total = 0;
    let mut seed = 0;
    while total < frames {
        let traj = Trajectory::random(seed, 10.0, 5.0, (30.0, 90.0)).expect("valid trajectory");
        let ep = run_episode(&mut env, &traj, &snapshot, &spec, seed).expect("in-process episode");
        total += ep.len();
        episodes.push(ep);
        seed += 1;
    }
    let rollout = Rollout {
        snapshot_id: snapshot.id,
        episodes,
    };
    let mut batch = agent.build_batch(&rollout);
    batch.normalize_advantages();
    (agent.net().clone(), batch)
}
