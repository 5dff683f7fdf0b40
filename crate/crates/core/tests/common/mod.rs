//! Oracles shared by the gradient tests and the acceptance target.
#![allow(dead_code, clippy::needless_range_loop)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use musctl_core::mdp::Observation;
use musctl_core::ppo::{gaussian_logprob, ppo_loss, PolicyValueNet, PpoBatch, PpoHyper};
use musctl_core::{Activations, JointState, Mlp};

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

pub fn random_dims(rng: &mut ChaCha8Rng) -> Vec<usize> {
    let depth = rng.random_range(1..=3);
    let mut dims = vec![rng.random_range(1..=6)];
    for _ in 0..depth {
        dims.push(rng.random_range(2..=7));
    }
    dims.push(rng.random_range(1..=4));
    dims
}

pub fn random_policy_batch(rng: &mut ChaCha8Rng) -> (PolicyValueNet, PpoBatch) {
    let n = rng.random_range(1..=3);
    let hidden: Vec<usize> = (0..rng.random_range(1..=2))
        .map(|_| rng.random_range(3..=6))
        .collect();
    let mut net = PolicyValueNet::new(n, &hidden, 0.0, rng).unwrap();
    for p in net.mlp_mut().params_mut() {
        *p += rng.random_range(-0.3..0.3);
    }
    let ls: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..0.5)).collect();
    net.set_log_std(&ls);
    let b = rng.random_range(2..=8);
    let mut batch = PpoBatch {
        obs_dim: 4 + n,
        n_muscles: n,
        ..Default::default()
    };
    for _ in 0..b {
        let acts = Activations::new((0..n).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let obs = Observation::new(
            JointState {
                phi: rng.random_range(20.0..100.0),
                phi_dot: rng.random_range(-30.0..30.0),
            },
            (rng.random_range(20.0..100.0), rng.random_range(-20.0..20.0)),
            &acts,
        );
        let (mean, _) = net.evaluate(&obs);
        let action: Vec<f64> = mean
            .iter()
            .map(|m| m + rng.random_range(-0.8..0.8))
            .collect();
        let lp = gaussian_logprob(&mean, net.log_std(), &action);
        batch.inputs.extend(obs.network_input());
        batch.actions.extend(action);
        // Ratios spread over both sides of the clip band.
        batch.old_logprobs.push(lp - rng.random_range(-0.6..0.6));
        batch.advantages.push(rng.random_range(-2.0..2.0));
        batch.value_targets.push(rng.random_range(-3.0..3.0));
    }
    (net, batch)
}

pub fn toy_obs(phi: f64) -> Observation {
    Observation::new(
        JointState { phi, phi_dot: 1.5 },
        (phi + 2.0, 3.0),
        &Activations::new(vec![0.4]).unwrap(),
    )
}

/// Relative error between `Mlp::backward` and central differences of
/// `sum(output * upstream)` for one random network and batch.
pub fn mlp_fd_error(rng: &mut ChaCha8Rng) -> (Vec<usize>, f64) {
    let dims = random_dims(rng);
    let mut net = Mlp::new(&dims, rng).unwrap();
    for p in net.params_mut() {
        *p += rng.random_range(-0.1..0.1);
    }
    let batch = rng.random_range(1..=5);
    let x: Vec<f64> = (0..dims[0] * batch)
        .map(|_| rng.random_range(-2.0..2.0))
        .collect();
    let up: Vec<f64> = (0..dims[dims.len() - 1] * batch)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let objective = |m: &Mlp| -> f64 {
        let c = m.forward_batch(&x, batch).unwrap();
        c.output().iter().zip(&up).map(|(o, u)| o * u).sum()
    };
    let cache = net.forward_batch(&x, batch).unwrap();
    let grad = net.backward(&cache, &up);
    let h = 1e-5;
    let mut fd = vec![0.0; net.n_params()];
    for j in 0..net.n_params() {
        let orig = net.params()[j];
        net.params_mut()[j] = orig + h;
        let plus = objective(&net);
        net.params_mut()[j] = orig - h;
        let minus = objective(&net);
        net.params_mut()[j] = orig;
        fd[j] = (plus - minus) / (2.0 * h);
    }
    (dims, rel_err(&grad, &fd))
}

/// Relative error between the analytic PPO loss gradient and central
/// differences for one random net and batch. `None` when a sample sits on a
/// clip boundary, where the loss has no derivative.
pub fn ppo_fd_error(rng: &mut ChaCha8Rng) -> Option<f64> {
    let hyper = PpoHyper::default();
    let (net, batch) = random_policy_batch(rng);
    let on_kink = (0..batch.len()).any(|i| {
        let x = &batch.inputs[i * batch.obs_dim..(i + 1) * batch.obs_dim];
        let mut mean = net.mlp().forward(x).unwrap();
        mean.pop();
        let a = &batch.actions[i * batch.n_muscles..(i + 1) * batch.n_muscles];
        let r = (gaussian_logprob(&mean, net.log_std(), a) - batch.old_logprobs[i]).exp();
        (r - 0.8).abs() < 1e-6 || (r - 1.2).abs() < 1e-6
    });
    if on_kink {
        return None;
    }
    let (_, grad) = ppo_loss(&net, &batch, &hyper);
    let n_mlp = net.mlp().n_params();
    let h = 1e-6;
    let total = |n: &PolicyValueNet| ppo_loss(n, &batch, &hyper).0.total;
    let mut fd = vec![0.0; grad.len()];
    for j in 0..grad.len() {
        let mut plus = net.clone();
        let mut minus = net.clone();
        if j < n_mlp {
            plus.mlp_mut().params_mut()[j] += h;
            minus.mlp_mut().params_mut()[j] -= h;
        } else {
            let k = j - n_mlp;
            let mut lp = net.log_std().to_vec();
            let mut lm = lp.clone();
            lp[k] += h;
            lm[k] -= h;
            plus.set_log_std(&lp);
            minus.set_log_std(&lm);
        }
        fd[j] = (total(&plus) - total(&minus)) / (2.0 * h);
    }
    Some(rel_err(&grad, &fd))
}

/// Largest absolute deviation of the PPO loss terms from values worked out
/// by hand for a three-sample batch, plus the clip fraction deviation.
pub fn hand_built_loss_error() -> f64 {
    // No hidden layer: outputs are the biases, so means and value are known.
    let mut mlp = Mlp::zeros(&[5, 2]).unwrap();
    mlp.bias_mut(0).copy_from_slice(&[0.25, 1.5]);
    let ls = -0.5f64;
    let net = PolicyValueNet::from_parts(mlp, vec![ls]).unwrap();
    let sigma = ls.exp();
    let actions = [0.6, -0.1, 0.25];
    let ratios = [1.3, 0.5, 1.0];
    let advs = [2.0, -1.0, 0.7];
    let targets = [1.0, 2.5, -0.5];
    let mut batch = PpoBatch {
        obs_dim: 5,
        n_muscles: 1,
        ..Default::default()
    };
    for i in 0..3 {
        let z = (actions[i] - 0.25) / sigma;
        let lp = -0.5 * z * z - ls - 0.5 * (2.0 * std::f64::consts::PI).ln();
        batch.inputs.extend(toy_obs(30.0).network_input());
        batch.actions.push(actions[i]);
        batch.old_logprobs.push(lp - f64::ln(ratios[i]));
        batch.advantages.push(advs[i]);
        batch.value_targets.push(targets[i]);
    }
    let (parts, _) = ppo_loss(&net, &batch, &PpoHyper::default());
    // min(2.6, 2.4) = 2.4; min(-0.5, -0.8) = -0.8; ratio 1 gives A = 0.7.
    let surrogate = (2.4 - 0.8 + 0.7) / 3.0;
    let value = ((1.5f64 - 1.0).powi(2) + (1.5f64 - 2.5).powi(2) + (1.5f64 + 0.5).powi(2)) / 3.0;
    let entropy = ls + 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
    let total = -surrogate + 0.5 * value - 0.01 * entropy;
    [
        parts.policy + surrogate,
        parts.value - value,
        parts.entropy - entropy,
        parts.total - total,
        parts.clip_fraction - 2.0 / 3.0,
    ]
    .iter()
    .fold(0.0f64, |m, d| m.max(d.abs()))
}
