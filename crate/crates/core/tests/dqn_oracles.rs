//! Q-network, optimizer, exploration and replay checked against independent oracles.

use buckdrm::control::OBS_DIM;
use buckdrm::dqn::{
    argmax, select_action, td_loss_and_grad, td_target, DqnAgent, DqnHyper, Optimizer,
    OptimizerKind, ReplayMemory, Transition,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::{
    biased_net, chi_square, oracle_forward, oracle_loss, random_batch, random_net, three_sigma,
    worst_gradient_error,
};

#[test]
fn forward_matches_plain_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let net = random_net(&mut rng, &[OBS_DIM, 64, 64, 10]);
    for t in random_batch(&mut rng, 20, 10) {
        let got = net.forward(&t.state);
        let want = oracle_forward(
            net.layers(),
            net.input_offset(),
            net.input_scale(),
            &t.state,
        );
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() <= 1e-12 * w.abs().max(1.0), "{g} vs {w}");
        }
    }
}

#[test]
fn backprop_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let net = random_net(&mut rng, &[OBS_DIM, 8, 8, 3]);
    let batch = random_batch(&mut rng, 16, 3);
    let targets: Vec<f64> = (0..batch.len())
        .map(|_| rng.random_range(-3.0..3.0))
        .collect();
    let (loss, _) = td_loss_and_grad(&net, &batch, &targets);
    let want = oracle_loss(
        net.layers(),
        net.input_offset(),
        net.input_scale(),
        &batch,
        &targets,
    );
    assert!((loss - want).abs() < 1e-12);
    let worst = worst_gradient_error(&net, &batch, &targets, 1e-5);
    assert!(worst < 1e-4, "worst relative gradient error {worst}");
}

#[test]
fn first_adam_step_moves_each_parameter_by_the_learning_rate() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut net = random_net(&mut rng, &[OBS_DIM, 8, 3]);
    let batch = random_batch(&mut rng, 8, 3);
    let targets = vec![1.0; batch.len()];
    let (_, grads) = td_loss_and_grad(&net, &batch, &targets);
    let before = net.clone();
    let lr = 1e-3;
    Optimizer::new(OptimizerKind::Adam, lr, &net).apply(&mut net, &grads);
    for (k, (old, new)) in before.layers().iter().zip(net.layers()).enumerate() {
        for (j, (p0, p1)) in old.weights.iter().zip(&new.weights).enumerate() {
            let g = grads.weights[k][j];
            // bias-corrected moments equal g and g^2 after one step
            let want = p0 - lr * g / (g.abs() + 1e-8);
            assert!((p1 - want).abs() < 1e-15, "layer {k} weight {j}");
        }
    }
}

#[test]
fn sgd_step_is_plain_gradient_descent() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut net = random_net(&mut rng, &[OBS_DIM, 8, 3]);
    let batch = random_batch(&mut rng, 8, 3);
    let (_, grads) = td_loss_and_grad(&net, &batch, &[0.5; 8]);
    let before = net.clone();
    Optimizer::new(OptimizerKind::Sgd, 0.01, &net).apply(&mut net, &grads);
    for (k, (old, new)) in before.layers().iter().zip(net.layers()).enumerate() {
        for (j, (p0, p1)) in old.biases.iter().zip(&new.biases).enumerate() {
            assert_eq!(*p1, p0 - 0.01 * grads.biases[k][j]);
        }
    }
}

#[test]
fn td_targets_follow_the_bellman_backup() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let target = random_net(&mut rng, &[OBS_DIM, 8, 4]);
    let batch = random_batch(&mut rng, 32, 4);
    let got = td_target(&batch, &target, 0.9);
    for (t, y) in batch.iter().zip(got) {
        let q = oracle_forward(
            target.layers(),
            target.input_offset(),
            target.input_scale(),
            &t.next_state,
        );
        let want = if t.terminal {
            t.reward
        } else {
            t.reward + 0.9 * q.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        };
        assert!((y - want).abs() < 1e-12);
    }
}

#[test]
fn epsilon_greedy_frequencies_match_the_mixture() {
    let draws = 100_000u64;
    let (n, best, eps) = (10, 3, 0.1);
    let net = biased_net(n, best);
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut counts = vec![0u64; n];
    for _ in 0..draws {
        counts[select_action(&net, &[0.0; OBS_DIM], eps, &mut rng)] += 1;
    }
    let expected: Vec<f64> = (0..n)
        .map(|a| draws as f64 * (eps / n as f64 + if a == best { 1.0 - eps } else { 0.0 }))
        .collect();
    let stat = chi_square(&counts, &expected);
    assert!(
        stat < three_sigma(n - 1),
        "chi2 = {stat}, counts {counts:?}"
    );
}

#[test]
fn full_exploration_is_uniform() {
    let draws = 100_000u64;
    let net = biased_net(10, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(78);
    let mut counts = vec![0u64; 10];
    for _ in 0..draws {
        counts[select_action(&net, &[0.0; OBS_DIM], 1.0, &mut rng)] += 1;
    }
    let stat = chi_square(&counts, &[draws as f64 / 10.0; 10]);
    assert!(stat < three_sigma(9), "chi2 = {stat}");
}

fn tagged(k: usize) -> Transition {
    Transition {
        state: [k as f64; OBS_DIM],
        action: 0,
        reward: k as f64,
        next_state: [0.0; OBS_DIM],
        terminal: false,
    }
}

#[test]
fn replay_sampling_is_uniform_over_slots() {
    let mut mem = ReplayMemory::new(50);
    for k in 0..120 {
        mem.push(tagged(k));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut counts = vec![0u64; 50];
    for t in mem.sample(100_000, &mut rng).unwrap() {
        // after wrap-around the stored rewards are 70..120
        counts[t.reward as usize - 70] += 1;
    }
    let stat = chi_square(&counts, &[2000.0; 50]);
    assert!(stat < three_sigma(49), "chi2 = {stat}");
}

#[test]
fn replay_evicts_oldest_first() {
    let mut mem = ReplayMemory::new(5);
    for k in 0..8 {
        mem.push(tagged(k));
    }
    assert_eq!(mem.len(), 5);
    let order: Vec<f64> = mem.iter().map(|t| t.reward).collect();
    assert_eq!(order, vec![3.0, 4.0, 5.0, 6.0, 7.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(ReplayMemory::new(3).sample(1, &mut rng).is_err());
}

#[test]
fn agent_syncs_target_on_schedule() {
    let hyper = DqnHyper {
        batch_size: 4,
        replay_capacity: 64,
        target_sync_period: 3,
        hidden: vec![8],
        ..DqnHyper::default()
    };
    let mut agent = DqnAgent::new(hyper, 3, [0.0; OBS_DIM], [1.0; OBS_DIM], 1);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for t in random_batch(&mut rng, 3, 3) {
        agent.remember(t);
        assert_eq!(agent.learn().unwrap(), None);
    }
    let initial = agent.target().clone();
    for (k, t) in random_batch(&mut rng, 6, 3).into_iter().enumerate() {
        agent.remember(t);
        assert!(agent.learn().unwrap().is_some());
        let synced = agent.target() == agent.online();
        assert_eq!(synced, (k + 1) % 3 == 0, "after update {}", k + 1);
        if k < 2 {
            assert_eq!(agent.target(), &initial);
        }
    }
}

#[test]
fn default_hyperparameters() {
    let h = DqnHyper::default();
    assert_eq!(
        (h.alpha, h.gamma, h.batch_size, h.epsilon),
        (0.001, 0.9, 256, 0.1)
    );
    assert_eq!((h.target_sync_period, h.replay_capacity), (200, 100_000));
    assert_eq!(h.layer_dims(10), vec![6, 64, 64, 10]);
}

proptest! {
    #[test]
    fn argmax_picks_the_first_maximum(q in prop::collection::vec(-3i32..3, 1..12)) {
        let q: Vec<f64> = q.into_iter().map(f64::from).collect();
        let max = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let first = q.iter().position(|&v| v == max).unwrap();
        prop_assert_eq!(argmax(&q), first);
    }

    #[test]
    fn greedy_selection_never_explores(seed in any::<u64>()) {
        let net = biased_net(6, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        prop_assert_eq!(select_action(&net, &[1.0; OBS_DIM], 0.0, &mut rng), 4);
    }
}
