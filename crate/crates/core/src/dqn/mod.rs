//! Vanilla DQN: online and target Q-networks, replay memory, ε-greedy policy.

mod checkpoint;
mod network;
mod replay;

pub use checkpoint::{sha256_hex, Checkpoint, CHECKPOINT_FORMAT_VERSION};
pub use network::{BatchCache, Dense, Gradients, Optimizer, OptimizerKind, QNetwork};
pub use replay::{ReplayMemory, Transition};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::control::OBS_DIM;
use crate::error::{Error, Result};
use crate::seeded_rng;

/// Learning hyperparameters. Defaults follow the DQN parameter table
/// (α = 0.001, γ = 0.9, b = 256, ε = 0.1, two hidden layers of 64).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DqnHyper {
    pub alpha: f64,
    pub gamma: f64,
    pub batch_size: usize,
    pub epsilon: f64,
    /// Training steps between target-network synchronizations.
    pub target_sync_period: u64,
    pub replay_capacity: usize,
    pub hidden: Vec<usize>,
    pub optimizer: OptimizerKind,
}

impl Default for DqnHyper {
    fn default() -> Self {
        Self {
            alpha: 0.001,
            gamma: 0.9,
            batch_size: 256,
            epsilon: 0.1,
            target_sync_period: 200,
            replay_capacity: 100_000,
            hidden: vec![64, 64],
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl DqnHyper {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::invalid(format!("{prefix}.{field}"), msg));
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return bad("alpha", format!("must be > 0, got {}", self.alpha));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma", format!("must lie in [0, 1], got {}", self.gamma));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return bad(
                "epsilon",
                format!("must lie in (0, 1], got {}", self.epsilon),
            );
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be >= 1".into());
        }
        if self.target_sync_period == 0 {
            return bad("target_sync_period", "must be >= 1".into());
        }
        if self.replay_capacity < self.batch_size {
            return bad(
                "replay_capacity",
                format!("must be at least batch_size ({})", self.batch_size),
            );
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden", "needs at least one nonzero hidden width".into());
        }
        Ok(())
    }

    /// Layer widths `[OBS_DIM, hidden.., n_actions]`.
    pub fn layer_dims(&self, n_actions: usize) -> Vec<usize> {
        let mut dims = vec![OBS_DIM];
        dims.extend(&self.hidden);
        dims.push(n_actions);
        dims
    }
}

/// Lowest index of the maximum entry.
pub fn argmax(q: &[f64]) -> usize {
    let mut best = 0;
    for (k, v) in q.iter().enumerate().skip(1) {
        if *v > q[best] {
            best = k;
        }
    }
    best
}

/// ε-greedy: a uniformly random action with probability `epsilon`, else the greedy one.
pub fn select_action<R: Rng + ?Sized>(
    net: &QNetwork,
    s: &[f64],
    epsilon: f64,
    rng: &mut R,
) -> usize {
    let p: f64 = rng.random();
    if p < epsilon {
        rng.random_range(0..net.output_dim())
    } else {
        argmax(&net.forward(s))
    }
}

fn stack<'a>(rows: impl Iterator<Item = &'a [f64; OBS_DIM]>) -> Vec<f64> {
    rows.flat_map(|r| r.iter().copied()).collect()
}

/// TD targets: `r` for terminal transitions, `r + γ max_a Q̂(s', a)` otherwise.
pub fn td_target(batch: &[Transition], target: &QNetwork, gamma: f64) -> Vec<f64> {
    let next = stack(batch.iter().map(|t| &t.next_state));
    let cache = target.forward_batch(&next, batch.len());
    let n = target.output_dim();
    batch
        .iter()
        .zip(cache.output().chunks_exact(n))
        .map(|(t, q)| {
            if t.terminal {
                t.reward
            } else {
                t.reward + gamma * q.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            }
        })
        .collect()
}

/// Mean squared TD error over the batch and its gradient w.r.t. the online parameters.
pub fn td_loss_and_grad(net: &QNetwork, batch: &[Transition], targets: &[f64]) -> (f64, Gradients) {
    let b = batch.len();
    let n = net.output_dim();
    let cache = net.forward_batch(&stack(batch.iter().map(|t| &t.state)), b);
    let mut grad_out = vec![0.0; b * n];
    let mut loss = 0.0;
    for (j, (t, y)) in batch.iter().zip(targets).enumerate() {
        let residual = y - cache.output()[j * n + t.action];
        loss += residual * residual;
        grad_out[j * n + t.action] = -2.0 * residual / b as f64;
    }
    (loss / b as f64, net.backward(&cache, &grad_out))
}

/// One gradient step on the online network from a uniformly sampled minibatch.
/// Returns the loss before the update.
pub fn train_step(
    net: &mut QNetwork,
    target: &QNetwork,
    optimizer: &mut Optimizer,
    memory: &ReplayMemory,
    hyper: &DqnHyper,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if memory.len() < hyper.batch_size {
        return Err(Error::InsufficientReplay {
            have: memory.len(),
            need: hyper.batch_size,
        });
    }
    let batch = memory.sample(hyper.batch_size, rng)?;
    let targets = td_target(&batch, target, hyper.gamma);
    let (loss, grads) = td_loss_and_grad(net, &batch, &targets);
    if !loss.is_finite() {
        return Err(Error::NumericalDivergence(format!("TD loss became {loss}")));
    }
    optimizer.apply(net, &grads);
    if !net.is_finite() {
        return Err(Error::NumericalDivergence(
            "network parameters became non-finite".into(),
        ));
    }
    Ok(loss)
}

/// `θ⁻ := θ`.
pub fn sync_target(net: &QNetwork, target: &mut QNetwork) {
    target.copy_from(net);
}

/// RNG stream ids derived from the run seed.
pub(crate) mod streams {
    pub const INIT: u64 = 1;
    pub const AGENT: u64 = 2;
}

/// A learning agent: networks, optimizer, replay memory and its own generator.
#[derive(Debug, Clone)]
pub struct DqnAgent {
    online: QNetwork,
    target: QNetwork,
    optimizer: Optimizer,
    memory: ReplayMemory,
    hyper: DqnHyper,
    rng: ChaCha8Rng,
    seed: u64,
    train_steps: u64,
}

impl DqnAgent {
    /// Fresh agent; `offset`/`scale` define the fixed input normalization.
    pub fn new(
        hyper: DqnHyper,
        n_actions: usize,
        offset: [f64; OBS_DIM],
        scale: [f64; OBS_DIM],
        seed: u64,
    ) -> Self {
        let mut init = seeded_rng(seed, streams::INIT);
        let online = QNetwork::new(&hyper.layer_dims(n_actions), &mut init)
            .with_input_normalization(offset.to_vec(), scale.to_vec())
            .expect("widths match by construction");
        let target = online.clone();
        let optimizer = Optimizer::new(hyper.optimizer, hyper.alpha, &online);
        Self {
            memory: ReplayMemory::new(hyper.replay_capacity),
            rng: seeded_rng(seed, streams::AGENT),
            online,
            target,
            optimizer,
            hyper,
            seed,
            train_steps: 0,
        }
    }

    pub fn online(&self) -> &QNetwork {
        &self.online
    }

    pub fn target(&self) -> &QNetwork {
        &self.target
    }

    pub fn memory(&self) -> &ReplayMemory {
        &self.memory
    }

    pub fn hyper(&self) -> &DqnHyper {
        &self.hyper
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn train_steps(&self) -> u64 {
        self.train_steps
    }

    pub fn act(&mut self, s: &[f64; OBS_DIM], epsilon: f64) -> usize {
        select_action(&self.online, s, epsilon, &mut self.rng)
    }

    pub fn remember(&mut self, t: Transition) {
        self.memory.push(t);
    }

    /// Train once if the memory can fill a minibatch; syncs the target every
    /// `target_sync_period` training steps.
    pub fn learn(&mut self) -> Result<Option<f64>> {
        if self.memory.len() < self.hyper.batch_size {
            return Ok(None);
        }
        let loss = train_step(
            &mut self.online,
            &self.target,
            &mut self.optimizer,
            &self.memory,
            &self.hyper,
            &mut self.rng,
        )?;
        self.train_steps += 1;
        if self
            .train_steps
            .is_multiple_of(self.hyper.target_sync_period)
        {
            sync_target(&self.online, &mut self.target);
        }
        Ok(Some(loss))
    }
}
