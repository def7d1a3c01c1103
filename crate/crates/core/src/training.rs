//! Training driver: seeded episodes on the ideal plant, periodic greedy
//! evaluation on the ideal scenario suite, best-checkpoint retention.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::control::{input_normalization, run_episode, Mode};
use crate::dqn::{Checkpoint, DqnAgent, QNetwork};
use crate::error::{Error, Result};
use crate::eval::{self, PlantKind};
use crate::plant::{Model, Plant};
use crate::seeded_rng;

/// RNG stream for load-step draws.
const EPISODE_STREAM: u64 = 3;

/// One row of the training curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub episode: usize,
    #[serde(rename = "return")]
    pub total_reward: f64,
    /// Mean minibatch loss; empty until the replay memory fills a batch.
    pub loss: Option<f64>,
}

/// Greedy score on the ideal suite. Ordered by completed scenarios first,
/// then by summed return, so a policy that trips early never outranks one
/// that rides through.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalScore {
    pub episode: usize,
    pub completed: usize,
    pub total_return: f64,
}

impl EvalScore {
    fn beats(&self, other: &EvalScore) -> bool {
        (self.completed, self.total_return) > (other.completed, other.total_return)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best checkpoint seen at an evaluation point.
    pub best: Checkpoint,
    pub best_score: EvalScore,
    /// Network after the last episode.
    pub last: Checkpoint,
    pub curve: Vec<CurvePoint>,
    pub evals: Vec<EvalScore>,
}

/// Greedy return of `net` on the ideal load-step suite.
pub fn evaluate(net: &QNetwork, config: &RunConfig, episode: usize) -> Result<EvalScore> {
    let mut score = EvalScore {
        episode,
        completed: 0,
        total_return: 0.0,
    };
    for scenario in eval::suite(config, PlantKind::Ideal, false) {
        let run = eval::run_scenario(net, &scenario, config, None)?;
        score.completed += usize::from(run.failure.is_none());
        score.total_return += run.total_reward;
    }
    Ok(score)
}

/// Train with `config.seed`. `progress` sees every finished episode.
pub fn train(
    config: &RunConfig,
    mut progress: impl FnMut(&CurvePoint, Option<&EvalScore>),
) -> Result<TrainOutcome> {
    config.validate()?;
    let params = config.plant;
    let (offset, scale) = input_normalization(params.v_ref);
    let mut agent = DqnAgent::new(
        config.dqn.clone(),
        config.actions.len(),
        offset,
        scale,
        config.seed,
    );
    let mut episodes = seeded_rng(config.seed, EPISODE_STREAM);
    let reset = config.episode.reset_state(&params)?;
    let hash = config.hash();
    let snapshot = |agent: &DqnAgent| {
        Checkpoint::from_network(
            agent.online(),
            &config.dqn,
            config.seed,
            agent.train_steps(),
            hash.clone(),
        )
    };

    let mut curve = Vec::with_capacity(config.training.episodes);
    let mut evals = Vec::new();
    let mut best: Option<(EvalScore, Checkpoint)> = None;
    for episode in 0..config.training.episodes {
        let profile = config.episode.sample_profile(&mut episodes);
        let mut plant = Plant::new(Model::Ideal(params), profile, reset, config.seed);
        let outcome = run_episode(
            &mut agent,
            &mut plant,
            &config.episode,
            &config.reward,
            &config.actions,
            None,
            Mode::Train,
        )?;
        if !agent.online().is_finite() {
            return Err(Error::NumericalDivergence(format!(
                "network weights became non-finite in episode {episode}"
            )));
        }
        let point = CurvePoint {
            episode,
            total_reward: outcome.total_reward,
            loss: outcome.mean_loss,
        };
        curve.push(point);

        let last_episode = episode + 1 == config.training.episodes;
        let score = if (episode + 1) % config.training.eval_every == 0 || last_episode {
            let score = evaluate(agent.online(), config, episode)?;
            if best.as_ref().is_none_or(|(b, _)| score.beats(b)) {
                best = Some((score, snapshot(&agent)));
            }
            evals.push(score);
            Some(score)
        } else {
            None
        };
        log::debug!(
            "episode {episode}: return {:.1}, loss {:?}{}",
            point.total_reward,
            point.loss,
            outcome
                .aborted
                .as_deref()
                .map(|r| format!(", aborted: {r}"))
                .unwrap_or_default()
        );
        progress(&point, score.as_ref());
    }
    let (best_score, best) = best.expect("the last episode is always evaluated");
    Ok(TrainOutcome {
        best,
        best_score,
        last: snapshot(&agent),
        curve,
        evals,
    })
}

/// `episode,return,loss` rows.
pub fn write_curve_csv<W: Write>(curve: &[CurvePoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for p in curve {
        w.serialize(p)?;
    }
    w.flush().map_err(|e| Error::io("<curve>", e))
}

pub fn save_curve(curve: &[CurvePoint], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_curve_csv(curve, std::io::BufWriter::new(file))
}

/// Trailing moving average with window `n` (shorter at the start).
pub fn moving_average(values: &[f64], n: usize) -> Vec<f64> {
    let n = n.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for (k, v) in values.iter().enumerate() {
        sum += v;
        if k >= n {
            sum -= values[k - n];
        }
        out.push(sum / (k + 1).min(n) as f64);
    }
    out
}
