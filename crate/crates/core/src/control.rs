//! MDP shell around the plant: observation, action decoding, sub-goal reward
//! and the episode loop.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dqn::{argmax, DqnAgent, QNetwork, Transition};
use crate::error::{Error, Result};
use crate::plant::{find_equilibrium, CplProfile, LoadStep, Plant, PlantParams, PlantState};
use crate::transfer::DrmRuntime;

pub const OBS_DIM: usize = 6;

/// Volts-to-network-input scale for `v_o`, `e` and their delayed copies.
pub const VOLT_SCALE: f64 = 0.1;
/// (V/s)-to-network-input scale for the two derivative features.
pub const RATE_SCALE: f64 = 1e-4;

/// `(v_o, v_o_del, dv_o/dt, e, e_del, de/dt)`, sampled once per control period.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub v_o: f64,
    pub v_o_del: f64,
    pub dv_o_dt: f64,
    pub e: f64,
    pub e_del: f64,
    pub de_dt: f64,
}

impl Observation {
    /// Build from the current and previous voltage samples. Without a previous
    /// sample (episode start) the delayed values equal the current ones.
    pub fn observe(v_prev: Option<f64>, v_now: f64, v_ref: f64, dt_ctrl: f64) -> Self {
        let v_del = v_prev.unwrap_or(v_now);
        let dv = (v_now - v_del) / dt_ctrl;
        Self {
            v_o: v_now,
            v_o_del: v_del,
            dv_o_dt: dv,
            e: v_now - v_ref,
            e_del: v_del - v_ref,
            // v_ref is constant, so de/dt is dv/dt identically
            de_dt: dv,
        }
    }

    pub fn to_array(&self) -> [f64; OBS_DIM] {
        [
            self.v_o,
            self.v_o_del,
            self.dv_o_dt,
            self.e,
            self.e_del,
            self.de_dt,
        ]
    }
}

/// Input normalization for a given reference: voltages centred on `v_ref`.
pub fn input_normalization(v_ref: f64) -> ([f64; OBS_DIM], [f64; OBS_DIM]) {
    (
        [v_ref, v_ref, 0.0, 0.0, 0.0, 0.0],
        [
            VOLT_SCALE, VOLT_SCALE, RATE_SCALE, VOLT_SCALE, VOLT_SCALE, RATE_SCALE,
        ],
    )
}

/// Steady value ξ and correction step φ of one discrete action.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionEntry {
    pub xi: f64,
    pub phi: f64,
}

/// Discrete action set. The sign of the correction is fed back from the error:
/// `d = ξ + c φ` with `c = -sign(e)` outside the deadband and `c = 0` inside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ActionTable {
    pub entries: Vec<ActionEntry>,
    pub deadband: f64,
}

impl Default for ActionTable {
    fn default() -> Self {
        Self::grid(&[0.40, 0.45, 0.50, 0.55, 0.60], &[0.005, 0.02], 0.05)
    }
}

impl ActionTable {
    /// Cartesian product, ξ-major.
    pub fn grid(xis: &[f64], phis: &[f64], deadband: f64) -> Self {
        let entries = xis
            .iter()
            .flat_map(|&xi| phis.iter().map(move |&phi| ActionEntry { xi, phi }))
            .collect();
        Self { entries, deadband }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn validate(&self, prefix: &str) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::invalid(
                format!("{prefix}.entries"),
                "must not be empty",
            ));
        }
        if !(self.deadband.is_finite() && self.deadband >= 0.0) {
            return Err(Error::invalid(
                format!("{prefix}.deadband"),
                "must be finite and >= 0",
            ));
        }
        for (k, a) in self.entries.iter().enumerate() {
            let ok = a.phi >= 0.0 && a.xi - a.phi >= 0.0 && a.xi + a.phi <= 1.0;
            if !ok {
                return Err(Error::invalid(
                    format!("{prefix}.entries[{k}]"),
                    format!(
                        "need phi >= 0 and 0 <= xi ± phi <= 1, got xi={} phi={}",
                        a.xi, a.phi
                    ),
                ));
            }
            if self.entries[..k].contains(a) {
                return Err(Error::invalid(
                    format!("{prefix}.entries[{k}]"),
                    "duplicate entry",
                ));
            }
        }
        Ok(())
    }

    /// Duty for action `idx` given the current error, with a saturation flag.
    pub fn decode(&self, idx: usize, e: f64) -> (f64, bool) {
        let a = self.entries[idx];
        let c = if e.abs() <= self.deadband {
            0.0
        } else {
            -e.signum()
        };
        let d = a.xi + c * a.phi;
        let clamped = d.clamp(0.0, 1.0);
        (clamped, clamped != d)
    }

    /// Every duty the table can emit, ascending and deduplicated.
    pub fn reachable_duties(&self) -> Vec<f64> {
        let mut duties: Vec<f64> = self
            .entries
            .iter()
            .flat_map(|a| [a.xi - a.phi, a.xi, a.xi + a.phi])
            .map(|d| d.clamp(0.0, 1.0))
            .collect();
        duties.sort_by(f64::total_cmp);
        duties.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
        duties
    }
}

/// Sub-goal reward coefficients. `beta3` is applied as a magnitude.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
    pub eps1: f64,
    pub eps2: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            beta1: 10.0,
            beta2: 1.0,
            beta3: 10.0,
            eps1: 0.1,
            eps2: 1.0,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        if !(self.eps1 > 0.0 && self.eps1 < self.eps2) {
            return Err(Error::invalid(
                format!("{prefix}.eps1"),
                "need 0 < eps1 < eps2",
            ));
        }
        if !(self.beta1 > self.beta2 && self.beta2 > 0.0) {
            return Err(Error::invalid(
                format!("{prefix}.beta2"),
                "need beta1 > beta2 > 0",
            ));
        }
        if !(self.beta3.is_finite() && self.beta3 != 0.0) {
            return Err(Error::invalid(
                format!("{prefix}.beta3"),
                "must be finite and nonzero",
            ));
        }
        Ok(())
    }

    pub fn reward(&self, e: f64) -> f64 {
        let err = e.abs();
        let penalty = self.beta3.abs() * err;
        if err < self.eps1 {
            self.beta1 - penalty
        } else if err <= self.eps2 {
            self.beta2 - penalty
        } else {
            -penalty
        }
    }
}

/// Training episode layout: start at the base-load equilibrium, one random load step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeConfig {
    /// Control steps per episode.
    pub horizon: usize,
    /// CPL power at reset (W).
    pub base_power: f64,
    /// Range the stepped-to power is drawn from (W).
    pub step_power: [f64; 2],
    /// Range the step instant is drawn from (s).
    pub step_time: [f64; 2],
    /// Output voltages outside `(lo, hi)` trip the protection and end the episode.
    pub abort_bounds: [f64; 2],
    /// Reward of a tripping transition.
    pub abort_penalty: f64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            horizon: 3000,
            base_power: 200.0,
            step_power: [200.0, 1000.0],
            step_time: [0.1, 0.2],
            abort_bounds: [50.0, 150.0],
            abort_penalty: -500.0,
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self, prefix: &str, plant: &PlantParams) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::invalid(format!("{prefix}.horizon"), "must be >= 1"));
        }
        let [lo, hi] = self.abort_bounds;
        if !(lo < plant.v_ref && plant.v_ref < hi) {
            return Err(Error::invalid(
                format!("{prefix}.abort_bounds"),
                format!("need lo < v_ref ({}) < hi", plant.v_ref),
            ));
        }
        let [p0, p1] = self.step_power;
        if !(self.base_power >= 0.0 && p0 >= 0.0 && p0 <= p1 && p1.is_finite()) {
            return Err(Error::invalid(
                format!("{prefix}.step_power"),
                "need 0 <= lo <= hi",
            ));
        }
        let [t0, t1] = self.step_time;
        if !(t0 > 0.0 && t0 <= t1) {
            return Err(Error::invalid(
                format!("{prefix}.step_time"),
                "need 0 < lo <= hi",
            ));
        }
        if !self.abort_penalty.is_finite() {
            return Err(Error::invalid(
                format!("{prefix}.abort_penalty"),
                "must be finite",
            ));
        }
        Ok(())
    }

    /// Equilibrium at the base load with the nominal duty `v_ref / v_in`.
    pub fn reset_state(&self, plant: &PlantParams) -> Result<PlantState> {
        find_equilibrium(plant.v_ref / plant.v_in, self.base_power, plant)
    }

    /// Base load with one step drawn from the configured ranges.
    pub fn sample_profile<R: Rng + ?Sized>(&self, rng: &mut R) -> CplProfile {
        let draw = |rng: &mut R, [lo, hi]: [f64; 2]| {
            if hi > lo {
                rng.random_range(lo..hi)
            } else {
                lo
            }
        };
        let at = draw(rng, self.step_time);
        let power = draw(rng, self.step_power);
        CplProfile::new(vec![
            LoadStep {
                at: 0.0,
                power: self.base_power,
            },
            LoadStep { at, power },
        ])
        .expect("validated ranges yield a valid schedule")
    }
}

/// One row of the per-step trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t_s: f64,
    #[serde(rename = "v_o_V")]
    pub v_o: f64,
    #[serde(rename = "i_L_A")]
    pub i_l: f64,
    #[serde(rename = "i_o_A")]
    pub i_o: f64,
    #[serde(rename = "P_cpl_W")]
    pub power: f64,
    pub action_idx: usize,
    pub d_sim: f64,
    pub d_real: f64,
    pub reward: f64,
}

/// Something that picks actions and optionally learns from transitions.
pub trait Controller {
    fn act(&mut self, obs: &Observation) -> usize;

    /// Consume a transition; returns the training loss when an update happened.
    fn record(&mut self, _t: Transition) -> Result<Option<f64>> {
        Ok(None)
    }
}

/// Greedy policy over a frozen network.
pub struct Greedy<'a>(pub &'a QNetwork);

impl Controller for Greedy<'_> {
    fn act(&mut self, obs: &Observation) -> usize {
        argmax(&self.0.forward(&obs.to_array()))
    }
}

/// ε-greedy exploration with a training step after every transition.
pub struct Learner<'a>(pub &'a mut DqnAgent);

impl Controller for Learner<'_> {
    fn act(&mut self, obs: &Observation) -> usize {
        let eps = self.0.hyper().epsilon;
        self.0.act(&obs.to_array(), eps)
    }

    fn record(&mut self, t: Transition) -> Result<Option<f64>> {
        self.0.remember(t);
        self.0.learn()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Result of one episode.
#[derive(Debug, Clone, Default)]
pub struct EpisodeOutcome {
    pub trace: Vec<TraceRecord>,
    pub total_reward: f64,
    pub transitions: usize,
    /// Why the episode ended early, if it did.
    pub aborted: Option<String>,
    /// Mean training loss (MSE) over the updates made.
    pub mean_loss: Option<f64>,
    /// Control steps where either duty command saturated.
    pub saturated_steps: usize,
}

/// Run one episode with the agent in the given mode. Eval mode is greedy and
/// leaves the agent untouched.
pub fn run_episode(
    agent: &mut DqnAgent,
    plant: &mut Plant,
    episode: &EpisodeConfig,
    reward: &RewardConfig,
    table: &ActionTable,
    drm: Option<&mut DrmRuntime>,
    mode: Mode,
) -> Result<EpisodeOutcome> {
    match mode {
        Mode::Train => run_loop(&mut Learner(agent), plant, episode, reward, table, drm),
        Mode::Eval => run_loop(
            &mut Greedy(agent.online()),
            plant,
            episode,
            reward,
            table,
            drm,
        ),
    }
}

/// Closed loop: observe, act, decode, optionally map the duty, step, reward.
pub fn run_loop<C: Controller + ?Sized>(
    controller: &mut C,
    plant: &mut Plant,
    episode: &EpisodeConfig,
    reward: &RewardConfig,
    table: &ActionTable,
    mut drm: Option<&mut DrmRuntime>,
) -> Result<EpisodeOutcome> {
    let params = *plant.params();
    let dt = params.dt_ctrl();
    let [v_lo, v_hi] = episode.abort_bounds;
    let mut out = EpisodeOutcome {
        trace: Vec::with_capacity(episode.horizon),
        ..EpisodeOutcome::default()
    };
    let mut loss_sum = 0.0;
    let mut updates = 0usize;

    let mut meas = plant.measure();
    let mut obs = Observation::observe(None, meas.v_o, params.v_ref, dt);
    for k in 0..episode.horizon {
        let action = controller.act(&obs);
        let (d_sim, sat_sim) = table.decode(action, obs.e);
        let (d_real, sat_real) = match drm.as_deref_mut() {
            Some(map) => map.map(d_sim, meas.i_o, dt),
            None => (d_sim, false),
        };
        if sat_sim || sat_real {
            out.saturated_steps += 1;
        }
        let (next, r, abort) = match plant.advance(d_real) {
            Ok(report) => {
                let next =
                    Observation::observe(Some(obs.v_o), report.measurement.v_o, params.v_ref, dt);
                debug_assert_eq!(next.de_dt, next.dv_o_dt);
                let v = report.state.v_o;
                let abort = !(v > v_lo && v < v_hi);
                let r = if abort {
                    episode.abort_penalty
                } else {
                    reward.reward(next.e)
                };
                out.trace.push(TraceRecord {
                    t_s: report.state.t,
                    v_o: v,
                    i_l: report.state.i_l,
                    i_o: report.i_o,
                    power: report.power,
                    action_idx: action,
                    d_sim,
                    d_real: report.duty,
                    reward: r,
                });
                let reason = abort
                    .then(|| format!("protection trip: v_o = {v:.2} V outside ({v_lo}, {v_hi})"));
                meas = report.measurement;
                (next, r, reason)
            }
            Err(e @ Error::VoltageCollapse { .. }) => {
                (obs, episode.abort_penalty, Some(e.to_string()))
            }
            Err(e) => return Err(e),
        };
        let terminal = abort.is_some() || k + 1 == episode.horizon;
        if let Some(loss) = controller.record(Transition {
            state: obs.to_array(),
            action,
            reward: r,
            next_state: next.to_array(),
            terminal,
        })? {
            loss_sum += loss;
            updates += 1;
        }
        out.total_reward += r;
        out.transitions += 1;
        if abort.is_some() {
            out.aborted = abort;
            break;
        }
        obs = next;
    }
    out.mean_loss = (updates > 0).then(|| loss_sum / updates as f64);
    Ok(out)
}
