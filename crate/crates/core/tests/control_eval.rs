//! Closed loop, reward shaping and the metrics pipeline.

use buckdrm::config::{RunConfig, StepTiming};
use buckdrm::control::{
    input_normalization, run_episode, run_loop, ActionTable, Controller, EpisodeConfig, Mode,
    Observation, RewardConfig, TraceRecord, OBS_DIM,
};
use buckdrm::dqn::{DqnAgent, QNetwork, Transition};
use buckdrm::eval::{
    read_trace_csv, run_scenario, segment_metrics, settling_time, write_trace_csv, MetricSettings,
    PlantKind, Scenario,
};
use buckdrm::plant::{CplProfile, Model, Plant, PlantParams};
use buckdrm::transfer::DrmCoefficients;
use buckdrm::Result;
use proptest::prelude::*;

/// Always picks the same action and keeps every transition it sees.
struct Fixed {
    action: usize,
    seen: Vec<Transition>,
}

impl Controller for Fixed {
    fn act(&mut self, _obs: &Observation) -> usize {
        self.action
    }

    fn record(&mut self, t: Transition) -> Result<Option<f64>> {
        self.seen.push(t);
        Ok(None)
    }
}

fn ideal_plant(profile: CplProfile) -> Plant {
    let params = PlantParams::default();
    let start = EpisodeConfig::default().reset_state(&params).unwrap();
    Plant::new(Model::Ideal(params), profile, start, 0)
}

fn episode(horizon: usize) -> EpisodeConfig {
    EpisodeConfig {
        horizon,
        ..EpisodeConfig::default()
    }
}

#[test]
fn single_step_episode() {
    let mut ctl = Fixed {
        action: 4,
        seen: Vec::new(),
    };
    let mut plant = ideal_plant(CplProfile::constant(200.0));
    let out = run_loop(
        &mut ctl,
        &mut plant,
        &episode(1),
        &RewardConfig::default(),
        &ActionTable::default(),
        None,
    )
    .unwrap();
    assert_eq!(out.trace.len(), 1);
    assert_eq!(out.transitions, 1);
    assert!(ctl.seen[0].terminal);
    assert!(out.aborted.is_none());
}

#[test]
fn transitions_chain_and_end_terminal() {
    let mut ctl = Fixed {
        action: 5,
        seen: Vec::new(),
    };
    let mut plant = ideal_plant(CplProfile::from_pairs(&[(0.0, 200.0), (0.002, 600.0)]).unwrap());
    let out = run_loop(
        &mut ctl,
        &mut plant,
        &episode(50),
        &RewardConfig::default(),
        &ActionTable::default(),
        None,
    )
    .unwrap();
    assert_eq!(ctl.seen.len(), 50);
    for pair in ctl.seen.windows(2) {
        assert_eq!(pair[0].next_state, pair[1].state);
        assert!(!pair[0].terminal);
    }
    assert!(ctl.seen[49].terminal);
    let rewards: f64 = ctl.seen.iter().map(|t| t.reward).sum();
    assert_eq!(rewards, out.total_reward);
    for (k, r) in out.trace.iter().enumerate() {
        assert!((r.t_s - (k + 1) as f64 * 1e-4).abs() < 1e-12);
        // the CPL draws exactly its scheduled power
        assert!((r.i_o * r.v_o - r.power).abs() <= 1e-9 * r.power);
    }
}

#[test]
fn protection_trip_ends_the_episode_with_the_penalty() {
    let mut ctl = Fixed {
        action: 0,
        seen: Vec::new(),
    };
    let mut plant = ideal_plant(CplProfile::from_pairs(&[(0.0, 200.0), (0.001, 4000.0)]).unwrap());
    let out = run_loop(
        &mut ctl,
        &mut plant,
        &episode(3000),
        &RewardConfig::default(),
        &ActionTable::default(),
        None,
    )
    .unwrap();
    assert!(out.aborted.is_some());
    assert!(out.transitions < 3000);
    let last = ctl.seen.last().unwrap();
    assert!(last.terminal);
    assert_eq!(last.reward, -500.0);
}

#[test]
fn eval_mode_leaves_the_agent_untouched() {
    let hyper = buckdrm::dqn::DqnHyper {
        batch_size: 8,
        replay_capacity: 64,
        ..Default::default()
    };
    let (offset, scale) = input_normalization(100.0);
    let mut agent = DqnAgent::new(hyper, 10, offset, scale, 3);
    let before = agent.online().clone();
    let mut plant = ideal_plant(CplProfile::constant(200.0));
    let table = ActionTable::default();
    run_episode(
        &mut agent,
        &mut plant,
        &episode(40),
        &RewardConfig::default(),
        &table,
        None,
        Mode::Eval,
    )
    .unwrap();
    assert_eq!(agent.online(), &before);
    assert_eq!(agent.memory().len(), 0);
    assert_eq!(agent.train_steps(), 0);

    let mut plant = ideal_plant(CplProfile::constant(200.0));
    run_episode(
        &mut agent,
        &mut plant,
        &episode(40),
        &RewardConfig::default(),
        &table,
        None,
        Mode::Train,
    )
    .unwrap();
    assert_eq!(agent.memory().len(), 40);
    assert_eq!(agent.train_steps(), 33);
    assert_ne!(agent.online(), &before);
}

#[test]
fn raising_the_duty_raises_the_output() {
    let table = ActionTable::default();
    let below = -3.0;
    for k in 0..table.len() {
        let (d, _) = table.decode(k, below);
        assert!(
            d > table.entries[k].xi,
            "action {k} must push up when v_o is low"
        );
        let (d, _) = table.decode(k, -below);
        assert!(d < table.entries[k].xi);
        assert_eq!(table.decode(k, 0.01).0, table.entries[k].xi);
    }
    let params = PlantParams::default();
    let v = |d: f64| {
        let mut plant = ideal_plant(CplProfile::constant(200.0));
        for _ in 0..20 {
            plant.advance(d).unwrap();
        }
        plant.state().v_o
    };
    assert!(v(0.52) > v(0.5) && v(0.5) > v(0.48));
    assert!(Model::Ideal(params).equilibrium(0.52, 500.0).unwrap().v_o > 100.0);
}

#[test]
fn default_reward_examples() {
    let r = RewardConfig::default();
    assert_eq!(r.reward(0.0), 10.0);
    assert_eq!(r.reward(0.05), 10.0 - 0.5);
    assert_eq!(r.reward(0.5), 1.0 - 5.0);
    assert_eq!(r.reward(-2.0), -20.0);
    let flipped = RewardConfig { beta3: -10.0, ..r };
    assert_eq!(flipped.reward(-2.0), -20.0);
}

#[test]
fn normalization_centres_on_the_reference() {
    let (offset, scale) = input_normalization(100.0);
    assert_eq!(offset, [100.0, 100.0, 0.0, 0.0, 0.0, 0.0]);
    assert_eq!(scale, [0.1, 0.1, 1e-4, 0.1, 0.1, 1e-4]);
    assert_eq!(OBS_DIM, 6);
}

proptest! {
    #[test]
    fn reward_peaks_at_zero_error_and_never_rises_with_it(e1 in -20.0f64..20.0, e2 in -20.0f64..20.0) {
        let r = RewardConfig::default();
        prop_assert_eq!(r.reward(e1), r.reward(-e1));
        prop_assert!(r.reward(e1) <= r.reward(0.0));
        if e1.abs() <= e2.abs() {
            prop_assert!(r.reward(e1) >= r.reward(e2));
        }
    }

    #[test]
    fn decoded_duty_stays_in_range(idx in 0usize..10, e in -200.0f64..200.0, xi in 0.0f64..1.0, phi in 0.0f64..0.5) {
        let (d, _) = ActionTable::default().decode(idx, e);
        prop_assert!((0.0..=1.0).contains(&d));
        let wide = ActionTable::grid(&[xi], &[phi], 0.05);
        let (d, sat) = wide.decode(0, e);
        prop_assert!((0.0..=1.0).contains(&d));
        let raw = xi + if e.abs() <= 0.05 { 0.0 } else { -e.signum() } * phi;
        prop_assert_eq!(sat, !(0.0..=1.0).contains(&raw));
    }
}

fn settings() -> MetricSettings {
    MetricSettings {
        v_ref: 100.0,
        band: 1.0,
        steady_fraction: 0.2,
    }
}

fn record(t_s: f64, v_o: f64, power: f64) -> TraceRecord {
    TraceRecord {
        t_s,
        v_o,
        i_l: 0.0,
        i_o: power / v_o,
        power,
        action_idx: 0,
        d_sim: 0.5,
        d_real: 0.5,
        reward: 0.0,
    }
}

#[test]
fn exponential_recovery_settles_at_tau_ln5() {
    let tau = 1e-3;
    let samples: Vec<(f64, f64)> = (0..=300)
        .map(|k| {
            let t = k as f64 * 1e-4;
            (t, 100.0 - 5.0 * (-t / tau).exp())
        })
        .collect();
    let s = settling_time(&samples, 0.0, 100.0, 1.0);
    assert!(!s.unsettled);
    assert!((s.time - tau * 5f64.ln()).abs() < 2e-6, "{}", s.time);
}

#[test]
fn never_settling_is_flagged() {
    let samples: Vec<(f64, f64)> = (0..50).map(|k| (k as f64 * 1e-4, 97.0)).collect();
    let s = settling_time(&samples, 0.0, 100.0, 1.0);
    assert!(s.unsettled);
    let inside: Vec<(f64, f64)> = (0..50).map(|k| (k as f64 * 1e-4, 100.5)).collect();
    assert_eq!(settling_time(&inside, 0.0, 100.0, 1.0).time, 0.0);
}

#[test]
fn segments_follow_the_load_schedule() {
    let mut trace = Vec::new();
    for k in 1..=200 {
        let t = k as f64 * 1e-4;
        let (p, v) = if k <= 40 {
            (200.0, 100.0)
        } else {
            let since = (k - 40) as f64 * 1e-4;
            (800.0, 100.0 - 8.0 * (-since / 5e-4).exp() + 0.3)
        };
        trace.push(record(t, v, p));
    }
    let m = segment_metrics(&trace, &settings());
    assert_eq!(m.len(), 2);
    assert_eq!((m[0].power, m[1].power), (200.0, 800.0));
    assert_eq!(m[0].settling_time, 0.0);
    assert!((m[1].t_start - 0.004).abs() < 1e-15);
    let peak = 8.0 * (-0.2f64).exp() - 0.3;
    assert!((m[1].overshoot - peak).abs() < 1e-12);
    assert!((m[1].steady_state_error - 0.3).abs() < 1e-6);
    assert!(m[1].steady_state_ripple < 1e-6);
    for seg in &m {
        assert!(seg.overshoot >= 0.0 && seg.steady_state_error >= 0.0);
    }
}

#[test]
fn trace_csv_header() {
    let mut buf = Vec::new();
    write_trace_csv(&[record(1e-4, 100.0, 200.0)], &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "t_s,v_o_V,i_L_A,i_o_A,P_cpl_W,action_idx,d_sim,d_real,reward"
    );
}

fn short_config() -> RunConfig {
    let mut config = RunConfig::default();
    config.scenarios.ideal_timing = StepTiming {
        step_at: 0.01,
        return_at: 0.02,
        duration: 0.03,
    };
    config.scenarios.surrogate_timing = config.scenarios.ideal_timing;
    config
}

fn fresh_net(config: &RunConfig, seed: u64) -> QNetwork {
    let (offset, scale) = input_normalization(config.plant.v_ref);
    DqnAgent::new(
        config.dqn.clone(),
        config.actions.len(),
        offset,
        scale,
        seed,
    )
    .online()
    .clone()
}

#[test]
fn metrics_recompute_bit_exactly_from_csv() {
    let config = short_config();
    let net = fresh_net(&config, 4);
    let timing = config.scenarios.surrogate_timing;
    let scenario = Scenario::load_step(PlantKind::Surrogate, false, 200.0, 500.0, &timing, 9);
    let run = run_scenario(&net, &scenario, &config, None).unwrap();
    let mut buf = Vec::new();
    write_trace_csv(&run.trace, &mut buf).unwrap();
    let back = read_trace_csv(buf.as_slice()).unwrap();
    assert_eq!(back, run.trace);
    assert_eq!(
        segment_metrics(&back, &MetricSettings::from_config(&config)),
        run.metrics
    );
}

#[test]
fn scenarios_demand_a_matching_duty_map() {
    let config = short_config();
    let net = fresh_net(&config, 4);
    let timing = config.scenarios.ideal_timing;
    let with = Scenario::load_step(PlantKind::Ideal, true, 200.0, 500.0, &timing, 1);
    let without = Scenario::load_step(PlantKind::Ideal, false, 200.0, 500.0, &timing, 1);
    assert!(run_scenario(&net, &with, &config, None).is_err());
    assert!(run_scenario(&net, &without, &config, Some(&DrmCoefficients::IDENTITY)).is_err());
    let a = run_scenario(&net, &without, &config, None).unwrap();
    let b = run_scenario(&net, &with, &config, Some(&DrmCoefficients::IDENTITY)).unwrap();
    assert_eq!(a.trace, b.trace);
    assert_eq!((a.failure, a.metrics), (b.failure, b.metrics));
}
