//! Averaged buck converter feeding a constant power load (CPL).
//!
//! Two flavors share one integrator: the ideal averaged model used for
//! training, and a surrogate with conduction losses, actuation error and
//! sensor noise that stands in for the physical rig.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Switch-time slack when reading the load schedule, so accumulated
/// `t += dt` rounding does not shift a step by a whole control period.
const SCHEDULE_SLACK: f64 = 1e-9;

/// Circuit constants of the converter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlantParams {
    /// Input voltage (V).
    pub v_in: f64,
    /// Inductance (H).
    pub inductance: f64,
    /// Output capacitance (F).
    pub capacitance: f64,
    /// Resistive shunt across the output (ohm). `inf` means a pure CPL.
    pub resistance: f64,
    /// Switching and control frequency (Hz).
    pub f_sw: f64,
    /// Regulation target (V).
    pub v_ref: f64,
    /// Undervoltage floor below which the CPL current is undefined (V).
    pub v_min_cpl: f64,
    /// RK4 substeps per control period.
    pub substeps: u32,
}

impl Default for PlantParams {
    fn default() -> Self {
        Self {
            v_in: 200.0,
            inductance: 2e-3,
            capacitance: 150e-6,
            resistance: f64::INFINITY,
            f_sw: 10e3,
            v_ref: 100.0,
            v_min_cpl: 10.0,
            substeps: 10,
        }
    }
}

impl PlantParams {
    /// Control period, one switching cycle.
    pub fn dt_ctrl(&self) -> f64 {
        1.0 / self.f_sw
    }

    pub fn validate(&self, prefix: &str) -> Result<()> {
        let positive = [
            ("v_in", self.v_in),
            ("inductance", self.inductance),
            ("capacitance", self.capacitance),
            ("f_sw", self.f_sw),
            ("resistance", self.resistance),
        ];
        for (name, value) in positive {
            if value.is_nan() || value <= 0.0 {
                return Err(Error::invalid(
                    format!("{prefix}.{name}"),
                    format!("must be > 0, got {value}"),
                ));
            }
        }
        for (name, value) in [
            ("v_in", self.v_in),
            ("inductance", self.inductance),
            ("capacitance", self.capacitance),
            ("f_sw", self.f_sw),
        ] {
            if !value.is_finite() {
                return Err(Error::invalid(format!("{prefix}.{name}"), "must be finite"));
            }
        }
        if !(self.v_ref > 0.0 && self.v_ref < self.v_in) {
            return Err(Error::invalid(
                format!("{prefix}.v_ref"),
                format!("must satisfy 0 < v_ref < v_in, got {}", self.v_ref),
            ));
        }
        if !(self.v_min_cpl > 0.0 && self.v_min_cpl < self.v_ref) {
            return Err(Error::invalid(
                format!("{prefix}.v_min_cpl"),
                "must lie strictly between 0 and v_ref",
            ));
        }
        if self.substeps == 0 {
            return Err(Error::invalid(format!("{prefix}.substeps"), "must be >= 1"));
        }
        Ok(())
    }
}

/// Inductor current, output voltage and simulated time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantState {
    pub i_l: f64,
    pub v_o: f64,
    pub t: f64,
}

impl PlantState {
    pub fn new(i_l: f64, v_o: f64) -> Self {
        Self { i_l, v_o, t: 0.0 }
    }
}

/// One entry of a load schedule: from `at` seconds on, the CPL draws `power` watts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadStep {
    pub at: f64,
    pub power: f64,
}

/// Piecewise-constant CPL power schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CplProfile {
    schedule: Vec<LoadStep>,
}

impl CplProfile {
    pub fn new(schedule: Vec<LoadStep>) -> Result<Self> {
        let profile = Self { schedule };
        profile.validate("profile")?;
        Ok(profile)
    }

    pub fn from_pairs(pairs: &[(f64, f64)]) -> Result<Self> {
        Self::new(
            pairs
                .iter()
                .map(|&(at, power)| LoadStep { at, power })
                .collect(),
        )
    }

    pub fn constant(power: f64) -> Self {
        Self {
            schedule: vec![LoadStep { at: 0.0, power }],
        }
    }

    pub fn steps(&self) -> &[LoadStep] {
        &self.schedule
    }

    pub fn validate(&self, path: &str) -> Result<()> {
        if self.schedule.is_empty() {
            return Err(Error::invalid(path, "schedule must not be empty"));
        }
        for (k, step) in self.schedule.iter().enumerate() {
            if !(step.power.is_finite() && step.power >= 0.0) {
                return Err(Error::invalid(
                    format!("{path}[{k}].power"),
                    format!("must be finite and >= 0, got {}", step.power),
                ));
            }
            if !step.at.is_finite() {
                return Err(Error::invalid(format!("{path}[{k}].at"), "must be finite"));
            }
        }
        if let Some(k) = self.schedule.windows(2).position(|w| w[1].at <= w[0].at) {
            return Err(Error::invalid(
                format!("{path}[{}].at", k + 1),
                "switch times must be strictly increasing",
            ));
        }
        Ok(())
    }

    /// Scheduled power at time `t`; zero before the first entry.
    pub fn power_at(&self, t: f64) -> f64 {
        self.schedule
            .iter()
            .take_while(|s| s.at <= t + SCHEDULE_SLACK)
            .last()
            .map_or(0.0, |s| s.power)
    }

    /// Time of the last scheduled switch.
    pub fn last_switch(&self) -> f64 {
        self.schedule.last().map_or(0.0, |s| s.at)
    }
}

/// Parasitics and sensing imperfections layered on top of [`PlantParams`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Mismatch {
    /// Inductor series resistance (ohm).
    pub r_l: f64,
    /// Switch on-resistance (ohm).
    pub r_on: f64,
    /// Freewheeling diode forward drop (V).
    pub v_diode: f64,
    /// Gain between commanded and realized duty.
    pub gain_err: f64,
    /// Additive duty error.
    pub duty_offset: f64,
    /// Voltage sensor noise standard deviation (V).
    pub sensor_noise_sd: f64,
    /// Voltage sensor offset (V).
    pub sensor_offset: f64,
    /// Load current sensor noise standard deviation (A).
    pub current_noise_sd: f64,
}

impl Default for Mismatch {
    fn default() -> Self {
        Self::DEFAULT_PRESET
    }
}

impl Mismatch {
    /// The default hardware-surrogate preset.
    pub const DEFAULT_PRESET: Mismatch = Mismatch {
        r_l: 0.4,
        r_on: 0.2,
        v_diode: 0.8,
        gain_err: 0.97,
        duty_offset: -0.005,
        sensor_noise_sd: 0.05,
        sensor_offset: 0.0,
        current_noise_sd: 0.02,
    };

    /// A mismatch that degenerates the surrogate to the ideal model.
    pub const NONE: Mismatch = Mismatch {
        r_l: 0.0,
        r_on: 0.0,
        v_diode: 0.0,
        gain_err: 1.0,
        duty_offset: 0.0,
        sensor_noise_sd: 0.0,
        sensor_offset: 0.0,
        current_noise_sd: 0.0,
    };

    /// Preset lookup by name: `default` or `ideal`.
    pub fn preset(name: &str) -> Option<Mismatch> {
        match name {
            "default" => Some(Self::DEFAULT_PRESET),
            "ideal" | "none" => Some(Self::NONE),
            _ => None,
        }
    }

    pub fn validate(&self, prefix: &str) -> Result<()> {
        for (name, value) in [
            ("r_l", self.r_l),
            ("r_on", self.r_on),
            ("v_diode", self.v_diode),
            ("sensor_noise_sd", self.sensor_noise_sd),
            ("current_noise_sd", self.current_noise_sd),
        ] {
            if !(value.is_finite() && value >= 0.0) {
                return Err(Error::invalid(
                    format!("{prefix}.{name}"),
                    format!("must be finite and >= 0, got {value}"),
                ));
            }
        }
        if !(self.gain_err.is_finite() && self.gain_err > 0.0) {
            return Err(Error::invalid(format!("{prefix}.gain_err"), "must be > 0"));
        }
        for (name, value) in [
            ("duty_offset", self.duty_offset),
            ("sensor_offset", self.sensor_offset),
        ] {
            if !value.is_finite() {
                return Err(Error::invalid(format!("{prefix}.{name}"), "must be finite"));
            }
        }
        Ok(())
    }
}

/// Nominal circuit plus the mismatch that makes it "real".
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurrogateParams {
    pub plant: PlantParams,
    pub mismatch: Mismatch,
}

impl SurrogateParams {
    pub fn new(plant: PlantParams, mismatch: Mismatch) -> Self {
        Self { plant, mismatch }
    }

    /// Duty realized by the power stage, clamped to `[0, 1]`.
    pub fn effective_duty(&self, d_real: f64) -> f64 {
        (self.mismatch.gain_err * d_real + self.mismatch.duty_offset).clamp(0.0, 1.0)
    }
}

/// Current drawn by a CPL of power `power` at `v_o`.
pub fn cpl_current(power: f64, v_o: f64, v_min_cpl: f64) -> Result<f64> {
    if !(v_o > v_min_cpl) {
        return Err(Error::VoltageCollapse {
            v_o,
            floor: v_min_cpl,
        });
    }
    Ok(power / v_o)
}

/// Right-hand side of the ideal averaged model: `(di_L/dt, dv_o/dt)`.
pub fn ideal_derivatives(
    state: &PlantState,
    d: f64,
    power: f64,
    params: &PlantParams,
) -> Result<(f64, f64)> {
    let i_cpl = cpl_current(power, state.v_o, params.v_min_cpl)?;
    let di = (params.v_in * d - state.v_o) / params.inductance;
    let dv = state.i_l / params.capacitance
        - state.v_o / (params.resistance * params.capacitance)
        - i_cpl / params.capacitance;
    Ok((di, dv))
}

/// Right-hand side of the surrogate: conduction and diode losses on the
/// inductor branch, actuation error on the duty, output side as in the ideal model.
pub fn surrogate_derivatives(
    state: &PlantState,
    d_real: f64,
    power: f64,
    sparams: &SurrogateParams,
) -> Result<(f64, f64)> {
    let p = &sparams.plant;
    let m = &sparams.mismatch;
    let d_eff = sparams.effective_duty(d_real);
    let i_cpl = cpl_current(power, state.v_o, p.v_min_cpl)?;
    let drop = state.i_l * (m.r_l + d_eff * m.r_on) + (1.0 - d_eff) * m.v_diode;
    let di = (p.v_in * d_eff - state.v_o - drop) / p.inductance;
    let dv = state.i_l / p.capacitance
        - state.v_o / (p.resistance * p.capacitance)
        - i_cpl / p.capacitance;
    Ok((di, dv))
}

/// Classical RK4 over `dt` in `substeps` equal pieces.
fn rk4<F>(state: &PlantState, dt: f64, substeps: u32, rhs: F) -> Result<PlantState>
where
    F: Fn(f64, f64) -> Result<(f64, f64)>,
{
    let h = dt / f64::from(substeps);
    let (mut i, mut v) = (state.i_l, state.v_o);
    for _ in 0..substeps {
        let (k1i, k1v) = rhs(i, v)?;
        let (k2i, k2v) = rhs(i + 0.5 * h * k1i, v + 0.5 * h * k1v)?;
        let (k3i, k3v) = rhs(i + 0.5 * h * k2i, v + 0.5 * h * k2v)?;
        let (k4i, k4v) = rhs(i + h * k3i, v + h * k3v)?;
        i += h / 6.0 * (k1i + 2.0 * k2i + 2.0 * k3i + k4i);
        v += h / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v);
        if !(i.is_finite() && v.is_finite()) {
            return Err(Error::NumericalDivergence(format!(
                "state became non-finite near t = {:.6} s",
                state.t
            )));
        }
    }
    Ok(PlantState {
        i_l: i,
        v_o: v,
        t: state.t + dt,
    })
}

/// Advance the ideal model by one control period with the duty held.
pub fn step(
    state: &PlantState,
    d: f64,
    profile: &CplProfile,
    params: &PlantParams,
    dt_ctrl: f64,
) -> Result<PlantState> {
    check_dt(dt_ctrl)?;
    let power = profile.power_at(state.t);
    rk4(state, dt_ctrl, params.substeps, |i_l, v_o| {
        ideal_derivatives(&PlantState { i_l, v_o, t: 0.0 }, d, power, params)
    })
}

/// Advance the surrogate by one control period. Sensor noise is not part of
/// the dynamics; see [`Plant`] for measurements.
pub fn surrogate_step(
    state: &PlantState,
    d_real: f64,
    profile: &CplProfile,
    sparams: &SurrogateParams,
    dt_ctrl: f64,
) -> Result<PlantState> {
    check_dt(dt_ctrl)?;
    let power = profile.power_at(state.t);
    rk4(state, dt_ctrl, sparams.plant.substeps, |i_l, v_o| {
        surrogate_derivatives(&PlantState { i_l, v_o, t: 0.0 }, d_real, power, sparams)
    })
}

fn check_dt(dt_ctrl: f64) -> Result<()> {
    if !(dt_ctrl.is_finite() && dt_ctrl > 0.0) {
        return Err(Error::invalid(
            "dt_ctrl",
            format!("must be > 0, got {dt_ctrl}"),
        ));
    }
    Ok(())
}

/// Steady state of the ideal model at duty `d` and CPL power `power`.
pub fn find_equilibrium(d: f64, power: f64, params: &PlantParams) -> Result<PlantState> {
    Model::Ideal(*params).equilibrium(d, power)
}

/// Which plant equations drive a [`Plant`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Model {
    Ideal(PlantParams),
    Surrogate(SurrogateParams),
}

impl Model {
    pub fn params(&self) -> &PlantParams {
        match self {
            Model::Ideal(p) => p,
            Model::Surrogate(s) => &s.plant,
        }
    }

    pub fn derivatives(&self, state: &PlantState, d: f64, power: f64) -> Result<(f64, f64)> {
        match self {
            Model::Ideal(p) => ideal_derivatives(state, d, power, p),
            Model::Surrogate(s) => surrogate_derivatives(state, d, power, s),
        }
    }

    pub fn step(&self, state: &PlantState, d: f64, profile: &CplProfile) -> Result<PlantState> {
        let dt = self.params().dt_ctrl();
        match self {
            Model::Ideal(p) => step(state, d, profile, p, dt),
            Model::Surrogate(s) => surrogate_step(state, d, profile, s, dt),
        }
    }

    /// Equilibrium with the larger output voltage.
    ///
    /// With series drop `R_s = r_l + d_eff*r_on` and source `E = v_in*d_eff - (1-d_eff)*v_diode`
    /// the steady state solves `(1 + R_s/R) v^2 - E v + R_s P = 0`.
    pub fn equilibrium(&self, d: f64, power: f64) -> Result<PlantState> {
        let p = self.params();
        let (d_eff, r_s, e) = match self {
            Model::Ideal(p) => (d, 0.0, p.v_in * d),
            Model::Surrogate(s) => {
                let m = &s.mismatch;
                let d_eff = s.effective_duty(d);
                (
                    d_eff,
                    m.r_l + d_eff * m.r_on,
                    p.v_in * d_eff - (1.0 - d_eff) * m.v_diode,
                )
            }
        };
        let none = Error::NoEquilibrium { duty: d, power };
        if !(0.0..=1.0).contains(&d_eff) || !(e > 0.0) || power < 0.0 {
            return Err(none);
        }
        let v = if r_s == 0.0 {
            e
        } else {
            let a = 1.0 + r_s / p.resistance;
            let disc = e * e - 4.0 * a * r_s * power;
            if disc < 0.0 {
                return Err(none);
            }
            (e + disc.sqrt()) / (2.0 * a)
        };
        if power > 0.0 && !(v > p.v_min_cpl) {
            return Err(none);
        }
        let i_l = v / p.resistance + power / v;
        Ok(PlantState {
            i_l,
            v_o: v,
            t: 0.0,
        })
    }

    /// Steady state holding the output at `v_o`, whatever duty that takes.
    /// The inductor then carries exactly the load current.
    pub fn regulated_state(&self, v_o: f64, power: f64) -> Result<PlantState> {
        let p = self.params();
        if !(v_o > p.v_min_cpl && v_o < p.v_in) || !(power >= 0.0) {
            return Err(Error::NoEquilibrium {
                duty: v_o / p.v_in,
                power,
            });
        }
        Ok(PlantState::new(v_o / p.resistance + power / v_o, v_o))
    }
}

/// Sensed output voltage and load current.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measurement {
    pub v_o: f64,
    pub i_o: f64,
}

/// Outcome of one control period.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub state: PlantState,
    pub measurement: Measurement,
    /// True load current at the end of the period (shunt plus CPL).
    pub i_o: f64,
    /// CPL power applied during the period.
    pub power: f64,
    /// Duty actually applied after clamping.
    pub duty: f64,
    pub saturated: bool,
}

/// A running converter instance: model, load schedule, state and sensor noise.
#[derive(Debug, Clone)]
pub struct Plant {
    model: Model,
    profile: CplProfile,
    state: PlantState,
    rng: ChaCha8Rng,
}

impl Plant {
    pub fn new(model: Model, profile: CplProfile, initial: PlantState, seed: u64) -> Self {
        Self {
            model,
            profile,
            state: initial,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn params(&self) -> &PlantParams {
        self.model.params()
    }

    pub fn state(&self) -> PlantState {
        self.state
    }

    pub fn profile(&self) -> &CplProfile {
        &self.profile
    }

    /// Replace the load schedule; the state and time are kept.
    pub fn set_profile(&mut self, profile: CplProfile) {
        self.profile = profile;
    }

    /// True load current drawn at the present state.
    pub fn load_current(&self) -> f64 {
        let p = self.params();
        self.state.v_o / p.resistance + self.profile.power_at(self.state.t) / self.state.v_o
    }

    /// Sample the sensors at the present state. Draws noise only for the surrogate.
    pub fn measure(&mut self) -> Measurement {
        self.measure_with_current(self.load_current())
    }

    fn measure_with_current(&mut self, i_o: f64) -> Measurement {
        let v = self.state.v_o;
        match self.model {
            Model::Ideal(_) => Measurement { v_o: v, i_o },
            Model::Surrogate(s) => {
                let m = s.mismatch;
                let mut v_meas = v + m.sensor_offset;
                let mut i_meas = i_o;
                if m.sensor_noise_sd > 0.0 {
                    let z: f64 = StandardNormal.sample(&mut self.rng);
                    v_meas += m.sensor_noise_sd * z;
                }
                if m.current_noise_sd > 0.0 {
                    let z: f64 = StandardNormal.sample(&mut self.rng);
                    i_meas += m.current_noise_sd * z;
                }
                Measurement {
                    v_o: v_meas,
                    i_o: i_meas,
                }
            }
        }
    }

    /// Hold `duty` for one control period, then sample the sensors.
    pub fn advance(&mut self, duty: f64) -> Result<StepReport> {
        if duty.is_nan() {
            return Err(Error::NumericalDivergence("duty command is NaN".into()));
        }
        let applied = duty.clamp(0.0, 1.0);
        let power = self.profile.power_at(self.state.t);
        self.state = self.model.step(&self.state, applied, &self.profile)?;
        // Load current over the period just simulated, not the next one's power.
        let p = self.params();
        let i_o = self.state.v_o / p.resistance + power / self.state.v_o;
        let measurement = self.measure_with_current(i_o);
        Ok(StepReport {
            state: self.state,
            measurement,
            i_o,
            power,
            duty: applied,
            saturated: applied != duty,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table_one() -> PlantParams {
        PlantParams::default()
    }

    #[test]
    fn cpl_current_examples() {
        assert_eq!(cpl_current(500.0, 100.0, 10.0).unwrap(), 5.0);
        assert_eq!(cpl_current(0.0, 100.0, 10.0).unwrap(), 0.0);
        assert_eq!(cpl_current(800.0, 100.0, 10.0).unwrap(), 8.0);
        assert!(matches!(
            cpl_current(500.0, 10.0, 10.0),
            Err(Error::VoltageCollapse { .. })
        ));
        assert!(matches!(
            cpl_current(500.0, f64::NAN, 10.0),
            Err(Error::VoltageCollapse { .. })
        ));
    }

    #[test]
    fn ideal_derivatives_vanish_at_equilibrium() {
        let p = table_one();
        let s = PlantState::new(100.0 / p.resistance + 500.0 / 100.0, 100.0);
        let (di, dv) = ideal_derivatives(&s, 0.5, 500.0, &p).unwrap();
        assert_eq!(di, 0.0);
        assert!(dv.abs() < 1e-9, "dv = {dv}");

        let s = PlantState::new(0.0, 100.0);
        assert_eq!(ideal_derivatives(&s, 0.5, 0.0, &p).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn equilibrium_examples() {
        let p = table_one();
        let eq = find_equilibrium(0.5, 0.0, &p).unwrap();
        assert_eq!((eq.v_o, eq.i_l), (100.0, 0.0));
        let eq = find_equilibrium(0.5, 500.0, &p).unwrap();
        assert_eq!((eq.v_o, eq.i_l), (100.0, 5.0));
        // below the undervoltage floor no CPL equilibrium exists
        assert!(matches!(
            find_equilibrium(0.04, 500.0, &p),
            Err(Error::NoEquilibrium { .. })
        ));
    }

    #[test]
    fn surrogate_equilibrium_needs_deliverable_power() {
        let s = SurrogateParams::new(table_one(), Mismatch::DEFAULT_PRESET);
        let model = Model::Surrogate(s);
        let eq = model.equilibrium(0.5, 500.0).unwrap();
        let (di, dv) = model.derivatives(&eq, 0.5, 500.0).unwrap();
        assert!(di.abs() < 1e-9 && dv.abs() < 1e-9);
        // E^2 < 4 R_s P: far more power than the lossy stage can deliver
        assert!(matches!(
            model.equilibrium(0.5, 1e5),
            Err(Error::NoEquilibrium { .. })
        ));
    }

    #[test]
    fn degenerate_surrogate_is_bitwise_ideal() {
        let p = table_one();
        let s = SurrogateParams::new(p, Mismatch::NONE);
        let profile = CplProfile::from_pairs(&[(0.0, 200.0), (0.002, 500.0)]).unwrap();
        let mut a = find_equilibrium(0.5, 200.0, &p).unwrap();
        let mut b = a;
        for k in 0..60 {
            let d = if k % 7 < 3 { 0.55 } else { 0.47 };
            a = step(&a, d, &profile, &p, p.dt_ctrl()).unwrap();
            b = surrogate_step(&b, d, &profile, &s, p.dt_ctrl()).unwrap();
            assert_eq!(a.i_l.to_bits(), b.i_l.to_bits());
            assert_eq!(a.v_o.to_bits(), b.v_o.to_bits());
        }
    }

    #[test]
    fn schedule_reads_power_from_switch_onward() {
        let profile = CplProfile::from_pairs(&[(0.0, 200.0), (0.14, 500.0)]).unwrap();
        assert_eq!(profile.power_at(0.0), 200.0);
        assert_eq!(profile.power_at(0.1399), 200.0);
        assert_eq!(profile.power_at(0.14 - 1e-12), 500.0);
        assert_eq!(profile.power_at(1.0), 500.0);
        assert!(CplProfile::from_pairs(&[(0.0, 200.0), (0.0, 500.0)]).is_err());
        assert!(CplProfile::from_pairs(&[(0.0, -1.0)]).is_err());
    }

    #[test]
    fn step_rejects_collapse_and_bad_period() {
        let p = table_one();
        let profile = CplProfile::constant(1000.0);
        let s = PlantState::new(0.0, 10.5);
        let mut state = s;
        let err = (0..50)
            .find_map(|_| match step(&state, 0.0, &profile, &p, p.dt_ctrl()) {
                Ok(next) => {
                    state = next;
                    None
                }
                Err(e) => Some(e),
            })
            .expect("collapse expected");
        assert!(matches!(err, Error::VoltageCollapse { .. }));
        assert!(step(&s, 0.5, &profile, &p, 0.0).is_err());
    }

    #[test]
    fn plant_clamps_duty_and_flags_saturation() {
        let p = table_one();
        let eq = find_equilibrium(0.5, 200.0, &p).unwrap();
        let mut plant = Plant::new(Model::Ideal(p), CplProfile::constant(200.0), eq, 1);
        let r = plant.advance(1.3).unwrap();
        assert!(r.saturated);
        assert_eq!(r.duty, 1.0);
        let r = plant.advance(0.5).unwrap();
        assert!(!r.saturated);
        assert!((r.i_o * r.state.v_o - 200.0).abs() < 1e-9 * 200.0);
    }

    #[test]
    fn validation_names_the_field() {
        let mut p = table_one();
        p.v_ref = 250.0;
        let err = p.validate("plant").unwrap_err().to_string();
        assert!(err.contains("plant.v_ref"), "{err}");
        let mut m = Mismatch::DEFAULT_PRESET;
        m.gain_err = 0.0;
        assert!(m
            .validate("surrogate")
            .unwrap_err()
            .to_string()
            .contains("gain_err"));
    }
}
