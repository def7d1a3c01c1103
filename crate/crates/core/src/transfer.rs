//! Duty-ratio mapping (DRM) between the training model and a mismatched plant.
//!
//! The real plant is swept over `(duty, power)` at steady state. Each
//! measured output voltage defines the duty the ideal model would have needed,
//! `d_sim = v_o,real / v_in`, and the affine map
//! `d_real = a d_sim + b i_o,real + c` is fitted by least squares. At run
//! time the agent's duty is pushed through that map before actuation.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::control::ActionTable;
use crate::error::{Error, Result};
use crate::plant::{find_equilibrium, CplProfile, Model, Plant};

/// Time constant of the first-order filter on the measured load current (s).
pub const CURRENT_FILTER_TAU: f64 = 1e-3;

/// Minimum number of settled sweep points for a fit.
pub const MIN_SAMPLES: usize = 3;

/// One steady-state operating point of the real plant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SteadySample {
    pub d_real: f64,
    pub d_sim: f64,
    pub v_o_real: f64,
    pub i_o_real: f64,
    #[serde(rename = "P_o")]
    pub p_o: f64,
}

/// Sweep over duties and load powers, with the steady-state test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepGrid {
    /// Duties to hold; empty means every duty the action table can reach.
    pub duty_points: Vec<f64>,
    pub power_points: Vec<f64>,
    /// Trailing window over which the output must stay flat (s).
    pub settle_window: f64,
    /// Allowed deviation of the filtered output from its window mean (V).
    pub settle_tol: f64,
    /// Give up on a point after this much simulated time (s).
    pub timeout: f64,
    /// Derivative feedback `d = d_k - K dv/dt` (s/V) that damps the
    /// CPL-destabilized LC filter while holding the mean duty at `d_k`.
    pub damping_gain: f64,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            duty_points: Vec::new(),
            power_points: vec![200.0, 500.0, 800.0, 1000.0],
            settle_window: 0.05,
            settle_tol: 0.1,
            timeout: 1.0,
            damping_gain: 3e-6,
        }
    }
}

impl SweepGrid {
    /// Fill in the duty points from the action table when none are given.
    pub fn resolved(&self, table: &ActionTable) -> SweepGrid {
        let mut grid = self.clone();
        if grid.duty_points.is_empty() {
            grid.duty_points = table.reachable_duties();
        }
        grid
    }

    pub fn validate(&self, prefix: &str) -> Result<()> {
        if self.power_points.is_empty() {
            return Err(Error::invalid(
                format!("{prefix}.power_points"),
                "must not be empty",
            ));
        }
        if let Some(k) = self
            .power_points
            .iter()
            .position(|p| !(p.is_finite() && *p > 0.0))
        {
            return Err(Error::invalid(
                format!("{prefix}.power_points[{k}]"),
                "must be > 0",
            ));
        }
        if let Some(k) = self
            .duty_points
            .iter()
            .position(|d| !(0.0..=1.0).contains(d))
        {
            return Err(Error::invalid(
                format!("{prefix}.duty_points[{k}]"),
                "must lie in [0, 1]",
            ));
        }
        for (name, v) in [
            ("settle_window", self.settle_window),
            ("settle_tol", self.settle_tol),
            ("timeout", self.timeout),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("{prefix}.{name}"), "must be > 0"));
            }
        }
        if self.timeout < self.settle_window {
            return Err(Error::invalid(
                format!("{prefix}.timeout"),
                "must cover settle_window",
            ));
        }
        if !(self.damping_gain.is_finite() && self.damping_gain >= 0.0) {
            return Err(Error::invalid(
                format!("{prefix}.damping_gain"),
                "must be >= 0",
            ));
        }
        Ok(())
    }
}

/// A grid point that produced no sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SkippedPoint {
    pub d_real: f64,
    pub p_o: f64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepResult {
    pub samples: Vec<SteadySample>,
    pub skipped: Vec<SkippedPoint>,
}

/// Hold `d_real` at constant power `p_o` until the output is steady.
pub fn settle_point(
    model: &Model,
    d_real: f64,
    p_o: f64,
    grid: &SweepGrid,
    seed: u64,
) -> Result<SteadySample> {
    let params = *model.params();
    let dt = params.dt_ctrl();
    // start where the ideal model would sit; the real plant moves away from there
    let start = find_equilibrium(d_real, p_o, &params)?;
    let mut plant = Plant::new(*model, CplProfile::constant(p_o), start, seed);
    let window = ((grid.settle_window / dt).round() as usize).max(2);
    let max_steps = (grid.timeout / dt).round() as usize;
    let check_every = (window / 10).max(1);
    let alpha = 1.0 - (-dt / CURRENT_FILTER_TAU).exp();

    let mut meas = plant.measure();
    let mut v_last = meas.v_o;
    let mut v_filt = meas.v_o;
    let mut hist: VecDeque<(f64, f64, f64)> = VecDeque::with_capacity(window + 1);
    for k in 0..max_steps {
        let d_cmd = d_real - grid.damping_gain * (meas.v_o - v_last) / dt;
        v_last = meas.v_o;
        meas = plant.advance(d_cmd)?.measurement;
        v_filt += alpha * (meas.v_o - v_filt);
        if hist.len() == window {
            hist.pop_front();
        }
        hist.push_back((v_filt, meas.v_o, meas.i_o));
        if hist.len() == window && k % check_every == 0 {
            let n = window as f64;
            let mean_f = hist.iter().map(|h| h.0).sum::<f64>() / n;
            let dev = hist
                .iter()
                .map(|h| (h.0 - mean_f).abs())
                .fold(0.0, f64::max);
            if dev < grid.settle_tol {
                let v_o_real = hist.iter().map(|h| h.1).sum::<f64>() / n;
                let i_o_real = hist.iter().map(|h| h.2).sum::<f64>() / n;
                return Ok(SteadySample {
                    d_real,
                    d_sim: v_o_real / params.v_in,
                    v_o_real,
                    i_o_real,
                    p_o,
                });
            }
        }
    }
    Err(Error::NumericalDivergence(format!(
        "no steady state within {} s",
        grid.timeout
    )))
}

/// Sweep every `(duty, power)` grid point on `model`. Points that collapse or
/// never settle are skipped and reported.
pub fn collect_samples(model: &Model, grid: &SweepGrid, seed: u64) -> Result<SweepResult> {
    collect_samples_parallel(model, grid, seed, 1)
}

/// [`collect_samples`] on up to `jobs` threads. Each point has its own seed,
/// so the result does not depend on `jobs`.
pub fn collect_samples_parallel(
    model: &Model,
    grid: &SweepGrid,
    seed: u64,
    jobs: usize,
) -> Result<SweepResult> {
    grid.validate("sweep")?;
    if grid.duty_points.is_empty() {
        return Err(Error::invalid("sweep.duty_points", "must not be empty"));
    }
    let points: Vec<(f64, f64)> = grid
        .power_points
        .iter()
        .flat_map(|&p| grid.duty_points.iter().map(move |&d| (d, p)))
        .collect();
    let results: Vec<Mutex<Option<Result<SteadySample>>>> =
        points.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, points.len()) {
            s.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(d_real, p_o)) = points.get(k) else {
                    break;
                };
                let r = settle_point(model, d_real, p_o, grid, seed.wrapping_add(k as u64));
                *results[k].lock().unwrap() = Some(r);
            });
        }
    });

    let mut out = SweepResult::default();
    for (&(d_real, p_o), slot) in points.iter().zip(results) {
        match slot.into_inner().unwrap().expect("every point ran") {
            Ok(s) => out.samples.push(s),
            Err(e) => {
                log::warn!("sweep point d={d_real} P={p_o} W skipped: {e}");
                out.skipped.push(SkippedPoint {
                    d_real,
                    p_o,
                    reason: e.to_string(),
                });
            }
        }
    }
    if out.samples.len() < MIN_SAMPLES {
        return Err(Error::NoSteadyState {
            settled: out.samples.len(),
            required: MIN_SAMPLES,
        });
    }
    Ok(out)
}

/// Fitted affine map `d_real = a d_sim + b i_o + c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DrmCoefficients {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub fit_residual_rms: f64,
    pub n_samples: usize,
}

impl DrmCoefficients {
    pub const IDENTITY: DrmCoefficients = DrmCoefficients {
        a: 1.0,
        b: 0.0,
        c: 0.0,
        fit_residual_rms: 0.0,
        n_samples: 0,
    };

    pub fn predict(&self, d_sim: f64, i_o: f64) -> f64 {
        self.a * d_sim + self.b * i_o + self.c
    }

    /// Root-mean-square residual of these coefficients on `samples`.
    pub fn residual_rms(&self, samples: &[SteadySample]) -> f64 {
        let ss: f64 = samples
            .iter()
            .map(|s| (s.d_real - self.predict(s.d_sim, s.i_o_real)).powi(2))
            .sum();
        (ss / samples.len() as f64).sqrt()
    }
}

/// Map an agent duty to the real plant, clamped to `[0, 1]`, with a saturation flag.
pub fn apply_drm(d_sim: f64, i_o_real: f64, coeffs: &DrmCoefficients) -> (f64, bool) {
    let d = coeffs.predict(d_sim, i_o_real);
    let clamped = d.clamp(0.0, 1.0);
    (clamped, clamped != d)
}

/// Least squares for `x beta ≈ y` by Householder QR. `x` is given column by
/// column. Returns `None` when the columns are numerically dependent.
fn least_squares(columns: &[Vec<f64>], y: &[f64]) -> Option<Vec<f64>> {
    let n = y.len();
    let p = columns.len();
    if n < p {
        return None;
    }
    // equilibrate columns so the rank test is scale free
    let norms: Vec<f64> = columns
        .iter()
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    if norms.iter().any(|&s| s == 0.0 || !s.is_finite()) {
        return None;
    }
    let mut a: Vec<Vec<f64>> = columns
        .iter()
        .zip(&norms)
        .map(|(c, s)| c.iter().map(|v| v / s).collect())
        .collect();
    let mut rhs = y.to_vec();
    for j in 0..p {
        let alpha = {
            let norm = a[j][j..].iter().map(|v| v * v).sum::<f64>().sqrt();
            if a[j][j] > 0.0 {
                -norm
            } else {
                norm
            }
        };
        if alpha.abs() < 1e-10 {
            return None;
        }
        let mut v: Vec<f64> = a[j][j..].to_vec();
        v[0] -= alpha;
        let vv: f64 = v.iter().map(|x| x * x).sum();
        if vv == 0.0 {
            continue;
        }
        let reflect = |col: &mut [f64]| {
            let dot: f64 = v.iter().zip(col.iter()).map(|(a, b)| a * b).sum();
            let f = 2.0 * dot / vv;
            for (c, vi) in col.iter_mut().zip(&v) {
                *c -= f * vi;
            }
        };
        for col in a.iter_mut().skip(j) {
            reflect(&mut col[j..]);
        }
        reflect(&mut rhs[j..]);
    }
    let mut beta = vec![0.0; p];
    for j in (0..p).rev() {
        let s: f64 = (j + 1..p).map(|k| a[k][j] * beta[k]).sum();
        beta[j] = (rhs[j] - s) / a[j][j];
    }
    Some(beta.iter().zip(&norms).map(|(b, s)| b / s).collect())
}

/// Ordinary least-squares fit of `d_real` on `(d_sim, i_o, 1)`. When the load
/// current carries no independent information the `b` term is dropped.
pub fn fit_drm(samples: &[SteadySample]) -> Result<DrmCoefficients> {
    if samples.len() < MIN_SAMPLES {
        return Err(Error::DegenerateDesign(format!(
            "{} samples, at least {MIN_SAMPLES} needed",
            samples.len()
        )));
    }
    if samples
        .iter()
        .any(|s| !(s.d_sim.is_finite() && s.i_o_real.is_finite() && s.d_real.is_finite()))
    {
        return Err(Error::DegenerateDesign("non-finite sample".into()));
    }
    let d_sim: Vec<f64> = samples.iter().map(|s| s.d_sim).collect();
    let i_o: Vec<f64> = samples.iter().map(|s| s.i_o_real).collect();
    let ones = vec![1.0; samples.len()];
    let y: Vec<f64> = samples.iter().map(|s| s.d_real).collect();

    let (a, b, c) = if let Some(beta) = least_squares(&[d_sim.clone(), i_o, ones.clone()], &y) {
        (beta[0], beta[1], beta[2])
    } else if let Some(beta) = least_squares(&[d_sim, ones], &y) {
        log::warn!("load current is collinear with the duty; fitting d_real = a d_sim + c");
        (beta[0], 0.0, beta[1])
    } else {
        return Err(Error::DegenerateDesign(
            "simulated duties do not vary across the sweep".into(),
        ));
    };
    if !(a > 0.0) {
        return Err(Error::DegenerateDesign(format!(
            "fitted slope a = {a} does not preserve monotonicity"
        )));
    }
    let mut coeffs = DrmCoefficients {
        a,
        b,
        c,
        fit_residual_rms: 0.0,
        n_samples: samples.len(),
    };
    coeffs.fit_residual_rms = coeffs.residual_rms(samples);
    Ok(coeffs)
}

/// Run-time wrapper: filters the measured load current and maps duties.
#[derive(Debug, Clone)]
pub struct DrmRuntime {
    coeffs: DrmCoefficients,
    tau: f64,
    i_filtered: Option<f64>,
}

impl DrmRuntime {
    pub fn new(coeffs: DrmCoefficients) -> Self {
        Self::with_filter(coeffs, CURRENT_FILTER_TAU)
    }

    pub fn with_filter(coeffs: DrmCoefficients, tau: f64) -> Self {
        Self {
            coeffs,
            tau,
            i_filtered: None,
        }
    }

    pub fn coefficients(&self) -> &DrmCoefficients {
        &self.coeffs
    }

    pub fn filtered_current(&self) -> Option<f64> {
        self.i_filtered
    }

    /// Update the current estimate with a new measurement and map `d_sim`.
    pub fn map(&mut self, d_sim: f64, i_meas: f64, dt: f64) -> (f64, bool) {
        let i = match self.i_filtered {
            None => i_meas,
            Some(prev) => prev + (1.0 - (-dt / self.tau).exp()) * (i_meas - prev),
        };
        self.i_filtered = Some(i);
        apply_drm(d_sim, i, &self.coeffs)
    }
}

/// DRM artifact written by `drm-fit`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DrmArtifact {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub fit_residual_rms: f64,
    pub n_samples: usize,
    pub grid: SweepGrid,
    pub surrogate_preset_id: String,
    /// SHA-256 of the checkpoint the map was fitted for, when one was given.
    pub created_from: Option<String>,
    pub config_hash: String,
}

impl DrmArtifact {
    pub fn coefficients(&self) -> DrmCoefficients {
        DrmCoefficients {
            a: self.a,
            b: self.b,
            c: self.c,
            fit_residual_rms: self.fit_residual_rms,
            n_samples: self.n_samples,
        }
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

/// Write the sample table as CSV: `d_real,d_sim,v_o_real,i_o_real,P_o`.
pub fn write_samples_csv<W: std::io::Write>(samples: &[SteadySample], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for s in samples {
        w.serialize(s)?;
    }
    w.flush().map_err(|e| Error::io("samples.csv", e))?;
    Ok(())
}
