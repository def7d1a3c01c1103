//! Load-step scenarios, per-segment transient and steady-state metrics,
//! trace CSV files and SVG plots.

use std::fmt::{self, Write as _};
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, StepTiming};
use crate::control::{run_loop, EpisodeConfig, Greedy, TraceRecord};
use crate::dqn::QNetwork;
use crate::error::{Error, Result};
use crate::plant::{CplProfile, Model, Plant};
use crate::transfer::{DrmCoefficients, DrmRuntime};

/// Which plant model a scenario runs against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlantKind {
    Ideal,
    Surrogate,
}

impl fmt::Display for PlantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PlantKind::Ideal => "ideal",
            PlantKind::Surrogate => "surrogate",
        })
    }
}

impl FromStr for PlantKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ideal" => Ok(PlantKind::Ideal),
            "surrogate" => Ok(PlantKind::Surrogate),
            other => Err(Error::invalid(
                "plant",
                format!("expected ideal or surrogate, got `{other}`"),
            )),
        }
    }
}

/// One closed-loop experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub plant: PlantKind,
    pub drm: bool,
    pub profile: CplProfile,
    pub duration: f64,
    pub seed: u64,
}

impl Scenario {
    /// Base load, one step to `power`, back to base.
    pub fn load_step(
        plant: PlantKind,
        drm: bool,
        base: f64,
        power: f64,
        timing: &StepTiming,
        seed: u64,
    ) -> Self {
        let profile = CplProfile::from_pairs(&[
            (0.0, base),
            (timing.step_at, power),
            (timing.return_at, base),
        ])
        .expect("validated timing yields a valid schedule");
        Self {
            name: scenario_name(plant, drm, power),
            plant,
            drm,
            profile,
            duration: timing.duration,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.profile.validate("scenario.profile")?;
        if !(self.duration.is_finite() && self.duration > self.profile.last_switch()) {
            return Err(Error::invalid(
                "scenario.duration",
                format!("{} s does not cover the last load switch", self.duration),
            ));
        }
        Ok(())
    }
}

fn scenario_name(plant: PlantKind, drm: bool, power: f64) -> String {
    format!("{plant}-drm_{}-{power}W", if drm { "on" } else { "off" })
}

/// Parse `(plant, drm)` back out of a scenario name.
pub fn parse_scenario_name(name: &str) -> Option<(PlantKind, bool)> {
    let mut parts = name.split('-');
    let plant = parts.next()?.parse().ok()?;
    let drm = match parts.next()? {
        "drm_on" => true,
        "drm_off" => false,
        _ => return None,
    };
    Some((plant, drm))
}

/// The standard suite: one scenario per configured step power.
pub fn suite(config: &RunConfig, plant: PlantKind, drm: bool) -> Vec<Scenario> {
    let s = &config.scenarios;
    let timing = match plant {
        PlantKind::Ideal => &s.ideal_timing,
        PlantKind::Surrogate => &s.surrogate_timing,
    };
    s.step_powers
        .iter()
        .map(|&p| Scenario::load_step(plant, drm, s.base_power, p, timing, config.seed))
        .collect()
}

/// Parameters of the metric computation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricSettings {
    pub v_ref: f64,
    pub band: f64,
    pub steady_fraction: f64,
}

impl MetricSettings {
    pub fn from_config(config: &RunConfig) -> Self {
        Self {
            v_ref: config.plant.v_ref,
            band: config.scenarios.settle_band,
            steady_fraction: config.scenarios.steady_fraction,
        }
    }
}

/// Metrics of one constant-load segment of a trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentMetrics {
    pub segment: usize,
    pub power: f64,
    pub t_start: f64,
    pub t_end: f64,
    /// Time from the segment start until the output stays in the band;
    /// the segment length when `unsettled`.
    pub settling_time: f64,
    pub unsettled: bool,
    /// Peak |v_o - v_ref| inside the segment.
    pub overshoot: f64,
    /// Mean |v_o - v_ref| over the trailing steady-state window.
    pub steady_state_error: f64,
    /// Peak-to-peak v_o over the same window.
    pub steady_state_ripple: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Settling {
    pub time: f64,
    pub unsettled: bool,
}

/// First time after `t0` from which `|v - v_ref| <= band` holds for the rest
/// of the samples. The crossing is interpolated linearly between the last
/// sample outside the band and the next one.
pub fn settling_time(samples: &[(f64, f64)], t0: f64, v_ref: f64, band: f64) -> Settling {
    let Some(&(t_last, _)) = samples.last() else {
        return Settling {
            time: 0.0,
            unsettled: true,
        };
    };
    let err = |v: f64| (v - v_ref).abs();
    match samples.iter().rposition(|&(_, v)| err(v) > band) {
        None => Settling {
            time: 0.0,
            unsettled: false,
        },
        Some(j) if j + 1 == samples.len() => Settling {
            time: t_last - t0,
            unsettled: true,
        },
        Some(j) => {
            let (ta, va) = samples[j];
            let (tb, vb) = samples[j + 1];
            let (ea, eb) = (err(va), err(vb));
            let frac = if ea > eb {
                (ea - band) / (ea - eb)
            } else {
                1.0
            };
            Settling {
                time: (ta + frac * (tb - ta) - t0).max(0.0),
                unsettled: false,
            }
        }
    }
}

/// Split a trace into constant-power segments and measure each one.
pub fn segment_metrics(trace: &[TraceRecord], settings: &MetricSettings) -> Vec<SegmentMetrics> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < trace.len() {
        let power = trace[start].power;
        let end = trace[start..]
            .iter()
            .position(|r| r.power != power)
            .map_or(trace.len(), |n| start + n);
        let t0 = if start == 0 {
            0.0
        } else {
            trace[start - 1].t_s
        };
        out.push(measure_segment(
            out.len(),
            &trace[..end],
            start,
            t0,
            settings,
        ));
        start = end;
    }
    out
}

fn measure_segment(
    index: usize,
    upto: &[TraceRecord],
    start: usize,
    t0: f64,
    settings: &MetricSettings,
) -> SegmentMetrics {
    let seg = &upto[start..];
    let t_end = seg.last().map_or(t0, |r| r.t_s);
    // The pre-step sample anchors the settling interpolation at t0.
    let samples: Vec<(f64, f64)> = upto[start.saturating_sub(1)..]
        .iter()
        .map(|r| (r.t_s, r.v_o))
        .collect();
    let settle = settling_time(&samples, t0, settings.v_ref, settings.band);
    let overshoot = seg
        .iter()
        .map(|r| (r.v_o - settings.v_ref).abs())
        .fold(0.0, f64::max);

    let window_start = t_end - settings.steady_fraction * (t_end - t0);
    let window: Vec<f64> = seg
        .iter()
        .filter(|r| r.t_s >= window_start)
        .map(|r| r.v_o)
        .collect();
    let (sse, ripple) = if window.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        let mean_abs = window
            .iter()
            .map(|v| (v - settings.v_ref).abs())
            .sum::<f64>()
            / window.len() as f64;
        let hi = window.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = window.iter().copied().fold(f64::INFINITY, f64::min);
        (mean_abs, hi - lo)
    };
    SegmentMetrics {
        segment: index,
        power: seg[0].power,
        t_start: t0,
        t_end,
        settling_time: settle.time,
        unsettled: settle.unsettled,
        overshoot,
        steady_state_error: sse,
        steady_state_ripple: ripple,
    }
}

/// A finished scenario.
#[derive(Debug, Clone)]
pub struct ScenarioRun {
    pub scenario: Scenario,
    pub trace: Vec<TraceRecord>,
    pub metrics: Vec<SegmentMetrics>,
    /// Set when the run ended early (protection trip or voltage collapse).
    pub failure: Option<String>,
    pub total_reward: f64,
}

impl ScenarioRun {
    /// Metrics of the first segment drawing `power`.
    pub fn segment_at(&self, power: f64) -> Option<&SegmentMetrics> {
        self.metrics.iter().find(|m| m.power == power)
    }

    pub fn records(&self) -> Vec<MetricsRecord> {
        self.metrics
            .iter()
            .map(|m| MetricsRecord {
                scenario: self.scenario.name.clone(),
                plant: Some(self.scenario.plant),
                drm: Some(self.scenario.drm),
                seed: Some(self.scenario.seed),
                failure: self.failure.clone(),
                metrics: *m,
            })
            .collect()
    }
}

/// Greedy closed loop of `net` on the scenario. `drm` must be given exactly
/// when the scenario asks for the duty mapping.
pub fn run_scenario(
    net: &QNetwork,
    scenario: &Scenario,
    config: &RunConfig,
    drm: Option<&DrmCoefficients>,
) -> Result<ScenarioRun> {
    scenario.validate()?;
    if scenario.drm != drm.is_some() {
        return Err(Error::invalid(
            "drm",
            format!(
                "scenario `{}` {} a duty map",
                scenario.name,
                if scenario.drm {
                    "needs"
                } else {
                    "must not get"
                }
            ),
        ));
    }
    let model = match scenario.plant {
        PlantKind::Ideal => Model::Ideal(config.plant),
        PlantKind::Surrogate => Model::Surrogate(config.surrogate_params()?),
    };
    let params = config.plant;
    let initial = model.regulated_state(params.v_ref, scenario.profile.power_at(0.0))?;
    let mut plant = Plant::new(model, scenario.profile.clone(), initial, scenario.seed);
    let episode = EpisodeConfig {
        horizon: (scenario.duration / params.dt_ctrl()).round() as usize,
        ..config.episode.clone()
    };
    let mut runtime = drm.map(|c| DrmRuntime::new(*c));
    let outcome = run_loop(
        &mut Greedy(net),
        &mut plant,
        &episode,
        &config.reward,
        &config.actions,
        runtime.as_mut(),
    )?;
    let metrics = segment_metrics(&outcome.trace, &MetricSettings::from_config(config));
    Ok(ScenarioRun {
        scenario: scenario.clone(),
        trace: outcome.trace,
        metrics,
        failure: outcome.aborted,
        total_reward: outcome.total_reward,
    })
}

/// Run scenarios on up to `jobs` threads; results keep the input order.
pub fn run_many(
    net: &QNetwork,
    scenarios: &[Scenario],
    config: &RunConfig,
    drm: Option<&DrmCoefficients>,
    jobs: usize,
) -> Vec<Result<ScenarioRun>> {
    let slots: Vec<Mutex<Option<Result<ScenarioRun>>>> =
        scenarios.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = jobs.clamp(1, scenarios.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::Relaxed);
                let Some(scenario) = scenarios.get(k) else {
                    break;
                };
                let map = if scenario.drm { drm } else { None };
                let result = run_scenario(net, scenario, config, map);
                *slots[k].lock().unwrap() = Some(result);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().unwrap().expect("every scenario ran"))
        .collect()
}

/// One row of the metrics report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub scenario: String,
    pub plant: Option<PlantKind>,
    pub drm: Option<bool>,
    pub seed: Option<u64>,
    pub failure: Option<String>,
    #[serde(flatten)]
    pub metrics: SegmentMetrics,
}

pub fn write_trace_csv<W: Write>(trace: &[TraceRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in trace {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<trace>", e))
}

pub fn read_trace_csv<R: Read>(input: R) -> Result<Vec<TraceRecord>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

pub fn save_trace(trace: &[TraceRecord], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_trace_csv(trace, std::io::BufWriter::new(file))
}

pub fn load_trace(path: &Path) -> Result<Vec<TraceRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_trace_csv(std::io::BufReader::new(file))
}

pub fn save_metrics(records: &[MetricsRecord], path: &Path) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(records)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Plain-text table, one line per segment.
pub fn summary_table(records: &[MetricsRecord]) -> String {
    let mut s = format!(
        "{:<28} {:>3} {:>7} {:>10} {:>9} {:>9} {:>9}  status\n",
        "scenario", "seg", "P (W)", "settle ms", "over V", "ss err V", "ripple V"
    );
    for r in records {
        let m = &r.metrics;
        let settle = if m.unsettled {
            "unsettled".to_string()
        } else {
            format!("{:.3}", m.settling_time * 1e3)
        };
        let _ = writeln!(
            s,
            "{:<28} {:>3} {:>7.0} {:>10} {:>9.3} {:>9.4} {:>9.4}  {}",
            r.scenario,
            m.segment,
            m.power,
            settle,
            m.overshoot,
            m.steady_state_error,
            m.steady_state_ripple,
            r.failure.as_deref().unwrap_or("ok")
        );
    }
    s
}

const PLOT_W: f64 = 900.0;
const PANEL_H: f64 = 260.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 40.0;
const GAP: f64 = 50.0;

struct Axis {
    lo: f64,
    hi: f64,
    px_lo: f64,
    px_hi: f64,
}

impl Axis {
    fn new(lo: f64, hi: f64, px_lo: f64, px_hi: f64) -> Self {
        let (lo, hi) = if hi - lo > 1e-12 {
            (lo, hi)
        } else {
            (lo - 0.5, hi + 0.5)
        };
        Self {
            lo,
            hi,
            px_lo,
            px_hi,
        }
    }

    fn map(&self, x: f64) -> f64 {
        self.px_lo + (x - self.lo) / (self.hi - self.lo) * (self.px_hi - self.px_lo)
    }
}

fn polyline(points: impl Iterator<Item = (f64, f64)>, color: &str) -> String {
    let mut d = String::new();
    for (x, y) in points {
        let _ = write!(d, "{x:.2},{y:.2} ");
    }
    format!(
        "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.2\" points=\"{}\"/>\n",
        d.trim_end()
    )
}

fn panel_frame(svg: &mut String, x: &Axis, y: &Axis, label: &str) {
    let (top, bottom) = (y.px_hi, y.px_lo);
    let _ = writeln!(
        svg,
        "<rect x=\"{:.1}\" y=\"{top:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"none\" stroke=\"#444\"/>",
        x.px_lo,
        x.px_hi - x.px_lo,
        bottom - top
    );
    for k in 0..=4 {
        let v = y.lo + (y.hi - y.lo) * k as f64 / 4.0;
        let py = y.map(v);
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"end\">{v:.1}</text>",
            x.px_lo - 6.0,
            py + 4.0
        );
    }
    let _ = writeln!(
        svg,
        "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\" transform=\"rotate(-90 {:.1} {:.1})\" text-anchor=\"middle\">{label}</text>",
        18.0,
        (top + bottom) / 2.0,
        18.0,
        (top + bottom) / 2.0
    );
}

/// Static figure: output voltage and load current against time, load-step
/// markers and per-segment metric annotations.
pub fn render_svg(
    title: &str,
    trace: &[TraceRecord],
    metrics: &[SegmentMetrics],
    v_ref: f64,
) -> String {
    let height = MARGIN_T + 2.0 * PANEL_H + GAP + 40.0;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{PLOT_W}\" height=\"{height}\" font-family=\"sans-serif\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{:.1}\" y=\"24\" font-size=\"15\" text-anchor=\"middle\">{}</text>\n",
        PLOT_W / 2.0,
        escape(title)
    );
    if trace.is_empty() {
        svg.push_str("</svg>\n");
        return svg;
    }
    let t_end = trace.last().unwrap().t_s;
    let x = Axis::new(0.0, t_end, MARGIN_L, PLOT_W - MARGIN_R);

    let finite = |f: fn(&TraceRecord) -> f64| trace.iter().map(f).filter(|v| v.is_finite());
    let v_lo = finite(|r| r.v_o).fold(v_ref - 2.0, f64::min);
    let v_hi = finite(|r| r.v_o).fold(v_ref + 2.0, f64::max);
    let top1 = MARGIN_T;
    let yv = Axis::new(v_lo, v_hi, top1 + PANEL_H, top1);
    panel_frame(&mut svg, &x, &yv, "v_o (V)");
    let _ = writeln!(
        svg,
        "<line x1=\"{:.1}\" x2=\"{:.1}\" y1=\"{y:.1}\" y2=\"{y:.1}\" stroke=\"#999\" stroke-dasharray=\"4 3\"/>",
        x.px_lo,
        x.px_hi,
        y = yv.map(v_ref)
    );
    svg.push_str(&polyline(
        trace.iter().map(|r| (x.map(r.t_s), yv.map(r.v_o))),
        "#1f5fbf",
    ));

    let top2 = top1 + PANEL_H + GAP;
    let i_lo = finite(|r| r.i_o).fold(f64::INFINITY, f64::min).min(0.0);
    let i_hi = finite(|r| r.i_o).fold(f64::NEG_INFINITY, f64::max).max(1.0);
    let yi = Axis::new(i_lo, i_hi, top2 + PANEL_H, top2);
    panel_frame(&mut svg, &x, &yi, "i_o (A)");
    svg.push_str(&polyline(
        trace.iter().map(|r| (x.map(r.t_s), yi.map(r.i_o))),
        "#c2521b",
    ));

    for m in metrics {
        let px = x.map(m.t_start);
        if m.segment > 0 {
            let _ = writeln!(
                svg,
                "<line x1=\"{px:.1}\" x2=\"{px:.1}\" y1=\"{top1:.1}\" y2=\"{:.1}\" stroke=\"#2a2\" stroke-dasharray=\"2 3\"/>",
                top2 + PANEL_H
            );
        }
        let settle = if m.unsettled {
            "unsettled".into()
        } else {
            format!("{:.2} ms", m.settling_time * 1e3)
        };
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\">{:.0} W | ts {settle} | os {:.2} V | ess {:.3} V</text>",
            px + 4.0,
            top1 + 12.0 + 12.0 * (m.segment % 2) as f64,
            m.power,
            m.overshoot,
            m.steady_state_error
        );
    }
    let _ = writeln!(
        svg,
        "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\" text-anchor=\"middle\">t (s), 0 to {t_end:.3}</text>",
        PLOT_W / 2.0,
        height - 10.0
    );
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Write `traces/<name>.csv` and `plots/<name>.svg` under `dir`.
pub fn write_artifacts(dir: &Path, run: &ScenarioRun, v_ref: f64) -> Result<()> {
    let traces = dir.join("traces");
    let plots = dir.join("plots");
    for d in [&traces, &plots] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    save_trace(
        &run.trace,
        &traces.join(format!("{}.csv", run.scenario.name)),
    )?;
    let svg = render_svg(&run.scenario.name, &run.trace, &run.metrics, v_ref);
    let path = plots.join(format!("{}.svg", run.scenario.name));
    std::fs::write(&path, svg).map_err(|e| Error::io(&path, e))
}
