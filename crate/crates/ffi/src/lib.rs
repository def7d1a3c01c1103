//! C ABI over the `buckdrm` core.
//!
//! Objects are opaque handles created by `*_new`/`*_load` functions and
//! released with the matching `*_free`. Every fallible call returns a
//! [`BuckdrmStatus`]; on failure the message is kept per thread and can be
//! read with [`buckdrm_last_error_message`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use buckdrm::config::RunConfig;
use buckdrm::control::{ActionTable, Observation, OBS_DIM};
use buckdrm::dqn::{argmax, Checkpoint, QNetwork};
use buckdrm::plant::{CplProfile, Mismatch, Model, Plant, PlantParams, SurrogateParams};
use buckdrm::transfer::{apply_drm, DrmArtifact, DrmCoefficients, DrmRuntime};
use buckdrm::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BuckdrmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    VoltageCollapse = 5,
    Numerical = 6,
    Panic = 7,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

struct Failure(BuckdrmStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::VoltageCollapse { .. } => BuckdrmStatus::VoltageCollapse,
            Error::Io { .. } => BuckdrmStatus::Io,
            Error::Json(_) | Error::Csv(_) | Error::Checkpoint(_) => BuckdrmStatus::Parse,
            Error::Invalid { .. } | Error::InsufficientReplay { .. } | Error::EmptyMemory => {
                BuckdrmStatus::InvalidArgument
            }
            _ => BuckdrmStatus::Numerical,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(BuckdrmStatus::NullPointer, format!("{what} is NULL"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(BuckdrmStatus::InvalidArgument, msg.into())
}

/// Run `f`, translating errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> BuckdrmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => BuckdrmStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            BuckdrmStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if ptr.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn out_arg<'a, T>(ptr: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    ptr.as_mut().ok_or_else(|| null(what))
}

unsafe fn handle<'a, T>(ptr: *const T, what: &str) -> Result<&'a T, Failure> {
    ptr.as_ref().ok_or_else(|| null(what))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn buckdrm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copy the calling thread's last error message into `buf` (truncated and
/// always NUL-terminated when `len > 0`). Returns the full message length in
/// bytes without the terminator, or 0 when no error was recorded.
///
/// # Safety
/// `buf` must be NULL or point to at least `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn buckdrm_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else { return 0 };
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Circuit constants, mirrored from the core crate.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct BuckdrmPlantParams {
    pub v_in: f64,
    pub inductance: f64,
    pub capacitance: f64,
    /// Shunt resistance across the output; `INFINITY` for a pure CPL.
    pub resistance: f64,
    pub f_sw: f64,
    pub v_ref: f64,
    pub v_min_cpl: f64,
    pub substeps: u32,
}

impl From<PlantParams> for BuckdrmPlantParams {
    fn from(p: PlantParams) -> Self {
        Self {
            v_in: p.v_in,
            inductance: p.inductance,
            capacitance: p.capacitance,
            resistance: p.resistance,
            f_sw: p.f_sw,
            v_ref: p.v_ref,
            v_min_cpl: p.v_min_cpl,
            substeps: p.substeps,
        }
    }
}

impl From<BuckdrmPlantParams> for PlantParams {
    fn from(p: BuckdrmPlantParams) -> Self {
        Self {
            v_in: p.v_in,
            inductance: p.inductance,
            capacitance: p.capacitance,
            resistance: p.resistance,
            f_sw: p.f_sw,
            v_ref: p.v_ref,
            v_min_cpl: p.v_min_cpl,
            substeps: p.substeps,
        }
    }
}

/// One control period as seen by a caller.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct BuckdrmStepReport {
    pub t: f64,
    pub i_l: f64,
    pub v_o: f64,
    /// True load current.
    pub i_o: f64,
    /// Sensed output voltage and load current.
    pub v_meas: f64,
    pub i_meas: f64,
    pub power: f64,
    /// Duty applied after clamping to [0, 1].
    pub duty: f64,
    pub saturated: bool,
}

/// Opaque converter instance.
pub struct BuckdrmPlant {
    inner: Plant,
}

/// Write the built-in circuit constants to `out`.
///
/// # Safety
/// `out` must be NULL or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn buckdrm_plant_params_default(
    out: *mut BuckdrmPlantParams,
) -> BuckdrmStatus {
    guard(|| {
        *out_arg(out, "out")? = PlantParams::default().into();
        Ok(())
    })
}

/// Create a plant in steady state with the output held at `v_ref` under the
/// constant load `power`. `surrogate_preset` selects the mismatched
/// model (`"default"`, `"ideal"`, `"none"`); NULL gives the ideal model.
///
/// # Safety
/// `params` and `out` must be valid; `surrogate_preset` NULL or a C string.
#[no_mangle]
pub unsafe extern "C" fn buckdrm_plant_new(
    params: *const BuckdrmPlantParams,
    surrogate_preset: *const c_char,
    power: f64,
    seed: u64,
    out: *mut *mut BuckdrmPlant,
) -> BuckdrmStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = std::ptr::null_mut();
        let params: PlantParams = (*handle(params, "params")?).into();
        params.validate("params")?;
        let model = if surrogate_preset.is_null() {
            Model::Ideal(params)
        } else {
            let name = str_arg(surrogate_preset, "surrogate_preset")?;
            let mismatch = Mismatch::preset(name)
                .ok_or_else(|| invalid(format!("unknown surrogate preset `{name}`")))?;
            Model::Surrogate(SurrogateParams::new(params, mismatch))
        };
        let profile = CplProfile::new(vec![buckdrm::plant::LoadStep { at: 0.0, power }])?;
        let initial = model.regulated_state(params.v_ref, power)?;
        *out = Box::into_raw(Box::new(BuckdrmPlant {
            inner: Plant::new(model, profile, initial, seed),
        }));
        Ok(())
    })
}

/// Change the CPL power from the plant's present time on.
///
/// # Safety
/// `plant` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn buckdrm_plant_set_power(
    plant: *mut BuckdrmPlant,
    power: f64,
) -> BuckdrmStatus {
    guard(|| {
        let plant = out_arg(plant, "plant")?;
        let t = plant.inner.state().t;
        let profile = CplProfile::new(vec![buckdrm::plant::LoadStep { at: t, power }])?;
        plant.inner.set_profile(profile);
        Ok(())
    })
}

/// Hold `duty` for one control period.
///
/// # Safety
/// `plant` must be a live handle and `out` NULL or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn buckdrm_plant_step(
    plant: *mut BuckdrmPlant,
    duty: f64,
    out: *mut BuckdrmStepReport,
) -> BuckdrmStatus {
    guard(|| {
        let plant = out_arg(plant, "plant")?;
        let r = plant.inner.advance(duty)?;
        if let Some(out) = out.as_mut() {
            *out = BuckdrmStepReport {
                t: r.state.t,
                i_l: r.state.i_l,
                v_o: r.state.v_o,
                i_o: r.i_o,
                v_meas: r.measurement.v_o,
                i_meas: r.measurement.i_o,
                power: r.power,
                duty: r.duty,
                saturated: r.saturated,
            };
        }
        Ok(())
    })
}

/// Sample the sensors at the present state (noisy on the surrogate).
///
/// # Safety
/// `plant` must be a live handle; `v_meas` and `i_meas` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn buckdrm_plant_measure(
    plant: *mut BuckdrmPlant,
    v_meas: *mut f64,
    i_meas: *mut f64,
) -> BuckdrmStatus {
    guard(|| {
        let plant = out_arg(plant, "plant")?;
        let v_meas = out_arg(v_meas, "v_meas")?;
        let i_meas = out_arg(i_meas, "i_meas")?;
        let m = plant.inner.measure();
        *v_meas = m.v_o;
        *i_meas = m.i_o;
        Ok(())
    })
}

/// Present inductor current, output voltage and time. Any output may be NULL.
///
/// # Safety
/// `plant` must be a live handle; non-NULL outputs valid for writes.
#[no_mangle]
pub unsafe extern "C" fn buckdrm_plant_state(
    plant: *const BuckdrmPlant,
    i_l: *mut f64,
    v_o: *mut f64,
    t: *mut f64,
) -> BuckdrmStatus {
    guard(|| {
        let s = handle(plant, "plant")?.inner.state();
        for (ptr, value) in [(i_l, s.i_l), (v_o, s.v_o), (t, s.t)] {
            if let Some(p) = ptr.as_mut() {
                *p = value;
            }
        }
        Ok(())
    })
}

/// # Safety
/// `plant` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn buckdrm_plant_free(plant: *mut BuckdrmPlant) {
    if !plant.is_null() {
        drop(Box::from_raw(plant));
    }
}

/// Opaque trained Q-network.
pub struct BuckdrmAgent {
    net: QNetwork,
}

fn agent_from_bytes(bytes: &[u8]) -> Result<BuckdrmAgent, Failure> {
    let net = Checkpoint::from_bytes(bytes)?.to_network()?;
    if net.input_dim() != OBS_DIM {
        return Err(invalid(format!(
            "checkpoint expects {} inputs, not {OBS_DIM}",
            net.input_dim()
        )));
    }
    Ok(BuckdrmAgent { net })
}

/// Load a checkpoint file.
///
/// # Safety
/// `path` must be a C string and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn buckdrm_agent_load(
    path: *const c_char,
    out: *mut *mut BuckdrmAgent,
) -> BuckdrmStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = std::ptr::null_mut();
        let path = Path::new(str_arg(path, "path")?);
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        *out = Box::into_raw(Box::new(agent_from_bytes(&bytes)?));
        Ok(())
    })
}

/// Parse a checkpoint from memory.
///
/// # Safety
/// `bytes` must point to `len` readable bytes and `out` be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn buckdrm_agent_from_json(
    bytes: *const u8,
    len: usize,
    out: *mut *mut BuckdrmAgent,
) -> BuckdrmStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = std::ptr::null_mut();
        if bytes.is_null() {
            return Err(null("bytes"));
        }
        let slice = std::slice::from_raw_parts(bytes, len);
        *out = Box::into_raw(Box::new(agent_from_bytes(slice)?));
        Ok(())
    })
}

/// Number of discrete actions, 0 for a NULL handle.
///
/// # Safety
/// `agent` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn buckdrm_agent_num_actions(agent: *const BuckdrmAgent) -> usize {
    agent.as_ref().map_or(0, |a| a.net.output_dim())
}

/// Q-values of a raw observation `(v_o, v_o_del, dv_o/dt, e, e_del, de/dt)`.
///
/// # Safety
/// `obs` must point to 6 doubles, `q_out` to `q_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn buckdrm_agent_q_values(
    agent: *const BuckdrmAgent,
    obs: *const f64,
    q_out: *mut f64,
    q_len: usize,
) -> BuckdrmStatus {
    guard(|| {
        let agent = handle(agent, "agent")?;
        if obs.is_null() {
            return Err(null("obs"));
        }
        if q_out.is_null() {
            return Err(null("q_out"));
        }
        let n = agent.net.output_dim();
        if q_len < n {
            return Err(invalid(format!(
                "q_len {q_len} is smaller than the {n} actions"
            )));
        }
        let q = agent.net.forward(std::slice::from_raw_parts(obs, OBS_DIM));
        std::slice::from_raw_parts_mut(q_out, n).copy_from_slice(&q);
        Ok(())
    })
}

/// Greedy action (lowest index on ties).
///
/// # Safety
/// `obs` must point to 6 doubles and `action` be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn buckdrm_agent_act(
    agent: *const BuckdrmAgent,
    obs: *const f64,
    action: *mut usize,
) -> BuckdrmStatus {
    guard(|| {
        let agent = handle(agent, "agent")?;
        let action = out_arg(action, "action")?;
        if obs.is_null() {
            return Err(null("obs"));
        }
        *action = argmax(&agent.net.forward(std::slice::from_raw_parts(obs, OBS_DIM)));
        Ok(())
    })
}

/// # Safety
/// `agent` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn buckdrm_agent_free(agent: *mut BuckdrmAgent) {
    if !agent.is_null() {
        drop(Box::from_raw(agent));
    }
}

/// Opaque fitted duty map.
pub struct BuckdrmDrm {
    coeffs: DrmCoefficients,
}

/// Build a map from explicit coefficients; `a` must be positive.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn buckdrm_drm_new(
    a: f64,
    b: f64,
    c: f64,
    out: *mut *mut BuckdrmDrm,
) -> BuckdrmStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = std::ptr::null_mut();
        if !(a > 0.0 && a.is_finite() && b.is_finite() && c.is_finite()) {
            return Err(invalid(format!(
                "need finite coefficients with a > 0, got ({a}, {b}, {c})"
            )));
        }
        let coeffs = DrmCoefficients {
            a,
            b,
            c,
            ..DrmCoefficients::IDENTITY
        };
        *out = Box::into_raw(Box::new(BuckdrmDrm { coeffs }));
        Ok(())
    })
}

/// Load a duty map artifact written by `buckdrm drm-fit`.
///
/// # Safety
/// `path` must be a C string and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn buckdrm_drm_load(
    path: *const c_char,
    out: *mut *mut BuckdrmDrm,
) -> BuckdrmStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = std::ptr::null_mut();
        let artifact = DrmArtifact::load(Path::new(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(BuckdrmDrm {
            coeffs: artifact.coefficients(),
        }));
        Ok(())
    })
}

/// Read back `(a, b, c)`. Any output may be NULL.
///
/// # Safety
/// `drm` must be a live handle; non-NULL outputs valid for writes.
#[no_mangle]
pub unsafe extern "C" fn buckdrm_drm_coefficients(
    drm: *const BuckdrmDrm,
    a: *mut f64,
    b: *mut f64,
    c: *mut f64,
) -> BuckdrmStatus {
    guard(|| {
        let k = handle(drm, "drm")?.coeffs;
        for (ptr, value) in [(a, k.a), (b, k.b), (c, k.c)] {
            if let Some(p) = ptr.as_mut() {
                *p = value;
            }
        }
        Ok(())
    })
}

/// `d_real = clamp(a d_sim + b i_o + c, 0, 1)`.
///
/// # Safety
/// `drm` must be a live handle, `d_real` valid for writes and `saturated`
/// NULL or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn buckdrm_drm_apply(
    drm: *const BuckdrmDrm,
    d_sim: f64,
    i_o: f64,
    d_real: *mut f64,
    saturated: *mut bool,
) -> BuckdrmStatus {
    guard(|| {
        let drm = handle(drm, "drm")?;
        let d_real = out_arg(d_real, "d_real")?;
        let (d, sat) = apply_drm(d_sim, i_o, &drm.coeffs);
        *d_real = d;
        if let Some(s) = saturated.as_mut() {
            *s = sat;
        }
        Ok(())
    })
}

/// # Safety
/// `drm` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn buckdrm_drm_free(drm: *mut BuckdrmDrm) {
    if !drm.is_null() {
        drop(Box::from_raw(drm));
    }
}

/// Duty command for one control period.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct BuckdrmCommand {
    pub action: usize,
    /// Duty decoded from the action.
    pub d_sim: f64,
    /// Duty to actuate, after the map when one is attached.
    pub d_real: f64,
    pub saturated: bool,
}

/// Opaque closed-loop controller: observation history, greedy policy,
/// action decoding and an optional duty map.
pub struct BuckdrmController {
    net: QNetwork,
    table: ActionTable,
    drm: Option<DrmRuntime>,
    v_ref: f64,
    dt: f64,
    v_prev: Option<f64>,
}

/// Combine an agent with the action table and timing of a run configuration
/// (`config_toml` NULL for the defaults) and an optional duty map. The
/// handles are copied; they may be freed afterwards.
///
/// # Safety
/// `agent` must be a live handle, `drm` NULL or live, `config_toml` NULL or a
/// C string, `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn buckdrm_controller_new(
    agent: *const BuckdrmAgent,
    drm: *const BuckdrmDrm,
    config_toml: *const c_char,
    out: *mut *mut BuckdrmController,
) -> BuckdrmStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = std::ptr::null_mut();
        let agent = handle(agent, "agent")?;
        let config = if config_toml.is_null() {
            RunConfig::default()
        } else {
            RunConfig::from_toml_str(str_arg(config_toml, "config_toml")?)?
        };
        if agent.net.output_dim() != config.actions.len() {
            return Err(invalid(format!(
                "agent has {} actions, the action table {}",
                agent.net.output_dim(),
                config.actions.len()
            )));
        }
        *out = Box::into_raw(Box::new(BuckdrmController {
            net: agent.net.clone(),
            table: config.actions,
            drm: drm.as_ref().map(|d| DrmRuntime::new(d.coeffs)),
            v_ref: config.plant.v_ref,
            dt: config.plant.dt_ctrl(),
            v_prev: None,
        }));
        Ok(())
    })
}

/// Feed the latest sensed voltage and load current; get the next duty.
///
/// # Safety
/// `controller` must be a live handle and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn buckdrm_controller_step(
    controller: *mut BuckdrmController,
    v_meas: f64,
    i_meas: f64,
    out: *mut BuckdrmCommand,
) -> BuckdrmStatus {
    guard(|| {
        let ctl = out_arg(controller, "controller")?;
        let out = out_arg(out, "out")?;
        if !(v_meas.is_finite() && i_meas.is_finite()) {
            return Err(invalid("measurements must be finite"));
        }
        let obs = Observation::observe(ctl.v_prev, v_meas, ctl.v_ref, ctl.dt);
        ctl.v_prev = Some(v_meas);
        let action = argmax(&ctl.net.forward(&obs.to_array()));
        let (d_sim, sat_sim) = ctl.table.decode(action, obs.e);
        let (d_real, sat_real) = match ctl.drm.as_mut() {
            Some(map) => map.map(d_sim, i_meas, ctl.dt),
            None => (d_sim, false),
        };
        *out = BuckdrmCommand {
            action,
            d_sim,
            d_real,
            saturated: sat_sim || sat_real,
        };
        Ok(())
    })
}

/// Forget the observation history and the filtered current.
///
/// # Safety
/// `controller` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn buckdrm_controller_reset(
    controller: *mut BuckdrmController,
) -> BuckdrmStatus {
    guard(|| {
        let ctl = out_arg(controller, "controller")?;
        ctl.v_prev = None;
        if let Some(map) = ctl.drm.as_mut() {
            *map = DrmRuntime::new(*map.coefficients());
        }
        Ok(())
    })
}

/// # Safety
/// `controller` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn buckdrm_controller_free(controller: *mut BuckdrmController) {
    if !controller.is_null() {
        drop(Box::from_raw(controller));
    }
}
