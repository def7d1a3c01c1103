#ifndef BUCKDRM_H
#define BUCKDRM_H

/* Generated by cbindgen from crates/ffi/src. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum BuckdrmStatus {
  BUCKDRM_STATUS_OK = 0,
  BUCKDRM_STATUS_NULL_POINTER = 1,
  BUCKDRM_STATUS_INVALID_ARGUMENT = 2,
  BUCKDRM_STATUS_IO = 3,
  BUCKDRM_STATUS_PARSE = 4,
  BUCKDRM_STATUS_VOLTAGE_COLLAPSE = 5,
  BUCKDRM_STATUS_NUMERICAL = 6,
  BUCKDRM_STATUS_PANIC = 7,
} BuckdrmStatus;

/**
 * Opaque trained Q-network.
 */
typedef struct BuckdrmAgent BuckdrmAgent;

/**
 * Opaque closed-loop controller: observation history, greedy policy,
 * action decoding and an optional duty map.
 */
typedef struct BuckdrmController BuckdrmController;

/**
 * Opaque fitted duty map.
 */
typedef struct BuckdrmDrm BuckdrmDrm;

/**
 * Opaque converter instance.
 */
typedef struct BuckdrmPlant BuckdrmPlant;

/**
 * Circuit constants, mirrored from the core crate.
 */
typedef struct BuckdrmPlantParams {
  double v_in;
  double inductance;
  double capacitance;
  /**
   * Shunt resistance across the output; `INFINITY` for a pure CPL.
   */
  double resistance;
  double f_sw;
  double v_ref;
  double v_min_cpl;
  uint32_t substeps;
} BuckdrmPlantParams;

/**
 * One control period as seen by a caller.
 */
typedef struct BuckdrmStepReport {
  double t;
  double i_l;
  double v_o;
  /**
   * True load current.
   */
  double i_o;
  /**
   * Sensed output voltage and load current.
   */
  double v_meas;
  double i_meas;
  double power;
  /**
   * Duty applied after clamping to [0, 1].
   */
  double duty;
  bool saturated;
} BuckdrmStepReport;

/**
 * Duty command for one control period.
 */
typedef struct BuckdrmCommand {
  size_t action;
  /**
   * Duty decoded from the action.
   */
  double d_sim;
  /**
   * Duty to actuate, after the map when one is attached.
   */
  double d_real;
  bool saturated;
} BuckdrmCommand;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *buckdrm_version(void);

/**
 * Copy the calling thread's last error message into `buf` (truncated and
 * always NUL-terminated when `len > 0`). Returns the full message length in
 * bytes without the terminator, or 0 when no error was recorded.
 *
 * # Safety
 * `buf` must be NULL or point to at least `len` writable bytes.
 */
size_t buckdrm_last_error_message(char *buf, size_t len);

/**
 * Write the built-in circuit constants to `out`.
 *
 * # Safety
 * `out` must be NULL or valid for writes.
 */
enum BuckdrmStatus buckdrm_plant_params_default(struct BuckdrmPlantParams *out);

/**
 * Create a plant in steady state with the output held at `v_ref` under the
 * constant load `power`. `surrogate_preset` selects the mismatched
 * model (`"default"`, `"ideal"`, `"none"`); NULL gives the ideal model.
 *
 * # Safety
 * `params` and `out` must be valid; `surrogate_preset` NULL or a C string.
 */
enum BuckdrmStatus buckdrm_plant_new(const struct BuckdrmPlantParams *params,
                                     const char *surrogate_preset,
                                     double power,
                                     uint64_t seed,
                                     struct BuckdrmPlant **out);

/**
 * Change the CPL power from the plant's present time on.
 *
 * # Safety
 * `plant` must be a live handle.
 */
enum BuckdrmStatus buckdrm_plant_set_power(struct BuckdrmPlant *plant, double power);

/**
 * Hold `duty` for one control period.
 *
 * # Safety
 * `plant` must be a live handle and `out` NULL or valid for writes.
 */
enum BuckdrmStatus buckdrm_plant_step(struct BuckdrmPlant *plant,
                                      double duty,
                                      struct BuckdrmStepReport *out);

/**
 * Sample the sensors at the present state (noisy on the surrogate).
 *
 * # Safety
 * `plant` must be a live handle; `v_meas` and `i_meas` valid for writes.
 */
enum BuckdrmStatus buckdrm_plant_measure(struct BuckdrmPlant *plant,
                                         double *v_meas,
                                         double *i_meas);

/**
 * Present inductor current, output voltage and time. Any output may be NULL.
 *
 * # Safety
 * `plant` must be a live handle; non-NULL outputs valid for writes.
 */
enum BuckdrmStatus buckdrm_plant_state(const struct BuckdrmPlant *plant,
                                       double *i_l,
                                       double *v_o,
                                       double *t);

/**
 * # Safety
 * `plant` must be NULL or a handle not yet freed.
 */
void buckdrm_plant_free(struct BuckdrmPlant *plant);

/**
 * Load a checkpoint file.
 *
 * # Safety
 * `path` must be a C string and `out` valid for writes.
 */
enum BuckdrmStatus buckdrm_agent_load(const char *path, struct BuckdrmAgent **out);

/**
 * Parse a checkpoint from memory.
 *
 * # Safety
 * `bytes` must point to `len` readable bytes and `out` be valid for writes.
 */
enum BuckdrmStatus buckdrm_agent_from_json(const uint8_t *bytes,
                                           size_t len,
                                           struct BuckdrmAgent **out);

/**
 * Number of discrete actions, 0 for a NULL handle.
 *
 * # Safety
 * `agent` must be NULL or a live handle.
 */
size_t buckdrm_agent_num_actions(const struct BuckdrmAgent *agent);

/**
 * Q-values of a raw observation `(v_o, v_o_del, dv_o/dt, e, e_del, de/dt)`.
 *
 * # Safety
 * `obs` must point to 6 doubles, `q_out` to `q_len` writable doubles.
 */
enum BuckdrmStatus buckdrm_agent_q_values(const struct BuckdrmAgent *agent,
                                          const double *obs,
                                          double *q_out,
                                          size_t q_len);

/**
 * Greedy action (lowest index on ties).
 *
 * # Safety
 * `obs` must point to 6 doubles and `action` be valid for writes.
 */
enum BuckdrmStatus buckdrm_agent_act(const struct BuckdrmAgent *agent,
                                     const double *obs,
                                     size_t *action);

/**
 * # Safety
 * `agent` must be NULL or a handle not yet freed.
 */
void buckdrm_agent_free(struct BuckdrmAgent *agent);

/**
 * Build a map from explicit coefficients; `a` must be positive.
 *
 * # Safety
 * `out` must be valid for writes.
 */
enum BuckdrmStatus buckdrm_drm_new(double a, double b, double c, struct BuckdrmDrm **out);

/**
 * Load a duty map artifact written by `buckdrm drm-fit`.
 *
 * # Safety
 * `path` must be a C string and `out` valid for writes.
 */
enum BuckdrmStatus buckdrm_drm_load(const char *path, struct BuckdrmDrm **out);

/**
 * Read back `(a, b, c)`. Any output may be NULL.
 *
 * # Safety
 * `drm` must be a live handle; non-NULL outputs valid for writes.
 */
enum BuckdrmStatus buckdrm_drm_coefficients(const struct BuckdrmDrm *drm,
                                            double *a,
                                            double *b,
                                            double *c);

/**
 * `d_real = clamp(a d_sim + b i_o + c, 0, 1)`.
 *
 * # Safety
 * `drm` must be a live handle, `d_real` valid for writes and `saturated`
 * NULL or valid for writes.
 */
enum BuckdrmStatus buckdrm_drm_apply(const struct BuckdrmDrm *drm,
                                     double d_sim,
                                     double i_o,
                                     double *d_real,
                                     bool *saturated);

/**
 * # Safety
 * `drm` must be NULL or a handle not yet freed.
 */
void buckdrm_drm_free(struct BuckdrmDrm *drm);

/**
 * Combine an agent with the action table and timing of a run configuration
 * (`config_toml` NULL for the defaults) and an optional duty map. The
 * handles are copied; they may be freed afterwards.
 *
 * # Safety
 * `agent` must be a live handle, `drm` NULL or live, `config_toml` NULL or a
 * C string, `out` valid for writes.
 */
enum BuckdrmStatus buckdrm_controller_new(const struct BuckdrmAgent *agent,
                                          const struct BuckdrmDrm *drm,
                                          const char *config_toml,
                                          struct BuckdrmController **out);

/**
 * Feed the latest sensed voltage and load current; get the next duty.
 *
 * # Safety
 * `controller` must be a live handle and `out` valid for writes.
 */
enum BuckdrmStatus buckdrm_controller_step(struct BuckdrmController *controller,
                                           double v_meas,
                                           double i_meas,
                                           struct BuckdrmCommand *out);

/**
 * Forget the observation history and the filtered current.
 *
 * # Safety
 * `controller` must be a live handle.
 */
enum BuckdrmStatus buckdrm_controller_reset(struct BuckdrmController *controller);

/**
 * # Safety
 * `controller` must be NULL or a handle not yet freed.
 */
void buckdrm_controller_free(struct BuckdrmController *controller);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BUCKDRM_H */
