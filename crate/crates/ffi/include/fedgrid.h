#ifndef FEDGRID_H
#define FEDGRID_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stddef.h>
#include <stdint.h>

/**
 * Result code of every fallible call.
 */
typedef enum FgStatus {
  FG_STATUS_OK = 0,
  FG_STATUS_NULL_POINTER = 1,
  FG_STATUS_INVALID_ARGUMENT = 2,
  /**
   * A buffer length does not match the expected dimension.
   */
  FG_STATUS_LENGTH = 3,
  FG_STATUS_IO = 4,
  /**
   * Checkpoint or configuration could not be parsed.
   */
  FG_STATUS_FORMAT = 5,
  /**
   * The episode has already played all 24 hours.
   */
  FG_STATUS_EPISODE_DONE = 6,
  /**
   * A panic was caught at the boundary.
   */
  FG_STATUS_INTERNAL = 7,
} FgStatus;

/**
 * A trained policy restored from a checkpoint.
 */
typedef struct FgAgent FgAgent;

/**
 * One microgrid environment with its forecast day and noise model.
 */
typedef struct FgEnv FgEnv;

/**
 * Battery parameters. `convention` is 0 for the published efficiency
 * placement and 1 for the lossy one.
 */
typedef struct FgBaParams {
  double a;
  double b;
  double c;
  double p_min;
  double p_max;
  double capacity;
  double eta_ch;
  double eta_dch;
  double delta;
  double soc_min;
  double soc_max;
  uint32_t convention;
} FgBaParams;

/**
 * Conventional generator cost curve and range.
 */
typedef struct FgCgParams {
  double a;
  double b;
  double c;
  double p_min;
  double p_max;
} FgCgParams;

/**
 * Per-step result.
 */
typedef struct FgStepResult {
  double reward;
  /**
   * Signed unbalanced demand in kW.
   */
  double deviation;
  double cost_cg;
  double cost_ba;
  double loss;
  /**
   * Nonzero once the 24th hour has been played.
   */
  uint8_t done;
} FgStepResult;

/**
 * Outcome of the gradient-descent rate check on one seeded quadratic.
 */
typedef struct FgConvergenceReport {
  uint64_t seed;
  /**
   * Largest observed gap over the linear-rate bound; at most 1 when the bound holds.
   */
  double max_ratio;
  double lemma3_violation;
  double descent_violation;
  /**
   * First iteration within tolerance, or -1.
   */
  int64_t iterations_to_eps;
  uint64_t iteration_bound;
  /**
   * Distance between one local step averaged and one step on the weighted objective.
   */
  double fed_residual;
  uint8_t passed;
} FgConvergenceReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * Valid until the next call into the library from the same thread.
 */
const char *fg_last_error(void);

/**
 * Library version, NUL-terminated and static.
 */
const char *fg_version(void);

/**
 * Fills `out_params` with a battery of the given cost curve and power range and
 * default storage characteristics.
 *
 * # Safety
 * `out_params` must be null or point to writable memory for one `FgBaParams`.
 */
enum FgStatus fg_ba_params_default(double a,
                                   double b,
                                   double c,
                                   double p_min,
                                   double p_max,
                                   struct FgBaParams *out_params);

/**
 * Generator cost at power `p`.
 *
 * # Safety
 * `params` and `out_cost` must be null or valid pointers.
 */
enum FgStatus fg_cg_cost(const struct FgCgParams *params, double p, double *out_cost);

/**
 * Battery cost at power `p` (positive discharges) and state of charge `soc`.
 *
 * # Safety
 * `params` and `out_cost` must be null or valid pointers.
 */
enum FgStatus fg_ba_cost(const struct FgBaParams *params, double p, double soc, double *out_cost);

/**
 * One feasible battery step: the next SOC and the power actually applied.
 *
 * # Safety
 * All pointers must be null or valid.
 */
enum FgStatus fg_soc_step(const struct FgBaParams *params,
                          double soc,
                          double p,
                          double dt,
                          double *out_soc,
                          double *out_applied);

/**
 * Weighted coordinate-wise average of `n_vectors` row-major vectors of
 * length `dim`. A null `weights` means uniform weights.
 *
 * # Safety
 * `vectors` must hold `n_vectors * dim` values, `weights` (if not null)
 * `n_vectors`, and `out_values` `dim`.
 */
enum FgStatus fg_aggregate(const double *vectors,
                           size_t n_vectors,
                           size_t dim,
                           const double *weights,
                           double *out_values);

/**
 * Creates the environment of microgrid `mg` (0-based). With a null
 * `config_path` the bundled three-microgrid system is used, otherwise the
 * TOML run configuration at that path.
 *
 * # Safety
 * `config_path` must be null or a NUL-terminated string; `out_env` must be
 * a valid pointer.
 */
enum FgStatus fg_env_new(const char *config_path, size_t mg, struct FgEnv **out_env);

/**
 * Releases an environment. Null is ignored.
 *
 * # Safety
 * `env` must be null or a handle from `fg_env_new` not yet freed.
 */
void fg_env_free(struct FgEnv *env);

/**
 * Observation length.
 *
 * # Safety
 * `env` must be null or a live handle.
 */
size_t fg_env_obs_dim(const struct FgEnv *env);

/**
 * Action length (generators first, then batteries).
 *
 * # Safety
 * `env` must be null or a live handle.
 */
size_t fg_env_action_dim(const struct FgEnv *env);

/**
 * Starts a new day. With `noisy` nonzero the forecasts are perturbed by the
 * configured noise seeded with `seed`; otherwise the forecast day is
 * played as is. Writes the first observation.
 *
 * # Safety
 * `env` must be a live handle and `out_obs` hold `obs_len` values.
 */
enum FgStatus fg_env_reset(struct FgEnv *env,
                           uint8_t noisy,
                           uint64_t seed,
                           double *out_obs,
                           size_t obs_len);

/**
 * Applies setpoints in kW (clipped to device and SOC limits) and writes the
 * next observation.
 *
 * # Safety
 * `env` must be a live handle, `action` hold `action_len` values, `out_obs`
 * `obs_len` values and `out_result` one `FgStepResult`.
 */
enum FgStatus fg_env_step(struct FgEnv *env,
                          const double *action,
                          size_t action_len,
                          double *out_obs,
                          size_t obs_len,
                          struct FgStepResult *out_result);

/**
 * Maps a normalized action in `[-1, 1]` onto the device power bounds.
 *
 * # Safety
 * `env` must be a live handle; both buffers hold `len` values.
 */
enum FgStatus fg_env_denormalize(const struct FgEnv *env,
                                 const double *normalized,
                                 double *out_kw,
                                 size_t len);

/**
 * Loads an agent checkpoint written by the `fedgrid train` command.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out_agent` a valid pointer.
 */
enum FgStatus fg_agent_load(const char *path, struct FgAgent **out_agent);

/**
 * Releases an agent. Null is ignored.
 *
 * # Safety
 * `agent` must be null or a handle from `fg_agent_load` not yet freed.
 */
void fg_agent_free(struct FgAgent *agent);

/**
 * Observation length the agent expects.
 *
 * # Safety
 * `agent` must be null or a live handle.
 */
size_t fg_agent_obs_dim(const struct FgAgent *agent);

/**
 * Action length the agent produces.
 *
 * # Safety
 * `agent` must be null or a live handle.
 */
size_t fg_agent_action_dim(const struct FgAgent *agent);

/**
 * Deterministic (mean) action in `[-1, 1]` for one observation.
 *
 * # Safety
 * `agent` must be a live handle, `obs` hold `obs_len` values and
 * `out_action` `action_len` values.
 */
enum FgStatus fg_agent_act(const struct FgAgent *agent,
                           const double *obs,
                           size_t obs_len,
                           double *out_action,
                           size_t action_len);

/**
 * Runs the convergence check on seeds `0..n_seeds` and writes one report
 * per seed.
 *
 * # Safety
 * `out_reports` must hold `n_seeds` reports.
 */
enum FgStatus fg_convergence_check(uint64_t n_seeds,
                                   size_t dim,
                                   double mu,
                                   double l,
                                   size_t k_max,
                                   size_t clients,
                                   struct FgConvergenceReport *out_reports);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FEDGRID_H */
