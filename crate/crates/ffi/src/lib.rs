//! C ABI over the `fedgrid` core.
//!
//! Every fallible function returns an `FgStatus`. On failure a message is
//! kept per thread and can be read with `fg_last_error`. Environments and
//! agents are opaque handles created by `*_new`/`*_load` and released with
//! the matching `*_free`. Arrays are passed as pointer plus length; output
//! buffers must be at least as long as the length the caller passes.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use fedgrid::config::RunConfig;
use fedgrid::convergence::{run_lab, LabConfig};
use fedgrid::env::{MgAction, MgEnv};
use fedgrid::federation::{aggregate, AggregationWeights};
use fedgrid::grid::{self, BaParams, CgParams, EfficiencyConvention};
use fedgrid::nn::{unflatten, Checkpoint, ParamVector};
use fedgrid::ppo::{PpoAgent, PpoHyper};
use fedgrid::scenario::{NoiseModel, ScenarioDay};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    /// A buffer length does not match the expected dimension.
    Length = 3,
    Io = 4,
    /// Checkpoint or configuration could not be parsed.
    Format = 5,
    /// The episode has already played all 24 hours.
    EpisodeDone = 6,
    /// A panic was caught at the boundary.
    Internal = 7,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Failure(FgStatus, String);

type FfiResult<T = ()> = Result<T, Failure>;

fn fail<T>(status: FgStatus, msg: impl Into<String>) -> FfiResult<T> {
    Err(Failure(status, msg.into()))
}

fn invalid(e: impl std::fmt::Display) -> Failure {
    Failure(FgStatus::InvalidArgument, e.to_string())
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn run(f: impl FnOnce() -> FfiResult) -> FgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            FgStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("panic inside fedgrid");
            FgStatus::Internal
        }
    }
}

unsafe fn slice<'a>(p: *const f64, len: usize, name: &str) -> FfiResult<&'a [f64]> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return fail(FgStatus::NullPointer, format!("{name} is null"));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a>(p: *mut f64, len: usize, name: &str) -> FfiResult<&'a mut [f64]> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return fail(FgStatus::NullPointer, format!("{name} is null"));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn out<'a, T>(p: *mut T, name: &str) -> FfiResult<&'a mut T> {
    p.as_mut()
        .ok_or_else(|| Failure(FgStatus::NullPointer, format!("{name} is null")))
}

unsafe fn handle<'a, T>(p: *const T, name: &str) -> FfiResult<&'a T> {
    p.as_ref()
        .ok_or_else(|| Failure(FgStatus::NullPointer, format!("{name} is null")))
}

unsafe fn path_arg(p: *const c_char) -> FfiResult<&'static Path> {
    if p.is_null() {
        return fail(FgStatus::NullPointer, "path is null");
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid("path is not UTF-8"))?;
    Ok(Path::new(s))
}

fn check_len(got: usize, expected: usize, name: &str) -> FfiResult {
    if got == expected {
        Ok(())
    } else {
        fail(
            FgStatus::Length,
            format!("{name} has length {got}, expected {expected}"),
        )
    }
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn fg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version, NUL-terminated and static.
#[no_mangle]
pub extern "C" fn fg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Conventional generator cost curve and range.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct FgCgParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub p_min: f64,
    pub p_max: f64,
}

/// Battery parameters. `convention` is 0 for the published efficiency
/// placement and 1 for the lossy one.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct FgBaParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub p_min: f64,
    pub p_max: f64,
    pub capacity: f64,
    pub eta_ch: f64,
    pub eta_dch: f64,
    pub delta: f64,
    pub soc_min: f64,
    pub soc_max: f64,
    pub convention: u32,
}

impl From<BaParams> for FgBaParams {
    fn from(b: BaParams) -> Self {
        Self {
            a: b.a,
            b: b.b,
            c: b.c,
            p_min: b.p_min,
            p_max: b.p_max,
            capacity: b.capacity,
            eta_ch: b.eta_ch,
            eta_dch: b.eta_dch,
            delta: b.delta,
            soc_min: b.soc_min,
            soc_max: b.soc_max,
            convention: match b.convention {
                EfficiencyConvention::AsPrinted => 0,
                EfficiencyConvention::Physical => 1,
            },
        }
    }
}

fn ba_params(b: FgBaParams) -> FfiResult<BaParams> {
    let convention = match b.convention {
        0 => EfficiencyConvention::AsPrinted,
        1 => EfficiencyConvention::Physical,
        n => {
            return fail(
                FgStatus::InvalidArgument,
                format!("unknown efficiency convention {n}"),
            )
        }
    };
    let params = BaParams {
        a: b.a,
        b: b.b,
        c: b.c,
        p_min: b.p_min,
        p_max: b.p_max,
        capacity: b.capacity,
        eta_ch: b.eta_ch,
        eta_dch: b.eta_dch,
        delta: b.delta,
        soc_min: b.soc_min,
        soc_max: b.soc_max,
        convention,
    };
    params.validate().map_err(invalid)?;
    Ok(params)
}

/// Fills `out_params` with a battery of the given cost curve and power range and
/// default storage characteristics.
///
/// # Safety
/// `out_params` must be null or point to writable memory for one `FgBaParams`.
#[no_mangle]
pub unsafe extern "C" fn fg_ba_params_default(
    a: f64,
    b: f64,
    c: f64,
    p_min: f64,
    p_max: f64,
    out_params: *mut FgBaParams,
) -> FgStatus {
    run(|| {
        *out(out_params, "out_params")? = BaParams::with_costs(a, b, c, p_min, p_max).into();
        Ok(())
    })
}

/// Generator cost at power `p`.
///
/// # Safety
/// `params` and `out_cost` must be null or valid pointers.
#[no_mangle]
pub unsafe extern "C" fn fg_cg_cost(
    params: *const FgCgParams,
    p: f64,
    out_cost: *mut f64,
) -> FgStatus {
    run(|| {
        let q = *handle(params, "params")?;
        let cg = CgParams {
            a: q.a,
            b: q.b,
            c: q.c,
            p_min: q.p_min,
            p_max: q.p_max,
        };
        cg.validate().map_err(invalid)?;
        *out(out_cost, "out_cost")? = grid::cg_cost(p, &cg).map_err(invalid)?;
        Ok(())
    })
}

/// Battery cost at power `p` (positive discharges) and state of charge `soc`.
///
/// # Safety
/// `params` and `out_cost` must be null or valid pointers.
#[no_mangle]
pub unsafe extern "C" fn fg_ba_cost(
    params: *const FgBaParams,
    p: f64,
    soc: f64,
    out_cost: *mut f64,
) -> FgStatus {
    run(|| {
        let ba = ba_params(*handle(params, "params")?)?;
        *out(out_cost, "out_cost")? = grid::ba_cost(p, soc, &ba).map_err(invalid)?;
        Ok(())
    })
}

/// One feasible battery step: the next SOC and the power actually applied.
///
/// # Safety
/// All pointers must be null or valid.
#[no_mangle]
pub unsafe extern "C" fn fg_soc_step(
    params: *const FgBaParams,
    soc: f64,
    p: f64,
    dt: f64,
    out_soc: *mut f64,
    out_applied: *mut f64,
) -> FgStatus {
    run(|| {
        let ba = ba_params(*handle(params, "params")?)?;
        if !(dt > 0.0) || !soc.is_finite() || !p.is_finite() {
            return fail(
                FgStatus::InvalidArgument,
                "soc and p must be finite and dt positive",
            );
        }
        let step = grid::soc_step(soc, p, dt, &ba);
        *out(out_soc, "out_soc")? = step.soc;
        *out(out_applied, "out_applied")? = step.applied_power;
        Ok(())
    })
}

/// Weighted coordinate-wise average of `n_vectors` row-major vectors of
/// length `dim`. A null `weights` means uniform weights.
///
/// # Safety
/// `vectors` must hold `n_vectors * dim` values, `weights` (if not null)
/// `n_vectors`, and `out_values` `dim`.
#[no_mangle]
pub unsafe extern "C" fn fg_aggregate(
    vectors: *const f64,
    n_vectors: usize,
    dim: usize,
    weights: *const f64,
    out_values: *mut f64,
) -> FgStatus {
    run(|| {
        if n_vectors == 0 {
            return fail(FgStatus::InvalidArgument, "need at least one vector");
        }
        let total = n_vectors
            .checked_mul(dim)
            .ok_or_else(|| invalid("n_vectors * dim overflows"))?;
        let flat = slice(vectors, total, "vectors")?;
        let w = if weights.is_null() {
            AggregationWeights::uniform(n_vectors)
        } else {
            AggregationWeights::new(slice(weights, n_vectors, "weights")?.to_vec())
                .map_err(invalid)?
        };
        let vecs: Vec<ParamVector> = if dim == 0 {
            vec![
                ParamVector {
                    values: Vec::new(),
                    spec_hash: 0
                };
                n_vectors
            ]
        } else {
            flat.chunks_exact(dim)
                .map(|c| ParamVector {
                    values: c.to_vec(),
                    spec_hash: 0,
                })
                .collect()
        };
        let agg = aggregate(&vecs, &w).map_err(invalid)?;
        slice_mut(out_values, dim, "out_values")?.copy_from_slice(&agg.values);
        Ok(())
    })
}

/// One microgrid environment with its forecast day and noise model.
pub struct FgEnv {
    env: MgEnv,
    day: ScenarioDay,
    noise: NoiseModel,
}

/// Per-step result.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct FgStepResult {
    pub reward: f64,
    /// Signed unbalanced demand in kW.
    pub deviation: f64,
    pub cost_cg: f64,
    pub cost_ba: f64,
    pub loss: f64,
    /// Nonzero once the 24th hour has been played.
    pub done: u8,
}

/// Creates the environment of microgrid `mg` (0-based). With a null
/// `config_path` the bundled three-microgrid system is used, otherwise the
/// TOML run configuration at that path.
///
/// # Safety
/// `config_path` must be null or a NUL-terminated string; `out_env` must be
/// a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fg_env_new(
    config_path: *const c_char,
    mg: usize,
    out_env: *mut *mut FgEnv,
) -> FgStatus {
    run(|| {
        let slot = out(out_env, "out_env")?;
        *slot = ptr::null_mut();
        let cfg = if config_path.is_null() {
            RunConfig::default()
        } else {
            RunConfig::load(path_arg(config_path)?)
                .map_err(|e| Failure(FgStatus::Format, e.to_string()))?
        };
        let day = cfg
            .mmg
            .load_scenario()
            .map_err(|e| Failure(FgStatus::Format, e.to_string()))?;
        let devices = cfg
            .mmg
            .devices
            .get(mg)
            .ok_or_else(|| invalid(format!("no microgrid {mg}")))?;
        let env = MgEnv::new(devices.clone(), cfg.mmg.env.clone(), &day, mg).map_err(invalid)?;
        *slot = Box::into_raw(Box::new(FgEnv {
            env,
            day,
            noise: cfg.mmg.noise,
        }));
        Ok(())
    })
}

/// Releases an environment. Null is ignored.
///
/// # Safety
/// `env` must be null or a handle from `fg_env_new` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fg_env_free(env: *mut FgEnv) {
    if !env.is_null() {
        drop(Box::from_raw(env));
    }
}

/// Observation length.
///
/// # Safety
/// `env` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fg_env_obs_dim(env: *const FgEnv) -> usize {
    env.as_ref().map_or(0, |e| e.env.obs_dim())
}

/// Action length (generators first, then batteries).
///
/// # Safety
/// `env` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fg_env_action_dim(env: *const FgEnv) -> usize {
    env.as_ref().map_or(0, |e| e.env.action_dim())
}

/// Starts a new day. With `noisy` nonzero the forecasts are perturbed by the
/// configured noise seeded with `seed`; otherwise the forecast day is
/// played as is. Writes the first observation.
///
/// # Safety
/// `env` must be a live handle and `out_obs` hold `obs_len` values.
#[no_mangle]
pub unsafe extern "C" fn fg_env_reset(
    env: *mut FgEnv,
    noisy: u8,
    seed: u64,
    out_obs: *mut f64,
    obs_len: usize,
) -> FgStatus {
    run(|| {
        let e = out(env, "env")?;
        check_len(obs_len, e.env.obs_dim(), "out_obs")?;
        if noisy != 0 {
            e.env
                .reset(&e.day, &e.noise.with_seed(seed))
                .map_err(invalid)?;
        } else {
            e.env.reset_realized(&e.day).map_err(invalid)?;
        }
        slice_mut(out_obs, obs_len, "out_obs")?.copy_from_slice(&e.env.observation());
        Ok(())
    })
}

/// Applies setpoints in kW (clipped to device and SOC limits) and writes the
/// next observation.
///
/// # Safety
/// `env` must be a live handle, `action` hold `action_len` values, `out_obs`
/// `obs_len` values and `out_result` one `FgStepResult`.
#[no_mangle]
pub unsafe extern "C" fn fg_env_step(
    env: *mut FgEnv,
    action: *const f64,
    action_len: usize,
    out_obs: *mut f64,
    obs_len: usize,
    out_result: *mut FgStepResult,
) -> FgStatus {
    run(|| {
        let e = out(env, "env")?;
        check_len(action_len, e.env.action_dim(), "action")?;
        check_len(obs_len, e.env.obs_dim(), "out_obs")?;
        let a = slice(action, action_len, "action")?;
        if a.iter().any(|x| !x.is_finite()) {
            return fail(
                FgStatus::InvalidArgument,
                "action contains a non-finite value",
            );
        }
        let result = out(out_result, "out_result")?;
        if e.env.done() {
            return fail(FgStatus::EpisodeDone, "episode finished; call fg_env_reset");
        }
        let o = e
            .env
            .step(&MgAction::from_slice(a, e.env.devices.cgs.len()))
            .map_err(invalid)?;
        slice_mut(out_obs, obs_len, "out_obs")?.copy_from_slice(&e.env.observation());
        *result = FgStepResult {
            reward: o.reward,
            deviation: o.deviation,
            cost_cg: o.cost_cg,
            cost_ba: o.cost_ba,
            loss: o.loss,
            done: e.env.done() as u8,
        };
        Ok(())
    })
}

/// Maps a normalized action in `[-1, 1]` onto the device power bounds.
///
/// # Safety
/// `env` must be a live handle; both buffers hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn fg_env_denormalize(
    env: *const FgEnv,
    normalized: *const f64,
    out_kw: *mut f64,
    len: usize,
) -> FgStatus {
    run(|| {
        let e = handle(env, "env")?;
        check_len(len, e.env.action_dim(), "normalized")?;
        let kw = e
            .env
            .denormalize(slice(normalized, len, "normalized")?)
            .to_vec();
        slice_mut(out_kw, len, "out_kw")?.copy_from_slice(&kw);
        Ok(())
    })
}

/// A trained policy restored from a checkpoint.
pub struct FgAgent {
    agent: PpoAgent,
}

/// Loads an agent checkpoint written by the `fedgrid train` command.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out_agent` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fg_agent_load(
    path: *const c_char,
    out_agent: *mut *mut FgAgent,
) -> FgStatus {
    run(|| {
        let slot = out(out_agent, "out_agent")?;
        *slot = ptr::null_mut();
        let ck = Checkpoint::load(path_arg(path)?).map_err(|e| match e {
            fedgrid::nn::NnError::Io(io) => Failure(FgStatus::Io, io.to_string()),
            other => Failure(FgStatus::Format, other.to_string()),
        })?;
        let params = unflatten(&ck.spec, &ck.params)
            .map_err(|e| Failure(FgStatus::Format, e.to_string()))?;
        let agent = PpoAgent::from_params(ck.spec, params, PpoHyper::default());
        *slot = Box::into_raw(Box::new(FgAgent { agent }));
        Ok(())
    })
}

/// Releases an agent. Null is ignored.
///
/// # Safety
/// `agent` must be null or a handle from `fg_agent_load` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fg_agent_free(agent: *mut FgAgent) {
    if !agent.is_null() {
        drop(Box::from_raw(agent));
    }
}

/// Observation length the agent expects.
///
/// # Safety
/// `agent` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fg_agent_obs_dim(agent: *const FgAgent) -> usize {
    agent.as_ref().map_or(0, |a| a.agent.spec.actor.input_dim())
}

/// Action length the agent produces.
///
/// # Safety
/// `agent` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fg_agent_action_dim(agent: *const FgAgent) -> usize {
    agent.as_ref().map_or(0, |a| a.agent.spec.action_dim)
}

/// Deterministic (mean) action in `[-1, 1]` for one observation.
///
/// # Safety
/// `agent` must be a live handle, `obs` hold `obs_len` values and
/// `out_action` `action_len` values.
#[no_mangle]
pub unsafe extern "C" fn fg_agent_act(
    agent: *const FgAgent,
    obs: *const f64,
    obs_len: usize,
    out_action: *mut f64,
    action_len: usize,
) -> FgStatus {
    run(|| {
        let a = &handle(agent, "agent")?.agent;
        check_len(obs_len, a.spec.actor.input_dim(), "obs")?;
        check_len(action_len, a.spec.action_dim, "out_action")?;
        let action = a
            .act_deterministic(slice(obs, obs_len, "obs")?)
            .map_err(invalid)?;
        slice_mut(out_action, action_len, "out_action")?.copy_from_slice(&action);
        Ok(())
    })
}

/// Outcome of the gradient-descent rate check on one seeded quadratic.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct FgConvergenceReport {
    pub seed: u64,
    /// Largest observed gap over the linear-rate bound; at most 1 when the bound holds.
    pub max_ratio: f64,
    pub lemma3_violation: f64,
    pub descent_violation: f64,
    /// First iteration within tolerance, or -1.
    pub iterations_to_eps: i64,
    pub iteration_bound: u64,
    /// Distance between one local step averaged and one step on the weighted objective.
    pub fed_residual: f64,
    pub passed: u8,
}

/// Runs the convergence check on seeds `0..n_seeds` and writes one report
/// per seed.
///
/// # Safety
/// `out_reports` must hold `n_seeds` reports.
#[no_mangle]
pub unsafe extern "C" fn fg_convergence_check(
    n_seeds: u64,
    dim: usize,
    mu: f64,
    l: f64,
    k_max: usize,
    clients: usize,
    out_reports: *mut FgConvergenceReport,
) -> FgStatus {
    run(|| {
        let n = usize::try_from(n_seeds).map_err(invalid)?;
        if n > 0 && out_reports.is_null() {
            return fail(FgStatus::NullPointer, "out_reports is null");
        }
        let results = run_lab(&LabConfig {
            seeds: n_seeds,
            dim,
            mu,
            l,
            k_max,
            clients,
        })
        .map_err(invalid)?;
        let dst = if n == 0 {
            &mut [][..]
        } else {
            std::slice::from_raw_parts_mut(out_reports, n)
        };
        for (d, r) in dst.iter_mut().zip(&results) {
            *d = FgConvergenceReport {
                seed: r.seed,
                max_ratio: r.theorem1.max_ratio,
                lemma3_violation: r.theorem1.lemma3_violation,
                descent_violation: r.theorem1.descent_violation,
                iterations_to_eps: r.theorem1.iterations_to_eps.map_or(-1, |k| k as i64),
                iteration_bound: r.theorem1.iteration_bound as u64,
                fed_residual: r.federated.single_step_residual,
                passed: r.passed() as u8,
            };
        }
        Ok(())
    })
}
