use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use fedgrid::config::MmgConfig;
use fedgrid::federation::{agent_spec, initial_global};
use fedgrid::nn::{unflatten, Checkpoint};
use fedgrid::ppo::{PpoAgent, PpoHyper};
use fedgrid::scenario::default_scenario;
use fedgrid_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(fg_last_error()) }.to_string_lossy().into_owned()
}

fn manifest_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(manifest_dir().join("include/fedgrid.h")).unwrap();
    let source = std::fs::read_to_string(manifest_dir().join("src/lib.rs")).unwrap();
    let exports: Vec<&str> = source
        .lines()
        .filter_map(|l| l.split_once("extern \"C\" fn ").map(|(_, rest)| rest.split('(').next().unwrap()))
        .collect();
    assert!(exports.len() >= 18, "{exports:?}");
    for f in exports {
        assert!(header.contains(&format!("{f}(")), "{f} missing from header");
    }
    for item in ["typedef struct FgEnv FgEnv;", "typedef struct FgAgent FgAgent;", "FG_STATUS_OK = 0", "FG_STATUS_EPISODE_DONE"] {
        assert!(header.contains(item), "{item}");
    }
}

#[test]
fn device_costs_and_errors() {
    let cg = FgCgParams { a: 0.0081, b: 5.72, c: 63.0, p_min: 0.0, p_max: 200.0 };
    let mut cost = 0.0;
    assert_eq!(unsafe { fg_cg_cost(&cg, 200.0, &mut cost) }, FgStatus::Ok);
    assert!((cost - 1531.0).abs() < 1e-9);
    assert_eq!(last_error(), "");

    assert_eq!(unsafe { fg_cg_cost(&cg, 250.0, &mut cost) }, FgStatus::InvalidArgument);
    assert!(last_error().contains("250"), "{}", last_error());
    assert_eq!(unsafe { fg_cg_cost(ptr::null(), 1.0, &mut cost) }, FgStatus::NullPointer);
    assert_eq!(unsafe { fg_cg_cost(&cg, 1.0, ptr::null_mut()) }, FgStatus::NullPointer);

    let mut ba = std::mem::MaybeUninit::<FgBaParams>::uninit();
    assert_eq!(unsafe { fg_ba_params_default(0.0153, 5.54, 26.0, -50.0, 50.0, ba.as_mut_ptr()) }, FgStatus::Ok);
    let mut ba = unsafe { ba.assume_init() };
    assert_eq!((ba.capacity, ba.eta_ch, ba.delta, ba.convention), (200.0, 0.95, 0.002, 0));
    assert_eq!(unsafe { fg_ba_cost(&ba, 50.0, 0.5, &mut cost) }, FgStatus::Ok);
    assert!((cost - 957.5625).abs() < 1e-9);
    assert_eq!(unsafe { fg_ba_cost(&ba, 50.0, 0.95, &mut cost) }, FgStatus::InvalidArgument);

    let (mut soc, mut applied) = (0.0, 0.0);
    assert_eq!(unsafe { fg_soc_step(&ba, 0.5, 20.0, 1.0, &mut soc, &mut applied) }, FgStatus::Ok);
    assert!((soc - (0.998 * 0.5 - 20.0 * 0.95 / 200.0)).abs() < 1e-12);
    assert_eq!(applied, 20.0);
    ba.convention = 1;
    assert_eq!(unsafe { fg_soc_step(&ba, 0.5, 20.0, 1.0, &mut soc, &mut applied) }, FgStatus::Ok);
    assert!((soc - (0.998 * 0.5 - 20.0 / (0.95 * 200.0))).abs() < 1e-12);
    // near the floor the discharge is cut to what the battery holds
    assert_eq!(unsafe { fg_soc_step(&ba, 0.12, 50.0, 1.0, &mut soc, &mut applied) }, FgStatus::Ok);
    assert!(applied < 50.0 && (soc - 0.1).abs() < 1e-12);
    ba.convention = 7;
    assert_eq!(unsafe { fg_soc_step(&ba, 0.5, 0.0, 1.0, &mut soc, &mut applied) }, FgStatus::InvalidArgument);
    assert!(last_error().contains("convention"));
}

#[test]
fn aggregation() {
    let vectors = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 10.0];
    let mut out = [0.0; 3];
    let w = [0.5, 0.25, 0.25];
    assert_eq!(unsafe { fg_aggregate(vectors.as_ptr(), 3, 3, w.as_ptr(), out.as_mut_ptr()) }, FgStatus::Ok);
    assert_eq!(out, [3.25, 4.25, 5.5]);
    assert_eq!(unsafe { fg_aggregate(vectors.as_ptr(), 3, 3, ptr::null(), out.as_mut_ptr()) }, FgStatus::Ok);
    assert!((out[2] - 19.0 / 3.0).abs() < 1e-12);
    let bad = [0.5, 0.6, 0.1];
    assert_eq!(unsafe { fg_aggregate(vectors.as_ptr(), 3, 3, bad.as_ptr(), out.as_mut_ptr()) }, FgStatus::InvalidArgument);
    assert_eq!(unsafe { fg_aggregate(vectors.as_ptr(), 0, 3, ptr::null(), out.as_mut_ptr()) }, FgStatus::InvalidArgument);
    assert_eq!(unsafe { fg_aggregate(ptr::null(), 3, 3, ptr::null(), out.as_mut_ptr()) }, FgStatus::NullPointer);
}

#[test]
fn environment_episode() {
    let mut env = ptr::null_mut();
    assert_eq!(unsafe { fg_env_new(ptr::null(), 0, &mut env) }, FgStatus::Ok);
    let (n_obs, n_act) = unsafe { (fg_env_obs_dim(env), fg_env_action_dim(env)) };
    assert_eq!((n_obs, n_act), (6, 2));
    let mut obs = vec![0.0; n_obs];
    assert_eq!(unsafe { fg_env_reset(env, 0, 0, obs.as_mut_ptr(), n_obs) }, FgStatus::Ok);
    assert!((obs[0] - 447.30 / 600.0).abs() < 1e-12 && obs[3] == 0.5 && obs[5] == 0.0);

    let mut kw = [0.0; 2];
    assert_eq!(unsafe { fg_env_denormalize(env, [1.0, 1.0].as_ptr(), kw.as_mut_ptr(), 2) }, FgStatus::Ok);
    assert_eq!(kw, [200.0, 50.0]);
    let mut r = FgStepResult::default();
    assert_eq!(unsafe { fg_env_step(env, kw.as_ptr(), 2, obs.as_mut_ptr(), n_obs, &mut r) }, FgStatus::Ok);
    assert!((r.reward + 3892.02154).abs() < 1e-6);
    assert!((r.deviation - 162.2496).abs() < 1e-9 && (r.loss - 6.0296).abs() < 1e-9);
    assert_eq!(r.done, 0);

    assert_eq!(unsafe { fg_env_step(env, kw.as_ptr(), 1, obs.as_mut_ptr(), n_obs, &mut r) }, FgStatus::Length);
    let nan = [f64::NAN, 0.0];
    assert_eq!(unsafe { fg_env_step(env, nan.as_ptr(), 2, obs.as_mut_ptr(), n_obs, &mut r) }, FgStatus::InvalidArgument);
    for _ in 1..24 {
        assert_eq!(unsafe { fg_env_step(env, kw.as_ptr(), 2, obs.as_mut_ptr(), n_obs, &mut r) }, FgStatus::Ok);
    }
    assert_eq!(r.done, 1);
    assert_eq!(unsafe { fg_env_step(env, kw.as_ptr(), 2, obs.as_mut_ptr(), n_obs, &mut r) }, FgStatus::EpisodeDone);

    // noisy resets are reproducible per seed
    let mut a = vec![0.0; n_obs];
    let mut b = vec![0.0; n_obs];
    let step = |env, out: &mut Vec<f64>| {
        let mut o = vec![0.0; n_obs];
        assert_eq!(unsafe { fg_env_reset(env, 1, 9, o.as_mut_ptr(), n_obs) }, FgStatus::Ok);
        assert_eq!(unsafe { fg_env_step(env, kw.as_ptr(), 2, out.as_mut_ptr(), n_obs, &mut r.clone()) }, FgStatus::Ok);
    };
    step(env, &mut a);
    step(env, &mut b);
    assert_eq!(a, b);
    assert_ne!(a[0], 457.70 / 600.0);
    unsafe { fg_env_free(env) };

    assert_eq!(unsafe { fg_env_new(ptr::null(), 3, &mut env) }, FgStatus::InvalidArgument);
    assert!(env.is_null());
    unsafe { fg_env_free(ptr::null_mut()) };
}

#[test]
fn environment_from_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    std::fs::write(&path, "[mmg.env.weights]\nw_c = 0.0\nw_de = 1.0\n").unwrap();
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut env = ptr::null_mut();
    assert_eq!(unsafe { fg_env_new(c.as_ptr(), 0, &mut env) }, FgStatus::Ok);
    let mut obs = [0.0; 6];
    let mut r = FgStepResult::default();
    unsafe {
        fg_env_reset(env, 0, 0, obs.as_mut_ptr(), 6);
        assert_eq!(fg_env_step(env, [200.0, 50.0].as_ptr(), 2, obs.as_mut_ptr(), 6, &mut r), FgStatus::Ok);
        fg_env_free(env);
    }
    assert!((r.reward + 8.65 * 162.2496).abs() < 1e-9);

    std::fs::write(&path, "nonsense = 1\n").unwrap();
    assert_eq!(unsafe { fg_env_new(c.as_ptr(), 0, &mut env) }, FgStatus::Format);
    assert!(!last_error().is_empty());
}

fn write_checkpoint(path: &Path) -> PpoAgent {
    let cfg = MmgConfig::default();
    let day = default_scenario();
    let spec = agent_spec(&cfg, &day).unwrap();
    let params = initial_global(&cfg, &day, 11).unwrap();
    Checkpoint { spec: spec.clone(), step: 3, params: params.clone() }.save(path).unwrap();
    PpoAgent::from_params(spec.clone(), unflatten(&spec, &params).unwrap(), PpoHyper::default())
}

#[test]
fn agent_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mg1.ckpt");
    let reference = write_checkpoint(&path);
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut agent = ptr::null_mut();
    assert_eq!(unsafe { fg_agent_load(c.as_ptr(), &mut agent) }, FgStatus::Ok);
    assert_eq!(unsafe { (fg_agent_obs_dim(agent), fg_agent_action_dim(agent)) }, (6, 2));
    let obs = [0.7, 0.1, 0.0, 0.5, 0.3, 0.25];
    let mut action = [0.0; 2];
    assert_eq!(unsafe { fg_agent_act(agent, obs.as_ptr(), 6, action.as_mut_ptr(), 2) }, FgStatus::Ok);
    assert_eq!(action.to_vec(), reference.act_deterministic(&obs).unwrap());
    assert!(action.iter().all(|a| a.abs() <= 1.0));
    assert_eq!(unsafe { fg_agent_act(agent, obs.as_ptr(), 5, action.as_mut_ptr(), 2) }, FgStatus::Length);
    unsafe { fg_agent_free(agent) };

    let missing = CString::new(dir.path().join("none.ckpt").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { fg_agent_load(missing.as_ptr(), &mut agent) }, FgStatus::Io);
    assert!(agent.is_null());
    let garbage = dir.path().join("bad.ckpt");
    std::fs::write(&garbage, b"not a checkpoint").unwrap();
    let garbage = CString::new(garbage.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { fg_agent_load(garbage.as_ptr(), &mut agent) }, FgStatus::Format);
    assert!(last_error().contains("magic"), "{}", last_error());
    assert_eq!(unsafe { fg_agent_load(ptr::null(), &mut agent) }, FgStatus::NullPointer);
}

#[test]
fn convergence_reports() {
    let mut reports = vec![FgConvergenceReport::default(); 4];
    assert_eq!(unsafe { fg_convergence_check(4, 10, 1.0, 10.0, 200, 3, reports.as_mut_ptr()) }, FgStatus::Ok);
    for (k, r) in reports.iter().enumerate() {
        assert_eq!(r.seed, k as u64);
        assert_eq!(r.passed, 1);
        assert!(r.max_ratio <= 1.0 + 1e-9 && r.iterations_to_eps >= 0);
        assert!(r.iterations_to_eps as u64 <= r.iteration_bound);
    }
    assert_eq!(unsafe { fg_convergence_check(1, 10, 2.0, 1.0, 10, 1, reports.as_mut_ptr()) }, FgStatus::InvalidArgument);
    assert_eq!(unsafe { fg_convergence_check(1, 10, 1.0, 10.0, 10, 1, ptr::null_mut()) }, FgStatus::NullPointer);
}

/// Builds the C client against the generated header and the shared library.
#[test]
fn c_client_links_and_runs() {
    let profile_dir = std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf();
    assert!(profile_dir.join("libfedgrid_ffi.so").exists(), "shared library not built in {}", profile_dir.display());
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("client");
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let status = Command::new(cc)
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(manifest_dir().join("include"))
        .arg(manifest_dir().join("tests/c/client.c"))
        .arg("-L")
        .arg(&profile_dir)
        .args(["-lfedgrid_ffi", "-o"])
        .arg(&exe)
        .status()
        .expect("C compiler available");
    assert!(status.success());
    let out = Command::new(&exe).env("LD_LIBRARY_PATH", &profile_dir).output().unwrap();
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(out.status.success(), "{stdout}{}", String::from_utf8_lossy(&out.stderr));
    let expected = [
        "version 0.1.0",
        "dims 6 2",
        "reward -3892.02154 deviation 162.2496",
        "short action -> 3 (action has length 1, expected 2)",
        "mean 4.000 5.000",
        "convergence 1 1",
        "missing checkpoint -> 4 null=1",
    ];
    assert_eq!(stdout.lines().collect::<Vec<_>>(), expected);
}
