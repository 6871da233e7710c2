use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fedgrid::config::RunConfig;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fedgrid"))
}

fn run(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("binary runs");
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn train(out: &Path, extra: &[&str]) {
    let mut args = vec!["train", "--rounds", "2", "--local-epochs", "4", "--seeds", "5", "--out", s(out)];
    args.extend_from_slice(extra);
    run(&args);
}

/// Drops the trailing wall-clock column of a rounds CSV.
fn strip_clock(text: &str) -> String {
    text.lines().map(|l| l.rsplit_once(',').map_or(l, |(a, _)| a)).collect::<Vec<_>>().join("\n")
}

fn example_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/example.toml")
}

#[test]
fn example_config_matches_defaults() {
    assert_eq!(RunConfig::load(&example_config()).unwrap(), RunConfig::default());
}

#[test]
fn train_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    train(&a, &[]);
    train(&b, &[]);
    let (da, db) = (a.join("seed-5"), b.join("seed-5"));
    for f in ["mg1_training.csv", "mg2_training.csv", "mg3_training.csv"] {
        assert_eq!(fs::read_to_string(da.join(f)).unwrap(), fs::read_to_string(db.join(f)).unwrap(), "{f}");
    }
    for f in ["mg1.ckpt", "mg2.ckpt", "mg3.ckpt", "global.ckpt"] {
        assert!(fs::read(da.join(f)).unwrap() == fs::read(db.join(f)).unwrap(), "{f}");
    }
    // the recorded configs differ only in the output directory
    let without_out = |d: &Path| {
        let text = fs::read_to_string(d.join("config.toml")).unwrap();
        text.lines().filter(|l| !l.starts_with("out =")).collect::<Vec<_>>().join("\n")
    };
    assert_eq!(without_out(&da), without_out(&db));
    let ra = fs::read_to_string(da.join("rounds.csv")).unwrap();
    assert_eq!(strip_clock(&ra), strip_clock(&fs::read_to_string(db.join("rounds.csv")).unwrap()));
    assert!(ra.starts_with("# seed=5"));
    assert_eq!(ra.lines().count(), 4);
    let training = fs::read_to_string(da.join("mg2_training.csv")).unwrap();
    assert!(training.starts_with("# seed=5"));
    assert_eq!(training.lines().count(), 2 + 8);
    // after the last aggregation every agent holds the global model
    let g = fs::read(da.join("global.ckpt")).unwrap();
    assert!(fs::read(da.join("mg1.ckpt")).unwrap() == g);
}

#[test]
fn several_seeds_and_local_only() {
    let tmp = tempfile::tempdir().unwrap();
    run(&["train", "--rounds", "1", "--local-epochs", "2", "--seeds", "1,2", "--local-only", "--out", s(tmp.path())]);
    for seed in [1, 2] {
        let d = tmp.path().join(format!("seed-{seed}"));
        assert!(d.join("mg3.ckpt").exists());
        assert!(!d.join("global.ckpt").exists());
    }
    assert!(fs::read(tmp.path().join("seed-1/mg1.ckpt")).unwrap() != fs::read(tmp.path().join("seed-2/mg1.ckpt")).unwrap());
}

#[test]
fn evaluate_schedule_and_settlements() {
    let tmp = tempfile::tempdir().unwrap();
    let (fed, local) = (tmp.path().join("fed"), tmp.path().join("local"));
    train(&fed, &[]);
    train(&local, &["--local-only"]);

    let table = run(&["evaluate", "--fed", s(&fed), "--local", s(&local), "--episodes", "2"]).stdout;
    let table = String::from_utf8(table).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "working_state,agent,F-MADRL,PPO-MADRL");
    assert_eq!(lines.len(), 1 + 2 * 3);
    assert!(lines[1].starts_with("self-sufficient,MG1,") && lines[6].starts_with("self-insufficient,MG3,"));
    let again = run(&["evaluate", "--fed", s(&fed), "--local", s(&local), "--episodes", "2"]).stdout;
    assert_eq!(table.as_bytes(), &again[..]);

    let mut schedules = Vec::new();
    for mg in 1..=3 {
        let path = tmp.path().join(format!("schedule{mg}.csv"));
        let ck = fed.join(format!("seed-5/mg{mg}.ckpt"));
        run(&["schedule", "--checkpoint", s(&ck), "--mg", &mg.to_string(), "--out", s(&path)]);
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 25);
        let second = run(&["schedule", "--checkpoint", s(&ck), "--mg", &mg.to_string()]).stdout;
        assert_eq!(text.as_bytes(), &second[..]);
        schedules.push(path);
    }
    let mut args = vec!["settlements", "--schedule-csv"];
    args.extend(schedules.iter().map(|p| s(p)));
    let log = String::from_utf8(run(&args).stdout).unwrap();
    assert!(log.starts_with("hour,buyer,seller,kw,price,cost\n"));
    let hours: Vec<usize> = log.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert!(hours.windows(2).all(|w| w[0] <= w[1]) && *hours.last().unwrap() == 24);
    assert_eq!(log.as_bytes(), &run(&args).stdout[..]);

    let bad = bin().args(["schedule", "--checkpoint", s(&fed.join("seed-5/mg1.ckpt")), "--mg", "4"]).output().unwrap();
    assert!(!bad.status.success());
}

#[test]
fn evaluate_rejects_other_topology() {
    let tmp = tempfile::tempdir().unwrap();
    let run_dir = tmp.path().join("run");
    train(&run_dir, &[]);
    let cfg = tmp.path().join("small.toml");
    fs::write(&cfg, "[mmg.ppo]\nhidden = [8]\n").unwrap();
    let before = fs::read(&cfg).unwrap();
    let out = bin().args(["evaluate", "--config", s(&cfg), "--fed", s(&run_dir)]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("spec hash"));
    assert_eq!(fs::read(&cfg).unwrap(), before);
}

#[test]
fn bad_config_fails_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "seeds = [1]\nunknown_key = 3\n").unwrap();
    let out = bin().args(["train", "--config", s(&cfg)]).output().unwrap();
    assert!(!out.status.success());
    let missing = bin().args(["train", "--config", s(&tmp.path().join("nope.toml"))]).output().unwrap();
    assert!(!missing.status.success());
}

#[test]
fn convergence_command() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = tmp.path().join("conv.csv");
    let out = String::from_utf8(run(&["convergence", "--out", s(&csv)]).stdout).unwrap();
    assert_eq!(out.lines().filter(|l| l.ends_with("PASS")).count(), 20);
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 21);
}

#[test]
fn help_lists_flags() {
    let help = String::from_utf8(run(&["train", "--help"]).stdout).unwrap();
    for flag in ["--config", "--seeds", "--local-only", "--serve", "--join", "--rounds", "--local-epochs", "--faithful-critic", "--scenario", "--out"] {
        assert!(help.contains(flag), "{flag}");
    }
}

#[test]
fn separate_processes_match_inproc() {
    let tmp = tempfile::tempdir().unwrap();
    let (tcp, inproc) = (tmp.path().join("tcp"), tmp.path().join("inproc"));
    train(&inproc, &[]);
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let addr = format!("127.0.0.1:{port}");
    let common = ["train", "--rounds", "2", "--local-epochs", "4", "--seeds", "5", "--out", s(&tcp)];
    let mut server = bin().args(common).args(["--serve", &addr]).spawn().unwrap();
    let clients: Vec<_> =
        (1..=3).map(|mg| bin().args(common).args(["--join", &addr, "--mg", &mg.to_string()]).spawn().unwrap()).collect();
    for mut c in clients {
        assert!(c.wait().unwrap().success());
    }
    assert!(server.wait().unwrap().success());
    let (a, b) = (tcp.join("seed-5"), inproc.join("seed-5"));
    for f in ["global.ckpt", "mg1.ckpt", "mg2.ckpt", "mg3.ckpt", "mg1_training.csv", "mg3_training.csv"] {
        assert!(fs::read(a.join(f)).unwrap() == fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_eq!(
        strip_clock(&fs::read_to_string(a.join("rounds.csv")).unwrap()),
        strip_clock(&fs::read_to_string(b.join("rounds.csv")).unwrap())
    );
}
