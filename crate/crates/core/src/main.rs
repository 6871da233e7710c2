use std::fs;
use std::net::{SocketAddr, TcpListener};
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};

use fedgrid::config::{RunConfig, TransportMode};
use fedgrid::convergence::{self, LabConfig};
use fedgrid::evaluation::{self, EvalMode, EvalSettings, TestTable};
use fedgrid::federation::{agent_spec, initial_global, run_training, Participant, RoundReport, TrainingOutcome};
use fedgrid::market::{self, Counterparty};
use fedgrid::nn::{self, Checkpoint};
use fedgrid::ppo::{EpochStats, PpoAgent};
use fedgrid::scenario::{ScenarioDay, HOURS};
use fedgrid::transport::{self, ServerConfig};

#[derive(Parser)]
#[command(name = "fedgrid", version, about = "Federated PPO energy management for multi-microgrid systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train agents (federated by default) and write CSVs and checkpoints.
    Train(TrainArgs),
    /// Test rewards of trained agents in the self-sufficient and self-insufficient states.
    Evaluate(EvaluateArgs),
    /// Export a checkpoint's 24-hour dispatch for one microgrid.
    Schedule(ScheduleArgs),
    /// Settle hourly imbalances between microgrids from schedule CSVs.
    Settlements(SettlementArgs),
    /// Check the linear convergence bound of gradient descent on synthetic quadratics.
    Convergence(ConvergenceArgs),
}

#[derive(Args)]
struct Common {
    /// TOML configuration file; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scenario CSV overriding the configured one.
    #[arg(long)]
    scenario: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<(RunConfig, ScenarioDay)> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = &self.scenario {
            cfg.mmg.scenario = Some(s.clone());
        }
        let day = cfg.mmg.load_scenario()?;
        cfg.mmg.validate(&day)?;
        Ok((cfg, day))
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated seeds; one output directory per seed.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Independent self-training without aggregation.
    #[arg(long)]
    local_only: bool,
    /// Number of federated rounds (total epochs = rounds x local epochs).
    #[arg(long)]
    rounds: Option<usize>,
    /// Local epochs between aggregations.
    #[arg(long)]
    local_epochs: Option<usize>,
    /// Differentiate the critic loss through the bootstrap target.
    #[arg(long)]
    faithful_critic: bool,
    /// Output root directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run only the aggregation server, listening on this address.
    #[arg(long, conflicts_with_all = ["join", "local_only"])]
    serve: Option<SocketAddr>,
    /// Run only one participant, connecting to this server.
    #[arg(long, requires = "mg", conflicts_with = "local_only")]
    join: Option<SocketAddr>,
    /// Microgrid (1-based) trained by this participant; used with --join.
    #[arg(long)]
    mg: Option<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: Common,
    /// Federated run: a seed directory or a root holding seed-* directories.
    #[arg(long)]
    fed: Option<PathBuf>,
    /// Local-only run, same layout as --fed.
    #[arg(long)]
    local: Option<PathBuf>,
    /// self-sufficient, self-insufficient or as-is; both table states when omitted.
    #[arg(long)]
    mode: Option<EvalMode>,
    /// Noisy test episodes per agent in addition to the noise-free one.
    #[arg(long, default_value_t = 10)]
    episodes: usize,
    /// Write the table here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ScheduleArgs {
    #[command(flatten)]
    common: Common,
    /// Agent checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Microgrid (1-based).
    #[arg(long)]
    mg: usize,
    /// Load rescaling applied before dispatch.
    #[arg(long, default_value = "as-is")]
    mode: EvalMode,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SettlementArgs {
    #[command(flatten)]
    common: Common,
    /// One schedule CSV per microgrid, in microgrid order.
    #[arg(long = "schedule-csv", required = true, num_args = 1..)]
    schedules: Vec<PathBuf>,
    /// Write the trade log here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ConvergenceArgs {
    /// Number of seeded quadratics.
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    #[arg(long, default_value_t = 10)]
    dim: usize,
    /// Smallest Hessian eigenvalue.
    #[arg(long, default_value_t = 1.0)]
    mu: f64,
    /// Largest Hessian eigenvalue; the step size is 1/L.
    #[arg(long = "l", default_value_t = 10.0)]
    l: f64,
    /// Minimum number of gradient steps checked.
    #[arg(long, default_value_t = 200)]
    k_max: usize,
    /// Objectives in the federated consistency check.
    #[arg(long, default_value_t = 3)]
    clients: usize,
    /// Per-seed CSV path.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Schedule(a) => cmd_schedule(a),
        Command::Settlements(a) => cmd_settlements(a),
        Command::Convergence(a) => cmd_convergence(a),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn seed_header(seed: u64) -> String {
    format!("# seed={seed} streams=agent:stream_seed({seed},agent,round) server:stream_seed({seed},u64::MAX,0)\n")
}

fn training_csv(seed: u64, history: &[EpochStats]) -> String {
    let mut s = seed_header(seed);
    s += EpochStats::CSV_HEADER;
    s.push('\n');
    for h in history {
        s += &h.csv_row();
        s.push('\n');
    }
    s
}

fn rounds_csv(seed: u64, n: usize, reports: &[RoundReport]) -> String {
    let mut s = seed_header(seed);
    s += &RoundReport::csv_header(n);
    s.push('\n');
    for r in reports {
        s += &r.csv_row();
        s.push('\n');
    }
    s
}

fn save_checkpoint(path: &Path, agent: &PpoAgent) -> Result<()> {
    Checkpoint { spec: agent.spec.clone(), step: agent.epochs_trained, params: agent.param_vector() }
        .save(path)
        .with_context(|| format!("cannot write {}", path.display()))
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let (mut cfg, day) = a.common.load()?;
    if let Some(s) = a.seeds {
        cfg.seeds = s;
    }
    if let Some(o) = a.out {
        cfg.out = o;
    }
    if let Some(l) = a.local_epochs {
        cfg.mmg.schedule.local_epochs = l;
    }
    if let Some(r) = a.rounds {
        cfg.mmg.schedule.total_epochs = r * cfg.mmg.schedule.local_epochs;
    }
    cfg.mmg.local_only |= a.local_only;
    cfg.mmg.ppo.faithful_critic |= a.faithful_critic;
    cfg.mmg.validate(&day)?;
    ensure!(!cfg.seeds.is_empty(), "at least one seed is required");
    fs::create_dir_all(&cfg.out).with_context(|| format!("cannot create {}", cfg.out.display()))?;

    if let Some(addr) = a.serve {
        return train_server(&cfg, &day, addr);
    }
    if let Some(addr) = a.join {
        return train_participant(&cfg, &day, addr, a.mg.unwrap_or(0));
    }
    if cfg.mmg.local_only && cfg.transport == TransportMode::Tcp {
        bail!("local-only training has no server; set transport = \"inproc\"");
    }
    for &seed in &cfg.seeds {
        let dir = cfg.out.join(format!("seed-{seed}"));
        fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
        let outcome = match cfg.transport {
            TransportMode::Inproc => run_training(&cfg.mmg, &day, seed)?,
            TransportMode::Tcp => transport::run_training_loopback(&cfg.mmg, &day, seed)?,
        };
        write_run(&dir, &cfg, seed, &outcome)?;
        let last = outcome.reports.last();
        eprintln!(
            "seed {seed}: {} rounds, final evaluation {:?} -> {}",
            outcome.reports.len(),
            last.map(|r| r.post_eval.iter().map(|v| v.round()).collect::<Vec<_>>()).unwrap_or_default(),
            dir.display()
        );
    }
    Ok(())
}

fn write_run(dir: &Path, cfg: &RunConfig, seed: u64, outcome: &TrainingOutcome) -> Result<()> {
    let mut used = cfg.clone();
    used.seeds = vec![seed];
    write(&dir.join("config.toml"), &used.to_toml())?;
    let n = outcome.participants.len();
    write(&dir.join("rounds.csv"), &rounds_csv(seed, n, &outcome.reports))?;
    for p in &outcome.participants {
        write(&dir.join(format!("mg{}_training.csv", p.id + 1)), &training_csv(seed, &p.history))?;
        save_checkpoint(&dir.join(format!("mg{}.ckpt", p.id + 1)), &p.agent)?;
    }
    if let (Some(g), Some(p)) = (outcome.globals.last(), outcome.participants.first()) {
        Checkpoint { spec: p.agent.spec.clone(), step: p.agent.epochs_trained, params: g.clone() }.save(&dir.join("global.ckpt"))?;
    }
    Ok(())
}

fn train_server(cfg: &RunConfig, day: &ScenarioDay, addr: SocketAddr) -> Result<()> {
    let seed = cfg.seeds[0];
    let listener = TcpListener::bind(addr).with_context(|| format!("cannot listen on {addr}"))?;
    eprintln!("serving {} participants on {}", day.n_mg(), listener.local_addr()?);
    let out = transport::serve(
        &listener,
        &ServerConfig {
            n_participants: day.n_mg(),
            rounds: cfg.mmg.schedule.rounds(),
            weights: cfg.mmg.schedule.weights,
            initial: initial_global(&cfg.mmg, day, seed)?,
            timeout: Duration::from_secs(cfg.mmg.timeout_secs),
        },
    )?;
    let dir = cfg.out.join(format!("seed-{seed}"));
    fs::create_dir_all(&dir)?;
    write(&dir.join("rounds.csv"), &rounds_csv(seed, day.n_mg(), &out.reports))?;
    if let Some(g) = out.globals.last() {
        let spec = agent_spec(&cfg.mmg, day)?;
        let step = cfg.mmg.schedule.total_epochs as u64;
        Checkpoint { spec, step, params: g.clone() }.save(&dir.join("global.ckpt"))?;
    }
    Ok(())
}

fn train_participant(cfg: &RunConfig, day: &ScenarioDay, addr: SocketAddr, mg: usize) -> Result<()> {
    ensure!((1..=day.n_mg()).contains(&mg), "--mg must be between 1 and {}", day.n_mg());
    let seed = cfg.seeds[0];
    let init = initial_global(&cfg.mmg, day, seed)?;
    let mut p = Participant::new(&cfg.mmg, day, mg - 1, &init, seed)?;
    transport::join(addr, &mut p, &cfg.mmg.schedule, Duration::from_secs(cfg.mmg.timeout_secs))?;
    let dir = cfg.out.join(format!("seed-{seed}"));
    fs::create_dir_all(&dir)?;
    write(&dir.join(format!("mg{mg}_training.csv")), &training_csv(seed, &p.history))?;
    save_checkpoint(&dir.join(format!("mg{mg}.ckpt")), &p.agent)
}

/// Seed directories under `path`: itself if it holds checkpoints, else its `seed-*` children.
fn seed_dirs(path: &Path) -> Result<Vec<PathBuf>> {
    if path.join("mg1.ckpt").exists() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(path)
        .with_context(|| format!("cannot read {}", path.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("seed-")) && p.join("mg1.ckpt").exists())
        .collect();
    dirs.sort();
    ensure!(!dirs.is_empty(), "no checkpoints under {}", path.display());
    Ok(dirs)
}

fn load_agents(dir: &Path, cfg: &RunConfig, day: &ScenarioDay) -> Result<Vec<PpoAgent>> {
    let expected = agent_spec(&cfg.mmg, day)?;
    (1..=day.n_mg())
        .map(|mg| {
            let path = dir.join(format!("mg{mg}.ckpt"));
            load_agent(&path, &expected, cfg)
        })
        .collect()
}

fn load_agent(path: &Path, expected: &nn::AgentSpec, cfg: &RunConfig) -> Result<PpoAgent> {
    let ck = Checkpoint::load(path).with_context(|| format!("cannot load {}", path.display()))?;
    ensure!(
        ck.params.spec_hash == expected.hash(),
        "{}: spec hash {:#x} does not match the configured model {:#x}",
        path.display(),
        ck.params.spec_hash,
        expected.hash()
    );
    let params = nn::unflatten(&ck.spec, &ck.params)?;
    Ok(PpoAgent::from_params(ck.spec, params, cfg.mmg.ppo.clone()))
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let (cfg, day) = a.common.load()?;
    let runs: Vec<(&str, &PathBuf)> =
        [("F-MADRL", a.fed.as_ref()), ("PPO-MADRL", a.local.as_ref())].into_iter().filter_map(|(n, p)| p.map(|p| (n, p))).collect();
    ensure!(!runs.is_empty(), "give --fed and/or --local");
    let modes = match a.mode {
        Some(m) => vec![m],
        None => EvalMode::TABLE.to_vec(),
    };
    let settings = EvalSettings { noisy_episodes: a.episodes, noise: cfg.mmg.noise, ..Default::default() };
    let n = day.n_mg();
    // scores[mode][mg][run]
    let mut scores = vec![vec![vec![0.0; runs.len()]; n]; modes.len()];
    for (k, (_, root)) in runs.iter().enumerate() {
        let dirs = seed_dirs(root)?;
        for dir in &dirs {
            let agents = load_agents(dir, &cfg, &day)?;
            for (m, &mode) in modes.iter().enumerate() {
                let r = evaluation::evaluate_agents(&agents, &cfg.mmg.devices, &cfg.mmg.env, &day, mode, &settings)?;
                for (mg, v) in r.into_iter().enumerate() {
                    scores[m][mg][k] += v / dirs.len() as f64;
                }
            }
        }
    }
    let table = TestTable {
        algorithms: runs.iter().map(|(n, _)| n.to_string()).collect(),
        rows: modes.iter().enumerate().flat_map(|(m, &mode)| (0..n).map(move |mg| (m, mode, mg))).map(|(m, mode, mg)| (mode, mg, scores[m][mg].clone())).collect(),
    };
    emit(a.out.as_deref(), &table.to_csv())
}

fn cmd_schedule(a: ScheduleArgs) -> Result<()> {
    let (cfg, day) = a.common.load()?;
    ensure!((1..=day.n_mg()).contains(&a.mg), "--mg {} out of range 1..={}", a.mg, day.n_mg());
    let agent = load_agent(&a.checkpoint, &agent_spec(&cfg.mmg, &day)?, &cfg)?;
    let day = evaluation::mode_scenario(&day, &cfg.mmg.devices, a.mode);
    let ep = evaluation::dispatch_episode(&agent, &cfg.mmg.devices[a.mg - 1], &cfg.mmg.env, &day, a.mg - 1)?;
    emit(a.out.as_deref(), &evaluation::schedule_csv(&ep))
}

/// Unbalanced demand per hour from a schedule CSV.
fn read_unbalanced(path: &Path) -> Result<Vec<f64>> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("cannot read {}", path.display()))?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name).with_context(|| format!("{}: no `{name}` column", path.display()));
    let (hc, dc) = (col("hour")?, col("unbalanced_demand")?);
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let hour: usize = rec[hc].parse().with_context(|| format!("{}: bad hour", path.display()))?;
        ensure!(hour == i + 1, "{}: row {} has hour {hour}; hours must run 1..{HOURS}", path.display(), i + 1);
        out.push(rec[dc].parse().with_context(|| format!("{}: bad unbalanced_demand", path.display()))?);
    }
    ensure!(out.len() == HOURS, "{}: {} rows, expected {HOURS}", path.display(), out.len());
    Ok(out)
}

fn cmd_settlements(a: SettlementArgs) -> Result<()> {
    let (_, day) = a.common.load()?;
    let deviations = a.schedules.iter().map(|p| read_unbalanced(p)).collect::<Result<Vec<_>>>()?;
    let party = |c: Counterparty| match c {
        Counterparty::Mg(j) => format!("MG{}", j + 1),
        Counterparty::Grid => "DPN".into(),
    };
    let mut out = String::from("hour,buyer,seller,kw,price,cost\n");
    for h in 0..HOURS {
        let surplus: Vec<f64> = deviations.iter().map(|d| -d[h]).collect();
        let prices = vec![day.price_mg[h]; surplus.len()];
        let res = market::settle(&surplus, &prices, day.price_dpn[h])?;
        for t in res.trades.iter().chain(&res.exports) {
            out += &format!("{},{},{},{},{},{}\n", h + 1, party(t.buyer), party(t.seller), t.kw, t.price, t.cost());
        }
    }
    emit(a.out.as_deref(), &out)
}

fn cmd_convergence(a: ConvergenceArgs) -> Result<()> {
    let cfg = LabConfig { seeds: a.seeds, dim: a.dim, mu: a.mu, l: a.l, k_max: a.k_max, clients: a.clients };
    let results = convergence::run_lab(&cfg)?;
    println!("{:>5} {:>14} {:>10} {:>10} {:>6}", "seed", "max_ratio", "lemma3", "fedavg", "result");
    for r in &results {
        println!(
            "{:>5} {:>14.10} {:>10.2e} {:>10.2e} {:>6}",
            r.seed,
            r.theorem1.max_ratio,
            r.theorem1.lemma3_violation,
            r.federated.single_step_residual,
            if r.passed() { "PASS" } else { "FAIL" }
        );
    }
    if let Some(p) = &a.out {
        write(p, &convergence::to_csv(&results))?;
    }
    let failed = results.iter().filter(|r| !r.passed()).count();
    ensure!(failed == 0, "{failed} of {} seeds failed", results.len());
    Ok(())
}
