//! FedAvg over microgrid agents.
//!
//! A round is: every participant trains locally for its share of epochs,
//! uploads its parameter vector, the server forms the weighted average and
//! broadcasts it back, and each participant replaces its parameters (and
//! resets its optimizer moments). The in-process runner here and the TCP
//! transport in [`crate::transport`] drive the same [`Participant`] and
//! [`aggregate_uploads`] code, so both produce identical trajectories.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, MmgConfig};
use crate::env::{EnvError, MgEnv};
use crate::nn::{AgentSpec, NnError, ParamVector};
use crate::ppo::{EpochStats, MgTask, PpoAgent, PpoError};
use crate::scenario::{NoiseModel, ScenarioDay, HOURS};

#[derive(Debug, Error)]
pub enum FedError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Ppo(#[from] PpoError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("agent {agent} failed: {source}")]
    Agent { agent: usize, source: PpoError },
    #[error("invalid aggregation weights: {0}")]
    Weights(String),
    #[error("parameter vectors disagree: {0}")]
    Mismatch(String),
    #[error("no parameter vectors to aggregate")]
    Empty,
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("rejected by server: {0}")]
    Rejected(String),
    #[error("timed out: {0}")]
    Timeout(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightMode {
    #[default]
    Uniform,
    /// Proportional to the transitions each agent collected in the round.
    DataWeighted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FedSchedule {
    pub total_epochs: usize,
    pub local_epochs: usize,
    pub weights: WeightMode,
}

impl Default for FedSchedule {
    fn default() -> Self {
        Self { total_epochs: 1500, local_epochs: 500, weights: WeightMode::Uniform }
    }
}

impl FedSchedule {
    pub fn validate(&self) -> Result<(), String> {
        if self.local_epochs == 0 {
            return Err("local_epochs must be at least 1".into());
        }
        if self.total_epochs < self.local_epochs {
            return Err("total_epochs must be at least local_epochs".into());
        }
        Ok(())
    }

    pub fn rounds(&self) -> usize {
        self.total_epochs.div_ceil(self.local_epochs)
    }

    /// Epochs in round `r` (0-based); the last round takes the remainder.
    pub fn epochs_in_round(&self, r: usize) -> usize {
        self.local_epochs.min(self.total_epochs - r * self.local_epochs)
    }
}

/// Nonnegative weights summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationWeights(Vec<f64>);

impl AggregationWeights {
    pub fn new(p: Vec<f64>) -> Result<Self, FedError> {
        if p.is_empty() {
            return Err(FedError::Weights("no weights".into()));
        }
        if p.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(FedError::Weights(format!("negative or non-finite weight in {p:?}")));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(FedError::Weights(format!("weights sum to {sum}")));
        }
        Ok(Self(p))
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn from_counts(counts: &[u64]) -> Result<Self, FedError> {
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(FedError::Weights("all sample counts are zero".into()));
        }
        Self::new(counts.iter().map(|&c| c as f64 / total as f64).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Coordinate-wise weighted average. Each coordinate is clamped to the
/// participants' range so rounding never leaves the convex hull and equal
/// inputs reproduce themselves exactly.
pub fn aggregate(vectors: &[ParamVector], weights: &AggregationWeights) -> Result<ParamVector, FedError> {
    let first = vectors.first().ok_or(FedError::Empty)?;
    if weights.0.len() != vectors.len() {
        return Err(FedError::Weights(format!("{} weights for {} vectors", weights.0.len(), vectors.len())));
    }
    for (j, v) in vectors.iter().enumerate() {
        if v.spec_hash != first.spec_hash {
            return Err(FedError::Mismatch(format!("vector {j} has spec hash {:#x}, expected {:#x}", v.spec_hash, first.spec_hash)));
        }
        if v.len() != first.len() {
            return Err(FedError::Mismatch(format!("vector {j} has length {}, expected {}", v.len(), first.len())));
        }
    }
    let values = (0..first.len())
        .map(|i| {
            let mut acc = 0.0;
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for (v, w) in vectors.iter().zip(&weights.0) {
                let x = v.values[i];
                acc += w * x;
                lo = lo.min(x);
                hi = hi.max(x);
            }
            acc.clamp(lo, hi)
        })
        .collect();
    Ok(ParamVector { values, spec_hash: first.spec_hash })
}

/// Splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of the RNG stream owned by `agent` in `round`.
pub fn stream_seed(global: u64, agent: u64, round: u64) -> u64 {
    mix(mix(mix(global) ^ agent) ^ round)
}

/// Stream id used for the server's parameter initialization.
pub const SERVER_STREAM: u64 = u64::MAX;

/// What a participant sends to the server at the end of a round.
#[derive(Debug, Clone, PartialEq)]
pub struct Upload {
    pub agent: usize,
    pub round: usize,
    pub n_samples: u64,
    pub epochs_completed: u64,
    pub pre_eval: f64,
    pub params: ParamVector,
}

pub fn aggregate_uploads(uploads: &[Upload], mode: WeightMode) -> Result<ParamVector, FedError> {
    let weights = match mode {
        WeightMode::Uniform => AggregationWeights::uniform(uploads.len()),
        WeightMode::DataWeighted => AggregationWeights::from_counts(&uploads.iter().map(|u| u.n_samples).collect::<Vec<_>>())?,
    };
    let vectors: Vec<ParamVector> = uploads.iter().map(|u| u.params.clone()).collect();
    aggregate(&vectors, &weights)
}

/// The model every participant starts from.
pub fn initial_global(cfg: &MmgConfig, day: &ScenarioDay, seed: u64) -> Result<ParamVector, FedError> {
    let env = MgEnv::new(cfg.devices[0].clone(), cfg.env.clone(), day, 0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, SERVER_STREAM, 0));
    let agent = PpoAgent::new(env.obs_dim(), env.action_dim(), cfg.ppo.clone(), &mut rng)?;
    Ok(agent.param_vector())
}

pub fn agent_spec(cfg: &MmgConfig, day: &ScenarioDay) -> Result<AgentSpec, FedError> {
    let env = MgEnv::new(cfg.devices[0].clone(), cfg.env.clone(), day, 0)?;
    Ok(AgentSpec::new(env.obs_dim(), env.action_dim(), &cfg.ppo.hidden)?)
}

/// One microgrid's learner with its training and evaluation environments.
#[derive(Debug, Clone)]
pub struct Participant {
    pub id: usize,
    pub agent: PpoAgent,
    pub task: MgTask,
    /// Noise-free copy of the training day.
    pub eval_task: MgTask,
    pub history: Vec<EpochStats>,
    pub seed: u64,
    pub eval_every: usize,
}

impl Participant {
    pub fn new(cfg: &MmgConfig, day: &ScenarioDay, mg: usize, initial: &ParamVector, seed: u64) -> Result<Self, FedError> {
        let devices = cfg.devices.get(mg).ok_or(EnvError::NoSuchMg { index: mg, count: cfg.devices.len() })?;
        let env = MgEnv::new(devices.clone(), cfg.env.clone(), day, mg)?;
        let spec = AgentSpec::new(env.obs_dim(), env.action_dim(), &cfg.ppo.hidden)?;
        let params = crate::nn::unflatten(&spec, initial)?;
        Ok(Self {
            id: mg,
            agent: PpoAgent::from_params(spec, params, cfg.ppo.clone()),
            task: MgTask::new(env.clone(), day.clone(), cfg.noise),
            eval_task: MgTask::new(env, day.clone(), NoiseModel::noiseless()),
            history: Vec::new(),
            seed,
            eval_every: cfg.eval_every,
        })
    }

    pub fn evaluate(&mut self) -> Result<f64, PpoError> {
        Ok(self.agent.evaluate(&mut self.eval_task, 0)?.reward)
    }

    /// Trains for `epochs` and packages the result for upload.
    pub fn local_round(&mut self, round: usize, epochs: usize) -> Result<Upload, FedError> {
        let wrap = |source| FedError::Agent { agent: self.id, source };
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(self.seed, self.id as u64, round as u64));
        let stats = self
            .agent
            .local_update(&mut self.task, &mut self.eval_task, epochs, self.eval_every, &mut rng)
            .map_err(wrap)?;
        self.history.extend(stats);
        let pre_eval = self.evaluate().map_err(|source| FedError::Agent { agent: self.id, source })?;
        Ok(Upload {
            agent: self.id,
            round,
            n_samples: (epochs * self.agent.hyper.episodes_per_epoch * HOURS) as u64,
            epochs_completed: self.agent.epochs_trained,
            pre_eval,
            params: self.agent.param_vector(),
        })
    }

    /// Replaces the local model with the global one and evaluates it.
    pub fn receive_global(&mut self, global: &ParamVector) -> Result<f64, FedError> {
        let wrap = |source| FedError::Agent { agent: self.id, source };
        self.agent.load_param_vector(global).map_err(wrap)?;
        self.evaluate().map_err(|source| FedError::Agent { agent: self.id, source })
    }

    /// Mean of the periodic evaluation rewards recorded for epochs in
    /// `(from, to]`.
    pub fn mean_eval_between(&self, from: usize, to: usize) -> Option<f64> {
        let evals: Vec<f64> =
            self.history.iter().filter(|h| h.epoch > from && h.epoch <= to).filter_map(|h| h.eval_reward).collect();
        (!evals.is_empty()).then(|| evals.iter().sum::<f64>() / evals.len() as f64)
    }
}

/// Broadcast: every agent takes the global parameters.
pub fn broadcast_and_replace(global: &ParamVector, agents: &mut [PpoAgent]) -> Result<(), FedError> {
    for a in agents.iter() {
        if a.spec.hash() != global.spec_hash {
            return Err(FedError::Mismatch(format!(
                "agent spec hash {:#x} differs from global {:#x}",
                a.spec.hash(),
                global.spec_hash
            )));
        }
    }
    for a in agents.iter_mut() {
        a.load_param_vector(global)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    /// 1-based.
    pub round: usize,
    pub pre_eval: Vec<f64>,
    /// Equal to `pre_eval` when aggregation is disabled.
    pub post_eval: Vec<f64>,
    pub agent_norms: Vec<f64>,
    pub global_norm: Option<f64>,
    /// Each agent's total epochs at upload time.
    pub epochs_completed: Vec<u64>,
    pub wall_clock_s: f64,
}

impl RoundReport {
    pub fn csv_header(n: usize) -> String {
        let mut cols = vec!["round".to_string()];
        for prefix in ["pre_eval", "post_eval", "norm", "epochs"] {
            cols.extend((1..=n).map(|j| format!("{prefix}_mg{j}")));
        }
        cols.push("global_norm".into());
        cols.push("wall_clock_s".into());
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols = vec![self.round.to_string()];
        cols.extend(self.pre_eval.iter().map(f64::to_string));
        cols.extend(self.post_eval.iter().map(f64::to_string));
        cols.extend(self.agent_norms.iter().map(f64::to_string));
        cols.extend(self.epochs_completed.iter().map(u64::to_string));
        cols.push(self.global_norm.map(|g| g.to_string()).unwrap_or_default());
        cols.push(format!("{:.3}", self.wall_clock_s));
        cols.join(",")
    }
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub reports: Vec<RoundReport>,
    /// Aggregated vector of each round; empty for local-only runs.
    pub globals: Vec<ParamVector>,
    pub participants: Vec<Participant>,
}

/// Builds one participant per microgrid, all starting from the same model.
pub fn make_participants(cfg: &MmgConfig, day: &ScenarioDay, seed: u64) -> Result<Vec<Participant>, FedError> {
    cfg.validate(day)?;
    let init = initial_global(cfg, day, seed)?;
    (0..day.n_mg()).map(|j| Participant::new(cfg, day, j, &init, seed)).collect()
}

/// Runs local training for every participant in parallel.
pub fn train_round(participants: &mut [Participant], round: usize, epochs: usize) -> Result<Vec<Upload>, FedError> {
    let results: Vec<Result<Upload, FedError>> = std::thread::scope(|s| {
        let handles: Vec<_> = participants.iter_mut().map(|p| s.spawn(move || p.local_round(round, epochs))).collect();
        handles.into_iter().map(|h| h.join().expect("participant thread panicked")).collect()
    });
    results.into_iter().collect()
}

/// Full in-process run of `cfg.schedule`.
pub fn run_training(cfg: &MmgConfig, day: &ScenarioDay, seed: u64) -> Result<TrainingOutcome, FedError> {
    let mut participants = make_participants(cfg, day, seed)?;
    let mut reports = Vec::new();
    let mut globals = Vec::new();
    for r in 0..cfg.schedule.rounds() {
        let start = Instant::now();
        let uploads = train_round(&mut participants, r, cfg.schedule.epochs_in_round(r))?;
        let pre_eval: Vec<f64> = uploads.iter().map(|u| u.pre_eval).collect();
        let (post_eval, global_norm) = if cfg.local_only {
            (pre_eval.clone(), None)
        } else {
            let global = aggregate_uploads(&uploads, cfg.schedule.weights)?;
            let post = participants.iter_mut().map(|p| p.receive_global(&global)).collect::<Result<Vec<_>, _>>()?;
            let norm = global.norm();
            globals.push(global);
            (post, Some(norm))
        };
        reports.push(RoundReport {
            round: r + 1,
            pre_eval,
            post_eval,
            agent_norms: uploads.iter().map(|u| u.params.norm()).collect(),
            global_norm,
            epochs_completed: uploads.iter().map(|u| u.epochs_completed).collect(),
            wall_clock_s: start.elapsed().as_secs_f64(),
        });
    }
    Ok(TrainingOutcome { reports, globals, participants })
}
