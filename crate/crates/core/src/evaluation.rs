//! Test rewards of trained agents in the energy self-sufficient and
//! self-insufficient states.
//!
//! A state is produced by rescaling each microgrid's load profile so that its
//! peak equals a fixed fraction of that microgrid's dispatchable capacity
//! (70% for self-sufficient, 130% for self-insufficient).

use std::fmt;
use std::str::FromStr;

use crate::env::{Decision, EnvParams, Episode, MgEnv, Transition};
use crate::ppo::{MgTask, PpoAgent, PpoError};
use crate::scenario::{MgDevices, NoiseModel, ScenarioDay};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    SelfSufficient,
    SelfInsufficient,
    /// The scenario as given.
    AsIs,
}

impl EvalMode {
    pub const TABLE: [EvalMode; 2] = [EvalMode::SelfSufficient, EvalMode::SelfInsufficient];

    /// Peak load as a fraction of dispatchable capacity.
    pub fn capacity_fraction(self) -> Option<f64> {
        match self {
            EvalMode::SelfSufficient => Some(0.7),
            EvalMode::SelfInsufficient => Some(1.3),
            EvalMode::AsIs => None,
        }
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalMode::SelfSufficient => "self-sufficient",
            EvalMode::SelfInsufficient => "self-insufficient",
            EvalMode::AsIs => "as-is",
        })
    }
}

impl FromStr for EvalMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "self-sufficient" | "sufficient" => Ok(EvalMode::SelfSufficient),
            "self-insufficient" | "insufficient" => Ok(EvalMode::SelfInsufficient),
            "as-is" => Ok(EvalMode::AsIs),
            _ => Err(format!("unknown evaluation mode '{s}' (self-sufficient, self-insufficient, as-is)")),
        }
    }
}

/// The day with every load rescaled for `mode`.
pub fn mode_scenario(day: &ScenarioDay, devices: &[MgDevices], mode: EvalMode) -> ScenarioDay {
    let Some(frac) = mode.capacity_fraction() else { return day.clone() };
    let mut out = day.clone();
    for (mg, d) in devices.iter().enumerate().take(day.n_mg()) {
        let peak = day.loads[mg].iter().cloned().fold(0.0, f64::max);
        if peak > 0.0 {
            out = out.with_scaled_load(mg, frac * d.max_dispatchable() / peak);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSettings {
    /// Noisy episodes in addition to the noise-free one.
    pub noisy_episodes: usize,
    pub noise: NoiseModel,
    /// Seed of the first noisy episode; episode `k` uses `seed + k`.
    pub seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { noisy_episodes: 10, noise: NoiseModel::default(), seed: 10_000 }
    }
}

/// Mean episode reward of the deterministic policy over one noise-free and
/// `noisy_episodes` fixed-seed noisy realizations of `day`.
pub fn test_reward(
    agent: &PpoAgent,
    devices: &MgDevices,
    env: &EnvParams,
    day: &ScenarioDay,
    mg: usize,
    settings: &EvalSettings,
) -> Result<f64, PpoError> {
    let env = MgEnv::new(devices.clone(), env.clone(), day, mg)?;
    let mut clean = MgTask::new(env.clone(), day.clone(), NoiseModel::noiseless());
    let mut total = agent.evaluate(&mut clean, 0)?.reward;
    let mut noisy = MgTask::new(env, day.clone(), settings.noise);
    for k in 0..settings.noisy_episodes {
        total += agent.evaluate(&mut noisy, settings.seed + k as u64)?.reward;
    }
    Ok(total / (1 + settings.noisy_episodes) as f64)
}

/// Test reward of each agent on its own microgrid under `mode`.
pub fn evaluate_agents(
    agents: &[PpoAgent],
    devices: &[MgDevices],
    env: &EnvParams,
    day: &ScenarioDay,
    mode: EvalMode,
    settings: &EvalSettings,
) -> Result<Vec<f64>, PpoError> {
    let day = mode_scenario(day, devices, mode);
    agents.iter().enumerate().map(|(mg, a)| test_reward(a, &devices[mg], env, &day, mg, settings)).collect()
}

/// Plays the noise-free day with the policy mean action.
pub fn dispatch_episode(
    agent: &PpoAgent,
    devices: &MgDevices,
    env: &EnvParams,
    day: &ScenarioDay,
    mg: usize,
) -> Result<Episode, PpoError> {
    let mut env = MgEnv::new(devices.clone(), env.clone(), day, mg)?;
    env.reset_realized(day)?;
    let mut transitions = Vec::new();
    let mut total = 0.0;
    while !env.done() {
        let state = env.state().clone();
        let observation = env.observation();
        let action = env.denormalize(&agent.act_deterministic(&observation)?);
        let value = agent.value(&observation)?;
        let outcome = env.step(&action)?;
        total += outcome.reward;
        transitions.push(Transition {
            state,
            observation,
            decision: Decision { action, latent: Vec::new(), log_prob: 0.0, value },
            reward: outcome.reward,
            next_state: outcome.next_state.clone(),
            outcome,
        });
    }
    Ok(Episode { transitions, total_reward: total })
}

pub const SCHEDULE_HEADER: &str = "hour,p_cg,p_ba,wind,pv,load,loss,unbalanced_demand,soc,price_dpn,cost_cg,cost_ba,reward";

/// 24-row dispatch table. Device columns are summed over units of the same kind;
/// `soc` is the mean battery state of charge after the hour.
pub fn schedule_csv(ep: &Episode) -> String {
    let mut out = String::from(SCHEDULE_HEADER);
    out.push('\n');
    for (h, t) in ep.transitions.iter().enumerate() {
        let o = &t.outcome;
        let soc = &o.next_state.soc;
        let soc = if soc.is_empty() { 0.0 } else { soc.iter().sum::<f64>() / soc.len() as f64 };
        out += &format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            h + 1,
            o.applied.p_cg.iter().sum::<f64>(),
            o.applied.p_ba.iter().sum::<f64>(),
            o.reg[0],
            o.reg[1],
            o.load,
            o.loss,
            o.deviation,
            soc,
            o.price,
            o.cost_cg,
            o.cost_ba,
            o.reward
        );
    }
    out
}

/// Test-reward table: one row per (mode, microgrid), one column per algorithm.
#[derive(Debug, Clone, PartialEq)]
pub struct TestTable {
    pub algorithms: Vec<String>,
    /// `(mode, mg, rewards per algorithm)`
    pub rows: Vec<(EvalMode, usize, Vec<f64>)>,
}

impl TestTable {
    pub fn to_csv(&self) -> String {
        let mut out = format!("working_state,agent,{}\n", self.algorithms.join(","));
        for (mode, mg, vals) in &self.rows {
            let vals: Vec<String> = vals.iter().map(|v| format!("{v:.2}")).collect();
            out += &format!("{mode},MG{},{}\n", mg + 1, vals.join(","));
        }
        out
    }
}
