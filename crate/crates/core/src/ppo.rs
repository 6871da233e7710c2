//! Local PPO self-training for one agent.
//!
//! The policy is a diagonal Gaussian over a latent `u`, squashed to `[-1, 1]`
//! by `tanh`. The actor network outputs the Gaussian means and, through a
//! bounded squash, the log standard deviations. Each training epoch
//! collects a few full-day rollouts, computes GAE advantages from the critic
//! values recorded at collection time, then takes several full-batch Adam
//! steps on the clipped surrogate and on the TD critic loss.
//!
//! Sign convention: [`actor_loss`] returns the surrogate *objective* (to be
//! maximized) and its gradient; the optimizer descends on its negation.

use std::f64::consts::{LN_2, PI};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{EnvError, MgAction, MgEnv};
use crate::nn::{self, Adam, AgentParams, AgentSpec, NnError, ParamVector};
use crate::scenario::{NoiseModel, ScenarioDay};

#[derive(Debug, Error)]
pub enum PpoError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("expected {expected} values, got {got}")]
    Length { expected: usize, got: usize },
    #[error("non-finite probability ratio at sample {0}")]
    NonFiniteRatio(usize),
    #[error("non-finite {what} at epoch {epoch}")]
    NonFiniteLoss { what: &'static str, epoch: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoHyper {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_eps: f64,
    pub lr_actor: f64,
    pub lr_critic: f64,
    /// Full-batch optimizer passes per epoch.
    pub epochs_per_update: usize,
    pub episodes_per_epoch: usize,
    pub normalize_advantages: bool,
    /// Differentiate the critic loss through `V(s')` as well.
    pub faithful_critic: bool,
    /// Multiplies rewards before they reach the critic and GAE.
    pub reward_scale: f64,
    pub hidden: Vec<usize>,
    pub init_log_std: f64,
    pub log_std_min: f64,
    pub log_std_max: f64,
}

impl Default for PpoHyper {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_eps: 0.2,
            lr_actor: 1e-4,
            lr_critic: 1e-3,
            epochs_per_update: 4,
            episodes_per_epoch: 4,
            normalize_advantages: true,
            faithful_critic: false,
            reward_scale: 1e-4,
            hidden: vec![64, 64],
            init_log_std: 0.5f64.ln(),
            log_std_min: 0.01f64.ln(),
            log_std_max: 0.0,
        }
    }
}

impl PpoHyper {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err("gamma and gae_lambda must lie in [0, 1]".into());
        }
        if !(self.clip_eps > 0.0) {
            return Err("clip_eps must be positive".into());
        }
        if self.episodes_per_epoch == 0 {
            return Err("episodes_per_epoch must be at least 1".into());
        }
        if !(self.log_std_min < self.init_log_std && self.init_log_std < self.log_std_max) {
            return Err("init_log_std must lie strictly between log_std_min and log_std_max".into());
        }
        Ok(())
    }
}

/// Generalized advantage estimates by the backward recursion
/// `A_t = delta_t + gamma lambda A_{t+1}`, `delta_t = r_t + gamma V_{t+1} - V_t`.
/// `values` carries one bootstrap entry past the last reward.
pub fn gae(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Result<Vec<f64>, PpoError> {
    if values.len() != rewards.len() + 1 {
        return Err(PpoError::Length { expected: rewards.len() + 1, got: values.len() });
    }
    let mut adv = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        let delta = rewards[t] + gamma * values[t + 1] - values[t];
        acc = delta + gamma * lambda * acc;
        adv[t] = acc;
    }
    Ok(adv)
}

/// Centers and scales to unit standard deviation. Strictly increasing, so
/// the ordering of advantages is kept.
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.len() < 2 {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let std = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
    for a in adv.iter_mut() {
        *a = (*a - mean) / (std + 1e-8);
    }
}

/// `ln(1 - tanh(u)^2)` without cancellation.
fn log_one_minus_tanh_sq(u: f64) -> f64 {
    2.0 * (LN_2 - u - softplus(-2.0 * u))
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Log-density of the squashed action whose latent is `u`.
pub fn squashed_log_prob(mean: &[f64], log_std: &[f64], u: &[f64]) -> f64 {
    mean.iter()
        .zip(log_std)
        .zip(u)
        .map(|((m, s), u)| {
            let z = (u - m) / s.exp();
            -0.5 * z * z - s - 0.5 * (2.0 * PI).ln() - log_one_minus_tanh_sq(*u)
        })
        .sum()
}

/// One training sample: the observation, the latent action drawn at
/// collection time and everything the two losses need.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub obs: Vec<f64>,
    pub latent: Vec<f64>,
    pub old_log_prob: f64,
    pub advantage: f64,
    /// Reward as seen by the critic (already scaled).
    pub reward: f64,
    pub next_obs: Vec<f64>,
    pub terminal: bool,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Gaussian head of the actor output: means, log-stds and the derivative of
/// each log-std with respect to its raw output. The log-std is squashed
/// smoothly into `[log_std_min, log_std_max]` and equals `init_log_std`
/// when the raw output is zero.
pub fn policy_head(out: &[f64], hyper: &PpoHyper) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = out.len() / 2;
    let (lo, hi) = (hyper.log_std_min, hyper.log_std_max);
    let frac = (hyper.init_log_std - lo) / (hi - lo);
    let offset = (frac / (1.0 - frac)).ln();
    let (mut log_std, mut dlog) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for raw in &out[n..] {
        let s = sigmoid(raw + offset);
        log_std.push(lo + (hi - lo) * s);
        dlog.push((hi - lo) * s * (1.0 - s));
    }
    (out[..n].to_vec(), log_std, dlog)
}

/// Clipped surrogate `mean(min(rho A, clip(rho, 1-eps, 1+eps) A))` and its
/// gradient with respect to the actor parameters.
pub fn actor_loss(
    spec: &AgentSpec,
    params: &AgentParams,
    batch: &[Sample],
    hyper: &PpoHyper,
) -> Result<(f64, Vec<f64>), PpoError> {
    let mut actor_grad = vec![0.0; spec.actor.param_count()];
    if batch.is_empty() {
        return Ok((0.0, actor_grad));
    }
    let n = batch.len() as f64;
    let eps = hyper.clip_eps;
    let mut objective = 0.0;
    let n_act = spec.action_dim;
    let mut out_grad = vec![0.0; 2 * n_act];
    for (i, s) in batch.iter().enumerate() {
        let trace = spec.actor.forward_trace(&params.actor, &s.obs)?;
        let (mean, log_std, dlog) = policy_head(trace.output(), hyper);
        let ratio = (squashed_log_prob(&mean, &log_std, &s.latent) - s.old_log_prob).exp();
        if !ratio.is_finite() {
            return Err(PpoError::NonFiniteRatio(i));
        }
        let unclipped = ratio * s.advantage;
        let clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * s.advantage;
        objective += unclipped.min(clipped) / n;
        if unclipped > clipped {
            continue;
        }
        // d rho = rho * d log pi
        let w = s.advantage * ratio / n;
        for (k, ((m, ls), u)) in mean.iter().zip(&log_std).zip(&s.latent).enumerate() {
            let sigma = ls.exp();
            let z = (u - m) / sigma;
            out_grad[k] = w * z / sigma;
            out_grad[n_act + k] = w * (z * z - 1.0) * dlog[k];
        }
        spec.actor.backward_into(&params.actor, &trace, &out_grad, &mut actor_grad)?;
    }
    Ok((objective, actor_grad))
}

/// Mean squared TD error `mean((gamma V(s') + r - V(s))^2)` with `V(s') = 0`
/// on terminal samples. With `faithful` the gradient also flows through
/// `V(s')`; otherwise the target is held fixed.
pub fn critic_loss(
    spec: &AgentSpec,
    critic: &[f64],
    batch: &[Sample],
    gamma: f64,
    faithful: bool,
) -> Result<(f64, Vec<f64>), PpoError> {
    let mut grad = vec![0.0; spec.critic.param_count()];
    if batch.is_empty() {
        return Ok((0.0, grad));
    }
    let n = batch.len() as f64;
    let mut loss = 0.0;
    for s in batch {
        let trace = spec.critic.forward_trace(critic, &s.obs)?;
        let v = trace.output()[0];
        let next = if s.terminal { None } else { Some(spec.critic.forward_trace(critic, &s.next_obs)?) };
        let v_next = next.as_ref().map_or(0.0, |t| t.output()[0]);
        let td = gamma * v_next + s.reward - v;
        loss += td * td / n;
        spec.critic.backward_into(critic, &trace, &[-2.0 * td / n], &mut grad)?;
        if faithful {
            if let Some(t) = &next {
                spec.critic.backward_into(critic, t, &[2.0 * gamma * td / n], &mut grad)?;
            }
        }
    }
    Ok((loss, grad))
}

/// Result of one environment step as seen by the learner.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskStep {
    pub obs: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    pub abs_deviation: f64,
    pub cost_cg: f64,
    pub cost_ba: f64,
}

/// Episodic task with normalized actions in `[-1, 1]`.
pub trait Task {
    fn obs_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn reset(&mut self, seed: u64) -> Result<Vec<f64>, PpoError>;
    fn step(&mut self, action: &[f64]) -> Result<TaskStep, PpoError>;
}

/// A microgrid environment replaying noisy realizations of one scenario.
#[derive(Debug, Clone)]
pub struct MgTask {
    pub env: MgEnv,
    pub scenario: ScenarioDay,
    pub noise: NoiseModel,
}

impl MgTask {
    pub fn new(env: MgEnv, scenario: ScenarioDay, noise: NoiseModel) -> Self {
        Self { env, scenario, noise }
    }

    pub fn kw_action(&self, normalized: &[f64]) -> MgAction {
        self.env.denormalize(normalized)
    }
}

impl Task for MgTask {
    fn obs_dim(&self) -> usize {
        self.env.obs_dim()
    }

    fn action_dim(&self) -> usize {
        self.env.action_dim()
    }

    fn reset(&mut self, seed: u64) -> Result<Vec<f64>, PpoError> {
        self.env.reset(&self.scenario, &self.noise.with_seed(seed))?;
        Ok(self.env.observation())
    }

    fn step(&mut self, action: &[f64]) -> Result<TaskStep, PpoError> {
        let out = self.env.step(&self.env.denormalize(action))?;
        Ok(TaskStep {
            obs: self.env.observation(),
            reward: out.reward,
            done: self.env.done(),
            abs_deviation: out.deviation.abs(),
            cost_cg: out.cost_cg,
            cost_ba: out.cost_ba,
        })
    }
}

/// Per-episode totals.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EpisodeSummary {
    pub reward: f64,
    pub abs_deviation: f64,
    pub cost_cg: f64,
    pub cost_ba: f64,
}

impl EpisodeSummary {
    fn add(&mut self, s: &TaskStep) {
        self.reward += s.reward;
        self.abs_deviation += s.abs_deviation;
        self.cost_cg += s.cost_cg;
        self.cost_ba += s.cost_ba;
    }
}

/// Training-curve row for one local epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    /// Global epoch number, 1-based.
    pub epoch: usize,
    pub mean_reward: f64,
    pub actor_objective: f64,
    pub critic_loss: f64,
    pub mean_abs_deviation: f64,
    pub mean_cost_cg: f64,
    pub mean_cost_ba: f64,
    /// Deterministic evaluation reward, when evaluated this epoch.
    pub eval_reward: Option<f64>,
}

impl EpochStats {
    pub const CSV_HEADER: &'static str =
        "epoch,mean_reward,actor_objective,critic_loss,mean_abs_deviation,mean_cost_cg,mean_cost_ba,eval_reward";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            self.mean_reward,
            self.actor_objective,
            self.critic_loss,
            self.mean_abs_deviation,
            self.mean_cost_cg,
            self.mean_cost_ba,
            self.eval_reward.map(|v| v.to_string()).unwrap_or_default()
        )
    }
}

/// Actor-critic learner with its own optimizer state.
#[derive(Debug, Clone)]
pub struct PpoAgent {
    pub spec: AgentSpec,
    pub params: AgentParams,
    pub hyper: PpoHyper,
    actor_opt: Adam,
    critic_opt: Adam,
    /// Number of completed training epochs.
    pub epochs_trained: u64,
}

impl PpoAgent {
    pub fn new<R: Rng + ?Sized>(obs_dim: usize, action_dim: usize, hyper: PpoHyper, rng: &mut R) -> Result<Self, PpoError> {
        let spec = AgentSpec::new(obs_dim, action_dim, &hyper.hidden)?;
        let mut actor = spec.actor.init(rng);
        // zero the log-std rows of the output layer so every state starts at init_log_std
        let sizes = spec.actor.sizes();
        let (fan_in, out) = (sizes[sizes.len() - 2], sizes[sizes.len() - 1]);
        let last = actor.len() - out * fan_in - out;
        for r in action_dim..out {
            actor[last + r * fan_in..last + (r + 1) * fan_in].fill(0.0);
            actor[last + out * fan_in + r] = 0.0;
        }
        let params = AgentParams { actor, critic: spec.critic.init(rng) };
        Ok(Self::from_params(spec, params, hyper))
    }

    pub fn from_params(spec: AgentSpec, params: AgentParams, hyper: PpoHyper) -> Self {
        let actor_opt = Adam::new(spec.actor.param_count(), hyper.lr_actor);
        let critic_opt = Adam::new(spec.critic.param_count(), hyper.lr_critic);
        Self { spec, params, hyper, actor_opt, critic_opt, epochs_trained: 0 }
    }

    pub fn param_vector(&self) -> ParamVector {
        nn::flatten(&self.spec, &self.params).expect("agent parameters match their own spec")
    }

    /// Replaces every parameter and zeroes the optimizer moments.
    pub fn load_param_vector(&mut self, v: &ParamVector) -> Result<(), PpoError> {
        self.params = nn::unflatten(&self.spec, v)?;
        self.actor_opt.reset();
        self.critic_opt.reset();
        Ok(())
    }

    /// Gaussian means and log-stds of the latent action.
    pub fn distribution(&self, obs: &[f64]) -> Result<(Vec<f64>, Vec<f64>), PpoError> {
        let (mean, log_std, _) = policy_head(&self.spec.actor.forward(&self.params.actor, obs)?, &self.hyper);
        Ok((mean, log_std))
    }

    pub fn value(&self, obs: &[f64]) -> Result<f64, PpoError> {
        Ok(self.spec.critic.forward(&self.params.critic, obs)?[0])
    }

    /// Mean action squashed into `[-1, 1]`.
    pub fn act_deterministic(&self, obs: &[f64]) -> Result<Vec<f64>, PpoError> {
        Ok(self.distribution(obs)?.0.into_iter().map(f64::tanh).collect())
    }

    /// Samples `(action, latent, log_prob)`.
    pub fn act<R: Rng + ?Sized>(&self, obs: &[f64], rng: &mut R) -> Result<(Vec<f64>, Vec<f64>, f64), PpoError> {
        let (mean, log_std) = self.distribution(obs)?;
        let latent: Vec<f64> =
            mean.iter().zip(&log_std).map(|(m, s)| m + s.exp() * rng.sample::<f64, _>(StandardNormal)).collect();
        let log_prob = squashed_log_prob(&mean, &log_std, &latent);
        Ok((latent.iter().map(|u| u.tanh()).collect(), latent, log_prob))
    }

    /// Plays one episode with the mean action.
    pub fn evaluate<T: Task + ?Sized>(&self, task: &mut T, seed: u64) -> Result<EpisodeSummary, PpoError> {
        let mut obs = task.reset(seed)?;
        let mut summary = EpisodeSummary::default();
        loop {
            let step = task.step(&self.act_deterministic(&obs)?)?;
            summary.add(&step);
            obs = step.obs;
            if step.done {
                return Ok(summary);
            }
        }
    }

    fn collect<T: Task + ?Sized, R: Rng + ?Sized>(
        &self,
        task: &mut T,
        rng: &mut R,
    ) -> Result<(Vec<Sample>, Vec<EpisodeSummary>), PpoError> {
        let mut batch = Vec::new();
        let mut summaries = Vec::with_capacity(self.hyper.episodes_per_epoch);
        for _ in 0..self.hyper.episodes_per_epoch {
            let mut obs = task.reset(rng.next_u64())?;
            let mut summary = EpisodeSummary::default();
            let mut episode = Vec::new();
            let mut values = Vec::new();
            loop {
                let (action, latent, log_prob) = self.act(&obs, rng)?;
                values.push(self.value(&obs)?);
                let step = task.step(&action)?;
                summary.add(&step);
                episode.push(Sample {
                    obs: std::mem::take(&mut obs),
                    latent,
                    old_log_prob: log_prob,
                    advantage: 0.0,
                    reward: step.reward * self.hyper.reward_scale,
                    next_obs: step.obs.clone(),
                    terminal: step.done,
                });
                obs = step.obs;
                if step.done {
                    break;
                }
            }
            values.push(0.0);
            let rewards: Vec<f64> = episode.iter().map(|s| s.reward).collect();
            let adv = gae(&rewards, &values, self.hyper.gamma, self.hyper.gae_lambda)?;
            for (s, a) in episode.iter_mut().zip(adv) {
                s.advantage = a;
            }
            batch.extend(episode);
            summaries.push(summary);
        }
        if self.hyper.normalize_advantages {
            let mut adv: Vec<f64> = batch.iter().map(|s| s.advantage).collect();
            normalize_advantages(&mut adv);
            for (s, a) in batch.iter_mut().zip(adv) {
                s.advantage = a;
            }
        }
        Ok((batch, summaries))
    }

    /// Optimizer passes over one batch; returns the pre-update actor
    /// objective and critic loss.
    pub fn update(&mut self, batch: &[Sample]) -> Result<(f64, f64), PpoError> {
        let mut first = None;
        for _ in 0..self.hyper.epochs_per_update.max(1) {
            let (objective, actor_grad) = actor_loss(&self.spec, &self.params, batch, &self.hyper)?;
            let (loss, critic_grad) =
                critic_loss(&self.spec, &self.params.critic, batch, self.hyper.gamma, self.hyper.faithful_critic)?;
            first.get_or_insert((objective, loss));

            let descent: Vec<f64> = actor_grad.iter().map(|g| -g).collect();
            self.actor_opt.step(&mut self.params.actor, &descent)?;
            self.critic_opt.step(&mut self.params.critic, &critic_grad)?;
        }
        Ok(first.unwrap_or((0.0, 0.0)))
    }

    /// Runs `n_epochs` of collect, advantage estimation and update.
    /// Evaluates deterministically on `eval_task` every `eval_every` epochs
    /// and on the last one.
    pub fn local_update<T: Task + ?Sized, E: Task + ?Sized, R: Rng + ?Sized>(
        &mut self,
        task: &mut T,
        eval_task: &mut E,
        n_epochs: usize,
        eval_every: usize,
        rng: &mut R,
    ) -> Result<Vec<EpochStats>, PpoError> {
        let mut history = Vec::with_capacity(n_epochs);
        for i in 0..n_epochs {
            let epoch = self.epochs_trained as usize + 1;
            let (batch, episodes) = self.collect(task, rng)?;
            let (actor_objective, critic_loss) = self.update(&batch)?;
            if !actor_objective.is_finite() {
                return Err(PpoError::NonFiniteLoss { what: "actor objective", epoch });
            }
            if !critic_loss.is_finite() {
                return Err(PpoError::NonFiniteLoss { what: "critic loss", epoch });
            }
            self.epochs_trained += 1;
            let k = episodes.len() as f64;
            let avg = |f: fn(&EpisodeSummary) -> f64| episodes.iter().map(f).sum::<f64>() / k;
            let eval_reward = if (eval_every > 0 && epoch % eval_every == 0) || i + 1 == n_epochs {
                Some(self.evaluate(eval_task, 0)?.reward)
            } else {
                None
            };
            history.push(EpochStats {
                epoch,
                mean_reward: avg(|e| e.reward),
                actor_objective,
                critic_loss,
                mean_abs_deviation: avg(|e| e.abs_deviation),
                mean_cost_cg: avg(|e| e.cost_cg),
                mean_cost_ba: avg(|e| e.cost_ba),
                eval_reward,
            });
        }
        Ok(history)
    }
}
