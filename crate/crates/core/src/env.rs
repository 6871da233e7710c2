//! Single-microgrid MDP over a 24-hour day.
//!
//! The state at hour `t` holds the previous hour's realized load, renewable
//! outputs and distribution price plus the battery SOC. Actions are generator
//! and battery setpoints; they are clipped to device bounds and the battery
//! power is further limited by SOC feasibility before the reward is formed:
//!
//! ```text
//! r_t  = -w_C (sum C(P_cg) + sum C(P_ba)) - w_de * price_dpn(t) * |P_de|
//! P_de = P_load - (sum P_cg + sum P_reg + sum P_ba - P_loss)
//! ```

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{self, GridError, LossCoefficients, DEFAULT_INITIAL_SOC};
use crate::scenario::{sample_realization, MgDevices, NoiseModel, ScenarioDay, ScenarioError, Series, HOURS};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("hour {0} outside 1..=24")]
    HourOutOfRange(usize),
    #[error("episode already finished")]
    EpisodeDone,
    #[error("microgrid index {index} out of range (have {count})")]
    NoSuchMg { index: usize, count: usize },
    #[error("action has {got} entries, expected {expected}")]
    ActionShape { expected: usize, got: usize },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardWeights {
    pub w_c: f64,
    pub w_de: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self { w_c: 1.0, w_de: 1.0 }
    }
}

/// Scales used to turn a state into policy inputs of order one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObsScale {
    pub power: f64,
    pub price: f64,
    pub hours: f64,
}

impl Default for ObsScale {
    fn default() -> Self {
        Self { power: 600.0, price: 30.0, hours: 24.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvParams {
    pub loss: LossCoefficients,
    pub weights: RewardWeights,
    pub obs_scale: ObsScale,
    pub initial_soc: f64,
}

impl Default for EnvParams {
    fn default() -> Self {
        Self {
            loss: LossCoefficients::default(),
            weights: RewardWeights::default(),
            obs_scale: ObsScale::default(),
            initial_soc: DEFAULT_INITIAL_SOC,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MgState {
    pub prev_load: f64,
    pub prev_reg: Vec<f64>,
    /// One entry per battery.
    pub soc: Vec<f64>,
    pub prev_price: f64,
    /// 0..=23
    pub hour_index: usize,
}

impl MgState {
    pub fn observation(&self, scale: &ObsScale) -> Vec<f64> {
        let mut obs = Vec::with_capacity(3 + self.prev_reg.len() + self.soc.len());
        obs.push(self.prev_load / scale.power);
        obs.extend(self.prev_reg.iter().map(|r| r / scale.power));
        obs.extend(self.soc.iter().copied());
        obs.push(self.prev_price / scale.price);
        obs.push(self.hour_index as f64 / scale.hours);
        obs
    }
}

/// Setpoints in kW. `p_ba > 0` discharges.
#[derive(Debug, Clone, PartialEq)]
pub struct MgAction {
    pub p_cg: Vec<f64>,
    pub p_ba: Vec<f64>,
}

impl MgAction {
    pub fn to_vec(&self) -> Vec<f64> {
        self.p_cg.iter().chain(&self.p_ba).copied().collect()
    }

    pub fn from_slice(values: &[f64], n_cg: usize) -> Self {
        Self { p_cg: values[..n_cg].to_vec(), p_ba: values[n_cg..].to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next_state: MgState,
    pub reward: f64,
    /// Signed unbalanced demand; positive means generation falls short.
    pub deviation: f64,
    pub cost_cg: f64,
    pub cost_ba: f64,
    pub loss: f64,
    /// Setpoints after clipping and SOC feasibility.
    pub applied: MgAction,
    pub load: f64,
    pub reg: Vec<f64>,
    pub price: f64,
}

/// The realized hourly series seen by one microgrid.
#[derive(Debug, Clone, PartialEq)]
pub struct MgDay {
    pub load: Series,
    pub reg: Vec<Series>,
    pub price_dpn: Series,
}

impl MgDay {
    pub fn from_scenario(day: &ScenarioDay, mg: usize) -> Result<Self, EnvError> {
        if mg >= day.n_mg() {
            return Err(EnvError::NoSuchMg { index: mg, count: day.n_mg() });
        }
        Ok(Self { load: day.loads[mg], reg: vec![day.wind, day.pv], price_dpn: day.price_dpn })
    }

    /// Initial state: previous-hour observations wrap around to hour 24.
    pub fn initial_state(&self, n_ba: usize, initial_soc: f64) -> MgState {
        let last = HOURS - 1;
        MgState {
            prev_load: self.load[last],
            prev_reg: self.reg.iter().map(|s| s[last]).collect(),
            soc: vec![initial_soc; n_ba],
            prev_price: self.price_dpn[last],
            hour_index: 0,
        }
    }
}

/// Applies `action` at hour `t` (1-based) from `state`. Pure.
pub fn transition(
    devices: &MgDevices,
    params: &EnvParams,
    day: &MgDay,
    state: &MgState,
    action: &MgAction,
    t: usize,
) -> Result<StepOutcome, EnvError> {
    if !(1..=HOURS).contains(&t) {
        return Err(EnvError::HourOutOfRange(t));
    }
    let (n_cg, n_ba) = (devices.cgs.len(), devices.bas.len());
    if action.p_cg.len() != n_cg || action.p_ba.len() != n_ba {
        return Err(EnvError::ActionShape { expected: n_cg + n_ba, got: action.p_cg.len() + action.p_ba.len() });
    }
    let clipped = grid::clip_action(&action.to_vec(), &devices.bounds())?;
    let p_cg = clipped[..n_cg].to_vec();

    let mut p_ba = Vec::with_capacity(n_ba);
    let mut next_soc = Vec::with_capacity(n_ba);
    let mut cost_ba = 0.0;
    for ((ba, &soc), &p) in devices.bas.iter().zip(&state.soc).zip(&clipped[n_cg..]) {
        let step = grid::soc_step(soc, p, 1.0, ba);
        cost_ba += grid::ba_cost(step.applied_power, soc, ba)?;
        p_ba.push(step.applied_power);
        next_soc.push(step.soc);
    }
    let cost_cg = devices.cgs.iter().zip(&p_cg).map(|(cg, &p)| grid::cg_cost(p, cg)).sum::<Result<f64, _>>()?;

    let h = t - 1;
    let load = day.load[h];
    let reg: Vec<f64> = day.reg.iter().map(|s| s[h]).collect();
    let price = day.price_dpn[h];
    let loss = grid::power_loss(&p_cg, &reg, &p_ba, &params.loss);
    let generation = p_cg.iter().sum::<f64>() + reg.iter().sum::<f64>() + p_ba.iter().sum::<f64>();
    let deviation = load - (generation - loss);
    let w = params.weights;
    let reward = -w.w_c * (cost_cg + cost_ba) - w.w_de * price * deviation.abs();

    Ok(StepOutcome {
        next_state: MgState {
            prev_load: load,
            prev_reg: reg.clone(),
            soc: next_soc,
            prev_price: price,
            hour_index: t % HOURS,
        },
        reward,
        deviation,
        cost_cg,
        cost_ba,
        loss,
        applied: MgAction { p_cg, p_ba },
        load,
        reg,
        price,
    })
}

/// Stateful wrapper owning one microgrid's devices, realized day and clock.
#[derive(Debug, Clone)]
pub struct MgEnv {
    pub devices: MgDevices,
    pub params: EnvParams,
    mg_index: usize,
    day: MgDay,
    state: MgState,
    t: usize,
}

impl MgEnv {
    pub fn new(devices: MgDevices, params: EnvParams, scenario: &ScenarioDay, mg_index: usize) -> Result<Self, EnvError> {
        devices.validate()?;
        let day = MgDay::from_scenario(scenario, mg_index)?;
        let state = day.initial_state(devices.bas.len(), params.initial_soc);
        Ok(Self { devices, params, mg_index, day, state, t: 1 })
    }

    pub fn mg_index(&self) -> usize {
        self.mg_index
    }

    pub fn action_dim(&self) -> usize {
        self.devices.action_dim()
    }

    pub fn obs_dim(&self) -> usize {
        self.state.observation(&self.params.obs_scale).len()
    }

    pub fn state(&self) -> &MgState {
        &self.state
    }

    pub fn day(&self) -> &MgDay {
        &self.day
    }

    /// Next hour to be played (1-based); 25 once the episode is over.
    pub fn hour(&self) -> usize {
        self.t
    }

    pub fn done(&self) -> bool {
        self.t > HOURS
    }

    pub fn observation(&self) -> Vec<f64> {
        self.state.observation(&self.params.obs_scale)
    }

    /// Starts a new day from a realization of `scenario` under `noise`.
    pub fn reset(&mut self, scenario: &ScenarioDay, noise: &NoiseModel) -> Result<MgState, EnvError> {
        let realized = sample_realization(scenario, noise)?;
        self.reset_realized(&realized)
    }

    /// Starts a new day on an already realized scenario.
    pub fn reset_realized(&mut self, realized: &ScenarioDay) -> Result<MgState, EnvError> {
        self.day = MgDay::from_scenario(realized, self.mg_index)?;
        self.state = self.day.initial_state(self.devices.bas.len(), self.params.initial_soc);
        self.t = 1;
        Ok(self.state.clone())
    }

    pub fn step(&mut self, action: &MgAction) -> Result<StepOutcome, EnvError> {
        if self.done() {
            return Err(EnvError::EpisodeDone);
        }
        let out = transition(&self.devices, &self.params, &self.day, &self.state, action, self.t)?;
        self.state = out.next_state.clone();
        self.t += 1;
        Ok(out)
    }

    /// Affine map from `[-1, 1]` per dimension onto the device power bounds.
    pub fn denormalize(&self, normalized: &[f64]) -> MgAction {
        let values: Vec<f64> = normalized
            .iter()
            .zip(self.devices.bounds())
            .map(|(&a, (lo, hi))| lo + 0.5 * (a + 1.0) * (hi - lo))
            .collect();
        MgAction::from_slice(&values, self.devices.cgs.len())
    }
}

/// What a policy returns for one state.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub action: MgAction,
    /// Policy-internal sample behind `action` (pre-squash Gaussian draw).
    pub latent: Vec<f64>,
    pub log_prob: f64,
    pub value: f64,
}

pub trait Policy {
    fn decide(&mut self, env: &MgEnv) -> Decision;
}

impl<F: FnMut(&MgEnv) -> Decision> Policy for F {
    fn decide(&mut self, env: &MgEnv) -> Decision {
        self(env)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: MgState,
    pub observation: Vec<f64>,
    pub decision: Decision,
    pub reward: f64,
    pub next_state: MgState,
    pub outcome: StepOutcome,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub transitions: Vec<Transition>,
    pub total_reward: f64,
}

impl Episode {
    pub fn abs_deviation(&self) -> f64 {
        self.transitions.iter().map(|t| t.outcome.deviation.abs()).sum()
    }

    pub fn cost_cg(&self) -> f64 {
        self.transitions.iter().map(|t| t.outcome.cost_cg).sum()
    }

    pub fn cost_ba(&self) -> f64 {
        self.transitions.iter().map(|t| t.outcome.cost_ba).sum()
    }

    /// Hourly trace: hour, p_cg, p_ba, reg, load, loss, deviation, cost_cg, cost_ba, reward.
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("hour,p_cg,p_ba,reg,load,loss,deviation,cost_cg,cost_ba,reward\n");
        for (h, tr) in self.transitions.iter().enumerate() {
            let o = &tr.outcome;
            out += &format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                h + 1,
                o.applied.p_cg.iter().sum::<f64>(),
                o.applied.p_ba.iter().sum::<f64>(),
                o.reg.iter().sum::<f64>(),
                o.load,
                o.loss,
                o.deviation,
                o.cost_cg,
                o.cost_ba,
                o.reward
            );
        }
        out
    }
}

/// Plays one full day. The environment must already be reset.
pub fn play_episode<P: Policy + ?Sized>(env: &mut MgEnv, policy: &mut P) -> Result<Episode, EnvError> {
    let mut transitions = Vec::with_capacity(HOURS);
    let mut total = 0.0;
    while !env.done() {
        let state = env.state().clone();
        let observation = env.observation();
        let decision = policy.decide(env);
        let outcome = env.step(&decision.action)?;
        total += outcome.reward;
        transitions.push(Transition {
            state,
            observation,
            decision,
            reward: outcome.reward,
            next_state: outcome.next_state.clone(),
            outcome,
        });
    }
    Ok(Episode { transitions, total_reward: total })
}

/// Resets on a realization of `scenario` drawn with `noise` and plays a day.
pub fn run_episode<P: Policy + ?Sized>(
    env: &mut MgEnv,
    policy: &mut P,
    scenario: &ScenarioDay,
    noise: &NoiseModel,
) -> Result<Episode, EnvError> {
    env.reset(scenario, noise)?;
    play_episode(env, policy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{default_device_params, default_scenario};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn env(mg: usize) -> MgEnv {
        MgEnv::new(default_device_params()[mg].clone(), EnvParams::default(), &default_scenario(), mg).unwrap()
    }

    fn fixed(p_cg: f64, p_ba: f64) -> impl FnMut(&MgEnv) -> Decision {
        move |_: &MgEnv| Decision {
            action: MgAction { p_cg: vec![p_cg], p_ba: vec![p_ba] },
            latent: vec![],
            log_prob: 0.0,
            value: 0.0,
        }
    }

    #[test]
    fn reset_wraps_to_last_hour() {
        let mut e = env(0);
        let s = e.reset(&default_scenario(), &NoiseModel::noiseless()).unwrap();
        assert_eq!(s.prev_load, 447.30);
        assert_eq!(s.soc, vec![0.5]);
        assert_eq!(s.prev_reg, vec![44.12, 0.0]);
        assert_eq!(s.prev_price, 8.87);
        assert_eq!(s.hour_index, 0);
    }

    #[test]
    fn seeded_reset_is_deterministic() {
        let noise = NoiseModel::default().with_seed(11);
        let (mut a, mut b) = (env(1), env(1));
        assert_eq!(a.reset(&default_scenario(), &noise).unwrap(), b.reset(&default_scenario(), &noise).unwrap());
    }

    #[test]
    fn episode_ends_after_24_steps() {
        let mut e = env(2);
        e.reset(&default_scenario(), &NoiseModel::noiseless()).unwrap();
        for _ in 0..24 {
            e.step(&MgAction { p_cg: vec![100.0], p_ba: vec![0.0] }).unwrap();
        }
        assert!(e.done());
        assert!(matches!(e.step(&MgAction { p_cg: vec![0.0], p_ba: vec![0.0] }), Err(EnvError::EpisodeDone)));
    }

    #[test]
    fn hour_one_example() {
        let e = env(0);
        let out = transition(
            &e.devices,
            &e.params,
            e.day(),
            e.state(),
            &MgAction { p_cg: vec![200.0], p_ba: vec![50.0] },
            1,
        )
        .unwrap();
        assert!((out.loss - 6.0296).abs() < 1e-9);
        assert!((out.deviation - 162.2496).abs() < 1e-9);
        assert!((out.cost_cg - 1531.0).abs() < 1e-9);
        assert!((out.cost_ba - 957.5625).abs() < 1e-9);
        assert!((out.reward - (-3892.02154)).abs() < 1e-6, "{}", out.reward);
        assert_eq!(out.next_state.hour_index, 1);
        assert_eq!(out.next_state.prev_load, 457.70);
    }

    #[test]
    fn hour_out_of_range() {
        let e = env(0);
        let a = MgAction { p_cg: vec![0.0], p_ba: vec![0.0] };
        assert!(matches!(transition(&e.devices, &e.params, e.day(), e.state(), &a, 0), Err(EnvError::HourOutOfRange(0))));
        assert!(transition(&e.devices, &e.params, e.day(), e.state(), &a, 25).is_err());
    }

    #[test]
    fn balanced_free_action_gives_zero_reward() {
        let mut devices = default_device_params()[1].clone();
        for c in devices.cgs.iter_mut() {
            (c.a, c.b, c.c) = (0.0, 0.0, 0.0);
        }
        for b in devices.bas.iter_mut() {
            (b.a, b.b, b.c) = (0.0, 0.0, 0.0);
        }
        let params = EnvParams { loss: LossCoefficients::uniform(0.0), ..EnvParams::default() };
        let e = MgEnv::new(devices, params, &default_scenario(), 1).unwrap();
        let day = e.day();
        let need = day.load[0] - day.reg[0][0] - day.reg[1][0];
        let out =
            transition(&e.devices, &e.params, day, e.state(), &MgAction { p_cg: vec![need], p_ba: vec![0.0] }, 1).unwrap();
        assert!(out.deviation.abs() < 1e-12);
        assert_eq!(out.reward, 0.0);
    }

    #[test]
    fn doubling_deviation_weight_doubles_only_deviation_term() {
        let base = env(0);
        let mut doubled = env(0);
        doubled.params.weights.w_de = 2.0;
        let a = MgAction { p_cg: vec![150.0], p_ba: vec![-20.0] };
        let o1 = transition(&base.devices, &base.params, base.day(), base.state(), &a, 3).unwrap();
        let o2 = transition(&doubled.devices, &doubled.params, doubled.day(), doubled.state(), &a, 3).unwrap();
        let cost = o1.cost_cg + o1.cost_ba;
        let dev1 = -o1.reward - cost;
        let dev2 = -o2.reward - cost;
        assert!((dev2 - 2.0 * dev1).abs() < 1e-9);
        assert_eq!(o1.cost_cg + o1.cost_ba, o2.cost_cg + o2.cost_ba);
    }

    #[test]
    fn null_policy_episode_matches_closed_form() {
        // Oracle: with zero setpoints the battery only self-discharges, the
        // deviation is load - reg * (1 - lambda) and costs are the constant
        // terms plus the SOC-dependent battery offset.
        let mut e = env(1);
        let ep = run_episode(&mut e, &mut fixed(0.0, 0.0), &default_scenario(), &NoiseModel::noiseless()).unwrap();
        let d = default_scenario();
        let ba = default_device_params()[1].bas[0];
        let mut soc: f64 = 0.5;
        let mut expected = 0.0;
        for h in 0..24 {
            let x = 3.0 * 50.0 * (1.0 - soc);
            let cost = 365.0 + ba.a * x * x + ba.b * x + ba.c;
            let dev = d.loads[1][h] - 0.98 * (d.wind[h] + d.pv[h]);
            expected += -cost - d.price_dpn[h] * dev.abs();
            soc = (soc * 0.998).max(0.1);
        }
        assert!((ep.total_reward - expected).abs() < 1e-9, "{} vs {}", ep.total_reward, expected);
        let per_step: f64 = ep.transitions.iter().map(|t| t.reward).sum();
        assert!((ep.total_reward - per_step).abs() < 1e-9);
    }

    #[test]
    fn transitions_chain_and_replay() {
        let noise = NoiseModel::default().with_seed(5);
        let mut e = env(0);
        let a = run_episode(&mut e, &mut fixed(120.0, 20.0), &default_scenario(), &noise).unwrap();
        let b = run_episode(&mut e, &mut fixed(120.0, 20.0), &default_scenario(), &noise).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.transitions.len(), 24);
        for w in a.transitions.windows(2) {
            assert_eq!(w[0].next_state, w[1].state);
        }
        assert_eq!(a.trace_csv().lines().count(), 25);
    }

    #[test]
    fn larger_imbalance_lowers_reward() {
        let e = env(2);
        let day = e.day();
        // MG3 at hour 8: deviation grows as generation drops below the balance point
        let mut last = f64::NEG_INFINITY;
        for p in [150.0, 120.0, 90.0, 60.0] {
            let o = transition(&e.devices, &e.params, day, e.state(), &MgAction { p_cg: vec![p], p_ba: vec![0.0] }, 8)
                .unwrap();
            assert!(o.deviation > 0.0);
            let dev_term = -o.reward - o.cost_cg - o.cost_ba;
            assert!(dev_term > last);
            last = dev_term;
        }
        // fixed costs, varying |P_de| only
        let mut params = e.params.clone();
        params.weights.w_c = 0.0;
        let r = |p: f64| {
            transition(&e.devices, &params, day, e.state(), &MgAction { p_cg: vec![p], p_ba: vec![0.0] }, 8).unwrap().reward
        };
        assert!(r(150.0) > r(100.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn adversarial_policy_stays_feasible(seed in 0u64..1000, mg in 0usize..3) {
            let mut e = env(mg);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let bounds = e.devices.bounds();
            for ep in 0..26 {
                e.reset(&default_scenario(), &NoiseModel::default().with_seed(seed * 100 + ep)).unwrap();
                while !e.done() {
                    let a = MgAction { p_cg: vec![rng.random_range(-1e4..1e4)], p_ba: vec![rng.random_range(-1e4..1e4)] };
                    let soc_before = e.state().soc[0];
                    let o = e.step(&a).unwrap();
                    let applied = o.applied.to_vec();
                    for (v, (lo, hi)) in applied.iter().zip(&bounds) {
                        prop_assert!(v >= lo && v <= hi);
                    }
                    let ba = &e.devices.bas[0];
                    prop_assert!(o.next_state.soc[0] >= ba.soc_min && o.next_state.soc[0] <= ba.soc_max);
                    prop_assert!(soc_before >= ba.soc_min);
                    let w = e.params.weights;
                    let identity = -w.w_c * (o.cost_cg + o.cost_ba) - w.w_de * o.price * o.deviation.abs();
                    prop_assert!((o.reward - identity).abs() < 1e-9);
                }
            }
        }
    }
}
