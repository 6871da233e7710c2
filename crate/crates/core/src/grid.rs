//! Device physics for a single microgrid: generator and battery cost curves,
//! battery state-of-charge dynamics, incremental network loss and action
//! clipping.
//!
//! Every function here is pure. Powers are in kW, energies in kWh, costs in $
//! and the step length is one hour unless stated otherwise.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("power {power} kW outside [{min}, {max}]")]
    PowerOutOfBounds { power: f64, min: f64, max: f64 },
    #[error("state of charge {soc} outside [{min}, {max}]")]
    SocOutOfBounds { soc: f64, min: f64, max: f64 },
    #[error("invalid device parameters: {0}")]
    InvalidParams(String),
    #[error("expected {expected} values, got {got}")]
    LengthMismatch { expected: usize, got: usize },
}

/// Quadratic cost curve and output range of a conventional generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CgParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub p_min: f64,
    pub p_max: f64,
}

impl CgParams {
    pub fn validate(&self) -> Result<(), GridError> {
        if !(self.p_min <= self.p_max) {
            return Err(GridError::InvalidParams(format!(
                "generator p_min {} > p_max {}",
                self.p_min, self.p_max
            )));
        }
        if !(self.a >= 0.0) {
            return Err(GridError::InvalidParams(format!("generator a = {} < 0", self.a)));
        }
        Ok(())
    }
}

/// How the efficiencies enter the state-of-charge update.
///
/// `AsPrinted` follows the published dynamics literally: charging adds
/// `|P| / (eta_ch * C)` and discharging removes `eta_dch * P / C`. With
/// efficiencies below one this stores more energy than it draws, so a
/// charge/discharge cycle returns more than it took. `Physical` places the
/// efficiencies the lossy way round (`eta_ch * |P| / C` in,
/// `P / (eta_dch * C)` out).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EfficiencyConvention {
    #[default]
    AsPrinted,
    Physical,
}

/// Battery parameters. `p_min` is the maximum charging power (negative),
/// `p_max` the maximum discharging power (positive).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub p_min: f64,
    pub p_max: f64,
    /// kWh
    pub capacity: f64,
    pub eta_ch: f64,
    pub eta_dch: f64,
    /// self-discharge per one-hour step
    pub delta: f64,
    pub soc_min: f64,
    pub soc_max: f64,
    #[serde(default)]
    pub convention: EfficiencyConvention,
}

pub const DEFAULT_BA_CAPACITY: f64 = 200.0;
pub const DEFAULT_BA_EFFICIENCY: f64 = 0.95;
pub const DEFAULT_SELF_DISCHARGE: f64 = 0.002;
pub const DEFAULT_SOC_MIN: f64 = 0.1;
pub const DEFAULT_SOC_MAX: f64 = 0.9;
pub const DEFAULT_INITIAL_SOC: f64 = 0.5;

impl BaParams {
    /// Battery with the given cost curve and power range and default storage
    /// characteristics.
    pub fn with_costs(a: f64, b: f64, c: f64, p_min: f64, p_max: f64) -> Self {
        Self {
            a,
            b,
            c,
            p_min,
            p_max,
            capacity: DEFAULT_BA_CAPACITY,
            eta_ch: DEFAULT_BA_EFFICIENCY,
            eta_dch: DEFAULT_BA_EFFICIENCY,
            delta: DEFAULT_SELF_DISCHARGE,
            soc_min: DEFAULT_SOC_MIN,
            soc_max: DEFAULT_SOC_MAX,
            convention: EfficiencyConvention::AsPrinted,
        }
    }

    pub fn validate(&self) -> Result<(), GridError> {
        let bad = |msg: String| Err(GridError::InvalidParams(msg));
        if !(self.p_min < 0.0 && 0.0 < self.p_max) {
            return bad(format!("battery needs p_min < 0 < p_max, got [{}, {}]", self.p_min, self.p_max));
        }
        if !(0.0 <= self.soc_min && self.soc_min < self.soc_max && self.soc_max <= 1.0) {
            return bad(format!("battery SOC bounds [{}, {}] invalid", self.soc_min, self.soc_max));
        }
        if !(self.eta_ch > 0.0 && self.eta_ch <= 1.0 && self.eta_dch > 0.0 && self.eta_dch <= 1.0) {
            return bad(format!("battery efficiencies ({}, {}) not in (0, 1]", self.eta_ch, self.eta_dch));
        }
        if !(0.0 <= self.delta && self.delta < 1.0) {
            return bad(format!("battery self-discharge {} not in [0, 1)", self.delta));
        }
        if !(self.capacity > 0.0) {
            return bad(format!("battery capacity {} must be positive", self.capacity));
        }
        if !(self.a >= 0.0) {
            return bad(format!("battery a = {} < 0", self.a));
        }
        Ok(())
    }

    /// SOC change per kW of charging power (applied to `-p`, `p < 0`).
    fn charge_gain(&self) -> f64 {
        match self.convention {
            EfficiencyConvention::AsPrinted => 1.0 / (self.eta_ch * self.capacity),
            EfficiencyConvention::Physical => self.eta_ch / self.capacity,
        }
    }

    /// SOC drop per kW of discharging power.
    fn discharge_drain(&self) -> f64 {
        match self.convention {
            EfficiencyConvention::AsPrinted => self.eta_dch / self.capacity,
            EfficiencyConvention::Physical => 1.0 / (self.eta_dch * self.capacity),
        }
    }
}

/// Incremental loss coefficients (dP_loss / dP) per device class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossCoefficients {
    pub lambda_cg: f64,
    pub lambda_reg: f64,
    pub lambda_ba: f64,
}

impl Default for LossCoefficients {
    fn default() -> Self {
        Self { lambda_cg: 0.02, lambda_reg: 0.02, lambda_ba: 0.02 }
    }
}

impl LossCoefficients {
    pub fn uniform(lambda: f64) -> Self {
        Self { lambda_cg: lambda, lambda_reg: lambda, lambda_ba: lambda }
    }

    pub fn validate(&self) -> Result<(), GridError> {
        for (name, v) in [("cg", self.lambda_cg), ("reg", self.lambda_reg), ("ba", self.lambda_ba)] {
            if !(0.0..=0.1).contains(&v) {
                return Err(GridError::InvalidParams(format!("loss coefficient {name} = {v} not in [0, 0.1]")));
            }
        }
        Ok(())
    }
}

fn check_power(p: f64, min: f64, max: f64) -> Result<(), GridError> {
    if p >= min && p <= max {
        Ok(())
    } else {
        Err(GridError::PowerOutOfBounds { power: p, min, max })
    }
}

/// Generation cost `a p^2 + b p + c`. `p` must already be inside the
/// generator's range.
pub fn cg_cost(p: f64, params: &CgParams) -> Result<f64, GridError> {
    check_power(p, params.p_min, params.p_max)?;
    Ok(params.a * p * p + params.b * p + params.c)
}

/// Battery operating cost: the quadratic evaluated at the effective power
/// `p + 3 p_max (1 - soc)`. Not clamped; deep charging at high SOC can give
/// a negative cost.
pub fn ba_cost(p: f64, soc: f64, params: &BaParams) -> Result<f64, GridError> {
    check_power(p, params.p_min, params.p_max)?;
    if !(soc >= params.soc_min && soc <= params.soc_max) {
        return Err(GridError::SocOutOfBounds { soc, min: params.soc_min, max: params.soc_max });
    }
    let x = p + 3.0 * params.p_max * (1.0 - soc);
    Ok(params.a * x * x + params.b * x + params.c)
}

/// Unclamped SOC update for one step with power `p` (positive discharges).
pub fn soc_transition(soc: f64, p: f64, dt: f64, params: &BaParams) -> f64 {
    let retained = (1.0 - params.delta) * soc;
    if p < 0.0 {
        retained - p * dt * params.charge_gain()
    } else {
        retained - p * dt * params.discharge_drain()
    }
}

/// Result of a feasible battery step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SocStep {
    pub soc: f64,
    /// Power actually applied after enforcing the SOC bounds.
    pub applied_power: f64,
}

/// Largest discharge and charge magnitudes that keep the next SOC inside
/// `[soc_min, soc_max]`, both non-negative.
pub fn feasible_power_range(soc: f64, dt: f64, params: &BaParams) -> (f64, f64) {
    let retained = (1.0 - params.delta) * soc;
    let discharge = ((retained - params.soc_min) / (dt * params.discharge_drain())).max(0.0);
    let charge = ((params.soc_max - retained) / (dt * params.charge_gain())).max(0.0);
    (discharge, charge)
}

/// SOC step with energy feasibility: the commanded power is reduced to the
/// boundary-feasible value when it would leave the SOC bounds, and the
/// resulting SOC is clamped (self-discharge alone can dip below `soc_min`).
pub fn soc_step(soc: f64, p: f64, dt: f64, params: &BaParams) -> SocStep {
    let (max_discharge, max_charge) = feasible_power_range(soc, dt, params);
    let applied = p.clamp(-max_charge, max_discharge);
    let next = soc_transition(soc, applied, dt, params).clamp(params.soc_min, params.soc_max);
    SocStep { soc: next, applied_power: applied }
}

/// Linear network loss `sum(lambda_cg P_cg) + sum(lambda_reg P_reg) + sum(lambda_ba P_ba)`.
pub fn power_loss(p_cgs: &[f64], p_regs: &[f64], p_bas: &[f64], coeffs: &LossCoefficients) -> f64 {
    coeffs.lambda_cg * p_cgs.iter().sum::<f64>()
        + coeffs.lambda_reg * p_regs.iter().sum::<f64>()
        + coeffs.lambda_ba * p_bas.iter().sum::<f64>()
}

/// Elementwise clamp of raw setpoints into their `(min, max)` bounds.
pub fn clip_action(raw: &[f64], bounds: &[(f64, f64)]) -> Result<Vec<f64>, GridError> {
    if raw.len() != bounds.len() {
        return Err(GridError::LengthMismatch { expected: bounds.len(), got: raw.len() });
    }
    Ok(raw.iter().zip(bounds).map(|(&x, &(lo, hi))| x.clamp(lo, hi)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mg1_cg() -> CgParams {
        CgParams { a: 0.0081, b: 5.72, c: 63.0, p_min: 0.0, p_max: 200.0 }
    }

    fn mg1_ba() -> BaParams {
        BaParams::with_costs(0.0153, 5.54, 26.0, -50.0, 50.0)
    }

    #[test]
    fn cg_cost_examples() {
        assert_eq!(cg_cost(0.0, &mg1_cg()).unwrap(), 63.0);
        assert!((cg_cost(200.0, &mg1_cg()).unwrap() - 1531.0).abs() < 1e-9);
        let mg2 = CgParams { a: 0.0076, b: 5.68, c: 365.0, p_min: 0.0, p_max: 280.0 };
        assert!((cg_cost(100.0, &mg2).unwrap() - 1009.0).abs() < 1e-9);
    }

    #[test]
    fn cg_cost_rejects_out_of_range() {
        assert!(matches!(cg_cost(200.5, &mg1_cg()), Err(GridError::PowerOutOfBounds { .. })));
        assert!(cg_cost(-1.0, &mg1_cg()).is_err());
    }

    #[test]
    fn ba_cost_examples() {
        let ba = BaParams { soc_max: 1.0, ..mg1_ba() };
        assert_eq!(ba_cost(0.0, 1.0, &ba).unwrap(), 26.0);
        assert!((ba_cost(50.0, 0.5, &ba).unwrap() - 957.5625).abs() < 1e-9);
        assert!((ba_cost(-50.0, 1.0, &ba).unwrap() - (-212.75)).abs() < 1e-9);
    }

    #[test]
    fn ba_cost_rejects_bad_soc() {
        assert!(matches!(ba_cost(0.0, 0.95, &mg1_ba()), Err(GridError::SocOutOfBounds { .. })));
        assert!(ba_cost(51.0, 0.5, &mg1_ba()).is_err());
    }

    #[test]
    fn soc_step_examples() {
        let ba = mg1_ba();
        let idle = soc_step(0.5, 0.0, 1.0, &ba);
        assert!((idle.soc - 0.499).abs() < 1e-12);
        let dis = soc_step(0.5, 50.0, 1.0, &ba);
        assert!((dis.soc - 0.2615).abs() < 1e-12);
        assert_eq!(dis.applied_power, 50.0);
        let ch = soc_step(0.5, -50.0, 1.0, &ba);
        assert!((ch.soc - (0.499 + 50.0 / 190.0)).abs() < 1e-12);
        assert!((ch.soc - 0.76216).abs() < 1e-5);
    }

    #[test]
    fn soc_step_reduces_power_at_bounds() {
        let ba = mg1_ba();
        // near-empty battery cannot deliver the full request
        let s = soc_step(0.15, 50.0, 1.0, &ba);
        assert!(s.applied_power < 50.0 && s.applied_power > 0.0);
        assert!((s.soc - ba.soc_min).abs() < 1e-12);
        // full battery refuses to charge
        let s = soc_step(0.9, -50.0, 1.0, &ba);
        assert!(s.applied_power > -1.0);
        assert!(s.soc <= ba.soc_max + 1e-15);
        // below minimum after self-discharge alone: zero power, clamped
        let s = soc_step(0.1, 10.0, 1.0, &ba);
        assert_eq!(s.applied_power, 0.0);
        assert_eq!(s.soc, ba.soc_min);
    }

    #[test]
    fn as_printed_round_trip_gains_energy() {
        // documents the published convention: the cycle is not lossy
        let ba = mg1_ba();
        let charged = soc_transition(0.5, -40.0, 1.0, &ba);
        let back = (charged - 0.5) * ba.capacity / ba.eta_dch;
        assert!(back > 40.0);
    }

    #[test]
    fn power_loss_examples() {
        let l = LossCoefficients::default();
        assert_eq!(power_loss(&[], &[], &[], &l), 0.0);
        assert!((power_loss(&[100.0], &[50.0], &[10.0], &l) - 3.2).abs() < 1e-12);
        assert!((power_loss(&[200.0], &[51.48], &[-50.0], &l) - 4.0296).abs() < 1e-12);
    }

    #[test]
    fn clip_examples() {
        assert_eq!(clip_action(&[250.0], &[(0.0, 200.0)]).unwrap(), vec![200.0]);
        assert_eq!(clip_action(&[-80.0], &[(-50.0, 50.0)]).unwrap(), vec![-50.0]);
        assert_eq!(clip_action(&[120.0], &[(0.0, 200.0)]).unwrap(), vec![120.0]);
        assert!(clip_action(&[1.0, 2.0], &[(0.0, 1.0)]).is_err());
    }

    #[test]
    fn validation() {
        assert!(mg1_ba().validate().is_ok());
        assert!(mg1_cg().validate().is_ok());
        assert!(BaParams { eta_ch: 0.0, ..mg1_ba() }.validate().is_err());
        assert!(BaParams { soc_min: 0.9, soc_max: 0.1, ..mg1_ba() }.validate().is_err());
        assert!(CgParams { p_min: 10.0, p_max: 5.0, ..mg1_cg() }.validate().is_err());
        assert!(LossCoefficients::uniform(0.2).validate().is_err());
    }

    proptest! {
        #[test]
        fn costs_are_exactly_quadratic(a in 0.0f64..0.05, b in -10.0f64..10.0, c in -100.0f64..500.0,
                                       p in 10.0f64..190.0, h in 0.5f64..5.0, soc in 0.1f64..0.9) {
            let cg = CgParams { a, b, c, p_min: 0.0, p_max: 200.0 };
            let f = |x: f64| cg_cost(x, &cg).unwrap();
            let second = (f(p + h) - 2.0 * f(p) + f(p - h)) / (h * h);
            prop_assert!((second - 2.0 * a).abs() <= 1e-9 * (1.0 + f(p).abs()) / (h * h) * 4.0 + 1e-9);

            let ba = BaParams { a, b, c, p_min: -200.0, p_max: 200.0, ..BaParams::with_costs(a, b, c, -200.0, 200.0) };
            let g = |x: f64| ba_cost(x - 100.0, soc, &ba).unwrap();
            let second = (g(p + h) - 2.0 * g(p) + g(p - h)) / (h * h);
            prop_assert!((second - 2.0 * a).abs() <= 1e-9 * (1.0 + g(p).abs()) / (h * h) * 4.0 + 1e-9);
        }

        #[test]
        fn idle_steps_decay_geometrically(soc in 0.0f64..1.0, n in 1usize..100, delta in 0.0f64..0.05) {
            let ba = BaParams { delta, ..mg1_ba() };
            let mut s = soc;
            for _ in 0..n {
                s = soc_transition(s, 0.0, 1.0, &ba);
            }
            prop_assert!((s - (1.0 - delta).powi(n as i32) * soc).abs() < 1e-12);
        }

        #[test]
        fn physical_round_trip_is_lossy(x in 1.0f64..50.0, soc0 in 0.2f64..0.5) {
            // charge x kWh in one hour, then discharge until the SOC returns
            let ba = BaParams { delta: 0.0, convention: EfficiencyConvention::Physical, ..mg1_ba() };
            let up = soc_step(soc0, -x, 1.0, &ba);
            prop_assert_eq!(up.applied_power, -x);
            let mut soc = up.soc;
            let mut delivered = 0.0;
            while soc > soc0 + 1e-12 {
                let need = (soc - soc0) * ba.capacity * ba.eta_dch;
                let step = soc_step(soc, need.min(ba.p_max), 1.0, &ba);
                delivered += step.applied_power;
                soc = step.soc;
            }
            prop_assert!(delivered <= x * ba.eta_ch * ba.eta_dch * (1.0 + 1e-12));
            prop_assert!(x - delivered >= (1.0 - ba.eta_ch * ba.eta_dch) * x * (1.0 - 1e-9));
        }

        #[test]
        fn clip_is_idempotent(raw in prop::collection::vec(-1000.0f64..1000.0, 1..8),
                              lo in -100.0f64..0.0, width in 0.0f64..300.0) {
            let bounds = vec![(lo, lo + width); raw.len()];
            let once = clip_action(&raw, &bounds).unwrap();
            let twice = clip_action(&once, &bounds).unwrap();
            prop_assert_eq!(&once, &twice);
            for v in &once {
                prop_assert!(*v >= lo && *v <= lo + width);
            }
        }

        #[test]
        fn loss_is_linear(x in prop::collection::vec(-300.0f64..300.0, 3), y in prop::collection::vec(-300.0f64..300.0, 3),
                          alpha in -5.0f64..5.0) {
            let l = LossCoefficients { lambda_cg: 0.013, lambda_reg: 0.02, lambda_ba: 0.017 };
            let f = |v: &[f64]| power_loss(&v[0..1], &v[1..2], &v[2..3], &l);
            let scaled: Vec<f64> = x.iter().map(|v| alpha * v).collect();
            prop_assert!((f(&scaled) - alpha * f(&x)).abs() < 1e-12 * (1.0 + f(&x).abs() * alpha.abs()).max(1.0) * 10.0);
            let sum: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + b).collect();
            prop_assert!((f(&sum) - f(&x) - f(&y)).abs() < 1e-12 * 100.0);
        }
    }
}
