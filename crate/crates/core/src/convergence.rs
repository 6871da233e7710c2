//! Numerical check of the linear convergence rate of gradient descent on
//! smooth, strongly convex objectives, and of the FedAvg/centralized
//! equivalence for a single local step.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::federation::{aggregate, AggregationWeights, FedError};
use crate::nn::ParamVector;

/// Relative tolerance of every bound check.
pub const TOL: f64 = 1e-9;
/// Target accuracy of the iteration-count check.
pub const EPSILON: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ConvergenceError {
    #[error("need 0 < mu <= L, got mu={mu}, L={l}")]
    Curvature { mu: f64, l: f64 },
    #[error("dimension must be positive")]
    Dimension,
    #[error("k_max must be at least 1")]
    Iterations,
    #[error("non-finite iterate at step {0}")]
    NonFinite(usize),
    #[error("objectives disagree on dimension")]
    Shape,
    #[error(transparent)]
    Fed(#[from] FedError),
}

/// F(w) = ½ wᵀAw + bᵀw with the spectrum of A inside [mu, l].
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticObjective {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub mu: f64,
    pub l: f64,
}

impl QuadraticObjective {
    pub fn dim(&self) -> usize {
        self.b.len()
    }

    pub fn value(&self, w: &DVector<f64>) -> f64 {
        0.5 * w.dot(&(&self.a * w)) + self.b.dot(w)
    }

    pub fn gradient(&self, w: &DVector<f64>) -> DVector<f64> {
        &self.a * w + &self.b
    }

    pub fn minimizer(&self) -> DVector<f64> {
        let chol = self.a.clone().cholesky().expect("A is positive definite");
        -chol.solve(&self.b)
    }

    /// F(w) − F* evaluated as ½ eᵀAe with e = w − w*, which stays accurate near the optimum.
    pub fn gap(&self, w: &DVector<f64>, w_star: &DVector<f64>) -> f64 {
        let e = w - w_star;
        0.5 * e.dot(&(&self.a * &e))
    }
}

/// Random quadratic with eigenvalues in [mu, l]; both endpoints are used when dim ≥ 2.
pub fn make_objective(dim: usize, mu: f64, l: f64, seed: u64) -> Result<QuadraticObjective, ConvergenceError> {
    if !(mu > 0.0 && mu <= l && l.is_finite()) {
        return Err(ConvergenceError::Curvature { mu, l });
    }
    if dim == 0 {
        return Err(ConvergenceError::Dimension);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    let q = g.qr().q();
    let mut eig: Vec<f64> = (0..dim).map(|_| rng.random_range(mu..=l)).collect();
    eig[0] = mu;
    if dim > 1 {
        eig[dim - 1] = l;
    }
    let a = &q * DMatrix::from_diagonal(&DVector::from_vec(eig)) * q.transpose();
    let a = (&a + a.transpose()) * 0.5;
    let b = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    Ok(QuadraticObjective { a, b, mu, l })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Theorem1Report {
    /// max over k of (F(w_k) − F*) / ((1 − μ/L)^k (F(w_0) − F*)), over steps where the bound is nonzero.
    pub max_ratio: f64,
    /// Largest violation of the two-sided gradient/distance sandwich, relative to F(w_0) − F*.
    pub lemma3_violation: f64,
    /// Largest violation of the sufficient-decrease inequality, relative to F(w_0) − F*.
    pub descent_violation: f64,
    /// First k with F(w_k) − F* ≤ EPSILON.
    pub iterations_to_eps: Option<usize>,
    /// ⌈(L/μ) ln((F(w_0) − F*)/EPSILON)⌉
    pub iteration_bound: usize,
    pub gaps: Vec<f64>,
}

impl Theorem1Report {
    pub fn rate_ok(&self) -> bool {
        self.max_ratio <= 1.0 + TOL
    }

    pub fn passed(&self) -> bool {
        self.rate_ok()
            && self.lemma3_violation <= TOL
            && self.descent_violation <= TOL
            && self.iterations_to_eps.is_some_and(|k| k <= self.iteration_bound)
    }
}

/// Gradient descent with step 1/L from `w0`. Runs at least `k_max` steps and
/// long enough to reach EPSILON within the iteration bound.
pub fn check_theorem1(obj: &QuadraticObjective, w0: &DVector<f64>, k_max: usize) -> Result<Theorem1Report, ConvergenceError> {
    if k_max == 0 {
        return Err(ConvergenceError::Iterations);
    }
    if w0.len() != obj.dim() {
        return Err(ConvergenceError::Shape);
    }
    let (mu, l) = (obj.mu, obj.l);
    let w_star = obj.minimizer();
    let gap0 = obj.gap(w0, &w_star);
    let iteration_bound = if gap0 > EPSILON { ((l / mu) * (gap0 / EPSILON).ln()).ceil() as usize } else { 0 };
    let steps = k_max.max(iteration_bound);
    let scale = gap0.max(f64::MIN_POSITIVE);
    // Bounds below this are treated as zero: the ratio is then checked in absolute terms.
    let floor = 1e-12 * scale;

    let mut w = w0.clone();
    let mut gaps = Vec::with_capacity(steps + 1);
    let (mut max_ratio, mut lemma3, mut descent) = (0.0f64, 0.0f64, 0.0f64);
    let mut iterations_to_eps = None;
    for k in 0..=steps {
        let gap = obj.gap(&w, &w_star);
        if !gap.is_finite() {
            return Err(ConvergenceError::NonFinite(k));
        }
        gaps.push(gap);
        if iterations_to_eps.is_none() && gap <= EPSILON {
            iterations_to_eps = Some(k);
        }
        let bound = (1.0 - mu / l).powi(k as i32) * gap0;
        if bound > floor {
            max_ratio = max_ratio.max(gap / bound);
        } else if gap > floor {
            max_ratio = f64::INFINITY;
        }
        let grad = obj.gradient(&w);
        let g2 = grad.norm_squared();
        let dist2 = (&w - &w_star).norm_squared();
        lemma3 = lemma3.max((gap - g2 / (2.0 * mu)) / scale).max((0.5 * mu * dist2 - gap) / scale);
        if k == steps {
            break;
        }
        let next = &w - &grad / l;
        let next_gap = obj.gap(&next, &w_star);
        descent = descent.max((next_gap - (gap - g2 / (2.0 * l))) / scale);
        w = next;
    }
    Ok(Theorem1Report { max_ratio, lemma3_violation: lemma3, descent_violation: descent, iterations_to_eps, iteration_bound, gaps })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FedConsistencyReport {
    /// ‖FedAvg(one local step) − one step on Σ p_j F_j‖∞
    pub single_step_residual: f64,
    /// `(local steps, ‖FedAvg − centralized‖∞)`; informational only.
    pub multi_step_drift: Vec<(usize, f64)>,
}

impl FedConsistencyReport {
    pub fn passed(&self) -> bool {
        self.single_step_residual < 1e-10
    }
}

/// One FedAvg round where every client takes `steps` gradient steps of size `eta` from `w0`.
pub fn fedavg_round(
    objectives: &[QuadraticObjective],
    weights: &AggregationWeights,
    w0: &DVector<f64>,
    eta: f64,
    steps: usize,
) -> Result<DVector<f64>, ConvergenceError> {
    let locals: Vec<ParamVector> = objectives
        .iter()
        .map(|o| {
            let mut w = w0.clone();
            for _ in 0..steps {
                w = &w - o.gradient(&w) * eta;
            }
            ParamVector { values: w.as_slice().to_vec(), spec_hash: 0 }
        })
        .collect();
    Ok(DVector::from_vec(aggregate(&locals, weights)?.values))
}

/// The weighted-average objective Σ p_j F_j.
pub fn weighted_objective(objectives: &[QuadraticObjective], weights: &AggregationWeights) -> Result<QuadraticObjective, ConvergenceError> {
    let first = objectives.first().ok_or(FedError::Empty)?;
    let n = first.dim();
    if objectives.iter().any(|o| o.dim() != n) || weights.as_slice().len() != objectives.len() {
        return Err(ConvergenceError::Shape);
    }
    let mut a = DMatrix::zeros(n, n);
    let mut b = DVector::zeros(n);
    for (o, &p) in objectives.iter().zip(weights.as_slice()) {
        a += &o.a * p;
        b += &o.b * p;
    }
    let mu = objectives.iter().map(|o| o.mu).fold(f64::INFINITY, f64::min);
    let l = objectives.iter().map(|o| o.l).fold(0.0, f64::max);
    Ok(QuadraticObjective { a, b, mu, l })
}

/// Compares FedAvg rounds against centralized gradient descent on the
/// weighted objective, both starting at `w0` with step 1/max L_j.
pub fn check_federated_consistency(
    objectives: &[QuadraticObjective],
    weights: &AggregationWeights,
    w0: &DVector<f64>,
) -> Result<FedConsistencyReport, ConvergenceError> {
    let global = weighted_objective(objectives, weights)?;
    if w0.len() != global.dim() {
        return Err(ConvergenceError::Shape);
    }
    let eta = 1.0 / global.l;
    let centralized = |steps: usize| {
        let mut w = w0.clone();
        for _ in 0..steps {
            w = &w - global.gradient(&w) * eta;
        }
        w
    };
    let residual = |steps: usize| -> Result<f64, ConvergenceError> {
        Ok((fedavg_round(objectives, weights, w0, eta, steps)? - centralized(steps)).amax())
    };
    let single_step_residual = residual(1)?;
    let multi_step_drift = [2, 5, 10].into_iter().map(|s| Ok((s, residual(s)?))).collect::<Result<_, ConvergenceError>>()?;
    Ok(FedConsistencyReport { single_step_residual, multi_step_drift })
}

/// Per-seed outcome of the lab.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub theorem1: Theorem1Report,
    pub federated: FedConsistencyReport,
}

impl SeedResult {
    pub fn passed(&self) -> bool {
        self.theorem1.passed() && self.federated.passed()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabConfig {
    pub seeds: u64,
    pub dim: usize,
    pub mu: f64,
    pub l: f64,
    pub k_max: usize,
    pub clients: usize,
}

impl Default for LabConfig {
    fn default() -> Self {
        Self { seeds: 20, dim: 10, mu: 1.0, l: 10.0, k_max: 200, clients: 3 }
    }
}

/// Runs both checks for seeds `0..cfg.seeds`. The start point is a seeded
/// Gaussian vector; the federated check uses `clients` objectives with uniform weights.
pub fn run_lab(cfg: &LabConfig) -> Result<Vec<SeedResult>, ConvergenceError> {
    (0..cfg.seeds)
        .map(|seed| {
            let obj = make_objective(cfg.dim, cfg.mu, cfg.l, seed)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed);
            let w0 = DVector::from_fn(cfg.dim, |_, _| 10.0 * rng.sample::<f64, _>(StandardNormal));
            let theorem1 = check_theorem1(&obj, &w0, cfg.k_max)?;
            let clients = (0..cfg.clients as u64)
                .map(|j| make_objective(cfg.dim, cfg.mu, cfg.l, seed.wrapping_mul(1000).wrapping_add(j + 1)))
                .collect::<Result<Vec<_>, _>>()?;
            let federated = check_federated_consistency(&clients, &AggregationWeights::uniform(cfg.clients.max(1)), &w0)?;
            Ok(SeedResult { seed, theorem1, federated })
        })
        .collect()
}

pub const CSV_HEADER: &str =
    "seed,max_ratio,lemma3_violation,descent_violation,iterations_to_eps,iteration_bound,fedavg_residual,drift_2,drift_5,drift_10,pass";

pub fn to_csv(results: &[SeedResult]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in results {
        let t = &r.theorem1;
        let drift: Vec<String> = r.federated.multi_step_drift.iter().map(|(_, d)| format!("{d:.6e}")).collect();
        out += &format!(
            "{},{:.12},{:.3e},{:.3e},{},{},{:.3e},{},{}\n",
            r.seed,
            t.max_ratio,
            t.lemma3_violation,
            t.descent_violation,
            t.iterations_to_eps.map_or("none".into(), |k| k.to_string()),
            t.iteration_bound,
            r.federated.single_step_residual,
            drift.join(","),
            if r.passed() { "PASS" } else { "FAIL" }
        );
    }
    out
}
