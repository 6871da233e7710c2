//! Small fixed-topology multilayer perceptrons with hand-written
//! backpropagation, an Adam optimizer, and the flat parameter vector that
//! agents exchange during federation.
//!
//! Parameter layout, per layer in order: the weight matrix row-major
//! (`out x in`), then the bias vector. Hidden layers use `tanh`, the output
//! layer is linear.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("network needs at least 2 layers of size >= 1, got {0:?}")]
    BadTopology(Vec<usize>),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("non-finite gradient at index {0}")]
    NonFiniteGradient(usize),
    #[error("non-finite parameter at index {0}")]
    NonFiniteParameter(usize),
    #[error("spec hash mismatch: expected {expected:#018x}, got {got:#018x}")]
    SpecHash { expected: u64, got: u64 },
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MlpSpec {
    sizes: Vec<usize>,
}

/// Per-layer activations recorded by a forward pass; `acts[0]` is the input.
#[derive(Debug, Clone)]
pub struct Trace {
    acts: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("trace has at least input and output")
    }
}

impl MlpSpec {
    pub fn new(sizes: Vec<usize>) -> Result<Self, NnError> {
        if sizes.len() < 2 || sizes.iter().any(|&s| s == 0) {
            return Err(NnError::BadTopology(sizes));
        }
        Ok(Self { sizes })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut params = Vec::with_capacity(self.param_count());
        for w in self.sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            params.extend((0..fan_in * fan_out).map(|_| rng.random_range(-limit..=limit)));
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        params
    }

    fn check(&self, params: &[f64], input: &[f64]) -> Result<(), NnError> {
        if params.len() != self.param_count() {
            return Err(NnError::Dimension { expected: self.param_count(), got: params.len() });
        }
        if input.len() != self.input_dim() {
            return Err(NnError::Dimension { expected: self.input_dim(), got: input.len() });
        }
        Ok(())
    }

    pub fn forward(&self, params: &[f64], input: &[f64]) -> Result<Vec<f64>, NnError> {
        Ok(self.forward_trace(params, input)?.acts.pop().unwrap())
    }

    pub fn forward_trace(&self, params: &[f64], input: &[f64]) -> Result<Trace, NnError> {
        self.check(params, input)?;
        let n_layers = self.sizes.len() - 1;
        let mut acts = Vec::with_capacity(n_layers + 1);
        acts.push(input.to_vec());
        let mut offset = 0;
        for (l, w) in self.sizes.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            let weights = &params[offset..offset + n_in * n_out];
            let bias = &params[offset + n_in * n_out..offset + n_in * n_out + n_out];
            offset += n_in * n_out + n_out;
            let x = &acts[l];
            let hidden = l + 1 < n_layers;
            let out: Vec<f64> = weights
                .chunks_exact(n_in)
                .zip(bias)
                .map(|(row, b)| {
                    let z = row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>() + b;
                    if hidden {
                        z.tanh()
                    } else {
                        z
                    }
                })
                .collect();
            acts.push(out);
        }
        Ok(Trace { acts })
    }

    /// Accumulates `d(output . output_grad)/d params` into `param_grad` and
    /// returns the gradient with respect to the input.
    pub fn backward_into(
        &self,
        params: &[f64],
        trace: &Trace,
        output_grad: &[f64],
        param_grad: &mut [f64],
    ) -> Result<Vec<f64>, NnError> {
        if output_grad.len() != self.output_dim() {
            return Err(NnError::Dimension { expected: self.output_dim(), got: output_grad.len() });
        }
        if param_grad.len() != self.param_count() || params.len() != self.param_count() {
            return Err(NnError::Dimension { expected: self.param_count(), got: param_grad.len().min(params.len()) });
        }
        let mut delta = output_grad.to_vec();
        let mut offset = self.param_count();
        for l in (0..self.sizes.len() - 1).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            offset -= n_in * n_out + n_out;
            let x = &trace.acts[l];
            let (w_grad, b_grad) = param_grad[offset..offset + n_in * n_out + n_out].split_at_mut(n_in * n_out);
            for ((row, d), bg) in w_grad.chunks_exact_mut(n_in).zip(&delta).zip(b_grad.iter_mut()) {
                *bg += d;
                for (g, xi) in row.iter_mut().zip(x) {
                    *g += d * xi;
                }
            }
            let weights = &params[offset..offset + n_in * n_out];
            let mut input_grad = vec![0.0; n_in];
            for (row, d) in weights.chunks_exact(n_in).zip(&delta) {
                for (g, w) in input_grad.iter_mut().zip(row) {
                    *g += d * w;
                }
            }
            if l > 0 {
                // previous layer is a tanh layer: d tanh = 1 - y^2
                for (g, y) in input_grad.iter_mut().zip(x) {
                    *g *= 1.0 - y * y;
                }
            }
            delta = input_grad;
        }
        Ok(delta)
    }

    /// Returns `(param_grad, input_grad)` of `output . output_grad`.
    pub fn backward(&self, params: &[f64], input: &[f64], output_grad: &[f64]) -> Result<(Vec<f64>, Vec<f64>), NnError> {
        let trace = self.forward_trace(params, input)?;
        let mut grad = vec![0.0; self.param_count()];
        let input_grad = self.backward_into(params, &trace, output_grad, &mut grad)?;
        Ok((grad, input_grad))
    }
}

/// Topology of one agent. The actor emits `2 * action_dim` values: the
/// Gaussian means followed by the raw log-std inputs. The critic emits one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentSpec {
    pub actor: MlpSpec,
    pub critic: MlpSpec,
    pub action_dim: usize,
}

impl AgentSpec {
    pub fn new(obs_dim: usize, action_dim: usize, hidden: &[usize]) -> Result<Self, NnError> {
        let mut actor = vec![obs_dim];
        actor.extend_from_slice(hidden);
        actor.push(2 * action_dim);
        let mut critic = vec![obs_dim];
        critic.extend_from_slice(hidden);
        critic.push(1);
        Ok(Self { actor: MlpSpec::new(actor)?, critic: MlpSpec::new(critic)?, action_dim })
    }

    pub fn param_count(&self) -> usize {
        self.actor.param_count() + self.critic.param_count()
    }

    /// FNV-1a over the topology; binds parameter vectors to this layout.
    pub fn hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |v: u64| {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        eat(self.actor.sizes.len() as u64);
        self.actor.sizes.iter().for_each(|&s| eat(s as u64));
        eat(self.critic.sizes.len() as u64);
        self.critic.sizes.iter().for_each(|&s| eat(s as u64));
        eat(self.action_dim as u64);
        h
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentParams {
    pub actor: Vec<f64>,
    pub critic: Vec<f64>,
}

/// Flat vector of every actor and critic parameter, tagged with the hash of
/// the topology it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub spec_hash: u64,
}

impl ParamVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn check_finite(&self) -> Result<(), NnError> {
        match self.values.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(NnError::NonFiniteParameter(i)),
            None => Ok(()),
        }
    }
}

pub fn flatten(spec: &AgentSpec, params: &AgentParams) -> Result<ParamVector, NnError> {
    let parts = [(&params.actor, spec.actor.param_count()), (&params.critic, spec.critic.param_count())];
    let mut values = Vec::with_capacity(spec.param_count());
    for (part, expected) in parts {
        if part.len() != expected {
            return Err(NnError::Dimension { expected, got: part.len() });
        }
        values.extend_from_slice(part);
    }
    let pv = ParamVector { values, spec_hash: spec.hash() };
    pv.check_finite()?;
    Ok(pv)
}

pub fn unflatten(spec: &AgentSpec, vector: &ParamVector) -> Result<AgentParams, NnError> {
    if vector.spec_hash != spec.hash() {
        return Err(NnError::SpecHash { expected: spec.hash(), got: vector.spec_hash });
    }
    if vector.len() != spec.param_count() {
        return Err(NnError::Dimension { expected: spec.param_count(), got: vector.len() });
    }
    let a = spec.actor.param_count();
    Ok(AgentParams { actor: vector.values[..a].to_vec(), critic: vector.values[a..].to_vec() })
}

/// Bias-corrected Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }

    pub fn reset(&mut self) {
        self.step = 0;
        self.m.iter_mut().for_each(|x| *x = 0.0);
        self.v.iter_mut().for_each(|x| *x = 0.0);
    }

    /// One descent step on `params` along `grads` (gradient of a loss to minimize).
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<(), NnError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(NnError::Dimension { expected: self.m.len(), got: params.len().min(grads.len()) });
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(NnError::NonFiniteGradient(i));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(self.m.iter_mut()).zip(self.v.iter_mut()) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

const MAGIC: &[u8; 4] = b"FGCK";
const CHECKPOINT_VERSION: u8 = 1;

/// Stored agent: topology, training step counter and parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: AgentSpec,
    pub step: u64,
    pub params: ParamVector,
}

impl Checkpoint {
    /// Little-endian layout: magic, version, actor sizes, critic sizes,
    /// action dimension, spec hash, step, parameter count, parameters.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 8 * self.params.len());
        out.extend_from_slice(MAGIC);
        out.push(CHECKPOINT_VERSION);
        for sizes in [self.spec.actor.sizes(), self.spec.critic.sizes()] {
            out.extend_from_slice(&(sizes.len() as u32).to_le_bytes());
            for &s in sizes {
                out.extend_from_slice(&(s as u32).to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.spec.action_dim as u32).to_le_bytes());
        out.extend_from_slice(&self.params.spec_hash.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for v in &self.params.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self, NnError> {
        let fmt = |m: &str| NnError::Format(m.to_string());
        let mut magic = [0u8; 5];
        bytes.read_exact(&mut magic).map_err(|_| fmt("truncated header"))?;
        if &magic[..4] != MAGIC {
            return Err(fmt("bad magic"));
        }
        if magic[4] != CHECKPOINT_VERSION {
            return Err(NnError::Format(format!("unsupported version {}", magic[4])));
        }
        let u32_ = |b: &mut &[u8]| -> Result<u32, NnError> {
            let mut buf = [0u8; 4];
            b.read_exact(&mut buf).map_err(|_| fmt("truncated"))?;
            Ok(u32::from_le_bytes(buf))
        };
        let mut layers = Vec::new();
        for _ in 0..2 {
            let n = u32_(&mut bytes)? as usize;
            if n > 64 {
                return Err(fmt("implausible layer count"));
            }
            let sizes = (0..n).map(|_| u32_(&mut bytes).map(|v| v as usize)).collect::<Result<Vec<_>, _>>()?;
            layers.push(MlpSpec::new(sizes)?);
        }
        let action_dim = u32_(&mut bytes)? as usize;
        let critic = layers.pop().unwrap();
        let actor = layers.pop().unwrap();
        if actor.output_dim() != 2 * action_dim || critic.output_dim() != 1 || actor.input_dim() != critic.input_dim() {
            return Err(fmt("actor and critic shapes do not form an agent"));
        }
        let spec = AgentSpec { actor, critic, action_dim };
        let u64_ = |b: &mut &[u8]| -> Result<u64, NnError> {
            let mut buf = [0u8; 8];
            b.read_exact(&mut buf).map_err(|_| fmt("truncated"))?;
            Ok(u64::from_le_bytes(buf))
        };
        let spec_hash = u64_(&mut bytes)?;
        let step = u64_(&mut bytes)?;
        let n = u64_(&mut bytes)? as usize;
        if n != spec.param_count() {
            return Err(NnError::Dimension { expected: spec.param_count(), got: n });
        }
        if bytes.len() != 8 * n {
            return Err(fmt("parameter block length mismatch"));
        }
        let values = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        if spec_hash != spec.hash() {
            return Err(NnError::SpecHash { expected: spec.hash(), got: spec_hash });
        }
        Ok(Self { spec, step, params: ParamVector { values, spec_hash } })
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        std::fs::File::create(path)?.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}
