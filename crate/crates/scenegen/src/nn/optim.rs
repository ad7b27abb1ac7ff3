//! Parameter store, Adam with decoupled weight decay, gradient clipping,
//! Xavier initialisation, and the central finite-difference oracle.

use super::tensor::{NnError, Tensor};
use rand::{Rng, RngExt};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Named parameters with matching gradient accumulators; iteration follows
/// insertion order.
#[derive(Default, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    lookup: BTreeMap<String, usize>,
    params: Vec<Tensor>,
    grads: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn add(&mut self, name: &str, tensor: Tensor) -> Result<usize, NnError> {
        if self.lookup.contains_key(name) {
            return Err(NnError::DuplicateParam(name.to_string()));
        }
        let slot = self.params.len();
        self.names.push(name.to_string());
        self.lookup.insert(name.to_string(), slot);
        self.grads.push(Tensor::zeros(tensor.shape()));
        self.params.push(tensor);
        Ok(slot)
    }

    pub fn slot(&self, name: &str) -> Result<usize, NnError> {
        self.lookup
            .get(name)
            .copied()
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn name(&self, slot: usize) -> &str {
        &self.names[slot]
    }

    pub fn param(&self, slot: usize) -> &Tensor {
        &self.params[slot]
    }

    pub fn param_mut(&mut self, slot: usize) -> &mut Tensor {
        &mut self.params[slot]
    }

    pub fn grad(&self, slot: usize) -> &Tensor {
        &self.grads[slot]
    }

    pub fn grad_mut(&mut self, slot: usize) -> &mut Tensor {
        &mut self.grads[slot]
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.data_mut().fill(0.0);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(|n| n.as_str())
            .zip(self.params.iter())
    }

    pub fn total_params(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// Per-parameter first/second moments plus the shared step counter.
#[derive(Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub cfg: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn for_store(store: &ParamStore, cfg: AdamConfig) -> AdamState {
        AdamState {
            cfg,
            step: 0,
            m: (0..store.len())
                .map(|i| Tensor::zeros(store.param(i).shape()))
                .collect(),
            v: (0..store.len())
                .map(|i| Tensor::zeros(store.param(i).shape()))
                .collect(),
        }
    }

    /// Decoupled weight decay followed by the bias-corrected Adam update;
    /// gradients are zeroed afterwards.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<(), NnError> {
        self.step += 1;
        let t = self.step as i32;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for slot in 0..store.len() {
            if !store.grad(slot).all_finite() {
                return Err(NnError::NonFinite("gradient"));
            }
            let m = self.m[slot].data_mut();
            let v = self.v[slot].data_mut();
            let grad = store.grads[slot].data().to_vec();
            let theta = store.params[slot].data_mut();
            for i in 0..grad.len() {
                theta[i] -= c.lr * c.weight_decay * theta[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * grad[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * grad[i] * grad[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                theta[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        store.zero_grads();
        Ok(())
    }
}

/// Clamps every gradient component to [-bound, bound]; a non-finite
/// gradient is an error and halts training.
pub fn clip_gradients(store: &mut ParamStore, bound: f64) -> Result<(), NnError> {
    for slot in 0..store.len() {
        let g = store.grad_mut(slot);
        if !g.all_finite() {
            return Err(NnError::NonFinite("gradient"));
        }
        for v in g.data_mut() {
            *v = v.clamp(-bound, bound);
        }
    }
    Ok(())
}

/// Uniform Xavier/Glorot initialisation in +-sqrt(6 / (fan_in + fan_out)).
pub fn xavier_init(rng_seed: u64, shape: (usize, usize)) -> Tensor {
    let mut rng = ChaCha12Rng::seed_from_u64(rng_seed);
    xavier_with_rng(&mut rng, shape)
}

pub fn xavier_with_rng<R: Rng>(rng: &mut R, shape: (usize, usize)) -> Tensor {
    let (fan_in, fan_out) = shape;
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::matrix(fan_in, fan_out, data).expect("shape matches data")
}

/// Central finite differences (L(theta+h) - L(theta-h)) / 2h per component.
/// The store is restored to its original values afterwards.
pub fn finite_difference_gradient<F>(
    loss_fn: F,
    store: &mut ParamStore,
    h: f64,
) -> Result<Vec<(String, Tensor)>, NnError>
where
    F: Fn(&ParamStore) -> Result<f64, NnError>,
{
    let mut out = Vec::with_capacity(store.len());
    for slot in 0..store.len() {
        let shape = store.param(slot).shape().to_vec();
        let mut grad = Tensor::zeros(&shape);
        for i in 0..grad.numel() {
            let original = store.param(slot).data()[i];
            store.param_mut(slot).data_mut()[i] = original + h;
            let up = loss_fn(store)?;
            store.param_mut(slot).data_mut()[i] = original - h;
            let down = loss_fn(store)?;
            store.param_mut(slot).data_mut()[i] = original;
            grad.data_mut()[i] = (up - down) / (2.0 * h);
        }
        out.push((store.name(slot).to_string(), grad));
    }
    Ok(out)
}

/// Relative error between analytic and numeric gradients, with a floor for
/// components that are both negligible.
pub fn gradient_relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < floor {
        return 0.0;
    }
    (analytic - numeric).abs() / scale
}
