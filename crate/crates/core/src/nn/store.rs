//! Named parameter storage, per-sample gradient buffers, and Adam.
//!
//! Parameters live in a flat registry so that checkpointing, optimizer
//! updates, and finite-difference probing all see the same named arrays.
//! Gradients are accumulated in detached [`GradBuffer`]s (one per sample when
//! batches run in parallel) and merged in sample order, which keeps training
//! bit-reproducible regardless of scheduling.

use ndarray::ArrayD;

/// Index of a parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
struct Param {
    name: String,
    value: ArrayD<f64>,
}

/// Registry of named parameter arrays.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: ArrayD<f64>) -> ParamId {
        let id = ParamId(self.params.len());
        self.params.push(Param { name: name.into(), value });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<f64> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    /// Total scalar parameter count.
    pub fn n_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Scalar count restricted to parameters whose name starts with `prefix`.
    pub fn n_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.len())
            .sum()
    }

    pub fn new_grad_buffer(&self) -> GradBuffer {
        GradBuffer {
            grads: self.params.iter().map(|p| ArrayD::zeros(p.value.raw_dim())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.iter().all(|v| v.is_finite()))
    }
}

/// Gradient arrays aligned with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct GradBuffer {
    grads: Vec<ArrayD<f64>>,
}

impl GradBuffer {
    pub fn grad(&self, id: ParamId) -> &ArrayD<f64> {
        &self.grads[id.0]
    }

    pub fn add(&mut self, id: ParamId, delta: &ArrayD<f64>) {
        self.grads[id.0].zip_mut_with(delta, |g, &d| *g += d);
    }

    pub fn add_slice(&mut self, id: ParamId, delta: &[f64]) {
        let g = self.grads[id.0].as_slice_mut().expect("grad is contiguous");
        for (gi, &d) in g.iter_mut().zip(delta) {
            *gi += d;
        }
    }

    /// Merge another buffer into this one (used to reduce per-sample buffers).
    pub fn merge(&mut self, other: &GradBuffer) {
        for (g, o) in self.grads.iter_mut().zip(&other.grads) {
            g.zip_mut_with(o, |a, &b| *a += b);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.grads {
            g.mapv_inplace(|v| v * factor);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

/// Adam optimizer state (first/second moments aligned with the store).
#[derive(Debug, Clone)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: store.params.iter().map(|p| ArrayD::zeros(p.value.raw_dim())).collect(),
            v: store.params.iter().map(|p| ArrayD::zeros(p.value.raw_dim())).collect(),
        }
    }

    /// One Adam update. `t` is the 1-based global step.
    pub fn step(&mut self, store: &mut ParamStore, grads: &GradBuffer, t: u64, lr: f64) {
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);
        for (i, param) in store.params.iter_mut().enumerate() {
            let g = grads.grads[i].as_slice().expect("grad contiguous");
            let m = self.m[i].as_slice_mut().expect("moment contiguous");
            let v = self.v[i].as_slice_mut().expect("moment contiguous");
            let w = param.value.as_slice_mut().expect("param contiguous");
            for j in 0..g.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                w[j] -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }

    pub fn moments(&self, id: ParamId) -> (&ArrayD<f64>, &ArrayD<f64>) {
        (&self.m[id.0], &self.v[id.0])
    }

    pub fn moments_mut(&mut self, id: ParamId) -> (&mut ArrayD<f64>, &mut ArrayD<f64>) {
        (&mut self.m[id.0], &mut self.v[id.0])
    }
}
