use std::collections::BTreeMap;

use crate::error::{invalid_arg, Result};
use crate::lattice::RngStream;

use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta_m: f64,
    pub beta_v: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta_m: 0.9, beta_v: 0.999, eps: 1e-8 }
    }
}

/// Named learnable tensors with paired gradient and Adam moment slots.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    index: BTreeMap<String, ParamId>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return invalid_arg(format!("duplicate parameter name {name}"));
        }
        let id = ParamId(self.values.len());
        let (c, h, w) = value.shape();
        self.grads.push(Tensor::zeros(c, h, w));
        self.m.push(Tensor::zeros(c, h, w));
        self.v.push(Tensor::zeros(c, h, w));
        self.values.push(value);
        self.index.insert(name.clone(), id);
        self.names.push(name);
        Ok(id)
    }

    /// Xavier/Glorot uniform initialisation in `[-b, b]`, `b = sqrt(6 / (fan_in + fan_out))`.
    pub fn add_xavier(
        &mut self,
        name: impl Into<String>,
        shape: (usize, usize, usize),
        fan_in: usize,
        fan_out: usize,
        rng: &mut RngStream,
    ) -> Result<ParamId> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let (c, h, w) = shape;
        let data = (0..c * h * w).map(|_| bound * (2.0 * rng.uniform() - 1.0)).collect();
        self.add(name, Tensor::from_vec(c, h, w, data))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &Tensor) {
        self.grads[id.0].add_assign(g);
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Multiply every gradient by `s` (e.g. batch averaging).
    pub fn scale_grads(&mut self, s: f64) {
        for g in &mut self.grads {
            g.data.iter_mut().for_each(|v| *v *= s);
        }
    }

    /// Number of scalar parameters, optionally restricted by a name filter.
    pub fn count(&self, filter: impl Fn(&str) -> bool) -> usize {
        self.names.iter().zip(&self.values).filter(|(n, _)| filter(n)).map(|(_, t)| t.len()).sum()
    }

    pub fn adam_steps(&self) -> u64 {
        self.step
    }

    /// One Adam step with bias correction over every parameter.
    pub fn adam_update(&mut self, lr: f64, cfg: AdamConfig) {
        self.step += 1;
        let t = self.step as i32;
        let bc_m = 1.0 - cfg.beta_m.powi(t);
        let bc_v = 1.0 - cfg.beta_v.powi(t);
        for i in 0..self.values.len() {
            let (p, g) = (&mut self.values[i].data, &self.grads[i].data);
            let (m, v) = (&mut self.m[i].data, &mut self.v[i].data);
            for j in 0..p.len() {
                m[j] = cfg.beta_m * m[j] + (1.0 - cfg.beta_m) * g[j];
                v[j] = cfg.beta_v * v[j] + (1.0 - cfg.beta_v) * g[j] * g[j];
                let m_hat = m[j] / bc_m;
                let v_hat = v[j] / bc_v;
                p[j] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
    }

    pub fn moments(&self, id: ParamId) -> (&Tensor, &Tensor) {
        (&self.m[id.0], &self.v[id.0])
    }

    /// Values only, in registration order, for checkpoints.
    pub fn snapshot(&self) -> Vec<Tensor> {
        self.values.clone()
    }

    pub fn restore(&mut self, values: Vec<Tensor>) -> Result<()> {
        if values.len() != self.values.len()
            || values.iter().zip(&self.values).any(|(a, b)| a.shape() != b.shape())
        {
            return invalid_arg("snapshot does not match parameter layout");
        }
        self.values = values;
        Ok(())
    }

    pub fn named_values(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::scalar(v)).unwrap();
        (s, id)
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let (mut s, id) = scalar_store(0.0);
        s.accumulate_grad(id, &Tensor::scalar(1.0));
        s.adam_update(1e-3, AdamConfig::default());
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!((s.value(id).item() - expected).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let (mut s, id) = scalar_store(0.3);
        s.adam_update(1e-2, AdamConfig::default());
        assert_eq!(s.value(id).item(), 0.3);

        // populate moments, then feed a zero gradient
        s.accumulate_grad(id, &Tensor::scalar(2.0));
        s.adam_update(1e-2, AdamConfig::default());
        let (m1, v1) = (s.moments(id).0.item(), s.moments(id).1.item());
        s.zero_grads();
        s.adam_update(1e-2, AdamConfig::default());
        assert_eq!(s.moments(id).0.item(), 0.9 * m1);
        assert_eq!(s.moments(id).1.item(), 0.999 * v1);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut s = ParamStore::new();
            let mut rng = RngStream::new(3, 0);
            let id = s.add_xavier("w", (4, 1, 3), 3, 4, &mut rng).unwrap();
            for k in 0..5 {
                s.zero_grads();
                let g = Tensor::from_vec(4, 1, 3, (0..12).map(|i| ((i + k) as f64).sin()).collect());
                s.accumulate_grad(id, &g);
                s.adam_update(1e-2, AdamConfig::default());
            }
            s.value(id).data.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn grads_share_shapes_and_zero() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::filled(2, 3, 4, 1.0)).unwrap();
        s.accumulate_grad(id, &Tensor::filled(2, 3, 4, 0.5));
        assert_eq!(s.grad(id).shape(), s.value(id).shape());
        s.zero_grads();
        assert!(s.grad(id).data.iter().all(|&g| g == 0.0));
        assert!(s.add("w", Tensor::scalar(0.0)).is_err());
    }
}
