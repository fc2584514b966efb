use rand::Rng;
use serde::{Deserialize, Serialize};

use super::norm::BN_MOMENTUM;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

pub type ParamId = usize;
pub type BufferId = usize;

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// First ADAM moment.
    pub m: Tensor<T>,
    /// Second ADAM moment.
    pub v: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Buffer<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Named parameters with their optimizer moments, plus non-trainable
/// buffers such as batchnorm running statistics.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T = f32> {
    pub params: Vec<Param<T>>,
    pub buffers: Vec<Buffer<T>>,
    /// Number of optimizer steps taken so far.
    pub step: u64,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            buffers: Vec::new(),
            step: 0,
        }
    }

    pub fn add_param(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::config(name, "duplicate parameter name"));
        }
        self.params.push(Param {
            name: name.to_string(),
            m: Tensor::zeros(value.shape()),
            v: Tensor::zeros(value.shape()),
            value,
        });
        Ok(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor<T>) -> Result<BufferId> {
        if self.buffers.iter().any(|b| b.name == name) {
            return Err(Error::config(name, "duplicate buffer name"));
        }
        self.buffers.push(Buffer {
            name: name.to_string(),
            value,
        });
        Ok(self.buffers.len() - 1)
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id].value
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        &self.buffers[id].value
    }

    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn n_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&self) -> Grads<T> {
        Grads {
            tensors: self.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        }
    }

    /// Folds batch statistics into the running estimates.
    pub fn commit_running_stats(&mut self, updates: &[RunningUpdate]) {
        let keep = BN_MOMENTUM;
        for u in updates {
            for (buf, stat) in [(u.mean_buffer, &u.mean), (u.var_buffer, &u.var)] {
                let b = &mut self.buffers[buf].value;
                for (r, s) in b.data_mut().iter_mut().zip(stat) {
                    *r = T::of(keep * r.f64() + (1.0 - keep) * s);
                }
            }
        }
    }

    /// Replaces every tensor with the same-named one from `other`, including
    /// optimizer moments and the step counter. Names and shapes must agree.
    pub fn assign_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        for p in &other.params {
            if !self.params.iter().any(|q| q.name == p.name) {
                return Err(Error::UnknownParameter(p.name.clone()));
            }
        }
        for b in &other.buffers {
            if !self.buffers.iter().any(|q| q.name == b.name) {
                return Err(Error::UnknownParameter(b.name.clone()));
            }
        }
        for q in &mut self.params {
            let p = other
                .params
                .iter()
                .find(|p| p.name == q.name)
                .ok_or_else(|| Error::MissingParameter(q.name.clone()))?;
            if p.value.shape() != q.value.shape() {
                return Err(Error::shape(q.name.clone(), q.value.shape(), p.value.shape()));
            }
            q.value = p.value.clone();
            q.m = p.m.clone();
            q.v = p.v.clone();
        }
        for q in &mut self.buffers {
            let b = other
                .buffers
                .iter()
                .find(|b| b.name == q.name)
                .ok_or_else(|| Error::MissingParameter(q.name.clone()))?;
            if b.value.shape() != q.value.shape() {
                return Err(Error::shape(q.name.clone(), q.value.shape(), b.value.shape()));
            }
            q.value = b.value.clone();
        }
        self.step = other.step;
        Ok(())
    }
}

/// Kaiming-uniform initialization for a weight with the given fan-in
/// (gain for leaky rectifiers with a small slope).
pub fn kaiming_uniform<T: Real, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::of(rng.gen_range(-bound..bound)))
}

/// Pending running-statistic update of one batchnorm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningUpdate {
    pub mean_buffer: BufferId,
    pub var_buffer: BufferId,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Gradient accumulators aligned with [`ParamStore::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<T = f32> {
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Real> Grads<T> {
    pub fn accumulate(&mut self, id: ParamId, g: &Tensor<T>) -> Result<()> {
        self.tensors[id].add_assign(g)
    }

    pub fn scale(&mut self, s: T) {
        for t in &mut self.tensors {
            t.data_mut().iter_mut().for_each(|v| *v = *v * s);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::config("training.adam.lr", "must be positive"));
        }
        for (f, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("training.adam.{f}"), "must lie in [0, 1)"));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("training.adam.eps", "must be positive"));
        }
        Ok(())
    }
}

/// One bias-corrected ADAM update at step `t` (1-based).
pub fn adam_step<T: Real>(store: &mut ParamStore<T>, grads: &Grads<T>, cfg: &AdamConfig, t: u64) -> Result<()> {
    if t == 0 {
        return Err(Error::config("adam step", "step index starts at 1"));
    }
    if grads.tensors.len() != store.params.len() {
        return Err(Error::shape("adam gradients", &[store.params.len()], &[grads.tensors.len()]));
    }
    for (p, g) in store.params.iter().zip(&grads.tensors) {
        if p.value.shape() != g.shape() {
            return Err(Error::shape(format!("adam {}", p.name), p.value.shape(), g.shape()));
        }
    }
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    for (p, g) in store.params.iter_mut().zip(&grads.tensors) {
        let Param { value, m, v, .. } = p;
        for (((x, mi), vi), gi) in value
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut())
            .zip(g.data())
        {
            let gf = gi.f64();
            let mn = cfg.beta1 * mi.f64() + (1.0 - cfg.beta1) * gf;
            let vn = cfg.beta2 * vi.f64() + (1.0 - cfg.beta2) * gf * gf;
            *mi = T::of(mn);
            *vi = T::of(vn);
            let update = cfg.lr * (mn / c1) / ((vn / c2).sqrt() + cfg.eps);
            *x = T::of(x.f64() - update);
        }
    }
    store.step = t;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add_param("p", Tensor::full(&[1], v)).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = scalar_store(0.7);
        let g = s.zero_grads();
        adam_step(&mut s, &g, &AdamConfig::default(), 1).unwrap();
        assert_eq!(s.value(0).data()[0], 0.7);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let cfg = AdamConfig::default();
        let mut s = scalar_store(0.0);
        let mut g = s.zero_grads();
        g.tensors[0].data_mut()[0] = 1.0;
        adam_step(&mut s, &g, &cfg, 1).unwrap();
        let want = -cfg.lr / (1.0 + cfg.eps);
        assert!((s.value(0).data()[0] - want).abs() < 1e-18);
    }

    #[test]
    fn identical_params_stay_identical() {
        let mut s = ParamStore::<f32>::new();
        s.add_param("a", Tensor::full(&[3], 0.25)).unwrap();
        s.add_param("b", Tensor::full(&[3], 0.25)).unwrap();
        let mut g = s.zero_grads();
        for t in &mut g.tensors {
            t.data_mut().copy_from_slice(&[0.3, -1.0, 2.0]);
        }
        for t in 1..=5 {
            adam_step(&mut s, &g, &AdamConfig::default(), t).unwrap();
        }
        assert_eq!(s.params[0].value, s.params[1].value);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut s = scalar_store(0.0);
        let g = Grads {
            tensors: vec![Tensor::zeros(&[2])],
        };
        assert!(matches!(adam_step(&mut s, &g, &AdamConfig::default(), 1), Err(Error::Shape { .. })));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = scalar_store(0.0);
        assert!(s.add_param("p", Tensor::zeros(&[1])).is_err());
    }
}
