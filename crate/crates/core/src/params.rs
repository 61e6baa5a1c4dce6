//! Named parameter stores, gradient accumulation and the Adam optimizer.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::autodiff::{Gradients, Graph, ParamRef, Var};
use crate::tensor::Mat;

/// An ordered list of named tensors. Order is part of the checkpoint format.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Mat) -> usize {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Mat] {
        &self.values
    }

    pub fn get(&self, index: usize) -> &Mat {
        &self.values[index]
    }

    pub fn get_mut(&mut self, index: usize) -> &mut Mat {
        &mut self.values[index]
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|m| m.data().len()).sum()
    }

    /// Places every tensor on the graph as a parameter leaf of `group`.
    pub fn bind(&self, g: &mut Graph, group: usize) -> Vec<Var> {
        self.values.iter().enumerate().map(|(index, v)| g.param(v, ParamRef { group, index })).collect()
    }
}

/// Summed gradients for a set of parameter groups.
#[derive(Clone, Debug)]
pub struct GradBuffer {
    groups: Vec<Vec<Mat>>,
}

impl GradBuffer {
    pub fn zeros_like(stores: &[&ParamStore]) -> Self {
        let groups = stores
            .iter()
            .map(|s| s.values().iter().map(|m| Mat::zeros(m.rows(), m.cols())).collect())
            .collect();
        Self { groups }
    }

    pub fn add(&mut self, grads: &Gradients) {
        for (r, g) in grads.params() {
            if let Some(group) = self.groups.get_mut(r.group) {
                group[r.index].add_assign(g);
            }
        }
    }

    pub fn merge(&mut self, other: &GradBuffer) {
        for (a, b) in self.groups.iter_mut().zip(&other.groups) {
            for (x, y) in a.iter_mut().zip(b) {
                x.add_assign(y);
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.groups.iter_mut().flatten() {
            g.scale_in_place(c);
        }
    }

    pub fn group(&self, group: usize) -> &[Mat] {
        &self.groups[group]
    }

    pub fn is_finite(&self) -> bool {
        self.groups.iter().flatten().all(Mat::is_finite)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam state for one parameter store.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Mat> = store.values().iter().map(|m| Mat::zeros(m.rows(), m.cols())).collect();
        Self { cfg, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Mat]) {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let p = store.get_mut(i).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for k in 0..p.len() {
                let gk = g.data()[k];
                m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                p[k] -= lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + eps);
            }
        }
    }
}

/// Glorot-uniform `fan_in x fan_out` weight matrix.
pub fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Mat {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit).expect("valid range");
    Mat::from_vec(fan_in, fan_out, (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect())
}

pub fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, limit: f64) -> Mat {
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-limit..=limit)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_moves_against_gradient_by_lr_on_first_step() {
        let mut store = ParamStore::new();
        store.push("w", Mat::from_vec(1, 2, vec![1.0, -1.0]));
        let mut opt = Adam::new(AdamConfig::with_lr(0.1), &store);
        opt.step(&mut store, &[Mat::from_vec(1, 2, vec![3.0, -0.5])]);
        assert!((store.get(0)[(0, 0)] - 0.9).abs() < 1e-6);
        assert!((store.get(0)[(0, 1)] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn grad_buffer_collects_bound_parameters() {
        let mut store = ParamStore::new();
        store.push("a", Mat::from_vec(1, 2, vec![1.0, 2.0]));
        let mut g = Graph::new();
        let vars = store.bind(&mut g, 0);
        let s = g.cross_entropy(vars[0], &[0]);
        let grads = g.backward(s);
        let mut buf = GradBuffer::zeros_like(&[&store]);
        buf.add(&grads);
        buf.add(&grads);
        let p1 = 1.0 / (1.0 + (1.0f64).exp());
        assert!((buf.group(0)[0][(0, 0)] - 2.0 * (p1 - 1.0)).abs() < 1e-12);
    }
}
