//! Named parameter tensors, their binding into a [`Graph`], and Adam.
//!
//! Parameter values are kept exactly representable as `f32` so a saved
//! checkpoint reloads bit-for-bit; arithmetic runs in `f64`.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autograd::{Grads, Graph, Var};
use crate::tensor::Tensor;

static NEXT_VERSION: AtomicU64 = AtomicU64::new(1);

fn fresh_version() -> u64 {
    NEXT_VERSION.fetch_add(1, Ordering::Relaxed)
}

pub fn round_f32(t: &mut Tensor) {
    for x in t.data_mut() {
        *x = *x as f32 as f64;
    }
}

#[derive(Debug)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    version: u64,
}

impl Clone for ParamSet {
    fn clone(&self) -> Self {
        Self { names: self.names.clone(), tensors: self.tensors.clone(), version: self.version }
    }
}

impl PartialEq for ParamSet {
    fn eq(&self, other: &Self) -> bool {
        self.names == other.names && self.tensors == other.tensors
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new(), version: fresh_version() }
    }

    /// Appends a parameter and returns its slot.
    pub fn push(&mut self, name: impl Into<String>, mut t: Tensor) -> usize {
        round_f32(&mut t);
        self.names.push(name.into());
        self.tensors.push(t);
        self.version = fresh_version();
        self.tensors.len() - 1
    }

    /// Gaussian init with standard deviation `std`.
    pub fn push_normal(&mut self, name: &str, rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> usize {
        let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal) * std).collect();
        self.push(name, Tensor::from_vec(rows, cols, data))
    }

    pub fn push_zeros(&mut self, name: &str, rows: usize, cols: usize) -> usize {
        self.push(name, Tensor::zeros(rows, cols))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn get(&self, slot: usize) -> &Tensor {
        &self.tensors[slot]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    /// Changes on every mutation; caches compare against it.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Overwrites slot `slot`; the value is rounded to `f32`.
    pub fn set(&mut self, slot: usize, mut t: Tensor) {
        assert_eq!(t.shape(), self.tensors[slot].shape(), "parameter '{}' shape change", self.names[slot]);
        round_f32(&mut t);
        self.tensors[slot] = t;
        self.version = fresh_version();
    }

    /// Replaces every tensor, keeping names. Used by checkpoint loading.
    pub fn replace_all(&mut self, tensors: Vec<Tensor>) {
        assert_eq!(tensors.len(), self.tensors.len());
        for (slot, t) in tensors.into_iter().enumerate() {
            self.set(slot, t);
        }
    }

    /// Mutable access for tests that perturb parameters directly. The
    /// value is not rounded.
    pub fn perturb(&mut self, slot: usize, index: usize, delta: f64) {
        self.tensors[slot].data_mut()[index] += delta;
        self.version = fresh_version();
    }

    /// Inserts every parameter into `g` as a tracked (`trainable`) or
    /// constant leaf.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| if trainable { g.variable(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        Bound { vars }
    }

    pub fn max_abs_diff(&self, other: &ParamSet) -> f64 {
        self.tensors.iter().zip(&other.tensors).map(|(a, b)| a.max_abs_diff(b)).fold(0.0, f64::max)
    }

    /// Flattened copy of every scalar, in slot order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }
}

/// Graph handles for a [`ParamSet`], slot-aligned.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, slot: usize) -> Var {
        self.vars[slot]
    }

    pub fn grads(&self, g: &Graph, grads: &Grads) -> Vec<Tensor> {
        self.vars.iter().map(|&v| grads.get_or_zeros(v, g.value(v).shape())).collect()
    }
}

pub fn add_grads(acc: &mut [Tensor], other: &[Tensor]) {
    for (a, b) in acc.iter_mut().zip(other) {
        a.add_assign(b);
    }
}

pub fn grads_finite(grads: &[Tensor]) -> bool {
    grads.iter().all(Tensor::is_finite)
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm gradient clip; `0` disables.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: 1.0 }
    }
}

/// Cosine decay from `base` at step 0 to zero after `total` steps.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    0.5 * base * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}

#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Adam {
    pub fn new(params: &ParamSet, cfg: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect();
        Self { cfg, m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) {
        assert_eq!(grads.len(), params.len());
        self.t += 1;
        let gnorm = grads.iter().map(Tensor::norm_sq).sum::<f64>().sqrt();
        let clip = if self.cfg.clip_norm > 0.0 && gnorm > self.cfg.clip_norm { self.cfg.clip_norm / gnorm } else { 1.0 };
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (slot, g) in grads.iter().enumerate() {
            let m = self.m[slot].data_mut();
            let v = self.v[slot].data_mut();
            let mut p = params.get(slot).clone();
            for (i, x) in p.data_mut().iter_mut().enumerate() {
                let gi = g.data()[i] * clip;
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                *x -= self.cfg.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.cfg.eps);
            }
            params.set(slot, p);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn values_are_f32_exact() {
        let mut p = ParamSet::new();
        let s = p.push("w", Tensor::row_vector(vec![0.1, 1.0 / 3.0]));
        for &x in p.get(s).data() {
            assert_eq!(x, x as f32 as f64);
        }
    }

    #[test]
    fn version_changes_on_update() {
        let mut p = ParamSet::new();
        let s = p.push_zeros("w", 1, 2);
        let v0 = p.version();
        let mut adam = Adam::new(&p, AdamConfig::default());
        adam.step(&mut p, &[Tensor::row_vector(vec![1.0, -1.0])]);
        assert_ne!(p.version(), v0);
        // first Adam step moves each coordinate by ~lr against the gradient sign
        let w = p.get(s).data();
        assert!(w[0] < 0.0 && w[1] > 0.0);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = ParamSet::new();
        p.push("w", Tensor::row_vector(vec![3.0, -2.0]));
        let mut adam = Adam::new(&p, AdamConfig { lr: 0.05, clip_norm: 0.0, ..Default::default() });
        for _ in 0..500 {
            let g = p.get(0).scale(2.0);
            adam.step(&mut p, &[g]);
        }
        assert!(p.get(0).norm() < 1e-2);
    }
}
