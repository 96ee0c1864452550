//! Named parameter storage, initialization and first-order optimizers.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::archive::WeightArchive;
use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;

/// Ordered list of named tensors. Order is the binding order in a [`Graph`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a tensor and returns its slot.
    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        let name = name.into();
        debug_assert!(self.index_of(&name).is_none(), "duplicate parameter {name}");
        self.entries.push((name, value));
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, slot: usize) -> &Tensor {
        &self.entries[slot].1
    }

    pub fn get_mut(&mut self, slot: usize) -> &mut Tensor {
        &mut self.entries[slot].1
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| self.get(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        g.bind(self.tensors(), trainable)
    }

    /// Adds every tensor to `archive` under `prefix` + name.
    pub fn write_into(&self, archive: &mut WeightArchive, prefix: &str) -> Result<()> {
        for (name, t) in &self.entries {
            archive.insert(format!("{prefix}{name}"), t)?;
        }
        Ok(())
    }

    /// Replaces every tensor with the archive's `prefix` + name entry, checking shapes.
    pub fn read_from(&mut self, archive: &WeightArchive, prefix: &str) -> Result<()> {
        for (name, t) in &mut self.entries {
            let full = format!("{prefix}{name}");
            let loaded = archive.tensor(&full)?;
            if loaded.shape() != t.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "{full}: expected {:?}, found {:?}",
                    t.shape(),
                    loaded.shape()
                )));
            }
            *t = loaded;
        }
        Ok(())
    }
}

/// He-normal initialized conv kernel `[out, in, k, k]`.
pub fn he_conv(rng: &mut ChaCha8Rng, out_ch: usize, in_ch: usize, k: usize) -> Tensor {
    let fan_in = (in_ch * k * k) as f64;
    let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
    let data = (0..out_ch * in_ch * k * k).map(|_| normal.sample(rng)).collect();
    Tensor::from_vec(&[out_ch, in_ch, k, k], data).expect("conv shape")
}

/// Uniform(-a, a) matrix with `a = scale / sqrt(fan_in)`.
pub fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let a = scale / (cols as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-a..=a)).collect();
    Tensor::from_vec(&[rows, cols], data).expect("matrix shape")
}

/// Plain gradient descent with optional heavy-ball momentum.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub step_size: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(step_size: f64, momentum: f64) -> Self {
        Sgd {
            step_size,
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, slot: usize, value: &mut [f64], grad: &[f64]) {
        if self.velocity.len() <= slot {
            self.velocity.resize(slot + 1, Vec::new());
        }
        let v = &mut self.velocity[slot];
        if v.len() != value.len() {
            *v = vec![0.0; value.len()];
        }
        for ((x, vi), g) in value.iter_mut().zip(v.iter_mut()).zip(grad) {
            *vi = self.momentum * *vi + g;
            *x -= self.step_size * *vi;
        }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: Vec<u64>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(step_size: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            step_size,
            beta1,
            beta2,
            eps,
            t: Vec::new(),
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, slot: usize, value: &mut [f64], grad: &[f64]) {
        if self.m.len() <= slot {
            self.m.resize(slot + 1, Vec::new());
            self.v.resize(slot + 1, Vec::new());
            self.t.resize(slot + 1, 0);
        }
        if self.m[slot].len() != value.len() {
            self.m[slot] = vec![0.0; value.len()];
            self.v[slot] = vec![0.0; value.len()];
        }
        self.t[slot] += 1;
        let t = self.t[slot] as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
        for i in 0..value.len() {
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            value[i] -= self.step_size * mh / (vh.sqrt() + self.eps);
        }
    }

    /// Applies one step to every parameter of `store` bound as `vars`.
    /// `slot_offset` lets one optimizer drive several stores.
    pub fn update(&mut self, store: &mut ParamStore, vars: &[Var], grads: &Gradients, slot_offset: usize) {
        for (i, v) in vars.iter().enumerate() {
            if let Some(g) = grads.get(*v) {
                let g = g.data().to_vec();
                self.step(slot_offset + i, store.get_mut(i).data_mut(), &g);
            }
        }
    }
}
