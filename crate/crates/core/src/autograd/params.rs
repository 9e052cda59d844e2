//! Named parameter storage, initialisers and the Adam optimiser.

use std::collections::HashMap;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::tensor::{Scalar, Tensor};
use crate::binio;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Clone, Debug, PartialEq)]
struct Entry<T> {
    name: String,
    value: Tensor<T>,
    grad: Tensor<T>,
    trainable: bool,
}

/// Ordered collection of named tensors with gradient buffers.
///
/// Non-trainable entries ("buffers") are persisted with the parameters but
/// never receive optimiser updates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), by_name: HashMap::new() }
    }

    fn insert(&mut self, name: &str, value: Tensor<T>, trainable: bool) -> ParamId {
        assert!(!self.by_name.contains_key(name), "duplicate parameter name {name}");
        let id = ParamId(self.entries.len());
        let grad = Tensor::zeros(&value.shape);
        self.entries.push(Entry { name: name.to_string(), value, grad, trainable });
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        self.insert(name, value, true)
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        self.insert(name, value, false)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].grad
    }

    pub fn trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.data.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Total number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }

    pub fn grad_norm(&self) -> f64 {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.grad.sum_sq()).sum::<f64>().sqrt()
    }

    pub fn param_norm(&self) -> f64 {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.sum_sq()).sum::<f64>().sqrt()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    grad: e.grad.cast(),
                    trainable: e.trainable,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Same names, shapes and values (gradients ignored).
    pub fn same_values(&self, other: &ParamStore<T>) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.trainable == b.trainable && a.value == b.value)
    }

    /// Copies every value from `other`, which must have the same layout.
    pub fn load_values_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::Format(format!(
                "parameter count mismatch: {} vs {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            if a.name != b.name || a.value.shape != b.value.shape {
                return Err(Error::Format(format!(
                    "parameter layout mismatch at {} {:?} vs {} {:?}",
                    a.name, a.value.shape, b.name, b.value.shape
                )));
            }
            a.value = b.value.clone();
        }
        Ok(())
    }
}

impl ParamStore<f32> {
    /// Binary layout: `u32 count`, then per entry `name`, `u8 trainable`,
    /// `u32 ndim`, `u32 dims…`, little-endian `f32` values.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        binio::write_u32(w, self.entries.len() as u32)?;
        for e in &self.entries {
            binio::write_str(w, &e.name)?;
            binio::write_u8(w, e.trainable as u8)?;
            binio::write_u32(w, e.value.shape.len() as u32)?;
            for &d in &e.value.shape {
                binio::write_u32(w, d as u32)?;
            }
            binio::write_f32s(w, &e.value.data)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let count = binio::read_u32(r)? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name = binio::read_str(r)?;
            let trainable = binio::read_u8(r)? != 0;
            let ndim = binio::read_u32(r)? as usize;
            if ndim > 8 {
                return Err(Error::Format(format!("parameter {name} has {ndim} dims")));
            }
            let shape = (0..ndim).map(|_| binio::read_u32(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = binio::read_f32s(r, n)?;
            if store.by_name.contains_key(&name) {
                return Err(Error::Format(format!("duplicate parameter {name}")));
            }
            store.insert(&name, Tensor::new(&shape, data), trainable);
        }
        Ok(store)
    }
}

/// Seeded weight initialiser.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn uniform<T: Scalar>(&mut self, shape: &[usize], bound: f64) -> Tensor<T> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::lit(self.rng.gen_range(-bound..=bound))).collect();
        Tensor::new(shape, data)
    }

    pub fn normal<T: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                T::lit(z * std)
            })
            .collect();
        Tensor::new(shape, data)
    }

    /// Variance-preserving uniform init for a layer with `fan_in` inputs.
    pub fn fan_in<T: Scalar>(&mut self, shape: &[usize], fan_in: usize) -> Tensor<T> {
        self.uniform(shape, (3.0 / fan_in.max(1) as f64).sqrt())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: 1.0 }
    }
}

pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<T: Scalar>(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let m = store.ids().map(|id| vec![0.0; store.value(id).len()]).collect::<Vec<_>>();
        let v = m.clone();
        Self { config, step: 0, m, v }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the store's gradient buffers and clears them.
    /// Returns the pre-clip gradient norm.
    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>, lr: f64) -> f64 {
        let norm = store.grad_norm();
        let clip = if self.config.clip_norm > 0.0 && norm > self.config.clip_norm {
            self.config.clip_norm / norm
        } else {
            1.0
        };
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.config.beta1, self.config.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            if !store.trainable(id) {
                continue;
            }
            let grad = store.grad(id).data.iter().map(|g| g.as_f64() * clip).collect::<Vec<_>>();
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let value = store.value_mut(id);
            for (i, g) in grad.into_iter().enumerate() {
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let upd = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.config.eps);
                value.data[i] -= T::lit(upd);
            }
        }
        store.zero_grads();
        norm
    }
}
