use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{shape_err, DiffError, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Named learnable tensors. Names are hierarchical (`dynamics.edge_enc.0.w`)
/// and kept in sorted order so iteration and serialization are deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore<T> {
    entries: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParameterStore<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.entries.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| DiffError::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| DiffError::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.entries.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|t| t.len()).sum()
    }

    /// Copies every entry whose name starts with `prefix` from `other`.
    pub fn merge_prefix(&mut self, other: &ParameterStore<T>, prefix: &str) {
        for (k, v) in other.entries.range(prefix.to_string()..) {
            if !k.starts_with(prefix) {
                break;
            }
            self.entries.insert(k.clone(), v.clone());
        }
    }

    /// Same entries with zeroed values.
    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> ParameterStore<U> {
        ParameterStore {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Dense layer `name.w` of shape `[fan_in, fan_out]` drawn from
    /// U(-sqrt(6/fan_in), sqrt(6/fan_in)) and zero bias `name.b`.
    pub fn init_linear(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        self.init_uniform(&format!("{name}.w"), &[fan_in, fan_out], bound, rng);
        self.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
    }

    pub fn init_uniform(&mut self, name: &str, shape: &[usize], bound: f64, rng: &mut impl Rng) {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::lit(rng.random_range(-bound..bound)))
            .collect();
        self.insert(name, Tensor::new(shape.to_vec(), data).expect("shape matches"));
    }
}

/// Gradients keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients<T> {
    entries: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    /// Zero gradients for every entry of `store`.
    pub fn zeros_for(store: &ParameterStore<T>) -> Self {
        Self {
            entries: store
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.entries.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Adds `other` into `self`, entry by entry, in name order.
    pub fn accumulate(&mut self, other: &Gradients<T>) -> Result<()> {
        for (k, g) in &other.entries {
            match self.entries.get_mut(k) {
                Some(acc) => {
                    if acc.shape() != g.shape() {
                        return Err(shape_err("accumulate", format!("gradient `{k}`")));
                    }
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += *b;
                    }
                }
                None => {
                    self.entries.insert(k.clone(), g.clone());
                }
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, s: T) {
        for g in self.entries.values_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }

    pub fn global_norm(&self) -> T {
        let mut acc = 0.0f64;
        for g in self.entries.values() {
            for &x in g.data() {
                let x = x.to_f64_lossy();
                acc += x * x;
            }
        }
        T::lit(acc.sqrt())
    }

    /// Rescales so the global L2 norm is at most `max_norm`. Returns the norm
    /// before clipping.
    pub fn clip_global_norm(&mut self, max_norm: T) -> T {
        let norm = self.global_norm();
        if norm > max_norm && norm.is_finite() {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn all_finite(&self) -> std::result::Result<(), String> {
        for (k, g) in &self.entries {
            if !g.all_finite() {
                return Err(k.clone());
            }
        }
        Ok(())
    }
}
