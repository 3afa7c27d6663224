use std::collections::HashMap;

use rand::Rng;

use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// A named array. Non-trainable entries hold buffers such as batch-norm
/// running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Vec<T>,
    pub trainable: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>, trainable: bool) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        let id = self.params.len();
        self.index.insert(name.to_string(), id);
        self.params.push(Param {
            name: name.to_string(),
            grad: vec![T::zero(); value.numel()],
            value,
            trainable,
        });
        ParamId(id)
    }

    /// Weight tensor drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    pub fn add_uniform(&mut self, name: &str, shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect();
        self.add(name, Tensor { shape, data }, true)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_trainable_values(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: vec![U::zero(); p.grad.len()],
                    trainable: p.trainable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Copies values of every parameter whose name starts with `prefix`.
    /// Returns how many were copied.
    pub fn copy_prefix_from(&mut self, other: &ParamStore<T>, prefix: &str) -> Result<usize> {
        let mut n = 0;
        for src in other.params.iter().filter(|p| p.name.starts_with(prefix)) {
            let id = self.id(&src.name)?;
            let dst = &mut self.params[id.0];
            if dst.value.shape != src.value.shape {
                return Err(Error::Shape {
                    context: format!("transfer of {}", src.name),
                    detail: format!("{:?} vs {:?}", dst.value.shape, src.value.shape),
                });
            }
            dst.value.data.copy_from_slice(&src.value.data);
            n += 1;
        }
        Ok(n)
    }

    /// New store holding only the parameters under `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for p in self.params.iter().filter(|p| p.name.starts_with(prefix)) {
            out.add(&p.name, p.value.clone(), p.trainable);
        }
        out
    }
}
