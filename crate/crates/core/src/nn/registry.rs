use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    /// Position in registration order.
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Param<T: Scalar> {
    pub name: String,
    pub tensor: Tensor<T>,
    /// Frozen parameters never require a gradient and are never updated.
    pub frozen: bool,
    /// Whether decoupled weight decay applies (weights yes, biases and
    /// norm parameters no).
    pub decay: bool,
}

/// Named parameters in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamRegistry<T: Scalar> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamRegistry<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        data: Vec<T>,
        frozen: bool,
        decay: bool,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid("param registry", format!("duplicate parameter `{name}`")));
        }
        let tensor = Tensor::new(shape, data)?.with_requires_grad(!frozen);
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            tensor,
            frozen,
            decay,
        });
        Ok(ParamId(id))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total element count, optionally restricted to a name prefix.
    pub fn count(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.tensor.numel())
            .sum()
    }

    /// Replaces the values of a parameter. The fresh tensor starts with no
    /// gradient and keeps the parameter's frozen state.
    pub fn set_data(&mut self, id: ParamId, data: Vec<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        let shape = p.tensor.shape().to_vec();
        p.tensor = Tensor::new(&shape, data)?.with_requires_grad(!p.frozen);
        Ok(())
    }

    /// Swaps in an externally built tensor of the same shape, e.g. a probe
    /// input for finite-difference checks.
    pub fn replace(&mut self, id: ParamId, tensor: Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.tensor.shape() != tensor.shape() {
            return Err(Error::shape("param replace", p.tensor.shape(), tensor.shape()));
        }
        p.tensor = tensor;
        Ok(())
    }

    pub fn zero_grad(&self) {
        self.params.iter().for_each(|p| p.tensor.zero_grad());
    }
}

/// Registers initialized parameters under a dotted name prefix.
pub struct ParamBuilder<'a, T: Scalar> {
    registry: &'a mut ParamRegistry<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
    frozen: bool,
}

impl<'a, T: Scalar> ParamBuilder<'a, T> {
    pub fn new(registry: &'a mut ParamRegistry<T>, rng: &'a mut ChaCha8Rng, prefix: &str, frozen: bool) -> Self {
        Self {
            registry,
            rng,
            prefix: prefix.to_string(),
            frozen,
        }
    }

    pub fn scope(&mut self, name: &str) -> ParamBuilder<'_, T> {
        ParamBuilder {
            prefix: self.name(name),
            registry: self.registry,
            rng: self.rng,
            frozen: self.frozen,
        }
    }

    fn name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    /// Normal(0, std) resampled until it falls within two standard deviations.
    pub fn trunc_normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        let dist = Normal::new(0.0, std).expect("positive std");
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| loop {
                let v: f64 = dist.sample(self.rng);
                if v.abs() <= 2.0 * std {
                    break T::c(v);
                }
            })
            .collect();
        self.registry
            .register(self.name(name), shape, data, self.frozen, true)
    }

    /// He-normal initialization for ReLU layers.
    pub fn kaiming(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        self.trunc_normal(name, shape, (2.0 / fan_in as f64).sqrt())
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::c(self.rng.random_range(-bound..bound)))
            .collect();
        self.registry
            .register(self.name(name), shape, data, self.frozen, true)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        self.registry
            .register(self.name(name), shape, vec![T::c(value); n], self.frozen, false)
    }
}
