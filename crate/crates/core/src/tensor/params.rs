use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};

use super::{Scalar, Tensor};

/// A named trainable tensor with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Vec<T>,
}

/// Named parameters in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("parameter `{name}` registered twice")));
        }
        let grad = vec![T::zero(); value.len()];
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Parameter { name, value, grad });
        Ok(())
    }

    /// Registers a matrix drawn from `U(-1/sqrt(rows), 1/sqrt(rows))`, rows
    /// being the fan-in of a right-multiplied weight.
    pub fn register_uniform(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut impl Rng) -> Result<()> {
        let bound = 1.0 / (rows as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| T::from_f64(rng.random_range(-bound..bound)))
            .collect();
        self.register(name, Tensor::matrix(rows, cols, data)?)
    }

    pub fn register_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<()> {
        self.register(name, Tensor::zeros(shape))
    }

    pub fn register_filled(&mut self, name: impl Into<String>, shape: &[usize], v: f64) -> Result<()> {
        let mut t = Tensor::zeros(shape);
        t.data_mut().iter_mut().for_each(|x| *x = T::from_f64(v));
        self.register(name, t)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Parameter<T>> {
        self.index_of(name).map(|i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        self.index_of(name).map(move |i| &mut self.params[i])
    }

    pub fn get_index(&self, i: usize) -> &Parameter<T> {
        &self.params[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar weights.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub(crate) fn accumulate_grad(&mut self, idx: usize, g: &[T]) {
        for (a, &b) in self.params[idx].grad.iter_mut().zip(g) {
            *a = *a + b;
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    pub fn scale_grads(&mut self, c: T) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = *g * c);
        }
    }

    /// Same names and values in another precision; gradients reset.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for p in &self.params {
            out.register(p.name.clone(), p.value.cast())
                .expect("names are unique in the source store");
        }
        out
    }
}
