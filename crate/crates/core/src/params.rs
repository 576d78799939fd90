//! Named trainable parameters and their seeded initialization.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{Gradients, Tensor};

/// Handle to an entry of a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Insertion-ordered map from parameter name to its current value.
#[derive(Clone, Debug)]
pub struct ParamStore<T: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let id = self.names.len();
        self.index.insert(name.to_string(), id);
        self.names.push(name.to_string());
        self.tensors.push(value.to_parameter());
        Ok(ParamId(id))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total number of scalar entries across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    /// Replaces a value; the shape must not change.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let cur = &self.tensors[id.0];
        if cur.shape() != value.shape() {
            return Err(Error::Shape {
                op: "ParamStore::set",
                lhs: cur.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        self.tensors[id.0] = value.to_parameter();
        Ok(())
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    /// A store with the same names whose values are exactly `values`
    /// (no copy), for differentiating with respect to externally owned leaves.
    pub fn with_tensors(&self, values: &[Tensor<T>]) -> Result<Self> {
        if values.len() != self.len() {
            return Err(Error::Contract(format!(
                "expected {} parameter tensors, got {}",
                self.len(),
                values.len()
            )));
        }
        for (cur, new) in self.tensors.iter().zip(values) {
            if cur.shape() != new.shape() {
                return Err(Error::Shape {
                    op: "ParamStore::with_tensors",
                    lhs: cur.shape().to_vec(),
                    rhs: new.shape().to_vec(),
                });
            }
        }
        Ok(Self {
            names: self.names.clone(),
            tensors: values.to_vec(),
            index: self.index.clone(),
        })
    }

    /// Gradients aligned with the store order (zeros where absent).
    pub fn gradients(&self, grads: &Gradients<T>) -> Vec<Tensor<T>> {
        self.tensors.iter().map(|t| grads.wrt(t)).collect()
    }
}

/// Seeded initializer. Each parameter draws from its own stream keyed by
/// its name, so values do not depend on construction order.
#[derive(Debug, Clone, Copy)]
pub struct Init {
    pub seed: u64,
    pub std: f64,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self { seed, std: 0.02 }
    }

    pub fn with_std(self, std: f64) -> Self {
        Self { std, ..self }
    }

    pub fn normal<T: Scalar>(&self, ps: &mut ParamStore<T>, name: &str, shape: &[usize]) -> Result<ParamId> {
        let mut rng = Rng::new(self.seed, format!("init/{name}"));
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::lit(rng.normal() * self.std)).collect();
        ps.add(name, Tensor::from_vec(shape, data)?)
    }

    pub fn zeros<T: Scalar>(&self, ps: &mut ParamStore<T>, name: &str, shape: &[usize]) -> Result<ParamId> {
        ps.add(name, Tensor::zeros(shape))
    }

    pub fn ones<T: Scalar>(&self, ps: &mut ParamStore<T>, name: &str, shape: &[usize]) -> Result<ParamId> {
        ps.add(name, Tensor::ones(shape))
    }
}
