//! Affine and normalization layers over a [`ParamStore`].

use crate::error::Result;
use crate::params::{Init, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{layer_norm, Tensor};

pub const LN_EPS: f64 = 1e-5;

/// `y = x·W (+ b)` applied over the last axis.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        init: &Init,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = init.normal(ps, &format!("{name}.weight"), &[in_dim, out_dim])?;
        let bias = if bias {
            Some(init.zeros(ps, &format!("{name}.bias"), &[out_dim])?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<T: Scalar>(&self, ps: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = x.matmul(ps.get(self.weight))?;
        match self.bias {
            Some(b) => y.add_bias(ps.get(b)),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, init: &Init, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: init.ones(ps, &format!("{name}.gamma"), &[dim])?,
            beta: init.zeros(ps, &format!("{name}.beta"), &[dim])?,
        })
    }

    pub fn forward<T: Scalar>(&self, ps: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        layer_norm(x, ps.get(self.gamma), ps.get(self.beta), LN_EPS)
    }
}
