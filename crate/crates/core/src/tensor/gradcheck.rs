//! Central finite-difference verification of analytic gradients.

use super::{no_grad, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::{DType, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)`.
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` where the maximum occurred.
    pub worst: Option<(usize, usize)>,
    pub coordinates_checked: usize,
}

/// Checks every coordinate of every input.
pub fn grad_check<T, F>(f: F, inputs: &[Tensor<T>], eps: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&[Tensor<T>]) -> Result<Tensor<T>>,
{
    run(f, inputs, eps, |_, n| (0..n).collect())
}

/// Checks at most `per_input` seeded coordinates of each input; inputs
/// with fewer coordinates are checked exhaustively.
pub fn grad_check_sampled<T, F>(
    f: F,
    inputs: &[Tensor<T>],
    eps: f64,
    per_input: usize,
    rng: &Rng,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&[Tensor<T>]) -> Result<Tensor<T>>,
{
    run(f, inputs, eps, |i, n| {
        if n <= per_input {
            (0..n).collect()
        } else {
            let mut r = rng.substream(i);
            let mut picks = r.permutation(n);
            picks.truncate(per_input);
            picks.sort_unstable();
            picks
        }
    })
}

fn run<T, F>(
    f: F,
    inputs: &[Tensor<T>],
    eps: f64,
    coords: impl Fn(usize, usize) -> Vec<usize>,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&[Tensor<T>]) -> Result<Tensor<T>>,
{
    if T::DTYPE != DType::F64 {
        return Err(Error::Contract(
            "grad_check requires double precision tensors".into(),
        ));
    }
    if !(eps > 0.0) {
        return Err(Error::Param(format!("grad_check: eps must be positive, got {eps}")));
    }
    let leaves: Vec<Tensor<T>> = inputs.iter().map(Tensor::to_parameter).collect();
    let loss = f(&leaves)?;
    if loss.numel() != 1 {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar-valued function, got shape {:?}",
            loss.shape()
        )));
    }
    let grads = loss.backward()?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates_checked: 0,
    };
    let consts: Vec<Tensor<T>> = inputs.iter().map(Tensor::detach).collect();
    for (i, leaf) in leaves.iter().enumerate() {
        let analytic = grads.wrt(leaf);
        for c in coords(i, leaf.numel()) {
            // returns (f at the perturbed point, the perturbed coordinate as stored)
            let eval = |delta: f64| -> Result<(f64, f64)> {
                let mut data = consts[i].to_vec();
                data[c] = T::lit(data[c].as_f64() + delta);
                let at = data[c].as_f64();
                let mut args = consts.clone();
                args[i] = Tensor::from_vec(leaf.shape(), data)?;
                Ok((no_grad(|| f(&args))?.item()?.as_f64(), at))
            };
            let ((f_hi, x_hi), (f_lo, x_lo)) = (eval(eps)?, eval(-eps)?);
            // divide by the realized step, not the nominal one
            let numeric = (f_hi - f_lo) / (x_hi - x_lo);
            let a = analytic.data()[c].as_f64();
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
            report.coordinates_checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((i, c));
            }
        }
    }
    Ok(report)
}
