//! Forward definitions of the differentiable ops.

use super::backward::{gelu_scalar, Op};
use super::{check_axis, split_axis, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Gathers `data` (laid out as `shape`) into the axis order `perm`.
pub(crate) fn permute_data<T: Scalar>(data: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    if rank == 0 {
        return data.to_vec();
    }
    let last = rank - 1;
    let run = out_shape[last];
    let run_stride = src[last];
    let mut idx = vec![0usize; last];
    let mut base = 0usize;
    loop {
        if run_stride == 1 {
            out.extend_from_slice(&data[base..base + run]);
        } else {
            out.extend((0..run).map(|j| data[base + j * run_stride]));
        }
        // odometer over the leading output axes
        let mut ax = last;
        loop {
            if ax == 0 {
                return out;
            }
            ax -= 1;
            idx[ax] += 1;
            base += src[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= src[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

fn broadcast_lead(op: &'static str, a: &[usize], b: &[usize], full_a: &[usize], full_b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::Shape {
                    op,
                    lhs: full_a.to_vec(),
                    rhs: full_b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// Maps a flat index over `out_lead` onto a flat index over a (possibly
/// broadcast) operand lead shape.
pub(crate) fn broadcast_index(o: usize, out_lead: &[usize], lead: &[usize]) -> usize {
    let off = out_lead.len() - lead.len();
    let mut rem = o;
    let mut idx = 0;
    let mut mul = 1;
    for ax in (0..out_lead.len()).rev() {
        let coord = rem % out_lead[ax];
        rem /= out_lead[ax];
        if ax >= off {
            let d = lead[ax - off];
            if d != 1 {
                idx += coord * mul;
            }
            mul *= d;
        }
    }
    idx
}

impl<T: Scalar> Tensor<T> {
    fn expect_same_shape(&self, other: &Tensor<T>, op: &'static str) -> Result<()> {
        if self.shape() == other.shape() {
            Ok(())
        } else {
            Err(Error::Shape {
                op,
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            })
        }
    }

    fn zip_with(
        &self,
        other: &Tensor<T>,
        name: &'static str,
        op: Op<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        self.expect_same_shape(other, name)?;
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect();
        Tensor::from_op(name, self.shape().to_vec(), data, op, &[self, other])
    }

    fn map_unary(&self, name: &'static str, op: Op<T>, f: impl Fn(T) -> T) -> Result<Tensor<T>> {
        let data = self.data().iter().map(|&a| f(a)).collect();
        Tensor::from_op(name, self.shape().to_vec(), data, op, &[self])
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_with(other, "add", Op::Add, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_with(other, "sub", Op::Sub, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_with(other, "mul", Op::Mul, |a, b| a * b)
    }

    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_with(other, "div", Op::Div, |a, b| a / b)
    }

    pub fn square(&self) -> Result<Tensor<T>> {
        self.mul(self)
    }

    /// Adds a rank-1 `bias` along the last axis.
    pub fn add_bias(&self, bias: &Tensor<T>) -> Result<Tensor<T>> {
        let d = *self.shape().last().expect("rank >= 1");
        if bias.shape() != [d] {
            return Err(Error::Shape {
                op: "add_bias",
                lhs: self.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let b = bias.data();
        let data = self
            .data()
            .chunks_exact(d)
            .flat_map(|row| row.iter().zip(b).map(|(&x, &y)| x + y))
            .collect();
        Tensor::from_op("add_bias", self.shape().to_vec(), data, Op::AddBias, &[self, bias])
    }

    pub fn scale(&self, c: f64) -> Result<Tensor<T>> {
        let c = T::lit(c);
        self.map_unary("scale", Op::Scale(c), |a| a * c)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor<T>> {
        let c = T::lit(c);
        self.map_unary("add_scalar", Op::AddScalar, |a| a + c)
    }

    pub fn exp(&self) -> Result<Tensor<T>> {
        self.map_unary("exp", Op::Exp, |a| a.exp())
    }

    pub fn ln(&self) -> Result<Tensor<T>> {
        if let Some(bad) = self.data().iter().find(|v| **v <= T::zero()) {
            return Err(Error::Param(format!("ln: non-positive input {bad}")));
        }
        self.map_unary("ln", Op::Ln, |a| a.ln())
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self) -> Result<Tensor<T>> {
        self.map_unary("gelu", Op::Gelu, gelu_scalar)
    }

    /// Batched matrix product `…×m×k · …×k×n → …×m×n`; the leading axes
    /// broadcast numpy-style.
    pub fn matmul(&self, b: &Tensor<T>) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(), b.shape());
        let shape_err = || Error::Shape {
            op: "matmul",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(shape_err());
        }
        let a_lead = sa[..sa.len() - 2].to_vec();
        let b_lead = sb[..sb.len() - 2].to_vec();
        let out_lead = broadcast_lead("matmul", &a_lead, &b_lead, sa, sb)?;
        let batches: usize = out_lead.iter().product();
        let mut out = vec![T::zero(); batches * m * n];
        let (ad, bd) = (self.data(), b.data());
        let (ki, ni) = (k as isize, n as isize);
        if b_lead.is_empty() {
            // one tall product over every leading row of `a`
            T::gemm(batches * m, k, n, T::one(), ad, ki, 1, bd, ni, 1, T::zero(), &mut out, ni, 1);
        } else {
            for o in 0..batches {
                let ia = broadcast_index(o, &out_lead, &a_lead);
                let ib = broadcast_index(o, &out_lead, &b_lead);
                T::gemm(
                    m,
                    k,
                    n,
                    T::one(),
                    &ad[ia * m * k..(ia + 1) * m * k],
                    ki,
                    1,
                    &bd[ib * k * n..(ib + 1) * k * n],
                    ni,
                    1,
                    T::zero(),
                    &mut out[o * m * n..(o + 1) * m * n],
                    ni,
                    1,
                );
            }
        }
        let mut shape = out_lead.clone();
        shape.extend([m, n]);
        Tensor::from_op(
            "matmul",
            shape,
            out,
            Op::Matmul {
                m,
                k,
                n,
                a_lead,
                b_lead,
                out_lead,
            },
            &[self, b],
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        let n: usize = shape.iter().product();
        if n != self.numel() || shape.contains(&0) {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Tensor::from_op("reshape", shape.to_vec(), self.to_vec(), Op::Reshape, &[self])
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<T>> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Param(format!(
                "permute: {perm:?} is not a permutation of {rank} axes"
            )));
        }
        let shape: Vec<usize> = perm.iter().map(|&p| self.shape()[p]).collect();
        let data = permute_data(self.data(), self.shape(), perm);
        Tensor::from_op("permute", shape, data, Op::Permute(perm.to_vec()), &[self])
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&self) -> Result<Tensor<T>> {
        let rank = self.rank();
        if rank < 2 {
            return Err(Error::Param("transpose_last2 needs rank >= 2".into()));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(&perm)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Param("concat of zero tensors".into()))?;
        check_axis("concat", first.shape(), axis)?;
        for p in &parts[1..] {
            let ok = p.rank() == first.rank()
                && p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let (outer, _, inner) = split_axis(first.shape(), axis);
        let mut shape = first.shape().to_vec();
        shape[axis] = sizes.iter().sum();
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for (p, &len) in parts.iter().zip(&sizes) {
                let chunk = len * inner;
                data.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        Tensor::from_op("concat", shape, data, Op::Concat { axis, sizes }, parts)
    }

    /// Selects (and may repeat) entries of `axis`. The backward pass
    /// scatter-adds, so repeated indices accumulate.
    pub fn index_select(&self, axis: usize, indices: &[usize]) -> Result<Tensor<T>> {
        check_axis("index_select", self.shape(), axis)?;
        let (outer, len, inner) = split_axis(self.shape(), axis);
        if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
            return Err(Error::Param(format!(
                "index_select: index {bad} out of range for axis of length {len}"
            )));
        }
        if indices.is_empty() {
            return Err(Error::Param("index_select: empty index list".into()));
        }
        let mut data = Vec::with_capacity(outer * indices.len() * inner);
        let src = self.data();
        for o in 0..outer {
            for &i in indices {
                let at = (o * len + i) * inner;
                data.extend_from_slice(&src[at..at + inner]);
            }
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = indices.len();
        Tensor::from_op(
            "index_select",
            shape,
            data,
            Op::IndexSelect {
                axis,
                indices: indices.to_vec(),
            },
            &[self],
        )
    }

    /// Numerically stable softmax along `axis` (max subtracted first).
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        check_axis("softmax", self.shape(), axis)?;
        let data = softmax_data(self.data(), self.shape(), axis, false);
        Tensor::from_op("softmax", self.shape().to_vec(), data, Op::Softmax { axis }, &[self])
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Tensor<T>> {
        check_axis("log_softmax", self.shape(), axis)?;
        let data = softmax_data(self.data(), self.shape(), axis, true);
        Tensor::from_op("log_softmax", self.shape().to_vec(), data, Op::LogSoftmax { axis }, &[self])
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&self) -> Result<Tensor<T>> {
        let s = self.data().iter().copied().sum();
        Tensor::from_op("sum", vec![1], vec![s], Op::Sum, &[self])
    }

    pub fn mean(&self) -> Result<Tensor<T>> {
        let n = T::lit(self.numel() as f64);
        let s: T = self.data().iter().copied().sum();
        Tensor::from_op("mean", vec![1], vec![s / n], Op::Mean, &[self])
    }

    /// Sums out `axis` (dropped from the shape; rank-1 input gives `[1]`).
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor<T>> {
        check_axis("sum_axis", self.shape(), axis)?;
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let src = self.data();
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let row = &src[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (acc, &v) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Tensor::from_op("sum_axis", shape, data, Op::SumAxis { axis }, &[self])
    }

    /// Index of the maximum along `axis` (first on ties). Not differentiable:
    /// a backward pass through it is a contract error.
    pub fn argmax(&self, axis: usize) -> Result<Tensor<T>> {
        check_axis("argmax", self.shape(), axis)?;
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let src = self.data();
        let mut data = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                for l in 1..len {
                    if src[(o * len + l) * inner + i] > src[(o * len + best) * inner + i] {
                        best = l;
                    }
                }
                data.push(T::lit(best as f64));
            }
        }
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Tensor::from_op("argmax", shape, data, Op::Argmax, &[self])
    }
}

pub(crate) fn softmax_data<T: Scalar>(src: &[T], shape: &[usize], axis: usize, log: bool) -> Vec<T> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |l: usize| (o * len + l) * inner + i;
            let mut max = src[at(0)];
            for l in 1..len {
                max = max.max(src[at(l)]);
            }
            let mut total = T::zero();
            for l in 0..len {
                let e = (src[at(l)] - max).exp();
                out[at(l)] = e;
                total += e;
            }
            if log {
                let lt = total.ln();
                for l in 0..len {
                    out[at(l)] = src[at(l)] - max - lt;
                }
            } else {
                let inv = T::one() / total;
                for l in 0..len {
                    out[at(l)] *= inv;
                }
            }
        }
    }
    out
}

/// Normalizes over the last axis, then applies `gamma * x̂ + beta`.
pub fn layer_norm<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    if !(eps > 0.0) {
        return Err(Error::Param(format!("layer_norm: eps must be positive, got {eps}")));
    }
    let d = *x.shape().last().expect("rank >= 1");
    for p in [gamma, beta] {
        if p.shape() != [d] {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: x.shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
    }
    let rows = x.numel() / d;
    let dn = T::lit(d as f64);
    let eps = T::lit(eps);
    let mut xhat = Vec::with_capacity(x.numel());
    let mut rstd = Vec::with_capacity(rows);
    for row in x.data().chunks_exact(d) {
        let mean = row.iter().copied().sum::<T>() / dn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let r = T::one() / (var + eps).sqrt();
        rstd.push(r);
        xhat.extend(row.iter().map(|&v| (v - mean) * r));
    }
    let (g, b) = (gamma.data(), beta.data());
    let data = xhat
        .chunks_exact(d)
        .flat_map(|row| row.iter().enumerate().map(move |(j, &v)| v * g[j] + b[j]))
        .collect();
    Tensor::from_op(
        "layer_norm",
        x.shape().to_vec(),
        data,
        Op::LayerNorm { xhat, rstd },
        &[x, gamma, beta],
    )
}
