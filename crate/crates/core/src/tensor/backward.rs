//! Reverse-mode gradient propagation.

use std::collections::{HashMap, HashSet};

use super::ops::{broadcast_index, permute_data};
use super::{split_axis, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// The recorded op of a graph node together with what its backward pass needs.
pub(crate) enum Op<T: Scalar> {
    Add,
    Sub,
    Mul,
    Div,
    AddBias,
    Scale(T),
    AddScalar,
    Exp,
    Ln,
    Gelu,
    Matmul {
        m: usize,
        k: usize,
        n: usize,
        a_lead: Vec<usize>,
        b_lead: Vec<usize>,
        out_lead: Vec<usize>,
    },
    Reshape,
    Permute(Vec<usize>),
    Concat {
        axis: usize,
        sizes: Vec<usize>,
    },
    IndexSelect {
        axis: usize,
        indices: Vec<usize>,
    },
    Softmax {
        axis: usize,
    },
    LogSoftmax {
        axis: usize,
    },
    LayerNorm {
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Sum,
    Mean,
    SumAxis {
        axis: usize,
    },
    Argmax,
}

impl<T: Scalar> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::AddBias => "add_bias",
            Op::Scale(_) => "scale",
            Op::AddScalar => "add_scalar",
            Op::Exp => "exp",
            Op::Ln => "ln",
            Op::Gelu => "gelu",
            Op::Matmul { .. } => "matmul",
            Op::Reshape => "reshape",
            Op::Permute(_) => "permute",
            Op::Concat { .. } => "concat",
            Op::IndexSelect { .. } => "index_select",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::SumAxis { .. } => "sum_axis",
            Op::Argmax => "argmax",
        }
    }
}

const GELU_C: f64 = 0.044_715;

fn sqrt_2_over_pi<T: Scalar>() -> T {
    (T::lit(2.0) / T::PI()).sqrt()
}

pub(crate) fn gelu_scalar<T: Scalar>(x: T) -> T {
    let inner = sqrt_2_over_pi::<T>() * (x + T::lit(GELU_C) * x * x * x);
    T::lit(0.5) * x * (T::one() + inner.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let s = sqrt_2_over_pi::<T>();
    let t = (s * (x + T::lit(GELU_C) * x * x * x)).tanh();
    let half = T::lit(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * s * (T::one() + T::lit(3.0 * GELU_C) * x * x)
}

/// Gradients of a scalar loss, keyed by leaf tensor identity.
pub struct Gradients<T: Scalar> {
    map: HashMap<u64, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, t: &Tensor<T>) -> Option<&Tensor<T>> {
        self.map.get(&t.id())
    }

    /// Gradient w.r.t. `t`; a zero tensor of the same shape when `t` did not
    /// contribute to the loss.
    pub fn wrt(&self, t: &Tensor<T>) -> Tensor<T> {
        self.get(t).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

impl<T: Scalar> Tensor<T> {
    /// Back-propagates from this one-element loss through the recorded graph.
    pub fn backward(&self) -> Result<Gradients<T>> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        let mut map = HashMap::new();
        if !self.requires_grad() {
            return Ok(Gradients { map });
        }

        // iterative post-order DFS; inputs before consumers
        let mut order: Vec<Tensor<T>> = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !seen.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(node) = t.node() {
                for inp in node.inputs.iter().rev() {
                    if inp.requires_grad() && !seen.contains(&inp.id()) {
                        stack.push((inp.clone(), false));
                    }
                }
            }
        }

        let mut pending: HashMap<u64, Vec<T>> = HashMap::new();
        pending.insert(self.id(), vec![T::one()]);
        for t in order.iter().rev() {
            let Some(g) = pending.remove(&t.id()) else {
                continue;
            };
            let Some(node) = t.node() else {
                map.insert(t.id(), Tensor::from_vec(t.shape(), g)?);
                continue;
            };
            let grads = input_grads(&node.op, t, &node.inputs, &g)?;
            for (inp, gi) in node.inputs.iter().zip(grads) {
                if let Some(gi) = gi {
                    let mut slot = pending.remove(&inp.id());
                    accumulate(&mut slot, gi);
                    pending.insert(inp.id(), slot.expect("accumulated"));
                }
            }
        }
        Ok(Gradients { map })
    }
}

fn input_grads<T: Scalar>(
    op: &Op<T>,
    out: &Tensor<T>,
    inputs: &[Tensor<T>],
    g: &[T],
) -> Result<Vec<Option<Vec<T>>>> {
    let want = |i: usize| inputs[i].requires_grad();
    let only = |i: usize, f: &dyn Fn() -> Vec<T>| if want(i) { Some(f()) } else { None };
    let grads = match op {
        Op::Add => vec![only(0, &|| g.to_vec()), only(1, &|| g.to_vec())],
        Op::Sub => vec![
            only(0, &|| g.to_vec()),
            only(1, &|| g.iter().map(|&v| -v).collect()),
        ],
        Op::Mul => {
            let (a, b) = (inputs[0].data(), inputs[1].data());
            vec![
                only(0, &|| g.iter().zip(b).map(|(&g, &b)| g * b).collect()),
                only(1, &|| g.iter().zip(a).map(|(&g, &a)| g * a).collect()),
            ]
        }
        Op::Div => {
            let (a, b) = (inputs[0].data(), inputs[1].data());
            vec![
                only(0, &|| g.iter().zip(b).map(|(&g, &b)| g / b).collect()),
                only(1, &|| {
                    g.iter()
                        .zip(a.iter().zip(b))
                        .map(|(&g, (&a, &b))| -g * a / (b * b))
                        .collect()
                }),
            ]
        }
        Op::AddBias => {
            let d = inputs[1].numel();
            vec![
                only(0, &|| g.to_vec()),
                only(1, &|| {
                    let mut acc = vec![T::zero(); d];
                    for row in g.chunks_exact(d) {
                        acc.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                    }
                    acc
                }),
            ]
        }
        Op::Scale(c) => vec![only(0, &|| g.iter().map(|&v| v * *c).collect())],
        Op::AddScalar => vec![only(0, &|| g.to_vec())],
        Op::Exp => vec![only(0, &|| g.iter().zip(out.data()).map(|(&g, &y)| g * y).collect())],
        Op::Ln => vec![only(0, &|| {
            g.iter().zip(inputs[0].data()).map(|(&g, &x)| g / x).collect()
        })],
        Op::Gelu => vec![only(0, &|| {
            g.iter()
                .zip(inputs[0].data())
                .map(|(&g, &x)| g * gelu_grad(x))
                .collect()
        })],
        Op::Matmul {
            m,
            k,
            n,
            a_lead,
            b_lead,
            out_lead,
        } => matmul_grads(inputs, g, *m, *k, *n, a_lead, b_lead, out_lead),
        Op::Reshape => vec![only(0, &|| g.to_vec())],
        Op::Permute(perm) => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            vec![only(0, &|| permute_data(g, out.shape(), &inv))]
        }
        Op::Concat { axis, sizes } => {
            let (outer, _, inner) = split_axis(out.shape(), *axis);
            let total: usize = sizes.iter().sum();
            let mut offset = 0;
            let mut grads = Vec::with_capacity(sizes.len());
            for (i, &len) in sizes.iter().enumerate() {
                if want(i) {
                    let mut gi = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let at = (o * total + offset) * inner;
                        gi.extend_from_slice(&g[at..at + len * inner]);
                    }
                    grads.push(Some(gi));
                } else {
                    grads.push(None);
                }
                offset += len;
            }
            grads
        }
        Op::IndexSelect { axis, indices } => vec![only(0, &|| {
            let (outer, len, inner) = split_axis(inputs[0].shape(), *axis);
            let mut gi = vec![T::zero(); inputs[0].numel()];
            let sel = indices.len();
            for o in 0..outer {
                for (j, &i) in indices.iter().enumerate() {
                    let src = &g[(o * sel + j) * inner..(o * sel + j + 1) * inner];
                    let dst = &mut gi[(o * len + i) * inner..(o * len + i + 1) * inner];
                    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                }
            }
            gi
        })],
        Op::Softmax { axis } => vec![only(0, &|| {
            let y = out.data();
            let (outer, len, inner) = split_axis(out.shape(), *axis);
            let mut gi = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |l: usize| (o * len + l) * inner + i;
                    let dot: T = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                    for l in 0..len {
                        gi[at(l)] = y[at(l)] * (g[at(l)] - dot);
                    }
                }
            }
            gi
        })],
        Op::LogSoftmax { axis } => vec![only(0, &|| {
            let y = out.data();
            let (outer, len, inner) = split_axis(out.shape(), *axis);
            let mut gi = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |l: usize| (o * len + l) * inner + i;
                    let total: T = (0..len).map(|l| g[at(l)]).sum();
                    for l in 0..len {
                        gi[at(l)] = g[at(l)] - y[at(l)].exp() * total;
                    }
                }
            }
            gi
        })],
        Op::LayerNorm { xhat, rstd } => {
            let gamma = inputs[1].data();
            let d = gamma.len();
            let dn = T::lit(d as f64);
            let dx = only(0, &|| {
                let mut gi = Vec::with_capacity(g.len());
                for ((grow, xrow), &r) in g.chunks_exact(d).zip(xhat.chunks_exact(d)).zip(rstd) {
                    let dxhat: Vec<T> = grow.iter().zip(gamma).map(|(&g, &w)| g * w).collect();
                    let mean_d = dxhat.iter().copied().sum::<T>() / dn;
                    let mean_dx = dxhat.iter().zip(xrow).map(|(&a, &b)| a * b).sum::<T>() / dn;
                    gi.extend(
                        dxhat
                            .iter()
                            .zip(xrow)
                            .map(|(&dh, &xh)| r * (dh - mean_d - xh * mean_dx)),
                    );
                }
                gi
            });
            let dgamma = only(1, &|| {
                let mut acc = vec![T::zero(); d];
                for (grow, xrow) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                    for j in 0..d {
                        acc[j] += grow[j] * xrow[j];
                    }
                }
                acc
            });
            let dbeta = only(2, &|| {
                let mut acc = vec![T::zero(); d];
                for grow in g.chunks_exact(d) {
                    acc.iter_mut().zip(grow).for_each(|(a, &v)| *a += v);
                }
                acc
            });
            vec![dx, dgamma, dbeta]
        }
        Op::Sum => vec![only(0, &|| vec![g[0]; inputs[0].numel()])],
        Op::Mean => {
            let n = inputs[0].numel();
            vec![only(0, &|| vec![g[0] / T::lit(n as f64); n])]
        }
        Op::SumAxis { axis } => vec![only(0, &|| {
            let (outer, len, inner) = split_axis(inputs[0].shape(), *axis);
            let mut gi = Vec::with_capacity(inputs[0].numel());
            for o in 0..outer {
                for _ in 0..len {
                    gi.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            gi
        })],
        Op::Argmax => {
            return Err(Error::Contract(format!(
                "{} is not differentiable; no gradient flows through it",
                op.name()
            )))
        }
    };
    Ok(grads)
}

#[allow(clippy::too_many_arguments)]
fn matmul_grads<T: Scalar>(
    inputs: &[Tensor<T>],
    g: &[T],
    m: usize,
    k: usize,
    n: usize,
    a_lead: &[usize],
    b_lead: &[usize],
    out_lead: &[usize],
) -> Vec<Option<Vec<T>>> {
    let (a, b) = (&inputs[0], &inputs[1]);
    let (ad, bd) = (a.data(), b.data());
    let (ki, ni) = (k as isize, n as isize);
    let batches: usize = out_lead.iter().product();
    let mut ga = a.requires_grad().then(|| vec![T::zero(); ad.len()]);
    let mut gb = b.requires_grad().then(|| vec![T::zero(); bd.len()]);
    if b_lead.is_empty() {
        let rows = batches * m;
        if let Some(ga) = ga.as_mut() {
            // g (rows×n) · bᵀ (n×k)
            T::gemm(rows, n, k, T::one(), g, ni, 1, bd, 1, ni, T::zero(), ga, ki, 1);
        }
        if let Some(gb) = gb.as_mut() {
            // aᵀ (k×rows) · g (rows×n)
            T::gemm(k, rows, n, T::one(), ad, 1, ki, g, ni, 1, T::zero(), gb, ni, 1);
        }
    } else {
        for o in 0..batches {
            let ia = broadcast_index(o, out_lead, a_lead);
            let ib = broadcast_index(o, out_lead, b_lead);
            let go = &g[o * m * n..(o + 1) * m * n];
            let asl = &ad[ia * m * k..(ia + 1) * m * k];
            let bsl = &bd[ib * k * n..(ib + 1) * k * n];
            if let Some(ga) = ga.as_mut() {
                let dst = &mut ga[ia * m * k..(ia + 1) * m * k];
                T::gemm(m, n, k, T::one(), go, ni, 1, bsl, 1, ni, T::one(), dst, ki, 1);
            }
            if let Some(gb) = gb.as_mut() {
                let dst = &mut gb[ib * k * n..(ib + 1) * k * n];
                T::gemm(k, m, n, T::one(), asl, 1, ki, go, ni, 1, T::one(), dst, ni, 1);
            }
        }
    }
    vec![ga, gb]
}
