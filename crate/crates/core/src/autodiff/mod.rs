//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every operation in creation order. Leaves created with
//! [`Graph::var`] are tracked; leaves created with [`Graph::constant`] are
//! not, and any subgraph that depends only on constants skips gradient work
//! entirely during the backward sweep.

mod gradcheck;
mod kernels;

use std::collections::HashMap;

pub use gradcheck::{finite_diff_check, DiffMode, GradCheck};

use crate::tensor::{Real, Result, Tensor, TensorError};
use kernels::Broadcast;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, S),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Upsample2x(Var),
    GroupNorm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        groups: usize,
        mean: Vec<S>,
        rstd: Vec<S>,
    },
    LayerNorm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        mean: Vec<S>,
        rstd: Vec<S>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Silu(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Reshape(Var),
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Sum(Var),
    Mean(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
    MeanAxis {
        x: Var,
        axis: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<S>,
    },
}

#[derive(Debug, Clone)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Scalar loss value plus one gradient per tracked variable.
#[derive(Debug, Clone)]
pub struct GradRecord<S> {
    pub value: S,
    pub grads: HashMap<Var, Tensor<S>>,
}

impl<S: Real> GradRecord<S> {
    pub fn grad(&self, v: Var) -> &Tensor<S> {
        &self.grads[&v]
    }
}

/// Operations the engine differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Capability {
    MatMul,
    BatchMatMul,
    Conv2d3x3Stride1,
    Conv2d3x3Stride2,
    NearestUpsample,
    GroupNorm,
    LayerNorm,
    Softmax,
    Silu,
    Elementwise,
    EmbeddingLookup,
    ReshapeTranspose,
    Reductions,
}

pub fn required_op_set() -> Vec<Capability> {
    use Capability::*;
    vec![
        MatMul,
        BatchMatMul,
        Conv2d3x3Stride1,
        Conv2d3x3Stride2,
        NearestUpsample,
        GroupNorm,
        LayerNorm,
        Softmax,
        Silu,
        Elementwise,
        EmbeddingLookup,
        ReshapeTranspose,
        Reductions,
    ]
}

/// Normalization epsilon.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Default)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

impl<S: Real> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Tracked leaf.
    pub fn var(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Untracked leaf.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    fn binary(&mut self, a: Var, b: Var, op: &'static str) -> Result<(Tensor<S>, bool)> {
        let (ta, tb) = (self.value(a), self.value(b));
        let bc = Broadcast::new(ta.dims(), tb.dims()).ok_or_else(|| shape_err(op, ta.dims(), tb.dims()))?;
        let out = match op {
            "add" => bc.apply(ta.data(), tb.data(), |x, y| x + y),
            "sub" => bc.apply(ta.data(), tb.data(), |x, y| x - y),
            _ => bc.apply(ta.data(), tb.data(), |x, y| x * y),
        };
        Ok((Tensor::new(bc.out_dims.clone(), out)?, self.rg(a) || self.rg(b)))
    }

    /// Elementwise sum with trailing-axis broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "add")?;
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "sub")?;
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "mul")?;
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: S, shift: S) -> Var {
        let t = self.value(x).map(|v| scale * v + shift);
        let rg = self.rg(x);
        self.push(t, Op::Affine(x, scale), rg)
    }

    pub fn scale(&mut self, x: Var, s: S) -> Var {
        self.affine(x, s, S::zero())
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.mul(x, x)
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da.len() != 2 || db.len() != 2 || da[1] != db[0] {
            return Err(shape_err("matmul", da, db));
        }
        let (m, k, n) = (da[0], da[1], db[1]);
        let mut out = vec![S::zero(); m * n];
        S::gemm(
            m,
            k,
            n,
            S::one(),
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            n as isize,
            1,
            S::zero(),
            &mut out,
            n as isize,
            1,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `[b,m,k] x [b,k,n] -> [b,m,n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da.len() != 3 || db.len() != 3 || da[0] != db[0] || da[2] != db[1] {
            return Err(shape_err("batch_matmul", da, db));
        }
        let (bs, m, k, n) = (da[0], da[1], da[2], db[2]);
        let mut out = vec![S::zero(); bs * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for i in 0..bs {
            S::gemm(
                m,
                k,
                n,
                S::one(),
                &av[i * m * k..],
                k as isize,
                1,
                &bv[i * k * n..],
                n as isize,
                1,
                S::zero(),
                &mut out[i * m * n..],
                n as isize,
                1,
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![bs, m, n], out)?, Op::BatchMatMul(a, b), rg))
    }

    /// 2-D convolution, NCHW input and `[Co, Ci, kh, kw]` weights.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (dx, dw) = (self.dims(x).to_vec(), self.dims(w).to_vec());
        if dx.len() != 4 || dw.len() != 4 || dx[1] != dw[1] || stride == 0 {
            return Err(shape_err("conv2d", &dx, &dw));
        }
        if let Some(b) = b {
            if self.dims(b) != [dw[0]] {
                return Err(shape_err("conv2d bias", &dw, self.dims(b)));
            }
        }
        let geo = kernels::ConvGeom::new(&dx, &dw, stride, pad).ok_or_else(|| shape_err("conv2d", &dx, &dw))?;
        let out = kernels::conv2d_forward(
            &geo,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor::new(geo.out_dims(), out)?,
            Op::Conv2d { x, w, b, stride, pad },
            rg,
        ))
    }

    /// Nearest-neighbour 2x upsampling of an NCHW tensor.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let d = self.dims(x).to_vec();
        if d.len() != 4 {
            return Err(TensorError::Invalid {
                op: "upsample2x",
                msg: format!("expected NCHW, got {d:?}"),
            });
        }
        let (nc, h, w) = (d[0] * d[1], d[2], d[3]);
        let src = self.value(x).data();
        let mut out = vec![S::zero(); nc * 4 * h * w];
        for p in 0..nc {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(p * 2 * h + y) * 2 * w + xx] = src[(p * h + y / 2) * w + xx / 2];
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![d[0], d[1], 2 * h, 2 * w], out)?,
            Op::Upsample2x(x),
            rg,
        ))
    }

    /// Group normalization over `[N, C, ...]`, optional per-channel affine.
    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Option<Var>, beta: Option<Var>) -> Result<Var> {
        let d = self.dims(x).to_vec();
        if d.len() < 2 || groups == 0 || d[1] % groups != 0 {
            return Err(TensorError::Invalid {
                op: "group_norm",
                msg: format!("{groups} groups do not divide channels of {d:?}"),
            });
        }
        for p in [gamma, beta].into_iter().flatten() {
            if self.dims(p) != [d[1]] {
                return Err(shape_err("group_norm affine", &d, self.dims(p)));
            }
        }
        let (n, c) = (d[0], d[1]);
        let spatial: usize = d[2..].iter().product();
        let gsize = c / groups * spatial;
        let eps = S::from_f64c(NORM_EPS);
        let src = self.value(x).data();
        let mut out = vec![S::zero(); src.len()];
        let mut mean = Vec::with_capacity(n * groups);
        let mut rstd = Vec::with_capacity(n * groups);
        let inv = S::one() / S::from_usize(gsize).unwrap();
        for ng in 0..n * groups {
            let chunk = &src[ng * gsize..(ng + 1) * gsize];
            let mu = chunk.iter().copied().sum::<S>() * inv;
            let var = chunk.iter().map(|&v| (v - mu) * (v - mu)).sum::<S>() * inv;
            let r = S::one() / (var + eps).sqrt();
            for (o, &v) in out[ng * gsize..(ng + 1) * gsize].iter_mut().zip(chunk) {
                *o = (v - mu) * r;
            }
            mean.push(mu);
            rstd.push(r);
        }
        if gamma.is_some() || beta.is_some() {
            let g = gamma.map(|g| self.value(g).data());
            let b = beta.map(|b| self.value(b).data());
            for (i, o) in out.iter_mut().enumerate() {
                let ch = (i / spatial) % c;
                if let Some(g) = g {
                    *o *= g[ch];
                }
                if let Some(b) = b {
                    *o += b[ch];
                }
            }
        }
        let rg = self.rg(x) || gamma.is_some_and(|v| self.rg(v)) || beta.is_some_and(|v| self.rg(v));
        Ok(self.push(
            Tensor::new(d, out)?,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            },
            rg,
        ))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Option<Var>, beta: Option<Var>) -> Result<Var> {
        let d = self.dims(x).to_vec();
        let width = *d.last().unwrap();
        for p in [gamma, beta].into_iter().flatten() {
            if self.dims(p) != [width] {
                return Err(shape_err("layer_norm affine", &d, self.dims(p)));
            }
        }
        let eps = S::from_f64c(NORM_EPS);
        let inv = S::one() / S::from_usize(width).unwrap();
        let src = self.value(x).data();
        let rows = src.len() / width;
        let mut out = vec![S::zero(); src.len()];
        let (mut mean, mut rstd) = (Vec::with_capacity(rows), Vec::with_capacity(rows));
        let g = gamma.map(|g| self.value(g).data());
        let b = beta.map(|b| self.value(b).data());
        for r in 0..rows {
            let row = &src[r * width..(r + 1) * width];
            let mu = row.iter().copied().sum::<S>() * inv;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<S>() * inv;
            let rs = S::one() / (var + eps).sqrt();
            for j in 0..width {
                let mut y = (row[j] - mu) * rs;
                if let Some(g) = g {
                    y *= g[j];
                }
                if let Some(b) = b {
                    y += b[j];
                }
                out[r * width + j] = y;
            }
            mean.push(mu);
            rstd.push(rs);
        }
        let rg = self.rg(x) || gamma.is_some_and(|v| self.rg(v)) || beta.is_some_and(|v| self.rg(v));
        Ok(self.push(
            Tensor::new(d, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            },
            rg,
        ))
    }

    /// Softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let d = self.dims(x).to_vec();
        if axis >= d.len() {
            return Err(TensorError::Invalid {
                op: "softmax",
                msg: format!("axis {axis} out of range for {d:?}"),
            });
        }
        let (outer, len, inner) = kernels::split_axis(&d, axis);
        let src = self.value(x).data();
        let mut out = vec![S::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mx = (0..len).fold(S::neg_infinity(), |m, j| m.max(src[at(j)]));
                let mut z = S::zero();
                for j in 0..len {
                    let e = (src[at(j)] - mx).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    out[at(j)] = out[at(j)] / z;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(d, out)?, Op::Softmax { x, axis }, rg))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v / (S::one() + (-v).exp()));
        let rg = self.rg(x);
        self.push(t, Op::Silu(x), rg)
    }

    /// Row gather from a `[V, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let d = self.dims(table).to_vec();
        if d.len() != 2 {
            return Err(TensorError::Invalid {
                op: "embedding",
                msg: format!("table must be 2-D, got {d:?}"),
            });
        }
        if ids.is_empty() {
            return Err(TensorError::Invalid {
                op: "embedding",
                msg: "empty id list".into(),
            });
        }
        let (vocab, width) = (d[0], d[1]);
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::Invalid {
                    op: "embedding",
                    msg: format!("id {id} outside vocabulary of {vocab}"),
                });
            }
            out.extend_from_slice(&src[id * width..(id + 1) * width]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(vec![ids.len(), width], out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(dims)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Axis permutation: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let d = self.dims(x).to_vec();
        let mut seen = vec![false; d.len()];
        if axes.len() != d.len() || axes.iter().any(|&a| a >= d.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(shape_err("permute", &d, axes));
        }
        let (out_dims, out) = kernels::permute(&d, self.value(x).data(), axes);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(out_dims, out)?,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            rg,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let n = self.dims(x).len();
        if n < 2 {
            return Err(shape_err("transpose", self.dims(x), &[]));
        }
        let mut axes: Vec<usize> = (0..n).collect();
        axes.swap(n - 1, n - 2);
        self.permute(x, &axes)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.dims(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", &first, &[axis]));
        }
        let mut out_dims = first.clone();
        out_dims[axis] = 0;
        for &p in parts {
            let d = self.dims(p);
            if d.len() != first.len() || d.iter().enumerate().any(|(i, &e)| i != axis && e != first[i]) {
                return Err(shape_err("concat", &first, d));
            }
            out_dims[axis] += d[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(out_dims.iter().product());
        for o in 0..outer {
            for &p in parts {
                let len = self.dims(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(out_dims, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(t, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).mean());
        let rg = self.rg(x);
        self.push(t, Op::Mean(x), rg)
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let d = self.dims(x).to_vec();
        if axis >= d.len() {
            return Err(shape_err("reduce_axis", &d, &[axis]));
        }
        let (outer, len, inner) = kernels::split_axis(&d, axis);
        let src = self.value(x).data();
        let mut out = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += src[(o * len + j) * inner + i];
                }
            }
        }
        if mean {
            let inv = S::one() / S::from_usize(len).unwrap();
            out.iter_mut().for_each(|v| *v *= inv);
        }
        let mut od: Vec<usize> = d.iter().enumerate().filter(|&(i, _)| i != axis).map(|(_, &e)| e).collect();
        if od.is_empty() {
            od.push(1);
        }
        let rg = self.rg(x);
        let op = if mean { Op::MeanAxis { x, axis } } else { Op::SumAxis { x, axis } };
        Ok(self.push(Tensor::new(od, out)?, op, rg))
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)` for
    /// `[B, K]` logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let d = self.dims(logits).to_vec();
        if d.len() != 2 || d[0] != labels.len() || labels.iter().any(|&l| l >= d[1]) {
            return Err(shape_err("cross_entropy", &d, &[labels.len()]));
        }
        let (b, k) = (d[0], d[1]);
        let src = self.value(logits).data();
        let mut probs = vec![S::zero(); b * k];
        let mut loss = S::zero();
        for r in 0..b {
            let row = &src[r * k..(r + 1) * k];
            let mx = row.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
            let z: S = row.iter().map(|&v| (v - mx).exp()).sum();
            for j in 0..k {
                probs[r * k + j] = (row[j] - mx).exp() / z;
            }
            loss += z.ln() + mx - row[labels[r]];
        }
        loss = loss / S::from_usize(b).unwrap();
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Runs the backward sweep from a scalar `loss` and returns the gradient
    /// of every requested variable. Variables that do not influence the loss
    /// receive an all-zero gradient.
    pub fn evaluate_with_grads(&self, loss: Var, tracked: &[Var]) -> Result<GradRecord<S>> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Contract(format!(
                "loss must be scalar, got dims {:?}",
                self.dims(loss)
            )));
        }
        for &v in tracked {
            if v.0 >= self.nodes.len() || !matches!(self.nodes[v.0].op, Op::Leaf) || !self.nodes[v.0].requires_grad {
                return Err(TensorError::Contract(format!(
                    "variable {} is not a tracked leaf",
                    v.0
                )));
            }
        }
        let mut leaf = self.backward(loss);
        let grads = tracked
            .iter()
            .map(|&v| {
                let g = leaf.remove(&v).unwrap_or_else(|| Tensor::zeros(self.dims(v)));
                (v, g)
            })
            .collect();
        Ok(GradRecord {
            value: self.value(loss).item(),
            grads,
        })
    }

    fn backward(&self, loss: Var) -> HashMap<Var, Tensor<S>> {
        let mut grads: Vec<Option<Vec<S>>> = vec![None; loss.0 + 1];
        let mut leaves = HashMap::new();
        if !self.rg(loss) {
            return leaves;
        }
        grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaves.insert(Var(i), Tensor::new(node.value.dims().to_vec(), g).unwrap());
                continue;
            }
            self.backward_node(node, &g, &mut grads);
        }
        leaves
    }

    fn accumulate(&self, grads: &mut [Option<Vec<S>>], v: Var, f: impl FnOnce(&mut [S])) {
        if !self.rg(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![S::zero(); self.value(v).numel()]);
        f(slot);
    }

    fn backward_node(&self, node: &Node<S>, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let out_dims = node.value.dims();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -S::one() } else { S::one() };
                let bc = Broadcast::new(self.dims(*a), self.dims(*b)).unwrap();
                self.accumulate(grads, *a, |ga| bc.reduce_lhs(g, ga, |x| x));
                self.accumulate(grads, *b, |gb| bc.reduce_rhs(g, gb, |x| sign * x));
            }
            Op::Mul(a, b) => {
                let bc = Broadcast::new(self.dims(*a), self.dims(*b)).unwrap();
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |ga| bc.reduce_lhs_mul(g, bv, ga));
                self.accumulate(grads, *b, |gb| bc.reduce_rhs_mul(g, av, gb));
            }
            Op::Affine(x, s) => {
                self.accumulate(grads, *x, |gx| {
                    for (o, &v) in gx.iter_mut().zip(g) {
                        *o += *s * v;
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.dims(*a)[0], self.dims(*a)[1]);
                let n = self.dims(*b)[1];
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                // dA = dC . B^T
                self.accumulate(grads, *a, |ga| {
                    S::gemm(m, n, k, S::one(), g, n as isize, 1, bv, 1, n as isize, S::one(), ga, k as isize, 1)
                });
                // dB = A^T . dC
                self.accumulate(grads, *b, |gb| {
                    S::gemm(k, m, n, S::one(), av, 1, k as isize, g, n as isize, 1, S::one(), gb, n as isize, 1)
                });
            }
            Op::BatchMatMul(a, b) => {
                let da = self.dims(*a);
                let (bs, m, k) = (da[0], da[1], da[2]);
                let n = self.dims(*b)[2];
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |ga| {
                    for i in 0..bs {
                        S::gemm(
                            m, n, k, S::one(),
                            &g[i * m * n..], n as isize, 1,
                            &bv[i * k * n..], 1, n as isize,
                            S::one(), &mut ga[i * m * k..], k as isize, 1,
                        );
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for i in 0..bs {
                        S::gemm(
                            k, m, n, S::one(),
                            &av[i * m * k..], 1, k as isize,
                            &g[i * m * n..], n as isize, 1,
                            S::one(), &mut gb[i * k * n..], n as isize, 1,
                        );
                    }
                });
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let geo = kernels::ConvGeom::new(self.dims(*x), self.dims(*w), *stride, *pad).unwrap();
                if let Some(b) = b {
                    self.accumulate(grads, *b, |gb| kernels::conv2d_bias_grad(&geo, g, gb));
                }
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                let need_w = self.rg(*w);
                let need_x = self.rg(*x);
                let mut gw = if need_w { grads[w.0].take().or_else(|| Some(vec![S::zero(); wv.len()])) } else { None };
                let mut gx = if need_x { grads[x.0].take().or_else(|| Some(vec![S::zero(); xv.len()])) } else { None };
                kernels::conv2d_backward(&geo, xv, wv, g, gx.as_deref_mut(), gw.as_deref_mut());
                if need_w {
                    grads[w.0] = gw;
                }
                if need_x {
                    grads[x.0] = gx;
                }
            }
            Op::Upsample2x(x) => {
                let d = self.dims(*x);
                let (nc, h, w) = (d[0] * d[1], d[2], d[3]);
                self.accumulate(grads, *x, |gx| {
                    for p in 0..nc {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                gx[(p * h + y / 2) * w + xx / 2] += g[(p * 2 * h + y) * 2 * w + xx];
                            }
                        }
                    }
                });
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            } => {
                let d = out_dims;
                let (c, spatial) = (d[1], d[2..].iter().product::<usize>());
                let gsize = c / groups * spatial;
                let xv = self.value(*x).data();
                let xhat = |i: usize| (xv[i] - mean[i / gsize]) * rstd[i / gsize];
                if let Some(b) = beta {
                    self.accumulate(grads, *b, |gb| {
                        for (i, &gi) in g.iter().enumerate() {
                            gb[(i / spatial) % c] += gi;
                        }
                    });
                }
                if let Some(gm) = gamma {
                    self.accumulate(grads, *gm, |gg| {
                        for (i, &gi) in g.iter().enumerate() {
                            gg[(i / spatial) % c] += gi * xhat(i);
                        }
                    });
                }
                let gv = gamma.map(|gm| self.value(gm).data());
                self.accumulate(grads, *x, |gx| {
                    let m = S::from_usize(gsize).unwrap();
                    for ng in 0..mean.len() {
                        let range = ng * gsize..(ng + 1) * gsize;
                        let dxhat = |i: usize| match gv {
                            Some(gv) => g[i] * gv[(i / spatial) % c],
                            None => g[i],
                        };
                        let (mut s1, mut s2) = (S::zero(), S::zero());
                        for i in range.clone() {
                            let dh = dxhat(i);
                            s1 += dh;
                            s2 += dh * xhat(i);
                        }
                        let r = rstd[ng] / m;
                        for i in range {
                            gx[i] += r * (m * dxhat(i) - s1 - xhat(i) * s2);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let width = *out_dims.last().unwrap();
                let xv = self.value(*x).data();
                let xhat = |i: usize| (xv[i] - mean[i / width]) * rstd[i / width];
                if let Some(b) = beta {
                    self.accumulate(grads, *b, |gb| {
                        for (i, &gi) in g.iter().enumerate() {
                            gb[i % width] += gi;
                        }
                    });
                }
                if let Some(gm) = gamma {
                    self.accumulate(grads, *gm, |gg| {
                        for (i, &gi) in g.iter().enumerate() {
                            gg[i % width] += gi * xhat(i);
                        }
                    });
                }
                let gv = gamma.map(|gm| self.value(gm).data());
                self.accumulate(grads, *x, |gx| {
                    let m = S::from_usize(width).unwrap();
                    for r in 0..mean.len() {
                        let dxhat = |i: usize| match gv {
                            Some(gv) => g[i] * gv[i % width],
                            None => g[i],
                        };
                        let range = r * width..(r + 1) * width;
                        let (mut s1, mut s2) = (S::zero(), S::zero());
                        for i in range.clone() {
                            s1 += dxhat(i);
                            s2 += dxhat(i) * xhat(i);
                        }
                        let k = rstd[r] / m;
                        for i in range {
                            gx[i] += k * (m * dxhat(i) - s1 - xhat(i) * s2);
                        }
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = kernels::split_axis(out_dims, *axis);
                let y = node.value.data();
                self.accumulate(grads, *x, |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let dot: S = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                gx[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::Silu(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |gx| {
                    for ((o, &v), &gi) in gx.iter_mut().zip(xv).zip(g) {
                        let s = S::one() / (S::one() + (-v).exp());
                        *o += gi * s * (S::one() + v * (S::one() - s));
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let width = self.dims(*table)[1];
                self.accumulate(grads, *table, |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..width {
                            gt[id * width + j] += g[r * width + j];
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, |gx| {
                    for (o, &v) in gx.iter_mut().zip(g) {
                        *o += v;
                    }
                });
            }
            Op::Permute { x, axes } => {
                let mut inv = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inv[a] = i;
                }
                let (_, back) = kernels::permute(out_dims, g, &inv);
                self.accumulate(grads, *x, |gx| {
                    for (o, v) in gx.iter_mut().zip(back) {
                        *o += v;
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let outer: usize = out_dims[..*axis].iter().product();
                let inner: usize = out_dims[axis + 1..].iter().product();
                let total = out_dims[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let len = self.dims(p)[*axis] * inner;
                    self.accumulate(grads, p, |gp| {
                        for o in 0..outer {
                            for j in 0..len {
                                gp[o * len + j] += g[o * total + offset + j];
                            }
                        }
                    });
                    offset += len;
                }
            }
            Op::Sum(x) | Op::Mean(x) => {
                let n = self.value(*x).numel();
                let v = if matches!(node.op, Op::Mean(_)) { g[0] / S::from_usize(n).unwrap() } else { g[0] };
                self.accumulate(grads, *x, |gx| gx.iter_mut().for_each(|o| *o += v));
            }
            Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
                let (outer, len, inner) = kernels::split_axis(self.dims(*x), *axis);
                let k = if matches!(node.op, Op::MeanAxis { .. }) {
                    S::one() / S::from_usize(len).unwrap()
                } else {
                    S::one()
                };
                self.accumulate(grads, *x, |gx| {
                    for o in 0..outer {
                        for j in 0..len {
                            for i in 0..inner {
                                gx[(o * len + j) * inner + i] += k * g[o * inner + i];
                            }
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = self.dims(*logits)[1];
                let scale = g[0] / S::from_usize(labels.len()).unwrap();
                self.accumulate(grads, *logits, |gl| {
                    for (i, &p) in probs.iter().enumerate() {
                        let onehot = if labels[i / k] == i % k { S::one() } else { S::zero() };
                        gl[i] += scale * (p - onehot);
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests;
