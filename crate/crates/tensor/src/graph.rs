//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation eagerly; [`Graph::backward`] walks the
//! tape in reverse. Evaluation order is fixed, so gradients are bitwise
//! reproducible for identical inputs.

use std::collections::HashMap;

use crate::conv::{self, ConvGeom};
use crate::error::{Result, TensorError};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        batch: usize,
    },
    Upsample2 {
        x: Var,
        lead: usize,
        dims: [usize; 3],
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Silu(Var),
    LeakyRelu(Var, f32),
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    WeightedSum {
        x: Var,
        weights: Vec<f32>,
    },
    Concat(Vec<Var>),
    AddChannel {
        x: Var,
        v: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    StraightThrough(Var),
    Gather {
        table: Var,
        indices: Vec<usize>,
    },
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: HashMap<(u64, ParamId), Var>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Vec<f32>>>,
    shapes: Vec<Vec<usize>>,
    bound: Vec<(u64, ParamId, Var)>,
}

impl Grads {
    pub fn wrt(&self, v: Var) -> Option<&[f32]> {
        self.grads[v.0].as_deref()
    }

    /// Gradients for every trainable parameter of `store` bound in the graph.
    /// Parameters that received no gradient are reported as zeros.
    pub fn for_store(&self, store: &ParamStore) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = self
            .bound
            .iter()
            .filter(|(uid, _, _)| *uid == store.uid())
            .map(|(_, id, v)| {
                let shape = &self.shapes[v.0];
                let data = self.grads[v.0]
                    .clone()
                    .unwrap_or_else(|| vec![0.0; shape.iter().product()]);
                (*id, Tensor::new(shape, data).expect("gradient shape"))
            })
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(TensorError::Shape(msg))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable input; its gradient is available through [`Grads::wrt`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Bind a parameter. Repeated binds of the same parameter return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId, trainable: bool) -> Var {
        let key = (store.uid(), id);
        if let Some(&v) = self.bound.get(&key) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, trainable);
        self.bound.insert(key, v);
        v
    }

    /// Copy of `v` cut off from the tape (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 5 || ws.len() != 5 || ws[1] != xs[1] || ws[2] != ws[3] || ws[3] != ws[4] {
            return shape_err(format!("conv3d input {:?} weight {:?}", xs, ws));
        }
        let k = ws[2];
        for &d in &xs[2..] {
            if d + 2 * pad < k {
                return shape_err(format!("conv3d input {:?} smaller than kernel {}", xs, k));
            }
        }
        let geom = ConvGeom::new(xs[1], ws[0], k, stride, pad, [xs[2], xs[3], xs[4]]);
        let batch = xs[0];
        let bias = b.map(|b| self.value(b).data().to_vec());
        let out = conv::conv3d_forward(self.value(x).data(), batch, self.value(w).data(), bias.as_deref(), &geom);
        let shape = [batch, geom.cout, geom.output[0], geom.output[1], geom.output[2]];
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::Conv { x, w, b, geom, batch }, rg))
    }

    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 5 {
            return shape_err(format!("upsample2 expects 5-D, got {:?}", xs));
        }
        let lead = xs[0] * xs[1];
        let dims = [xs[2], xs[3], xs[4]];
        let out = conv::upsample2_forward(self.value(x).data(), lead, dims);
        let t = Tensor::new(&[xs[0], xs[1], 2 * xs[2], 2 * xs[3], 2 * xs[4]], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Upsample2 { x, lead, dims }, rg))
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f32, f32) -> f32) -> Result<(Tensor, bool)> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("{name}: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let data: Vec<f32> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let t = Tensor::new(self.shape(a), data)?;
        Ok((t, self.rg(a) || self.rg(b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f32) -> f32) -> Var {
        let src = self.value(a);
        let data: Vec<f32> = src.data().iter().map(|v| f(*v)).collect();
        let t = Tensor::new(src.shape(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(t, op, rg)
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        self.unary(a, Op::Scale(a, s), |v| v * s)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Silu(a), |v| v / (1.0 + (-v).exp()))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f32) -> Var {
        self.unary(a, Op::LeakyRelu(a, slope), |v| if v > 0.0 { v } else { slope * v })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |v| v.max(0.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), |v| 1.0 / (1.0 + (-v).exp()))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), f32::abs)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |v| v * v)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().map(|v| *v as f64).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s as f32), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1) as f64;
        let s: f64 = self.value(a).data().iter().map(|v| *v as f64).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar((s / n) as f32), Op::Mean(a), rg)
    }

    /// `sum_i weights[i] * x[i]`, with constant weights.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<f32>) -> Result<Var> {
        if weights.len() != self.value(x).numel() {
            return shape_err(format!(
                "weighted_sum: {} weights for {:?}",
                weights.len(),
                self.shape(x)
            ));
        }
        let s: f64 = self
            .value(x)
            .data()
            .iter()
            .zip(&weights)
            .map(|(a, w)| (*a as f64) * (*w as f64))
            .sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s as f32), Op::WeightedSum { x, weights }, rg))
    }

    /// Mean squared difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let s = self.square(d);
        Ok(self.mean(s))
    }

    /// Mean absolute difference.
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let s = self.abs(d);
        Ok(self.mean(s))
    }

    /// Concatenate along axis 1 (channels).
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        let batch = first[0];
        let spatial: usize = first[2..].iter().product();
        let mut channels = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[0] != batch || s[2..] != first[2..] {
                return shape_err(format!("concat {:?} vs {:?}", s, first));
            }
            channels += s[1];
        }
        let mut data = Vec::with_capacity(batch * channels * spatial);
        for b in 0..batch {
            for &p in parts {
                let t = self.value(p);
                let per = t.shape()[1] * spatial;
                data.extend_from_slice(&t.data()[b * per..(b + 1) * per]);
            }
        }
        let mut shape = first.clone();
        shape[1] = channels;
        let rg = parts.iter().any(|p| self.rg(*p));
        let t = Tensor::new(&shape, data)?;
        Ok(self.push(t, Op::Concat(parts.to_vec()), rg))
    }

    /// `x[b, c, ...] + v[b, c]`.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let vs = self.shape(v).to_vec();
        if vs.len() != 2 || vs[0] != xs[0] || vs[1] != xs[1] {
            return shape_err(format!("add_channel {:?} + {:?}", xs, vs));
        }
        let spatial: usize = xs[2..].iter().product();
        let vv = self.value(v).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for (i, chunk) in data.chunks_mut(spatial).enumerate() {
            let add = vv[i];
            chunk.iter_mut().for_each(|e| *e += add);
        }
        let rg = self.rg(x) || self.rg(v);
        let t = Tensor::new(&xs, data)?;
        Ok(self.push(t, Op::AddChannel { x, v }, rg))
    }

    /// `x [B, I] · w[O, I]^T + b[O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || ws[1] != xs[1] || self.value(b).numel() != ws[0] {
            return shape_err(format!("linear x {:?} w {:?}", xs, ws));
        }
        let (batch, inp, outp) = (xs[0], xs[1], ws[0]);
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut data = vec![0.0f32; batch * outp];
        for bi in 0..batch {
            let row = &xv[bi * inp..(bi + 1) * inp];
            for o in 0..outp {
                let wr = &wv[o * inp..(o + 1) * inp];
                data[bi * outp + o] = bv[o] + row.iter().zip(wr).map(|(a, c)| a * c).sum::<f32>();
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        let t = Tensor::new(&[batch, outp], data)?;
        Ok(self.push(t, Op::Linear { x, w, b }, rg))
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        const EPS: f32 = 1e-5;
        let xs = self.shape(x).to_vec();
        let c = xs[1];
        if !c.is_multiple_of(groups) || self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return shape_err(format!("group_norm {:?} with {} groups", xs, groups));
        }
        let spatial: usize = xs[2..].iter().product();
        let cg = c / groups;
        let gsize = cg * spatial;
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![0.0f32; xv.len()];
        let mut out = vec![0.0f32; xv.len()];
        let mut rstd = vec![0.0f32; xs[0] * groups];
        for (gi, chunk) in xv.chunks(gsize).enumerate() {
            let mean = chunk.iter().map(|v| *v as f64).sum::<f64>() / gsize as f64;
            let var = chunk.iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / gsize as f64;
            let r = 1.0 / ((var as f32) + EPS).sqrt();
            rstd[gi] = r;
            let base = gi * gsize;
            for (j, v) in chunk.iter().enumerate() {
                let ch = ((gi % groups) * cg) + j / spatial;
                let h = (*v - mean as f32) * r;
                xhat[base + j] = h;
                out[base + j] = h * gv[ch] + bv[ch];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let t = Tensor::new(&xs, out)?;
        Ok(self.push(
            t,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Node whose forward value is `value` but whose gradient passes to `x`
    /// unchanged (straight-through estimator).
    pub fn straight_through(&mut self, x: Var, value: Tensor) -> Result<Var> {
        if value.shape() != self.shape(x) {
            return shape_err(format!(
                "straight_through {:?} vs {:?}",
                value.shape(),
                self.shape(x)
            ));
        }
        let rg = self.rg(x);
        Ok(self.push(value, Op::StraightThrough(x), rg))
    }

    /// Rows of `table [K, C]` laid out as `[B, C, spatial...]` following
    /// `indices` (one per batch-spatial position, batch-major).
    pub fn gather_rows(&mut self, table: Var, indices: Vec<usize>, out_shape: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        let (k, c) = (ts[0], ts[1]);
        let batch = out_shape[0];
        let spatial: usize = out_shape[2..].iter().product();
        if out_shape[1] != c || indices.len() != batch * spatial || indices.iter().any(|i| *i >= k) {
            return shape_err(format!("gather_rows table {:?} into {:?}", ts, out_shape));
        }
        let tv = self.value(table).data();
        let mut data = vec![0.0f32; batch * c * spatial];
        for b in 0..batch {
            for s in 0..spatial {
                let row = indices[b * spatial + s];
                for ch in 0..c {
                    data[(b * c + ch) * spatial + s] = tv[row * c + ch];
                }
            }
        }
        let rg = self.rg(table);
        let t = Tensor::new(out_shape, data)?;
        Ok(self.push(t, Op::Gather { table, indices }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Reverse pass from a scalar `loss` (seeded with gradient 1).
    pub fn backward(&self, loss: Var) -> Grads {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; n];
        if self.rg(loss) {
            grads[loss.0] = Some(vec![1.0; self.value(loss).numel()]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop(i, &gy, &mut grads);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let bound = self.bound.iter().map(|((uid, id), v)| (*uid, *id, *v)).collect();
        Grads {
            grads,
            shapes,
            bound,
        }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f32>>], v: Var, g: Vec<f32>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot => *slot = Some(g),
        }
    }

    fn backprop(&self, i: usize, gy: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom, batch } => {
                let need_dx = self.rg(*x);
                let need_dw = self.rg(*w);
                let (dx, dw, db) = conv::conv3d_backward(
                    self.value(*x).data(),
                    *batch,
                    self.value(*w).data(),
                    gy,
                    geom,
                    need_dx,
                    need_dw,
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                if need_dw {
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Upsample2 { x, lead, dims } => {
                let dx = conv::upsample2_backward(gy, *lead, *dims);
                self.accumulate(grads, *x, dx);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gy.to_vec());
                self.accumulate(grads, *b, gy.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gy.to_vec());
                self.accumulate(grads, *b, gy.iter().map(|g| -g).collect());
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.rg(*a) {
                    self.accumulate(grads, *a, gy.iter().zip(bv).map(|(g, v)| g * v).collect());
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, gy.iter().zip(av).map(|(g, v)| g * v).collect());
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, gy.iter().map(|g| g * s).collect()),
            Op::Silu(a) => {
                let xv = self.value(*a).data();
                let d = gy
                    .iter()
                    .zip(xv)
                    .map(|(g, x)| {
                        let s = 1.0 / (1.0 + (-x).exp());
                        g * s * (1.0 + x * (1.0 - s))
                    })
                    .collect();
                self.accumulate(grads, *a, d);
            }
            Op::LeakyRelu(a, slope) => {
                let xv = self.value(*a).data();
                let d = gy
                    .iter()
                    .zip(xv)
                    .map(|(g, x)| if *x > 0.0 { *g } else { g * slope })
                    .collect();
                self.accumulate(grads, *a, d);
            }
            Op::Relu(a) => {
                let xv = self.value(*a).data();
                let d = gy.iter().zip(xv).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect();
                self.accumulate(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let d = gy.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect();
                self.accumulate(grads, *a, d);
            }
            Op::Abs(a) => {
                let xv = self.value(*a).data();
                let d = gy
                    .iter()
                    .zip(xv)
                    .map(|(g, x)| {
                        if *x > 0.0 {
                            *g
                        } else if *x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.accumulate(grads, *a, d);
            }
            Op::Square(a) => {
                let xv = self.value(*a).data();
                let d = gy.iter().zip(xv).map(|(g, x)| 2.0 * g * x).collect();
                self.accumulate(grads, *a, d);
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                self.accumulate(grads, *a, vec![gy[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                self.accumulate(grads, *a, vec![gy[0] / n as f32; n]);
            }
            Op::WeightedSum { x, weights } => {
                self.accumulate(grads, *x, weights.iter().map(|w| w * gy[0]).collect());
            }
            Op::Concat(parts) => {
                let shape = node.value.shape();
                let batch = shape[0];
                let spatial: usize = shape[2..].iter().product();
                let total = shape[1] * spatial;
                let mut offset = 0;
                for p in parts {
                    let per = self.shape(*p)[1] * spatial;
                    if self.rg(*p) {
                        let mut d = Vec::with_capacity(batch * per);
                        for b in 0..batch {
                            d.extend_from_slice(&gy[b * total + offset..b * total + offset + per]);
                        }
                        self.accumulate(grads, *p, d);
                    }
                    offset += per;
                }
            }
            Op::AddChannel { x, v } => {
                self.accumulate(grads, *x, gy.to_vec());
                if self.rg(*v) {
                    let spatial: usize = node.value.shape()[2..].iter().product();
                    let d = gy.chunks(spatial).map(|c| c.iter().sum::<f32>()).collect();
                    self.accumulate(grads, *v, d);
                }
            }
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let (batch, inp) = (xs[0], xs[1]);
                let outp = self.shape(*w)[0];
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                if self.rg(*x) {
                    let mut dx = vec![0.0f32; batch * inp];
                    for bi in 0..batch {
                        for o in 0..outp {
                            let g = gy[bi * outp + o];
                            for k in 0..inp {
                                dx[bi * inp + k] += g * wv[o * inp + k];
                            }
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.rg(*w) {
                    let mut dw = vec![0.0f32; outp * inp];
                    for bi in 0..batch {
                        for o in 0..outp {
                            let g = gy[bi * outp + o];
                            for k in 0..inp {
                                dw[o * inp + k] += g * xv[bi * inp + k];
                            }
                        }
                    }
                    self.accumulate(grads, *w, dw);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0f32; outp];
                    for bi in 0..batch {
                        for o in 0..outp {
                            db[o] += gy[bi * outp + o];
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            } => {
                let shape = node.value.shape();
                let c = shape[1];
                let spatial: usize = shape[2..].iter().product();
                let cg = c / groups;
                let gsize = cg * spatial;
                let gv = self.value(*gamma).data();
                let mut dgamma = vec![0.0f32; c];
                let mut dbeta = vec![0.0f32; c];
                let mut dx = vec![0.0f32; gy.len()];
                for gi in 0..gy.len() / gsize {
                    let base = gi * gsize;
                    let mut sum_d = 0.0f64;
                    let mut sum_dx = 0.0f64;
                    for j in 0..gsize {
                        let ch = (gi % groups) * cg + j / spatial;
                        let g = gy[base + j];
                        dgamma[ch] += g * xhat[base + j];
                        dbeta[ch] += g;
                        let dh = (g * gv[ch]) as f64;
                        sum_d += dh;
                        sum_dx += dh * xhat[base + j] as f64;
                    }
                    let m = gsize as f64;
                    let r = rstd[gi] as f64;
                    for j in 0..gsize {
                        let ch = (gi % groups) * cg + j / spatial;
                        let dh = (gy[base + j] * gv[ch]) as f64;
                        dx[base + j] = (r / m * (m * dh - sum_d - xhat[base + j] as f64 * sum_dx)) as f32;
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::StraightThrough(x) | Op::Reshape(x) => self.accumulate(grads, *x, gy.to_vec()),
            Op::Gather { table, indices } => {
                let ts = self.shape(*table);
                let c = ts[1];
                let mut dt = vec![0.0f32; ts[0] * c];
                let shape = node.value.shape();
                let batch = shape[0];
                let spatial: usize = shape[2..].iter().product();
                for b in 0..batch {
                    for s in 0..spatial {
                        let row = indices[b * spatial + s];
                        for ch in 0..c {
                            dt[row * c + ch] += gy[(b * c + ch) * spatial + s];
                        }
                    }
                }
                self.accumulate(grads, *table, dt);
            }
        }
    }
}
