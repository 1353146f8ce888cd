//! Reverse-mode differentiation over tensor-level operations.
//!
//! A [`Graph`] records every operation in creation order, which is also a
//! topological order, so [`Graph::backward`] is a single reverse sweep. Values
//! are kept on the graph for the whole step; nothing is recomputed.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use indexmap::IndexMap;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::ops;
use crate::params::ParamStore;
use crate::real::{gemm, Real, Strides};
use crate::tensor::{Array, Dims5};

static NEXT_GRAPH: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    id: usize,
}

enum Op<T> {
    Leaf,
    Conv2d { x: usize, w: usize, b: usize },
    LayerNorm { x: usize, gain: usize, offset: usize, means: Vec<f64>, rstds: Vec<f64> },
    Prelu { x: usize, slope: usize },
    Add(usize, usize),
    AddBroadcast { x: usize, b: usize },
    Mul(usize, usize),
    Scale { x: usize, s: T },
    Gather { x: usize, map: Arc<[usize]> },
    BatchMatMul { a: usize, b: usize, trans_b: bool, batch: usize, m: usize, k: usize, n: usize },
    Softmax { x: usize },
    Mask { x: usize, mask: Vec<T> },
    Concat { parts: Vec<usize> },
    Upsample { x: usize },
    Mse { a: usize, b: usize },
    Sum { x: usize },
    Reshape { x: usize },
}

struct Node<T> {
    value: Array<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// A tape of recorded tensor operations.
pub struct Graph<T: Real = f32> {
    id: u64,
    nodes: Vec<Node<T>>,
    params: Vec<(String, usize)>,
    track_params: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T: Real> {
    graph: u64,
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(String, usize)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to `v`, if `v` required one.
    pub fn get(&self, v: Var) -> Option<Array<T>> {
        if v.graph != self.graph {
            return None;
        }
        let g = self.grads.get(v.id)?.as_ref()?;
        Array::new(self.shapes[v.id].clone(), g.clone()).ok()
    }

    /// Gradients of all registered parameters, keyed by name. Parameters the
    /// loss does not depend on get zeros.
    pub fn params(&self) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for (name, id) in &self.params {
            let shape = self.shapes[*id].clone();
            let g = match &self.grads[*id] {
                Some(g) => Array::new(shape, g.clone()).expect("gradient matches value shape"),
                None => Array::zeros(shape),
            };
            out.insert(name.clone(), g).expect("parameter names are unique on a graph");
        }
        out
    }
}

fn add_into<T: Real>(acc: &mut Option<Vec<T>>, g: Vec<T>) {
    match acc {
        Some(a) => {
            for (x, y) in a.iter_mut().zip(g) {
                *x = *x + y;
            }
        }
        None => *acc = Some(g),
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { id: NEXT_GRAPH.fetch_add(1, Ordering::Relaxed), nodes: Vec::new(), params: Vec::new(), track_params: true }
    }

    /// A graph whose parameters do not require gradients; used for inference.
    pub fn inference() -> Self {
        Graph { track_params: false, ..Self::new() }
    }

    fn push(&mut self, value: Array<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var { graph: self.id, id: self.nodes.len() - 1 }
    }

    fn node(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.id >= self.nodes.len() {
            return Err(Error::Unrecorded(format!("{v:?}")));
        }
        Ok(v.id)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    /// A constant input; no gradient flows to it.
    pub fn constant(&mut self, value: Array<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives a gradient.
    pub fn variable(&mut self, value: Array<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A named learnable leaf. On inference graphs it behaves like a constant.
    pub fn param(&mut self, name: &str, value: Array<T>) -> Var {
        let v = self.push(value, Op::Leaf, self.track_params);
        if self.track_params {
            self.params.push((name.to_string(), v.id));
        }
        v
    }

    pub fn value(&self, v: Var) -> &Array<T> {
        &self.nodes[v.id].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.id].value.shape()
    }

    fn dims5(&self, id: usize) -> Result<Dims5> {
        Dims5::from_slice(self.nodes[id].value.shape())
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (x, w, b) = (self.node(x)?, self.node(w)?, self.node(b)?);
        let d = self.dims5(x)?;
        let c_out = ops::check_conv_shapes(d, self.nodes[w].value.shape(), self.nodes[b].value.len())?;
        let y = ops::conv2d_forward(self.nodes[x].value.data(), d, self.nodes[w].value.data(), self.nodes[b].value.data(), c_out);
        let value = Array::new(d.with_channels(c_out).to_array().to_vec(), y)?;
        let ng = self.needs(&[x, w, b]);
        Ok(self.push(value, Op::Conv2d { x, w, b }, ng))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, offset: Var) -> Result<Var> {
        let (x, gain, offset) = (self.node(x)?, self.node(gain)?, self.node(offset)?);
        let d = self.dims5(x)?;
        if self.nodes[gain].value.len() != d.c || self.nodes[offset].value.len() != d.c {
            return Err(shape_err!("layer norm affine does not match {} channels", d.c));
        }
        let xs = self.nodes[x].value.data();
        let (means, rstds) = ops::layer_norm_stats(xs, d, ops::LAYER_NORM_EPS);
        let y = ops::layer_norm_forward(xs, d, self.nodes[gain].value.data(), self.nodes[offset].value.data(), &means, &rstds);
        let value = Array::new(d.to_array().to_vec(), y)?;
        let ng = self.needs(&[x, gain, offset]);
        Ok(self.push(value, Op::LayerNorm { x, gain, offset, means, rstds }, ng))
    }

    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        let (x, slope) = (self.node(x)?, self.node(slope)?);
        let d = self.dims5(x)?;
        if self.nodes[slope].value.len() != d.c {
            return Err(shape_err!("{} slopes for {} channels", self.nodes[slope].value.len(), d.c));
        }
        let y = ops::prelu_forward(self.nodes[x].value.data(), d, self.nodes[slope].value.data());
        let value = Array::new(d.to_array().to_vec(), y)?;
        let ng = self.needs(&[x, slope]);
        Ok(self.push(value, Op::Prelu { x, slope }, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.node(a)?, self.node(b)?);
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        if va.shape() != vb.shape() {
            return Err(shape_err!("add: {:?} vs {:?}", va.shape(), vb.shape()));
        }
        let y = va.data().iter().zip(vb.data()).map(|(p, q)| *p + *q).collect();
        let value = Array::new(va.shape().to_vec(), y)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    /// `x + b` where `b` is tiled over the leading elements of `x`
    /// (`x.len()` must be a multiple of `b.len()`).
    pub fn add_broadcast(&mut self, x: Var, b: Var) -> Result<Var> {
        let (x, b) = (self.node(x)?, self.node(b)?);
        let (vx, vb) = (&self.nodes[x].value, &self.nodes[b].value);
        let nb = vb.len();
        if nb == 0 || vx.len() % nb != 0 {
            return Err(shape_err!("cannot tile {:?} over {:?}", vb.shape(), vx.shape()));
        }
        let y = vx.data().iter().enumerate().map(|(i, v)| *v + vb.data()[i % nb]).collect();
        let value = Array::new(vx.shape().to_vec(), y)?;
        let ng = self.needs(&[x, b]);
        Ok(self.push(value, Op::AddBroadcast { x, b }, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.node(a)?, self.node(b)?);
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        if va.shape() != vb.shape() {
            return Err(shape_err!("mul: {:?} vs {:?}", va.shape(), vb.shape()));
        }
        let y = va.data().iter().zip(vb.data()).map(|(p, q)| *p * *q).collect();
        let value = Array::new(va.shape().to_vec(), y)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let x = self.node(x)?;
        let vx = &self.nodes[x].value;
        let value = Array::new(vx.shape().to_vec(), vx.data().iter().map(|v| *v * s).collect())?;
        let ng = self.needs(&[x]);
        Ok(self.push(value, Op::Scale { x, s }, ng))
    }

    /// `out[i] = x[map[i]]`, reshaped to `shape`. Permutations, padding, crops
    /// and table lookups are all gathers; the backward pass scatter-adds.
    pub fn gather(&mut self, x: Var, map: Arc<[usize]>, shape: Vec<usize>) -> Result<Var> {
        let x = self.node(x)?;
        let src = self.nodes[x].value.data();
        if let Some(bad) = map.iter().find(|&&i| i >= src.len()) {
            return Err(shape_err!("gather index {bad} out of {}", src.len()));
        }
        let value = Array::new(shape, map.iter().map(|&i| src[i]).collect())?;
        let ng = self.needs(&[x]);
        Ok(self.push(value, Op::Gather { x, map }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let x = self.node(x)?;
        let value = self.nodes[x].value.clone().reshape(shape)?;
        let ng = self.needs(&[x]);
        Ok(self.push(value, Op::Reshape { x }, ng))
    }

    /// Batched product of `[G, M, K]` and `[G, K, N]` (or `[G, N, K]` read
    /// transposed when `trans_b`).
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (a, b) = (self.node(a)?, self.node(b)?);
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        let (&[ga, m, k], &[gb, r1, r2]) = (va.shape(), vb.shape()) else {
            return Err(shape_err!("batch_matmul needs rank-3 operands, got {:?} and {:?}", va.shape(), vb.shape()));
        };
        let (kb, n) = if trans_b { (r2, r1) } else { (r1, r2) };
        if ga != gb || k != kb {
            return Err(shape_err!("batch_matmul: {:?} × {:?} (transposed: {trans_b})", va.shape(), vb.shape()));
        }
        let mut y = vec![T::zero(); ga * m * n];
        for g in 0..ga {
            let sb = if trans_b { Strides::col_major(g * n * k, k) } else { Strides::row_major(g * k * n, n) };
            gemm(m, k, n, T::one(), va.data(), Strides::row_major(g * m * k, k), vb.data(), sb, T::zero(), &mut y, Strides::row_major(g * m * n, n));
        }
        let value = Array::new(vec![ga, m, n], y)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(value, Op::BatchMatMul { a, b, trans_b, batch: ga, m, k, n }, ng))
    }

    /// Whether gradients will flow into `v`.
    pub fn requires_grad(&self, v: Var) -> Result<bool> {
        Ok(self.nodes[self.node(v)?].needs_grad)
    }

    /// Softmax over the last axis with max subtraction. Non-finite inputs are an error.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let x = self.node(x)?;
        let vx = &self.nodes[x].value;
        let n = *vx.shape().last().ok_or_else(|| shape_err!("softmax of a scalar"))?;
        if !vx.is_finite() {
            return Err(Error::NonFinite("attention logits".into()));
        }
        let mut y = Vec::with_capacity(vx.len());
        if n > 0 {
            for row in vx.data().chunks(n) {
                let max = row.iter().fold(T::neg_infinity(), |m, v| m.max(*v));
                let e: Vec<f64> = row.iter().map(|v| (*v - max).as_f64().exp()).collect();
                let s: f64 = e.iter().sum();
                y.extend(e.into_iter().map(|v| T::from_f64(v / s)));
            }
        }
        let value = Array::new(vx.shape().to_vec(), y)?;
        let ng = self.needs(&[x]);
        Ok(self.push(value, Op::Softmax { x }, ng))
    }

    /// Elementwise multiply by a fixed mask (dropout with a pre-scaled mask).
    pub fn mask(&mut self, x: Var, mask: Vec<T>) -> Result<Var> {
        let x = self.node(x)?;
        let vx = &self.nodes[x].value;
        if mask.len() != vx.len() {
            return Err(shape_err!("mask of {} for {} values", mask.len(), vx.len()));
        }
        let value = Array::new(vx.shape().to_vec(), vx.data().iter().zip(&mask).map(|(a, m)| *a * *m).collect())?;
        let ng = self.needs(&[x]);
        Ok(self.push(value, Op::Mask { x, mask }, ng))
    }

    /// Inverted dropout: zero with probability `p`, scale survivors by `1/(1-p)`.
    pub fn dropout<R: Rng>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} not in [0, 1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let n = self.value(x).len();
        let keep = T::from_f64(1.0 / (1.0 - p));
        let mask = (0..n).map(|_| if rng.random::<f64>() < p { T::zero() } else { keep }).collect();
        self.mask(x, mask)
    }

    /// Channel concatenation of 5D values.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let ids: Vec<usize> = parts.iter().map(|v| self.node(*v)).collect::<Result<_>>()?;
        let dims: Vec<Dims5> = ids.iter().map(|&i| self.dims5(i)).collect::<Result<_>>()?;
        let first = *dims.first().ok_or_else(|| shape_err!("nothing to concatenate"))?;
        if dims.iter().any(|d| (d.b, d.f, d.h, d.w) != (first.b, first.f, first.h, first.w)) {
            return Err(shape_err!("concat of mismatched tensors {dims:?}"));
        }
        let c_total: usize = dims.iter().map(|d| d.c).sum();
        let block = first.f * first.plane();
        let mut y = Vec::with_capacity(first.b * c_total * block);
        for b in 0..first.b {
            for (&i, d) in ids.iter().zip(&dims) {
                y.extend_from_slice(&self.nodes[i].value.data()[b * d.c * block..][..d.c * block]);
            }
        }
        let value = Array::new(first.with_channels(c_total).to_array().to_vec(), y)?;
        let ng = self.needs(&ids);
        Ok(self.push(value, Op::Concat { parts: ids }, ng))
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let x = self.node(x)?;
        let d = self.dims5(x)?;
        if d.h == 0 || d.w == 0 {
            return Err(shape_err!("cannot upsample an empty frame"));
        }
        let y = ops::upsample_forward(self.nodes[x].value.data(), d);
        let value = Array::new(Dims5 { h: 2 * d.h, w: 2 * d.w, ..d }.to_array().to_vec(), y)?;
        let ng = self.needs(&[x]);
        Ok(self.push(value, Op::Upsample { x }, ng))
    }

    /// Mean squared difference, a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.node(a)?, self.node(b)?);
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        if va.shape() != vb.shape() || va.is_empty() {
            return Err(shape_err!("mse: {:?} vs {:?}", va.shape(), vb.shape()));
        }
        let s: f64 = va.data().iter().zip(vb.data()).map(|(p, q)| (p.as_f64() - q.as_f64()).powi(2)).sum();
        let value = Array::scalar(T::from_f64(s / va.len() as f64));
        let ng = self.needs(&[a, b]);
        Ok(self.push(value, Op::Mse { a, b }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let x = self.node(x)?;
        let s: f64 = self.nodes[x].value.data().iter().map(|v| v.as_f64()).sum();
        let ng = self.needs(&[x]);
        Ok(self.push(Array::scalar(T::from_f64(s)), Op::Sum { x }, ng))
    }

    /// Gradients of the scalar `loss` with respect to every leaf that needs one.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = self.node(loss)?;
        if self.nodes[root].value.len() != 1 {
            return Err(shape_err!("loss must be a scalar, got shape {:?}", self.nodes[root].value.shape()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(vec![T::one()]);
        for id in (0..=root).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[id].take() else { continue };
            self.propagate(&node.op, &node.value, &dy, &mut grads);
        }
        Ok(Gradients {
            graph: self.id,
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            params: self.params.clone(),
        })
    }

    fn propagate(&self, op: &Op<T>, y: &Array<T>, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |i: usize| &self.nodes[i].value;
        let want = |i: usize| self.nodes[i].needs_grad;
        match op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b } => {
                let d = Dims5::from_slice(val(*x).shape()).expect("checked on record");
                let c_out = val(*w).shape()[0];
                let (dx, dw, db) = ops::conv2d_backward(val(*x).data(), d, val(*w).data(), c_out, dy);
                if want(*x) {
                    add_into(&mut grads[*x], dx);
                }
                if want(*w) {
                    add_into(&mut grads[*w], dw);
                }
                if want(*b) {
                    add_into(&mut grads[*b], db);
                }
            }
            Op::LayerNorm { x, gain, offset, means, rstds } => {
                let d = Dims5::from_slice(val(*x).shape()).expect("checked on record");
                let (dx, dg, doff) = ops::layer_norm_backward(val(*x).data(), d, val(*gain).data(), means, rstds, dy);
                if want(*x) {
                    add_into(&mut grads[*x], dx);
                }
                if want(*gain) {
                    add_into(&mut grads[*gain], dg);
                }
                if want(*offset) {
                    add_into(&mut grads[*offset], doff);
                }
            }
            Op::Prelu { x, slope } => {
                let d = Dims5::from_slice(val(*x).shape()).expect("checked on record");
                let (dx, ds) = ops::prelu_backward(val(*x).data(), d, val(*slope).data(), dy);
                if want(*x) {
                    add_into(&mut grads[*x], dx);
                }
                if want(*slope) {
                    add_into(&mut grads[*slope], ds);
                }
            }
            Op::Add(a, b) => {
                if want(*a) {
                    add_into(&mut grads[*a], dy.to_vec());
                }
                if want(*b) {
                    add_into(&mut grads[*b], dy.to_vec());
                }
            }
            Op::AddBroadcast { x, b } => {
                if want(*x) {
                    add_into(&mut grads[*x], dy.to_vec());
                }
                if want(*b) {
                    let nb = val(*b).len();
                    let mut db = vec![T::zero(); nb];
                    for (i, g) in dy.iter().enumerate() {
                        db[i % nb] = db[i % nb] + *g;
                    }
                    add_into(&mut grads[*b], db);
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    add_into(&mut grads[*a], dy.iter().zip(val(*b).data()).map(|(g, v)| *g * *v).collect());
                }
                if want(*b) {
                    add_into(&mut grads[*b], dy.iter().zip(val(*a).data()).map(|(g, v)| *g * *v).collect());
                }
            }
            Op::Scale { x, s } => {
                add_into(&mut grads[*x], dy.iter().map(|g| *g * *s).collect());
            }
            Op::Gather { x, map } => {
                let mut dx = vec![T::zero(); val(*x).len()];
                for (g, &src) in dy.iter().zip(map.iter()) {
                    dx[src] = dx[src] + *g;
                }
                add_into(&mut grads[*x], dx);
            }
            Op::Reshape { x } => add_into(&mut grads[*x], dy.to_vec()),
            Op::BatchMatMul { a, b, trans_b, batch, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (va, vb) = (val(*a).data(), val(*b).data());
                if want(*a) {
                    // dA = dC · B'ᵀ
                    let mut da = vec![T::zero(); batch * m * k];
                    for g in 0..*batch {
                        let sb = if *trans_b { Strides::row_major(g * n * k, k) } else { Strides::col_major(g * k * n, n) };
                        gemm(m, n, k, T::one(), dy, Strides::row_major(g * m * n, n), vb, sb, T::zero(), &mut da, Strides::row_major(g * m * k, k));
                    }
                    add_into(&mut grads[*a], da);
                }
                if want(*b) {
                    let mut db = vec![T::zero(); batch * k * n];
                    for g in 0..*batch {
                        if *trans_b {
                            // dB[n×k] = dCᵀ · A
                            gemm(n, m, k, T::one(), dy, Strides::col_major(g * m * n, n), va, Strides::row_major(g * m * k, k), T::zero(), &mut db, Strides::row_major(g * n * k, k));
                        } else {
                            // dB[k×n] = Aᵀ · dC
                            gemm(k, m, n, T::one(), va, Strides::col_major(g * m * k, k), dy, Strides::row_major(g * m * n, n), T::zero(), &mut db, Strides::row_major(g * k * n, n));
                        }
                    }
                    add_into(&mut grads[*b], db);
                }
            }
            Op::Softmax { x } => {
                let n = *y.shape().last().expect("rank ≥ 1");
                let mut dx = Vec::with_capacity(dy.len());
                for (yr, gr) in y.data().chunks(n).zip(dy.chunks(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
                    dx.extend(yr.iter().zip(gr).map(|(a, b)| T::from_f64(a.as_f64() * (b.as_f64() - dot))));
                }
                add_into(&mut grads[*x], dx);
            }
            Op::Mask { x, mask } => {
                add_into(&mut grads[*x], dy.iter().zip(mask).map(|(g, m)| *g * *m).collect());
            }
            Op::Concat { parts } => {
                let dims: Vec<Dims5> = parts.iter().map(|&i| Dims5::from_slice(val(i).shape()).expect("5D")).collect();
                let block = dims[0].f * dims[0].plane();
                let c_total: usize = dims.iter().map(|d| d.c).sum();
                let mut offset = 0;
                for (&i, d) in parts.iter().zip(&dims) {
                    if want(i) {
                        let mut g = Vec::with_capacity(d.numel());
                        for b in 0..d.b {
                            g.extend_from_slice(&dy[(b * c_total + offset) * block..][..d.c * block]);
                        }
                        add_into(&mut grads[i], g);
                    }
                    offset += d.c;
                }
            }
            Op::Upsample { x } => {
                let d = Dims5::from_slice(val(*x).shape()).expect("5D");
                add_into(&mut grads[*x], ops::upsample_backward(d, dy));
            }
            Op::Mse { a, b } => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                let s = 2.0 * dy[0].as_f64() / va.len() as f64;
                let da: Vec<T> = va.iter().zip(vb).map(|(p, q)| T::from_f64(s * (p.as_f64() - q.as_f64()))).collect();
                if want(*b) {
                    add_into(&mut grads[*b], da.iter().map(|v| -*v).collect());
                }
                if want(*a) {
                    add_into(&mut grads[*a], da);
                }
            }
            Op::Sum { x } => add_into(&mut grads[*x], vec![dy[0]; val(*x).len()]),
        }
    }
}

/// Outcome of comparing analytic gradients against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    /// `(parameter, flat index)` where the largest error occurred.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Relative error with denominator `max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares `analytic` gradients against central finite differences of `loss`
/// at `params`, on `samples` coordinates drawn with `seed` (a parameter array
/// uniformly, then an index within it). `loss` is always evaluated in f64 so
/// the numeric side stays accurate when checking f32 gradients.
pub fn finite_diff_check<T, L>(
    mut loss: L,
    params: &ParamStore<f64>,
    analytic: &ParamStore<T>,
    eps: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheck>
where
    T: Real,
    L: FnMut(&ParamStore<f64>) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {eps}")));
    }
    params.check_compatible(analytic)?;
    let names: Vec<String> = params.iter().filter(|(_, a)| !a.is_empty()).map(|(n, _)| n.to_string()).collect();
    if names.is_empty() {
        return Ok(GradCheck { max_rel_err: 0.0, worst: None, checked: 0 });
    }
    let total: usize = params.count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords: Vec<(String, usize)> = if samples >= total {
        names.iter().flat_map(|n| (0..params.get(n).unwrap().len()).map(move |i| (n.clone(), i))).collect()
    } else {
        let mut picked = Vec::with_capacity(samples);
        for _ in 0..samples {
            let name = names[rng.random_range(0..names.len())].clone();
            let len = params.get(&name)?.len();
            let idx = sample(&mut rng, len, 1).index(0);
            picked.push((name, idx));
        }
        picked
    };
    let mut probe = params.clone();
    let mut report = GradCheck { max_rel_err: 0.0, worst: None, checked: 0 };
    for (name, idx) in coords {
        let orig = params.get(&name)?.data()[idx];
        probe.get_mut(&name)?.data_mut()[idx] = orig + eps;
        let up = loss(&probe)?;
        probe.get_mut(&name)?.data_mut()[idx] = orig - eps;
        let down = loss(&probe)?;
        probe.get_mut(&name)?.data_mut()[idx] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let err = relative_error(analytic.get(&name)?.data()[idx].as_f64(), numeric);
        report.checked += 1;
        if err > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(err);
            report.worst = Some((name, idx));
        }
    }
    Ok(report)
}

/// Convenience for tests and tools: analytic gradients of every entry of
/// `params` through `f`, which builds the loss on the given graph.
pub fn param_gradients<T, F>(params: &ParamStore<T>, mut f: F) -> Result<(f64, ParamStore<T>)>
where
    T: Real,
    F: FnMut(&mut Graph<T>, &IndexMap<String, Var>) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: IndexMap<String, Var> = params.iter().map(|(n, a)| (n.to_string(), g.param(n, a.clone()))).collect();
    let loss = f(&mut g, &vars)?;
    let value = g.value(loss).item().as_f64();
    Ok((value, g.backward(loss)?.params()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{matrix_map, invert_map, Layout, WindowSpec};
    use crate::testutil::random_array;

    fn store(entries: Vec<(&str, Array<f64>)>) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        for (n, a) in entries {
            s.insert(n, a).unwrap();
        }
        s
    }

    /// Checks `f` (a loss over named parameters) in f64 on every coordinate.
    fn check(params: ParamStore<f64>, f: impl Fn(&mut Graph<f64>, &IndexMap<String, Var>) -> Result<Var> + Copy) -> f64 {
        let (_, analytic) = param_gradients(&params, f).unwrap();
        let loss = |p: &ParamStore<f64>| {
            let mut g = Graph::inference();
            let vars: IndexMap<String, Var> = p.iter().map(|(n, a)| (n.to_string(), g.param(n, a.clone()))).collect();
            let l = f(&mut g, &vars)?;
            Ok(g.value(l).item())
        };
        finite_diff_check(loss, &params, &analytic, 1e-5, usize::MAX, 0).unwrap().max_rel_err
    }

    /// Projects a value onto fixed random weights so every output element matters.
    fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
        let r = random_array::<f64>(g.shape(y).to_vec(), seed);
        let r = g.constant(r);
        let p = g.mul(y, r)?;
        g.sum(p)
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(random_array(vec![2, 3], 1));
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 6]);
        assert_eq!(grads.get(s).is_none(), true);
    }

    #[test]
    fn half_sum_of_squares_gradient_is_x() {
        let mut g = Graph::<f64>::new();
        let xv = random_array::<f64>(vec![5], 2);
        let x = g.variable(xv.clone());
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        let l = g.scale(s, 0.5).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap(), xv);
    }

    #[test]
    fn foreign_and_non_scalar_losses_are_rejected() {
        let mut g1 = Graph::<f64>::new();
        let mut g2 = Graph::<f64>::new();
        let x = g1.variable(Array::scalar(1.0));
        let _ = g2.variable(Array::scalar(1.0));
        assert!(matches!(g2.backward(x), Err(Error::Unrecorded(_))));
        let v = g1.variable(Array::zeros(vec![2]));
        assert!(g1.backward(v).is_err());
    }

    #[test]
    fn quadratic_check_is_exact() {
        let p = store(vec![("x", random_array(vec![4], 3))]);
        let err = check(p, |g, v| {
            let sq = g.mul(v["x"], v["x"])?;
            let s = g.sum(sq)?;
            g.scale(s, 0.5)
        });
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let p = store(vec![("x", random_array(vec![3], 4))]);
        let loss = |_: &ParamStore<f64>| Ok(2.0);
        let zero = p.zeros_like();
        let r = finite_diff_check(loss, &p, &zero, 1e-4, 10, 0).unwrap();
        assert_eq!(r.max_rel_err, 0.0);
    }

    #[test]
    fn conv_gradients() {
        let p = store(vec![
            ("x", random_array(vec![2, 2, 2, 4, 5], 5)),
            ("w", random_array(vec![3, 2, 3, 3], 6)),
            ("b", random_array(vec![3], 7)),
        ]);
        let err = check(p, |g, v| {
            let y = g.conv2d(v["x"], v["w"], v["b"])?;
            project(g, y, 8)
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn layer_norm_gradients() {
        let p = store(vec![
            ("x", random_array(vec![2, 3, 2, 3, 3], 9)),
            ("g", random_array(vec![3], 10)),
            ("o", random_array(vec![3], 11)),
        ]);
        let err = check(p, |g, v| {
            let y = g.layer_norm(v["x"], v["g"], v["o"])?;
            project(g, y, 12)
        });
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn prelu_gradients() {
        let p = store(vec![("x", random_array(vec![1, 2, 2, 3, 3], 13)), ("s", random_array(vec![2], 14))]);
        let err = check(p, |g, v| {
            let y = g.prelu(v["x"], v["s"])?;
            project(g, y, 15)
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn matmul_softmax_gradients() {
        let p = store(vec![
            ("a", random_array(vec![3, 4, 5], 16)),
            ("b", random_array(vec![3, 6, 5], 17)),
            ("c", random_array(vec![3, 5, 2], 18)),
            ("bias", random_array(vec![4, 6], 19)),
        ]);
        let err = check(p, |g, v| {
            let s = g.batch_matmul(v["a"], v["b"], true)?;
            let s = g.scale(s, 0.7)?;
            let s = g.add_broadcast(s, v["bias"])?;
            let a = g.softmax(s)?;
            let r = g.batch_matmul(a, v["b"], false)?;
            let q = g.batch_matmul(r, v["c"], false)?;
            project(g, q, 20)
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn gather_scatter_gradients_roundtrip_exactly() {
        let dims = crate::tensor::Dims5::new(1, 2, 2, 4, 4);
        let ws = WindowSpec::new(4, 2).unwrap();
        let (map, [c, r, k]) = matrix_map(Layout::Global, dims, Some(ws)).unwrap();
        let inv: Arc<[usize]> = invert_map(&map).into();
        let map: Arc<[usize]> = map.into();
        let mut g = Graph::<f64>::new();
        let x = g.variable(random_array(dims.to_array().to_vec(), 21));
        let d = g.gather(x, map, vec![c, r, k]).unwrap();
        let back = g.gather(d, inv, dims.to_array().to_vec()).unwrap();
        let weights = random_array::<f64>(dims.to_array().to_vec(), 22);
        let wv = g.constant(weights.clone());
        let prod = g.mul(back, wv).unwrap();
        let l = g.sum(prod).unwrap();
        assert_eq!(g.backward(l).unwrap().get(x).unwrap(), weights);
    }

    #[test]
    fn lookup_concat_upsample_mse_gradients() {
        let p = store(vec![
            ("table", random_array(vec![5], 23)),
            ("x", random_array(vec![1, 1, 2, 3, 3], 24)),
            ("y", random_array(vec![1, 2, 2, 3, 3], 25)),
            ("t", random_array(vec![1, 3, 2, 6, 6], 26)),
        ]);
        let err = check(p, |g, v| {
            let idx: Arc<[usize]> = (0..18).map(|i| (i * 7) % 5).collect::<Vec<_>>().into();
            let looked = g.gather(v["table"], idx, vec![1, 1, 2, 3, 3])?;
            let x = g.add(v["x"], looked)?;
            let cat = g.concat_channels(&[x, v["y"]])?;
            let up = g.upsample2x(cat)?;
            g.mse(up, v["t"])
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn dropout_mask_gradient_and_inference_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::<f64>::new();
        let x = g.variable(random_array(vec![100], 27));
        let y = g.dropout(x, 0.5, &mut rng).unwrap();
        let l = g.sum(y).unwrap();
        let gx = g.backward(l).unwrap().get(x).unwrap();
        assert!(gx.data().iter().all(|v| *v == 0.0 || *v == 2.0));
        assert!(gx.data().iter().any(|v| *v == 0.0));
        assert_eq!(gx.data(), g.value(y).data().iter().zip(g.value(x).data()).map(|(a, b)| a / b).collect::<Vec<_>>().as_slice());

        let mut g = Graph::<f64>::new();
        let x = g.variable(random_array(vec![10], 28));
        let y = g.dropout(x, 0.0, &mut rng).unwrap();
        assert_eq!(x, y);
        let l = g.sum(y).unwrap();
        assert_eq!(g.backward(l).unwrap().get(x).unwrap().data(), &[1.0; 10]);
    }
}
