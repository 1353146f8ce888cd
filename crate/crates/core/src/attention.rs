//! Spatial local (L), spatial global (G) and frame (F) attention.
//!
//! All three share one pipeline: three 3×3 convolutions produce Q/K/V, the
//! tensors are rearranged into data matrices, each matrix row vector is split
//! into contiguous per-head blocks, and `softmax(Q·Kᵀ/√d_head + B)·V` is
//! computed per matrix and head before the result is scattered back.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::grad::{Graph, Var};
use crate::layout::{crop_map, invert_map, matrix_map, pad_map, split_heads_map, Layout, Padding, WindowSpec};
use crate::ops::{conv2d, fused_attention, ConvWeights};
use crate::real::Real;
use crate::tensor::{Array, Tensor5D};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttentionKind {
    #[serde(rename = "F")]
    Frame,
    #[serde(rename = "L")]
    Local,
    #[serde(rename = "G")]
    Global,
}

impl AttentionKind {
    pub fn letter(self) -> char {
        match self {
            AttentionKind::Frame => 'F',
            AttentionKind::Local => 'L',
            AttentionKind::Global => 'G',
        }
    }

    pub fn from_letter(c: char) -> Option<Self> {
        match c {
            'F' => Some(AttentionKind::Frame),
            'L' => Some(AttentionKind::Local),
            'G' => Some(AttentionKind::Global),
            _ => None,
        }
    }

    fn layout(self) -> Layout {
        match self {
            AttentionKind::Frame => Layout::Frame,
            AttentionKind::Local => Layout::Local,
            AttentionKind::Global => Layout::Global,
        }
    }
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

impl FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut chars = s.chars();
        match (chars.next().and_then(AttentionKind::from_letter), chars.next()) {
            (Some(k), None) => Ok(k),
            _ => Err(Error::Config(format!("unknown attention kind {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub kind: AttentionKind,
    /// Ignored for frame attention.
    pub window: WindowSpec,
    pub heads: usize,
    pub channels: usize,
    /// Relative positional bias; only valid for L and G.
    pub use_bias: bool,
    /// Window grid `(H/w, W/w)` the global bias table is sized for.
    pub bias_grid: (usize, usize),
}

impl AttentionConfig {
    pub fn new(kind: AttentionKind, window: WindowSpec, heads: usize, channels: usize) -> Self {
        AttentionConfig { kind, window, heads, channels, use_bias: kind != AttentionKind::Frame, bias_grid: (1, 1) }
    }

    pub fn without_bias(self) -> Self {
        AttentionConfig { use_bias: false, ..self }
    }

    pub fn with_bias_grid(self, grid: (usize, usize)) -> Self {
        AttentionConfig { bias_grid: grid, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        self.window.validate()?;
        if self.heads == 0 || self.channels == 0 {
            return Err(Error::Config("heads and channels must be positive".into()));
        }
        if self.channels % self.heads != 0 {
            return Err(Error::Config(format!("{} heads do not divide {} channels", self.heads, self.channels)));
        }
        if self.use_bias && self.kind == AttentionKind::Frame {
            return Err(Error::Config("frame attention takes no positional bias".into()));
        }
        if self.use_bias && self.kind == AttentionKind::Global && (self.bias_grid.0 == 0 || self.bias_grid.1 == 0) {
            return Err(Error::Config("global bias grid must be non-empty".into()));
        }
        Ok(())
    }

    /// Grid the bias table is sized for: patches per window side for L,
    /// the configured window grid for G.
    pub fn table_grid(&self) -> (usize, usize) {
        match self.kind {
            AttentionKind::Local => {
                let s = self.window.patches_per_side();
                (s, s)
            }
            AttentionKind::Global => self.bias_grid,
            AttentionKind::Frame => (0, 0),
        }
    }

    /// Number of distinct relative offsets, `(2·gh − 1)·(2·gw − 1)`.
    pub fn table_len(&self) -> usize {
        let (gh, gw) = self.table_grid();
        if gh == 0 || gw == 0 {
            return 0;
        }
        (2 * gh - 1) * (2 * gw - 1)
    }
}

/// Learnable parameters of one attention module.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T = f32> {
    pub q: ConvWeights<T>,
    pub k: ConvWeights<T>,
    pub v: ConvWeights<T>,
    /// `[heads, table_len]`, present when the config enables bias.
    pub bias_table: Option<Array<T>>,
}

impl<T: Real> AttentionParams<T> {
    fn table(cfg: &AttentionConfig) -> Option<Array<T>> {
        cfg.use_bias.then(|| Array::zeros(vec![cfg.heads, cfg.table_len()]))
    }

    /// Fan-in scaled uniform convolutions, zero bias table.
    pub fn init<R: Rng>(cfg: &AttentionConfig, rng: &mut R) -> Self {
        let c = cfg.channels;
        AttentionParams {
            q: ConvWeights::init(c, c, rng),
            k: ConvWeights::init(c, c, rng),
            v: ConvWeights::init(c, c, rng),
            bias_table: Self::table(cfg),
        }
    }

    pub fn identity(cfg: &AttentionConfig) -> Self {
        let c = cfg.channels;
        AttentionParams {
            q: ConvWeights::identity(c),
            k: ConvWeights::identity(c),
            v: ConvWeights::identity(c),
            bias_table: Self::table(cfg),
        }
    }

    pub fn zeros(cfg: &AttentionConfig) -> Self {
        let c = cfg.channels;
        AttentionParams {
            q: ConvWeights::zeros(c, c),
            k: ConvWeights::zeros(c, c),
            v: ConvWeights::zeros(c, c),
            bias_table: Self::table(cfg),
        }
    }

    /// `(suffix, array)` pairs in a fixed order.
    pub fn named(&self) -> Vec<(&'static str, &Array<T>)> {
        let mut out = vec![
            ("q.weight", &self.q.weight),
            ("q.bias", &self.q.bias),
            ("k.weight", &self.k.weight),
            ("k.bias", &self.k.bias),
            ("v.weight", &self.v.weight),
            ("v.bias", &self.v.bias),
        ];
        if let Some(t) = &self.bias_table {
            out.push(("bias_table", t));
        }
        out
    }
}

/// Graph handles for an attention module's parameters.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub q: (Var, Var),
    pub k: (Var, Var),
    pub v: (Var, Var),
    pub bias_table: Option<Var>,
}

impl AttentionVars {
    /// Records `params` as constants.
    pub fn constants<T: Real>(g: &mut Graph<T>, params: &AttentionParams<T>) -> Self {
        let mut c = |a: &Array<T>| g.constant(a.clone());
        AttentionVars {
            q: (c(&params.q.weight), c(&params.q.bias)),
            k: (c(&params.k.weight), c(&params.k.bias)),
            v: (c(&params.v.weight), c(&params.v.bias)),
            bias_table: params.bias_table.as_ref().map(c),
        }
    }
}

/// Table index for every `(i, j)` pair of a `grid`, given a table sized for
/// `table_grid`. Grid positions are raster ordered; offsets beyond the table
/// are clamped to its edge.
pub fn relative_position_index(table_grid: (usize, usize), grid: (usize, usize)) -> Result<Vec<usize>> {
    let (th, tw) = table_grid;
    let (gh, gw) = grid;
    if th == 0 || tw == 0 {
        return Err(shape_err!("empty bias table grid"));
    }
    let (my, mx) = (th as isize - 1, tw as isize - 1);
    let n = gh * gw;
    let mut idx = Vec::with_capacity(n * n);
    for i in 0..n {
        let (iy, ix) = ((i / gw) as isize, (i % gw) as isize);
        for j in 0..n {
            let (jy, jx) = ((j / gw) as isize, (j % gw) as isize);
            let dy = ((iy - jy).clamp(-my, my) + my) as usize;
            let dx = ((ix - jx).clamp(-mx, mx) + mx) as usize;
            idx.push(dy * (2 * tw - 1) + dx);
        }
    }
    Ok(idx)
}

/// Materializes the bias matrices `[heads, R, R]` from a `[heads, table_len]` table.
pub fn relative_position_bias<T: Real>(
    table: &Array<T>,
    table_grid: (usize, usize),
    grid: (usize, usize),
) -> Result<Array<T>> {
    let map = bias_map(table.shape(), table_grid, grid)?;
    let r = grid.0 * grid.1;
    let heads = table.shape()[0];
    Array::new(vec![heads, r, r], map.iter().map(|&i| table.data()[i]).collect())
}

fn bias_map(table_shape: &[usize], table_grid: (usize, usize), grid: (usize, usize)) -> Result<Vec<usize>> {
    let (th, tw) = table_grid;
    let len = if th == 0 || tw == 0 { 0 } else { (2 * th - 1) * (2 * tw - 1) };
    let [heads, n] = *table_shape else {
        return Err(shape_err!("bias table must be [heads, offsets], got {table_shape:?}"));
    };
    if n != len || len == 0 {
        return Err(shape_err!("bias table has {n} offsets, grid {th}×{tw} needs {len}"));
    }
    let idx = relative_position_index(table_grid, grid)?;
    Ok((0..heads).flat_map(|h| idx.iter().map(move |i| h * n + i)).collect())
}

/// Contiguous column blocks of an `R × d` matrix, one per head.
pub fn split_heads<T: Real>(d: &Array<T>, heads: usize) -> Result<Vec<Array<T>>> {
    let [r, cols] = *d.shape() else {
        return Err(shape_err!("split_heads needs a matrix, got {:?}", d.shape()));
    };
    if heads == 0 || cols % heads != 0 {
        return Err(shape_err!("{heads} heads do not divide {cols} columns"));
    }
    let dh = cols / heads;
    (0..heads)
        .map(|h| {
            let data = (0..r).flat_map(|i| d.data()[i * cols + h * dh..i * cols + (h + 1) * dh].iter().copied()).collect();
            Array::new(vec![r, dh], data)
        })
        .collect()
}

/// Inverse of [`split_heads`].
pub fn merge_heads<T: Real>(parts: &[Array<T>]) -> Result<Array<T>> {
    let first = parts.first().ok_or_else(|| shape_err!("no heads to merge"))?;
    let [r, dh] = *first.shape() else {
        return Err(shape_err!("heads must be matrices"));
    };
    if parts.iter().any(|p| p.shape() != first.shape()) {
        return Err(shape_err!("heads have different shapes"));
    }
    let mut data = Vec::with_capacity(r * dh * parts.len());
    for i in 0..r {
        for p in parts {
            data.extend_from_slice(&p.data()[i * dh..(i + 1) * dh]);
        }
    }
    Array::new(vec![r, dh * parts.len()], data)
}

/// `A = softmax(Dq·Dkᵀ/scale + B)` and `A·Dv` for `R × d` matrices.
pub fn scaled_attention<T: Real>(
    dq: &Array<T>,
    dk: &Array<T>,
    dv: &Array<T>,
    bias: Option<&Array<T>>,
    scale: f64,
) -> Result<(Array<T>, Array<T>)> {
    if !(scale > 0.0) {
        return Err(Error::Config(format!("attention scale must be positive, got {scale}")));
    }
    let ([rq, d], [rk, dk_], [rv, dv_]) = match (dq.shape(), dk.shape(), dv.shape()) {
        (&[a, b], &[c, e], &[f, h]) => ([a, b], [c, e], [f, h]),
        _ => return Err(shape_err!("scaled_attention needs matrices")),
    };
    if d != dk_ || rk != rv {
        return Err(shape_err!("attention operands {:?} {:?} {:?}", dq.shape(), dk.shape(), dv.shape()));
    }
    let mut g = Graph::<T>::inference();
    let q = g.constant(dq.clone().reshape(vec![1, rq, d])?);
    let k = g.constant(dk.clone().reshape(vec![1, rk, d])?);
    let v = g.constant(dv.clone().reshape(vec![1, rv, dv_])?);
    let s = g.batch_matmul(q, k, true)?;
    let mut s = g.scale(s, T::from_f64(1.0 / scale))?;
    if let Some(b) = bias {
        if b.shape() != [rq, rk] {
            return Err(shape_err!("bias {:?} for {rq}×{rk} logits", b.shape()));
        }
        let b = g.constant(b.clone());
        s = g.add_broadcast(s, b)?;
    }
    let a = g.softmax(s)?;
    let o = g.batch_matmul(a, v, false)?;
    Ok((g.value(o).clone().reshape(vec![rq, dv_])?, g.value(a).clone().reshape(vec![rq, rk])?))
}

/// Records one attention module on `g`. Spatial inputs whose H/W are not
/// multiples of the window are reflect-padded and cropped back afterwards.
pub fn attention_graph<T: Real>(g: &mut Graph<T>, x: Var, cfg: &AttentionConfig, p: &AttentionVars) -> Result<Var> {
    cfg.validate()?;
    let dims = crate::tensor::Dims5::from_slice(g.shape(x))?;
    if dims.c != cfg.channels {
        return Err(shape_err!("attention configured for {} channels, input has {}", cfg.channels, dims.c));
    }
    let spatial = cfg.kind != AttentionKind::Frame;
    let pad = if spatial { Padding::for_window(dims.h, dims.w, cfg.window.window) } else { Padding::default() };
    let xp = if pad.is_zero() {
        x
    } else {
        g.gather(x, pad_map(dims, pad).into(), pad.padded(dims).to_array().to_vec())?
    };
    let pd = pad.padded(dims);

    let q = g.conv2d(xp, p.q.0, p.q.1)?;
    let k = g.conv2d(xp, p.k.0, p.k.1)?;
    let v = g.conv2d(xp, p.v.0, p.v.1)?;

    let (map, [count, rows, cols]) = matrix_map(cfg.kind.layout(), pd, spatial.then_some(cfg.window))?;
    let heads = cfg.heads;
    let map = split_heads_map(&map, [count, rows, cols], heads)?;
    let inverse: Arc<[usize]> = invert_map(&map).into();
    let map: Arc<[usize]> = map.into();
    let dh = cols / heads;
    let shape = vec![count * heads, rows, dh];
    let qd = g.gather(q, map.clone(), shape.clone())?;
    let kd = g.gather(k, map.clone(), shape.clone())?;
    let vd = g.gather(v, map, shape)?;

    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let bias = match cfg.use_bias {
        true => {
            let table = p.bias_table.ok_or_else(|| Error::Config("bias enabled but no table given".into()))?;
            let grid = match cfg.kind {
                AttentionKind::Local => cfg.table_grid(),
                _ => cfg.window.window_grid(pd.h, pd.w),
            };
            let bmap = bias_map(g.shape(table), cfg.table_grid(), grid)?;
            Some(g.gather(table, bmap.into(), vec![heads, rows, rows])?)
        }
        false => None,
    };
    let mut frozen = true;
    for v in [Some(qd), Some(kd), Some(vd), bias].into_iter().flatten() {
        frozen &= !g.requires_grad(v)?;
    }
    let out = if frozen {
        let b = bias.map(|b| g.value(b));
        let o = fused_attention(g.value(qd), g.value(kd), g.value(vd), b, scale)?;
        g.constant(o)
    } else {
        let logits = g.batch_matmul(qd, kd, true)?;
        let mut logits = g.scale(logits, scale)?;
        if let Some(b) = bias {
            logits = g.add_broadcast(logits, b)?;
        }
        let attn = g.softmax(logits)?;
        g.batch_matmul(attn, vd, false)?
    };
    let y = g.gather(out, inverse, pd.to_array().to_vec())?;
    if pad.is_zero() {
        Ok(y)
    } else {
        g.gather(y, crop_map(dims, pad).into(), dims.to_array().to_vec())
    }
}

fn run<T: Real>(x: &Tensor5D<T>, cfg: &AttentionConfig, params: &AttentionParams<T>, kind: AttentionKind) -> Result<Tensor5D<T>> {
    if cfg.kind != kind {
        return Err(Error::Config(format!("expected a {kind} attention config, got {}", cfg.kind)));
    }
    let mut g = Graph::inference();
    let xv = g.constant(x.clone().into_array());
    let vars = AttentionVars::constants(&mut g, params);
    let y = attention_graph(&mut g, xv, cfg, &vars)?;
    Tensor5D::from_array(g.value(y).clone())
}

/// Attention among the patches of each window.
pub fn local_attention<T: Real>(x: &Tensor5D<T>, cfg: &AttentionConfig, params: &AttentionParams<T>) -> Result<Tensor5D<T>> {
    run(x, cfg, params, AttentionKind::Local)
}

/// Attention among same-position patches across all windows of a frame.
pub fn global_attention<T: Real>(x: &Tensor5D<T>, cfg: &AttentionConfig, params: &AttentionParams<T>) -> Result<Tensor5D<T>> {
    run(x, cfg, params, AttentionKind::Global)
}

/// Attention across frames, each frame one token.
pub fn frame_attention<T: Real>(x: &Tensor5D<T>, cfg: &AttentionConfig, params: &AttentionParams<T>) -> Result<Tensor5D<T>> {
    run(x, cfg, params, AttentionKind::Frame)
}

/// The three Q/K/V convolutions.
pub fn qkv_project<T: Real>(
    x: &Tensor5D<T>,
    params: &AttentionParams<T>,
) -> Result<(Tensor5D<T>, Tensor5D<T>, Tensor5D<T>)> {
    Ok((conv2d(x, &params.q)?, conv2d(x, &params.k)?, conv2d(x, &params.v)?))
}
