//! Cells, blocks and the two-resolution backbone.
//!
//! Everything is expressed on [`Graph`], so the same code serves inference
//! (an inference graph with constant leaves) and training (parameter leaves).
//!
//! ```text
//! x ─ pre ─ block1 ─┬─ block2 ─ block3 ──────────────────────────┬─ concat ─ post
//!                   └─ merge↓ ─ block4 ─ block5 ─ upsample↑ ─────┘
//! ```

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attention_graph, AttentionConfig, AttentionKind, AttentionParams, AttentionVars};
use crate::error::{shape_err, Error, Result};
use crate::grad::{Graph, Var};
use crate::layout::{merge_map, WindowSpec};
use crate::ops::ConvWeights;
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::{Array, Dims5, Tensor5D};

/// Number of backbone blocks.
pub const BLOCKS: usize = 5;
/// Mixer channel expansion.
pub const MIXER_EXPANSION: usize = 4;
/// Initial PReLU slope.
pub const PRELU_INIT: f64 = 0.25;

/// Ordered cell kinds, written as a string over `{F, L, G}`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct BlockSpec(Vec<AttentionKind>);

impl BlockSpec {
    pub fn kinds(&self) -> &[AttentionKind] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// The spec repeated `n` times, e.g. `FLG` → `FLGFLG`.
    pub fn repeat(&self, n: usize) -> Self {
        BlockSpec(self.0.repeat(n))
    }
}

impl FromStr for BlockSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.is_empty() {
            return Err(Error::Config("block spec is empty".into()));
        }
        s.chars()
            .map(|c| {
                AttentionKind::from_letter(c)
                    .ok_or_else(|| Error::Config(format!("block spec {s:?} has invalid cell {c:?}")))
            })
            .collect::<Result<_>>()
            .map(BlockSpec)
    }
}

impl TryFrom<String> for BlockSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<BlockSpec> for String {
    fn from(b: BlockSpec) -> String {
        b.to_string()
    }
}

impl fmt::Display for BlockSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.iter().try_for_each(|k| write!(f, "{k}"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellConfig {
    pub attention: AttentionConfig,
    /// Applied to the cell output in training only.
    pub dropout: f64,
}

impl CellConfig {
    pub fn new(attention: AttentionConfig) -> Self {
        CellConfig { attention, dropout: 0.1 }
    }

    pub fn kind(&self) -> AttentionKind {
        self.attention.kind
    }

    pub fn channels(&self) -> usize {
        self.attention.channels
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        self.attention.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Encoding channels `C`; the half-resolution branch runs at `2C`.
    pub channels: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub block_spec: BlockSpec,
    pub window: usize,
    pub patch: usize,
    pub heads: usize,
    pub dropout: f64,
    /// Multiplies the complex input channels on the way in and divides the
    /// output on the way out, keeping activations near unit scale.
    pub signal_scale: f64,
    /// Nominal frame size; sizes the global bias tables and the window check.
    pub height: usize,
    pub width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 16,
            c_in: 3,
            c_out: 2,
            block_spec: "FLG".parse().expect("literal spec"),
            window: 8,
            patch: 2,
            heads: 2,
            dropout: 0.1,
            signal_scale: 0.01,
            height: 16,
            width: 16,
        }
    }
}

impl ModelConfig {
    pub fn window_spec(&self) -> Result<WindowSpec> {
        WindowSpec::new(self.window, self.patch)
    }

    pub fn validate(&self) -> Result<()> {
        let ws = self.window_spec()?;
        if self.channels == 0 || self.c_in == 0 || self.c_out == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.heads == 0 || self.channels % self.heads != 0 {
            return Err(Error::Config(format!("{} heads do not divide {} channels", self.heads, self.channels)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        if !(self.signal_scale > 0.0 && self.signal_scale.is_finite()) {
            return Err(Error::Config(format!("signal_scale must be positive, got {}", self.signal_scale)));
        }
        if self.height == 0 || self.width == 0 || self.height % 2 != 0 || self.width % 2 != 0 {
            return Err(Error::Config(format!("frame {}×{} must be non-empty and even", self.height, self.width)));
        }
        if self.height.min(self.width) / 2 < ws.window {
            return Err(Error::Config(format!(
                "window {} exceeds the {}×{} half-resolution frame",
                ws.window,
                self.height / 2,
                self.width / 2
            )));
        }
        Ok(())
    }

    /// Channels and nominal frame size of block `k` (1-based).
    pub fn block_level(&self, k: usize) -> (usize, usize, usize) {
        if k <= 3 {
            (self.channels, self.height, self.width)
        } else {
            (2 * self.channels, self.height / 2, self.width / 2)
        }
    }

    /// Cell configuration for one kind inside block `k`.
    pub fn cell_config(&self, k: usize, kind: AttentionKind) -> Result<CellConfig> {
        let (c, h, w) = self.block_level(k);
        let ws = self.window_spec()?;
        let mut att = AttentionConfig::new(kind, ws, self.heads, c);
        if kind == AttentionKind::Global {
            att = att.with_bias_grid((h.div_ceil(ws.window), w.div_ceil(ws.window)));
        }
        Ok(CellConfig { attention: att, dropout: self.dropout })
    }
}

fn conv_entries<T: Real>(store: &mut ParamStore<T>, prefix: &str, w: ConvWeights<T>) -> Result<()> {
    store.insert(format!("{prefix}.weight"), w.weight)?;
    store.insert(format!("{prefix}.bias"), w.bias)
}

/// Adds a cell's parameters under `prefix` (e.g. `block1.cell0`).
pub fn init_cell<T: Real>(store: &mut ParamStore<T>, prefix: &str, cell: &CellConfig, rng: &mut ChaCha8Rng) -> Result<()> {
    cell.validate()?;
    let c = cell.channels();
    let e = MIXER_EXPANSION * c;
    for norm in ["norm1", "norm2"] {
        store.insert(format!("{prefix}.{norm}.gain"), Array::filled(vec![c], T::one()))?;
        store.insert(format!("{prefix}.{norm}.offset"), Array::zeros(vec![c]))?;
    }
    let att = AttentionParams::<T>::init(&cell.attention, rng);
    for (name, a) in att.named() {
        store.insert(format!("{prefix}.attn.{name}"), a.clone())?;
    }
    conv_entries(store, &format!("{prefix}.mixer.conv1"), ConvWeights::init(c, e, rng))?;
    store.insert(format!("{prefix}.mixer.prelu"), Array::filled(vec![e], T::from_f64(PRELU_INIT)))?;
    conv_entries(store, &format!("{prefix}.mixer.conv2"), ConvWeights::init(e, c, rng))
}

/// Adds the parameters of every cell of a block under `prefix` (e.g. `block1`).
pub fn init_block<T: Real>(
    store: &mut ParamStore<T>,
    prefix: &str,
    spec: &BlockSpec,
    cell_for: impl Fn(AttentionKind) -> Result<CellConfig>,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    for (j, &kind) in spec.kinds().iter().enumerate() {
        init_cell(store, &format!("{prefix}.cell{j}"), &cell_for(kind)?, rng)?;
    }
    Ok(())
}

/// Parameter leaves of a graph, by name.
pub type Leaves = IndexMap<String, Var>;

fn leaf(vars: &Leaves, name: &str) -> Result<Var> {
    vars.get(name).copied().ok_or_else(|| Error::Config(format!("missing parameter {name}")))
}

fn conv(g: &mut Graph<impl Real>, x: Var, vars: &Leaves, prefix: &str) -> Result<Var> {
    let (w, b) = (leaf(vars, &format!("{prefix}.weight"))?, leaf(vars, &format!("{prefix}.bias"))?);
    g.conv2d(x, w, b)
}

/// Records one cell. `rng` enables dropout.
pub fn cell_graph<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    cell: &CellConfig,
    vars: &Leaves,
    prefix: &str,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let p = |s: &str| format!("{prefix}.{s}");
    let n1 = g.layer_norm(x, leaf(vars, &p("norm1.gain"))?, leaf(vars, &p("norm1.offset"))?)?;
    let av = AttentionVars {
        q: (leaf(vars, &p("attn.q.weight"))?, leaf(vars, &p("attn.q.bias"))?),
        k: (leaf(vars, &p("attn.k.weight"))?, leaf(vars, &p("attn.k.bias"))?),
        v: (leaf(vars, &p("attn.v.weight"))?, leaf(vars, &p("attn.v.bias"))?),
        bias_table: if cell.attention.use_bias { Some(leaf(vars, &p("attn.bias_table"))?) } else { None },
    };
    let a = attention_graph(g, n1, &cell.attention, &av)?;
    let y = g.add(x, a)?;
    let n2 = g.layer_norm(y, leaf(vars, &p("norm2.gain"))?, leaf(vars, &p("norm2.offset"))?)?;
    let h = conv(g, n2, vars, &p("mixer.conv1"))?;
    let h = g.prelu(h, leaf(vars, &p("mixer.prelu"))?)?;
    let m = conv(g, h, vars, &p("mixer.conv2"))?;
    let z = g.add(y, m)?;
    match rng {
        Some(r) => g.dropout(z, cell.dropout, r),
        None => Ok(z),
    }
}

/// Records the cells of a block in spec order.
pub fn block_graph<T: Real>(
    g: &mut Graph<T>,
    mut x: Var,
    spec: &BlockSpec,
    cell_for: impl Fn(AttentionKind) -> Result<CellConfig>,
    vars: &Leaves,
    prefix: &str,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    for (j, &kind) in spec.kinds().iter().enumerate() {
        x = cell_graph(g, x, &cell_for(kind)?, vars, &format!("{prefix}.cell{j}"), rng.as_deref_mut())?;
    }
    Ok(x)
}

/// Records the backbone on network-unit input (`C_in` channels) and returns
/// the `C_out`-channel network-unit output.
pub fn backbone_graph<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    cfg: &ModelConfig,
    vars: &Leaves,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let d = Dims5::from_slice(g.shape(x))?;
    if d.c != cfg.c_in {
        return Err(shape_err!("model expects {} input channels, got {}", cfg.c_in, d.c));
    }
    if d.h % 2 != 0 || d.w % 2 != 0 {
        return Err(shape_err!("frame {}×{} must be even", d.h, d.w));
    }
    let spec = &cfg.block_spec;
    let block = |g: &mut Graph<T>, x: Var, k: usize, rng: Option<&mut ChaCha8Rng>| {
        block_graph(g, x, spec, |kind| cfg.cell_config(k, kind), vars, &format!("block{k}"), rng)
    };
    let h = conv(g, x, vars, "pre")?;
    let b1 = block(g, h, 1, rng.as_deref_mut())?;
    let a = block(g, b1, 2, rng.as_deref_mut())?;
    let a = block(g, a, 3, rng.as_deref_mut())?;

    let b1d = Dims5::from_slice(g.shape(b1))?;
    let (map, md) = merge_map(b1d)?;
    let merged = g.gather(b1, Arc::from(map), md.to_array().to_vec())?;
    let low = conv(g, merged, vars, "down")?;
    let low = block(g, low, 4, rng.as_deref_mut())?;
    let low = block(g, low, 5, rng.as_deref_mut())?;
    let up = g.upsample2x(low)?;
    let up = conv(g, up, vars, "up")?;

    let fused = g.concat_channels(&[a, up])?;
    conv(g, fused, vars, "post")
}

/// Backbone configuration plus its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

/// Builds the backbone with seeded initialization.
pub fn build_hrnet<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<Model<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let c = cfg.channels;
    conv_entries(&mut store, "pre", ConvWeights::init(cfg.c_in, c, &mut rng))?;
    for k in 1..=BLOCKS {
        if k == 4 {
            conv_entries(&mut store, "down", ConvWeights::init(4 * c, 2 * c, &mut rng))?;
        }
        init_block(&mut store, &format!("block{k}"), &cfg.block_spec, |kind| cfg.cell_config(k, kind), &mut rng)?;
    }
    conv_entries(&mut store, "up", ConvWeights::init(2 * c, c, &mut rng))?;
    conv_entries(&mut store, "post", ConvWeights::init(2 * c, cfg.c_out, &mut rng))?;
    Ok(Model { config: cfg.clone(), params: store })
}

impl<T: Real> Model<T> {
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model { config: self.config.clone(), params: self.params.cast() }
    }

    /// Total parameter count.
    pub fn count_params(&self) -> usize {
        self.params.count()
    }

    /// Parameters of block `k` (1-based).
    pub fn block_param_count(&self, k: usize) -> usize {
        self.params.count_prefix(&format!("block{k}."))
    }

    /// Records the parameters as leaves of `g`.
    pub fn leaves(&self, g: &mut Graph<T>) -> Leaves {
        self.params.iter().map(|(n, a)| (n.to_string(), g.param(n, a.clone()))).collect()
    }

    /// Scales the complex channels into network units.
    pub fn to_network(&self, x: &Tensor5D<T>) -> Tensor5D<T> {
        scale_channels(x, 2, self.config.signal_scale)
    }

    pub fn from_network(&self, y: &Tensor5D<T>) -> Tensor5D<T> {
        scale_channels(y, 2, 1.0 / self.config.signal_scale)
    }

    /// Full forward pass on signal-unit input. `rng` enables dropout.
    pub fn forward(&self, x: &Tensor5D<T>, rng: Option<&mut ChaCha8Rng>) -> Result<Tensor5D<T>> {
        let mut g = Graph::inference();
        let xv = g.constant(self.to_network(x).into_array());
        let vars = self.leaves(&mut g);
        let y = backbone_graph(&mut g, xv, &self.config, &vars, rng)?;
        let y = Tensor5D::from_array(g.value(y).clone())?;
        if !y.is_finite() {
            return Err(Error::NonFinite("model output".into()));
        }
        Ok(self.from_network(&y))
    }

    pub fn save(&self, path: impl AsRef<Path>, meta: serde_json::Value) -> Result<()> {
        let mut meta = meta;
        let obj = meta.as_object_mut().ok_or_else(|| Error::Config("checkpoint meta must be an object".into()))?;
        obj.insert("model".into(), serde_json::to_value(&self.config).map_err(|e| Error::Format(e.to_string()))?);
        self.params.cast::<f32>().save(path, &meta)
    }

    /// Replaces the parameters from a file whose entries must match exactly.
    pub fn load_params(&mut self, path: impl AsRef<Path>) -> Result<serde_json::Value> {
        let (store, meta) = ParamStore::<f32>::load(path)?;
        self.params.check_compatible(&store)?;
        self.params = store.cast();
        Ok(meta)
    }

    /// Reads a checkpoint written by [`Model::save`], configuration included.
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, serde_json::Value)> {
        let (store, meta) = ParamStore::<f32>::load(path)?;
        let cfg: ModelConfig = meta
            .get("model")
            .cloned()
            .ok_or_else(|| Error::Format("checkpoint has no model config".into()))
            .and_then(|v| serde_json::from_value(v).map_err(|e| Error::Format(e.to_string())))?;
        let mut model = build_hrnet::<T>(&cfg, 0)?;
        model.params.check_compatible(&store)?;
        model.params = store.cast();
        Ok((model, meta))
    }
}

/// Multiplies the first `n` channels by `s`.
pub fn scale_channels<T: Real>(x: &Tensor5D<T>, n: usize, s: f64) -> Tensor5D<T> {
    let d = x.dims();
    let block = d.f * d.plane();
    let mut y = x.clone();
    let s = T::from_f64(s);
    for (i, v) in y.data_mut().iter_mut().enumerate() {
        if (i / block) % d.c < n {
            *v = *v * s;
        }
    }
    y
}

/// Inference or training forward of a model.
pub fn model_forward<T: Real>(m: &Model<T>, x: &Tensor5D<T>, rng: Option<&mut ChaCha8Rng>) -> Result<Tensor5D<T>> {
    m.forward(x, rng)
}

/// Sum of element counts over a parameter store.
pub fn count_params<T: Real>(store: &ParamStore<T>) -> usize {
    store.count()
}

/// Single-cell forward outside a backbone.
pub fn cell_forward<T: Real>(
    x: &Tensor5D<T>,
    cell: &CellConfig,
    params: &ParamStore<T>,
    prefix: &str,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Tensor5D<T>> {
    let mut g = Graph::inference();
    let xv = g.constant(x.clone().into_array());
    let vars: Leaves = params.iter().map(|(n, a)| (n.to_string(), g.constant(a.clone()))).collect();
    let y = cell_graph(&mut g, xv, cell, &vars, prefix, rng)?;
    Tensor5D::from_array(g.value(y).clone())
}

/// Single-block forward outside a backbone; cells derive from `template` with
/// the kind replaced.
pub fn block_forward<T: Real>(
    x: &Tensor5D<T>,
    spec: &BlockSpec,
    template: &CellConfig,
    params: &ParamStore<T>,
    prefix: &str,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Tensor5D<T>> {
    let mut g = Graph::inference();
    let xv = g.constant(x.clone().into_array());
    let vars: Leaves = params.iter().map(|(n, a)| (n.to_string(), g.constant(a.clone()))).collect();
    let y = block_graph(&mut g, xv, spec, |k| Ok(cell_for_kind(template, k)), &vars, prefix, rng)?;
    Tensor5D::from_array(g.value(y).clone())
}

/// `template` with its attention kind replaced; bias follows the kind.
pub fn cell_for_kind(template: &CellConfig, kind: AttentionKind) -> CellConfig {
    let mut c = *template;
    c.attention.kind = kind;
    c.attention.use_bias = kind != AttentionKind::Frame;
    c
}
