//! Window/patch rearrangements that turn a 5D tensor into stacks of attention
//! data matrices, and back.
//!
//! A patch vector is flattened channel-major, then raster order over the
//! `p×p` pixels of the patch: column `c·p² + iy·p + ix`. Windows and patches
//! are both enumerated in raster order.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::real::Real;
use crate::tensor::{Dims5, Tensor5D};

/// Window side `w` and patch side `p`, in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub window: usize,
    pub patch: usize,
}

impl WindowSpec {
    pub fn new(window: usize, patch: usize) -> Result<Self> {
        let ws = WindowSpec { window, patch };
        ws.validate()?;
        Ok(ws)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.window == 0 {
            return Err(Error::Config("window and patch sizes must be positive".into()));
        }
        if self.window % self.patch != 0 {
            return Err(Error::Config(format!(
                "patch {} does not divide window {}",
                self.patch, self.window
            )));
        }
        Ok(())
    }

    /// Patches along one side of a window.
    pub fn patches_per_side(&self) -> usize {
        self.window / self.patch
    }

    /// `P = (w/p)²`.
    pub fn patches_per_window(&self) -> usize {
        self.patches_per_side().pow(2)
    }

    /// Window grid `(H/w, W/w)` of a frame.
    pub fn window_grid(&self, h: usize, w: usize) -> (usize, usize) {
        (h / self.window, w / self.window)
    }

    /// `N = (H/w)·(W/w)`.
    pub fn windows_per_frame(&self, h: usize, w: usize) -> usize {
        let (gh, gw) = self.window_grid(h, w);
        gh * gw
    }

    pub fn check_divisible(&self, dims: Dims5) -> Result<()> {
        self.validate()?;
        if dims.h % self.window != 0 || dims.w % self.window != 0 || dims.h == 0 || dims.w == 0 {
            return Err(shape_err!(
                "frame {}×{} is not divisible by window {}",
                dims.h,
                dims.w,
                self.window
            ));
        }
        Ok(())
    }
}

/// Which attention data-matrix layout a [`DataMatrixSet`] holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layout {
    /// One `P × Cp²` matrix per (batch, frame, window).
    Local,
    /// One `N × Cp²` matrix per (batch, frame, patch position).
    Global,
    /// One `F × CHW` matrix per batch.
    Frame,
}

/// Where a data-matrix row came from. `window` and `patch` are zero for
/// [`Layout::Frame`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RowCoord {
    pub batch: usize,
    pub frame: usize,
    pub window: usize,
    pub patch: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayoutMeta {
    pub source: Dims5,
    pub window: Option<WindowSpec>,
    pub coords: Vec<RowCoord>,
}

/// A stack of `count` matrices of shape `rows × cols`, stored contiguously.
#[derive(Clone, Debug, PartialEq)]
pub struct DataMatrixSet<T = f32> {
    pub layout: Layout,
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
    pub meta: Option<LayoutMeta>,
}

impl<T: Real> DataMatrixSet<T> {
    /// Matrix `i` as a row-major slice.
    pub fn matrix(&self, i: usize) -> &[T] {
        let n = self.rows * self.cols;
        &self.data[i * n..(i + 1) * n]
    }

    pub fn row(&self, matrix: usize, row: usize) -> &[T] {
        let start = (matrix * self.rows + row) * self.cols;
        &self.data[start..start + self.cols]
    }
}

/// Flat-index map in matrix order for the given layout, plus `(count, rows, cols)`.
pub(crate) fn matrix_map(
    layout: Layout,
    dims: Dims5,
    ws: Option<WindowSpec>,
) -> Result<(Vec<usize>, [usize; 3])> {
    let mut map = Vec::with_capacity(dims.numel());
    match layout {
        Layout::Frame => {
            if dims.f == 0 {
                return Err(shape_err!("frame layout needs at least one frame"));
            }
            for b in 0..dims.b {
                for f in 0..dims.f {
                    for c in 0..dims.c {
                        for y in 0..dims.h {
                            for x in 0..dims.w {
                                map.push(dims.index(b, c, f, y, x));
                            }
                        }
                    }
                }
            }
            Ok((map, [dims.b, dims.f, dims.c * dims.plane()]))
        }
        Layout::Local | Layout::Global => {
            let ws = ws.ok_or_else(|| Error::Config("spatial layouts need a window spec".into()))?;
            ws.check_divisible(dims)?;
            let (w, p) = (ws.window, ws.patch);
            let pps = ws.patches_per_side();
            let (gh, gw) = ws.window_grid(dims.h, dims.w);
            let push_patch = |map: &mut Vec<usize>, b, f, wy: usize, wx: usize, py: usize, px: usize| {
                for c in 0..dims.c {
                    for iy in 0..p {
                        for ix in 0..p {
                            map.push(dims.index(b, c, f, wy * w + py * p + iy, wx * w + px * p + ix));
                        }
                    }
                }
            };
            let cols = dims.c * p * p;
            if layout == Layout::Local {
                for b in 0..dims.b {
                    for f in 0..dims.f {
                        for wy in 0..gh {
                            for wx in 0..gw {
                                for py in 0..pps {
                                    for px in 0..pps {
                                        push_patch(&mut map, b, f, wy, wx, py, px);
                                    }
                                }
                            }
                        }
                    }
                }
                Ok((map, [dims.b * dims.f * gh * gw, pps * pps, cols]))
            } else {
                for b in 0..dims.b {
                    for f in 0..dims.f {
                        for py in 0..pps {
                            for px in 0..pps {
                                for wy in 0..gh {
                                    for wx in 0..gw {
                                        push_patch(&mut map, b, f, wy, wx, py, px);
                                    }
                                }
                            }
                        }
                    }
                }
                Ok((map, [dims.b * dims.f * pps * pps, gh * gw, cols]))
            }
        }
    }
}

/// Reorders a matrix-order map so that each matrix's columns are split into
/// `heads` contiguous blocks: result order is `(matrix, head, row, col)`.
pub(crate) fn split_heads_map(map: &[usize], shape: [usize; 3], heads: usize) -> Result<Vec<usize>> {
    let [count, rows, cols] = shape;
    if heads == 0 || cols % heads != 0 {
        return Err(shape_err!("{heads} heads do not divide vector dimension {cols}"));
    }
    let dh = cols / heads;
    let mut out = Vec::with_capacity(map.len());
    for m in 0..count {
        for h in 0..heads {
            for r in 0..rows {
                let start = (m * rows + r) * cols + h * dh;
                out.extend_from_slice(&map[start..start + dh]);
            }
        }
    }
    Ok(out)
}

/// Inverse of a permutation map.
pub(crate) fn invert_map(map: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; map.len()];
    for (i, &src) in map.iter().enumerate() {
        inv[src] = i;
    }
    inv
}

pub(crate) fn gather<T: Copy>(src: &[T], map: &[usize]) -> Vec<T> {
    map.iter().map(|&i| src[i]).collect()
}

fn row_coords(layout: Layout, dims: Dims5, ws: Option<WindowSpec>) -> Vec<RowCoord> {
    let mut coords = Vec::new();
    match layout {
        Layout::Frame => {
            for b in 0..dims.b {
                for f in 0..dims.f {
                    coords.push(RowCoord { batch: b, frame: f, window: 0, patch: 0 });
                }
            }
        }
        Layout::Local | Layout::Global => {
            let ws = ws.expect("validated by matrix_map");
            let n = ws.windows_per_frame(dims.h, dims.w);
            let p = ws.patches_per_window();
            for b in 0..dims.b {
                for f in 0..dims.f {
                    if layout == Layout::Local {
                        for window in 0..n {
                            for patch in 0..p {
                                coords.push(RowCoord { batch: b, frame: f, window, patch });
                            }
                        }
                    } else {
                        for patch in 0..p {
                            for window in 0..n {
                                coords.push(RowCoord { batch: b, frame: f, window, patch });
                            }
                        }
                    }
                }
            }
        }
    }
    coords
}

fn assemble<T: Real>(x: &Tensor5D<T>, layout: Layout, ws: Option<WindowSpec>) -> Result<DataMatrixSet<T>> {
    let dims = x.dims();
    let (map, [count, rows, cols]) = matrix_map(layout, dims, ws)?;
    Ok(DataMatrixSet {
        layout,
        count,
        rows,
        cols,
        data: gather(x.data(), &map),
        meta: Some(LayoutMeta { source: dims, window: ws, coords: row_coords(layout, dims, ws) }),
    })
}

/// Local-attention data matrices: the `P` patch vectors of every window.
pub fn assemble_local<T: Real>(x: &Tensor5D<T>, ws: WindowSpec) -> Result<DataMatrixSet<T>> {
    assemble(x, Layout::Local, Some(ws))
}

/// Global-attention data matrices: same-position patches gathered from all `N` windows.
pub fn assemble_global<T: Real>(x: &Tensor5D<T>, ws: WindowSpec) -> Result<DataMatrixSet<T>> {
    assemble(x, Layout::Global, Some(ws))
}

/// Frame-attention data matrices: each frame flattened (all channels) into one row.
pub fn assemble_frame<T: Real>(x: &Tensor5D<T>) -> Result<DataMatrixSet<T>> {
    assemble(x, Layout::Frame, None)
}

/// Inverse of the `assemble_*` functions.
pub fn scatter_inverse<T: Real>(d: &DataMatrixSet<T>) -> Result<Tensor5D<T>> {
    let meta = d
        .meta
        .as_ref()
        .ok_or_else(|| Error::Metadata("data matrices carry no source layout".into()))?;
    let (map, shape) = matrix_map(d.layout, meta.source, meta.window)?;
    if shape != [d.count, d.rows, d.cols] || d.data.len() != map.len() {
        return Err(Error::Metadata(format!(
            "matrices {}×{}×{} do not match source {}",
            d.count, d.rows, d.cols, meta.source
        )));
    }
    if meta.coords.len() != d.count * d.rows {
        return Err(Error::Metadata(format!(
            "{} row coordinates for {} rows",
            meta.coords.len(),
            d.count * d.rows
        )));
    }
    let mut out = vec![T::zero(); map.len()];
    for (v, &dst) in d.data.iter().zip(&map) {
        out[dst] = *v;
    }
    Tensor5D::new(meta.source, out)
}

/// Padding added on each side of H and W by [`pad_to_window`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Padding {
    pub h: (usize, usize),
    pub w: (usize, usize),
}

impl Padding {
    pub fn is_zero(&self) -> bool {
        *self == Padding::default()
    }

    pub fn for_window(h: usize, w: usize, window: usize) -> Self {
        let up = |n: usize| n.div_ceil(window) * window - n;
        Padding { h: (0, up(h)), w: (0, up(w)) }
    }

    pub fn padded(&self, dims: Dims5) -> Dims5 {
        Dims5 { h: dims.h + self.h.0 + self.h.1, w: dims.w + self.w.0 + self.w.1, ..dims }
    }
}

/// Mirror index without repeating the edge sample (`…2 1 0 1 2…`).
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

pub(crate) fn pad_map(dims: Dims5, pad: Padding) -> Vec<usize> {
    let out = pad.padded(dims);
    let mut map = Vec::with_capacity(out.numel());
    for b in 0..out.b {
        for c in 0..out.c {
            for f in 0..out.f {
                for y in 0..out.h {
                    let sy = reflect(y as isize - pad.h.0 as isize, dims.h);
                    for x in 0..out.w {
                        let sx = reflect(x as isize - pad.w.0 as isize, dims.w);
                        map.push(dims.index(b, c, f, sy, sx));
                    }
                }
            }
        }
    }
    map
}

/// Map that crops a padded tensor back to `original`.
pub(crate) fn crop_map(original: Dims5, pad: Padding) -> Vec<usize> {
    let padded = pad.padded(original);
    let mut map = Vec::with_capacity(original.numel());
    for b in 0..original.b {
        for c in 0..original.c {
            for f in 0..original.f {
                for y in 0..original.h {
                    for x in 0..original.w {
                        map.push(padded.index(b, c, f, y + pad.h.0, x + pad.w.0));
                    }
                }
            }
        }
    }
    map
}

/// Reflect-pads H and W at the bottom/right up to the next multiple of the window.
pub fn pad_to_window<T: Real>(x: &Tensor5D<T>, ws: WindowSpec) -> Result<(Tensor5D<T>, Padding)> {
    ws.validate()?;
    let dims = x.dims();
    let pad = Padding::for_window(dims.h, dims.w, ws.window);
    if pad.is_zero() {
        return Ok((x.clone(), pad));
    }
    let data = gather(x.data(), &pad_map(dims, pad));
    Ok((Tensor5D::new(pad.padded(dims), data)?, pad))
}

/// Removes padding recorded by [`pad_to_window`].
pub fn crop<T: Real>(x: &Tensor5D<T>, pad: Padding) -> Result<Tensor5D<T>> {
    let d = x.dims();
    let original = Dims5 {
        h: d.h.checked_sub(pad.h.0 + pad.h.1).ok_or_else(|| shape_err!("padding exceeds height"))?,
        w: d.w.checked_sub(pad.w.0 + pad.w.1).ok_or_else(|| shape_err!("padding exceeds width"))?,
        ..d
    };
    Tensor5D::new(original, gather(x.data(), &crop_map(original, pad)))
}

/// Space-to-depth map: 2×2 neighborhoods into channels, `(B, C, F, H, W) → (B, 4C, F, H/2, W/2)`.
/// Output channel `q·C + c` holds offset `q = dy·2 + dx` of input channel `c`.
pub(crate) fn merge_map(dims: Dims5) -> Result<(Vec<usize>, Dims5)> {
    if dims.h % 2 != 0 || dims.w % 2 != 0 {
        return Err(shape_err!("patch merge needs even H and W, got {}×{}", dims.h, dims.w));
    }
    let out = Dims5 { c: dims.c * 4, h: dims.h / 2, w: dims.w / 2, ..dims };
    let mut map = Vec::with_capacity(out.numel());
    for b in 0..out.b {
        for q in 0..4 {
            let (dy, dx) = (q / 2, q % 2);
            for c in 0..dims.c {
                for f in 0..out.f {
                    for y in 0..out.h {
                        for x in 0..out.w {
                            map.push(dims.index(b, c, f, 2 * y + dy, 2 * x + dx));
                        }
                    }
                }
            }
        }
    }
    Ok((map, out))
}
