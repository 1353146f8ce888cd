//! Dense 5D image tensors `[B, C, F, H, W]` and the `.itx` file format.
//!
//! An `.itx` file is one UTF-8 JSON header line, `{"dims":[B,C,F,H,W],"dtype":"f32"}`,
//! followed by the values as little-endian `f32` in row-major order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::real::Real;

/// Extents of a `[B, C, F, H, W]` tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims5 {
    pub b: usize,
    pub c: usize,
    pub f: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims5 {
    pub const fn new(b: usize, c: usize, f: usize, h: usize, w: usize) -> Self {
        Dims5 { b, c, f, h, w }
    }

    pub fn from_slice(s: &[usize]) -> Result<Self> {
        match *s {
            [b, c, f, h, w] => Ok(Dims5 { b, c, f, h, w }),
            _ => Err(shape_err!("expected 5 dims, got {s:?}")),
        }
    }

    pub fn to_array(self) -> [usize; 5] {
        [self.b, self.c, self.f, self.h, self.w]
    }

    pub fn numel(self) -> usize {
        self.b * self.c * self.f * self.h * self.w
    }

    /// Pixels in one frame of one channel.
    pub fn plane(self) -> usize {
        self.h * self.w
    }

    pub fn with_channels(self, c: usize) -> Self {
        Dims5 { c, ..self }
    }

    /// Flat row-major offset of element `(b, c, f, y, x)`.
    #[inline]
    pub fn index(self, b: usize, c: usize, f: usize, y: usize, x: usize) -> usize {
        (((b * self.c + c) * self.f + f) * self.h + y) * self.w + x
    }
}

impl std::fmt::Display for Dims5 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {}, {}, {})", self.b, self.c, self.f, self.h, self.w)
    }
}

/// N-dimensional dense array. Used for parameters, data matrices and graph values.
#[derive(Clone, Debug, PartialEq)]
pub struct Array<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Array<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            ));
        }
        Ok(Array { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Array { shape, data: vec![T::zero(); n] }
    }

    pub fn filled(shape: Vec<usize>, v: T) -> Self {
        let n = shape.iter().product();
        Array { shape, data: vec![v; n] }
    }

    pub fn scalar(v: T) -> Self {
        Array { shape: vec![], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Array::new(shape, self.data)
    }

    pub fn cast<U: Real>(&self) -> Array<U> {
        Array {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Scalar value of a single-element array.
    pub fn item(&self) -> T {
        self.data[0]
    }
}

/// The universal `[B, C, F, H, W]` image tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor5D<T = f32> {
    dims: Dims5,
    data: Vec<T>,
}

impl<T: Real> Tensor5D<T> {
    pub fn new(dims: Dims5, data: Vec<T>) -> Result<Self> {
        if dims.numel() != data.len() {
            return Err(shape_err!(
                "dims {dims} need {} values, got {}",
                dims.numel(),
                data.len()
            ));
        }
        Ok(Tensor5D { dims, data })
    }

    pub fn zeros(dims: Dims5) -> Self {
        Tensor5D { dims, data: vec![T::zero(); dims.numel()] }
    }

    pub fn filled(dims: Dims5, v: T) -> Self {
        Tensor5D { dims, data: vec![v; dims.numel()] }
    }

    pub fn from_fn(dims: Dims5, mut f: impl FnMut(usize, usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(dims.numel());
        for b in 0..dims.b {
            for c in 0..dims.c {
                for fr in 0..dims.f {
                    for y in 0..dims.h {
                        for x in 0..dims.w {
                            data.push(f(b, c, fr, y, x));
                        }
                    }
                }
            }
        }
        Tensor5D { dims, data }
    }

    /// Standard-normal entries from a seeded generator.
    pub fn randn(dims: Dims5, seed: u64) -> Self {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data = (0..dims.numel())
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                T::from_f64(v)
            })
            .collect();
        Tensor5D { dims, data }
    }

    pub fn dims(&self) -> Dims5 {
        self.dims
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, f: usize, y: usize, x: usize) -> T {
        self.data[self.dims.index(b, c, f, y, x)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, c: usize, f: usize, y: usize, x: usize, v: T) {
        let i = self.dims.index(b, c, f, y, x);
        self.data[i] = v;
    }

    pub fn into_array(self) -> Array<T> {
        Array { shape: self.dims.to_array().to_vec(), data: self.data }
    }

    pub fn from_array(a: Array<T>) -> Result<Self> {
        let dims = Dims5::from_slice(a.shape())?;
        Tensor5D::new(dims, a.into_data())
    }

    pub fn cast<U: Real>(&self) -> Tensor5D<U> {
        Tensor5D {
            dims: self.dims,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copy of channels `start..start + count`.
    pub fn channels(&self, start: usize, count: usize) -> Result<Self> {
        let d = self.dims;
        if start + count > d.c {
            return Err(shape_err!("channels {start}..{} out of {}", start + count, d.c));
        }
        let block = d.f * d.plane();
        let mut data = Vec::with_capacity(d.b * count * block);
        for b in 0..d.b {
            let base = (b * d.c + start) * block;
            data.extend_from_slice(&self.data[base..base + count * block]);
        }
        Tensor5D::new(d.with_channels(count), data)
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(parts: &[&Tensor5D<T>]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| shape_err!("nothing to concatenate"))?.dims;
        let mut c_total = 0;
        for p in parts {
            let d = p.dims;
            if (d.b, d.f, d.h, d.w) != (first.b, first.f, first.h, first.w) {
                return Err(shape_err!("cannot concatenate {} with {}", d, first));
            }
            c_total += d.c;
        }
        let block = first.f * first.plane();
        let mut data = Vec::with_capacity(first.b * c_total * block);
        for b in 0..first.b {
            for p in parts {
                let base = b * p.dims.c * block;
                data.extend_from_slice(&p.data[base..base + p.dims.c * block]);
            }
        }
        Tensor5D::new(first.with_channels(c_total), data)
    }

    /// Stack tensors along the batch axis.
    pub fn stack_batch(parts: &[&Tensor5D<T>]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| shape_err!("nothing to stack"))?.dims;
        let mut data = Vec::with_capacity(first.numel() * parts.len());
        for p in parts {
            if (p.dims.c, p.dims.f, p.dims.h, p.dims.w) != (first.c, first.f, first.h, first.w) {
                return Err(shape_err!("cannot stack {} with {}", p.dims, first));
            }
            data.extend_from_slice(&p.data);
        }
        let b: usize = parts.iter().map(|p| p.dims.b).sum();
        Tensor5D::new(Dims5 { b, ..first }, data)
    }

    pub fn max_abs_diff(&self, other: &Tensor5D<T>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Serialize, Deserialize)]
struct ItxHeader {
    dims: [usize; 5],
    dtype: String,
}

impl Tensor5D<f32> {
    pub fn write_itx<W: Write>(&self, mut out: W) -> Result<()> {
        let header = ItxHeader { dims: self.dims.to_array(), dtype: "f32".into() };
        let line = serde_json::to_string(&header).map_err(|e| Error::Format(e.to_string()))?;
        out.write_all(line.as_bytes())?;
        out.write_all(b"\n")?;
        let mut bytes = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&bytes)?;
        out.flush()?;
        Ok(())
    }

    pub fn read_itx<R: Read>(input: R) -> Result<Self> {
        let mut reader = BufReader::new(input);
        let mut line = String::new();
        reader.read_line(&mut line)?;
        if !line.ends_with('\n') {
            return Err(Error::Format("missing itx header line".into()));
        }
        let header: ItxHeader = serde_json::from_str(line.trim_end())
            .map_err(|e| Error::Format(format!("bad itx header: {e}")))?;
        if header.dtype != "f32" {
            return Err(Error::Format(format!("unsupported dtype {:?}", header.dtype)));
        }
        let dims = Dims5::from_slice(&header.dims)?;
        let mut bytes = Vec::new();
        reader.read_to_end(&mut bytes)?;
        if bytes.len() != dims.numel() * 4 {
            return Err(Error::Format(format!(
                "payload has {} bytes, dims {} need {}",
                bytes.len(),
                dims,
                dims.numel() * 4
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Tensor5D::new(dims, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_itx(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_itx(File::open(path)?)
    }
}
