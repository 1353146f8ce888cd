//! Named parameter collections and the `.itxp` parameter file.
//!
//! An `.itxp` file starts with one JSON header line
//! `{"magic":"itxp","version":1,"params":[{"name":..,"dims":[..]},..],"meta":{..}}`
//! followed by every array's values as little-endian `f32`, concatenated in
//! header order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::real::Real;
use crate::tensor::Array;

const MAGIC: &str = "itxp";
const VERSION: u32 = 1;

/// Ordered, uniquely named learnable arrays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T = f32> {
    entries: IndexMap<String, Array<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: IndexMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array<T>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        self.entries.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Array<T>> {
        self.entries.get(name).ok_or_else(|| Error::Config(format!("no parameter named {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Array<T>> {
        self.entries.get_mut(name).ok_or_else(|| Error::Config(format!("no parameter named {name:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Array<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.entries.values().map(Array::len).sum()
    }

    /// Scalar parameters whose names start with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.iter().filter(|(n, _)| n.starts_with(prefix)).map(|(_, a)| a.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore { entries: self.entries.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Zero-valued store with the same names and shapes.
    pub fn zeros_like(&self) -> Self {
        ParamStore {
            entries: self.entries.iter().map(|(k, v)| (k.clone(), Array::zeros(v.shape().to_vec()))).collect(),
        }
    }

    /// Checks that `other` has exactly the same names and shapes, in order.
    pub fn check_compatible<U: Real>(&self, other: &ParamStore<U>) -> Result<()> {
        if self.len() != other.len() {
            return Err(shape_err!("parameter sets have {} and {} entries", self.len(), other.len()));
        }
        for ((na, a), (nb, b)) in self.iter().zip(other.iter()) {
            if na != nb {
                return Err(shape_err!("parameter name mismatch: {na:?} vs {nb:?}"));
            }
            if a.shape() != b.shape() {
                return Err(shape_err!("parameter {na:?} has shape {:?}, expected {:?}", b.shape(), a.shape()));
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    dims: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct ParamHeader {
    magic: String,
    version: u32,
    params: Vec<ParamEntry>,
    #[serde(default)]
    meta: serde_json::Value,
}

impl ParamStore<f32> {
    pub fn write_itxp<W: Write>(&self, mut out: W, meta: &serde_json::Value) -> Result<()> {
        let header = ParamHeader {
            magic: MAGIC.into(),
            version: VERSION,
            params: self.iter().map(|(n, a)| ParamEntry { name: n.into(), dims: a.shape().to_vec() }).collect(),
            meta: meta.clone(),
        };
        let line = serde_json::to_string(&header).map_err(|e| Error::Format(e.to_string()))?;
        out.write_all(line.as_bytes())?;
        out.write_all(b"\n")?;
        let mut bytes = Vec::with_capacity(self.count() * 4);
        for (_, a) in self.iter() {
            for v in a.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.write_all(&bytes)?;
        out.flush()?;
        Ok(())
    }

    /// Reads a parameter file, returning the store and its metadata object.
    pub fn read_itxp<R: Read>(input: R) -> Result<(Self, serde_json::Value)> {
        let mut reader = BufReader::new(input);
        let mut line = String::new();
        reader.read_line(&mut line)?;
        let header: ParamHeader = serde_json::from_str(line.trim_end())
            .map_err(|e| Error::Format(format!("bad parameter header: {e}")))?;
        if header.magic != MAGIC {
            return Err(Error::Format(format!("bad magic {:?}", header.magic)));
        }
        if header.version != VERSION {
            return Err(Error::Format(format!("unsupported version {}", header.version)));
        }
        let mut bytes = Vec::new();
        reader.read_to_end(&mut bytes)?;
        let need: usize = header.params.iter().map(|p| p.dims.iter().product::<usize>()).sum();
        if bytes.len() != need * 4 {
            return Err(Error::Format(format!("payload has {} bytes, header needs {}", bytes.len(), need * 4)));
        }
        let mut values = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        let mut store = ParamStore::new();
        for p in header.params {
            let n = p.dims.iter().product();
            let data: Vec<f32> = values.by_ref().take(n).collect();
            store.insert(p.name, Array::new(p.dims, data)?)?;
        }
        Ok((store, header.meta))
    }

    pub fn save(&self, path: impl AsRef<Path>, meta: &serde_json::Value) -> Result<()> {
        self.write_itxp(BufWriter::new(File::create(path)?), meta)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, serde_json::Value)> {
        Self::read_itxp(File::open(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.insert("a.weight", Array::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap()).unwrap();
        s.insert("a.bias", Array::new(vec![2], vec![-1.0, 0.5]).unwrap()).unwrap();
        s
    }

    #[test]
    fn roundtrip_preserves_order_values_and_meta() {
        let s = sample();
        let meta = serde_json::json!({"step": 12});
        let mut buf = Vec::new();
        s.write_itxp(&mut buf, &meta).unwrap();
        let (back, m) = ParamStore::read_itxp(&buf[..]).unwrap();
        assert_eq!(back, s);
        assert_eq!(m, meta);
        assert_eq!(back.names().collect::<Vec<_>>(), vec!["a.weight", "a.bias"]);
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let mut buf = Vec::new();
        sample().write_itxp(&mut buf, &serde_json::Value::Null).unwrap();
        let text = String::from_utf8_lossy(&buf).replacen("itxp", "itxq", 1);
        let err = ParamStore::read_itxp(text.as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err}");
        assert!(ParamStore::read_itxp(&b"garbage\n"[..]).is_err());
    }

    #[test]
    fn duplicates_and_mismatches() {
        let mut s = sample();
        assert!(s.insert("a.bias", Array::zeros(vec![1])).is_err());
        let mut other = sample();
        *other.get_mut("a.bias").unwrap() = Array::zeros(vec![3]);
        assert!(matches!(s.check_compatible(&other), Err(Error::Shape(_))));
        assert_eq!(s.count(), 8);
        assert_eq!(s.count_prefix("a.w"), 6);
    }
}
