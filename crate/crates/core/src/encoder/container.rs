//! `NTC1` named-tensor files.
//!
//! Layout (little-endian): magic `NTC1`, `u32` tensor count, then per tensor a
//! `u16` name length, the UTF-8 name, a `u8` rank, `u32` dims and `f32` data.

use std::collections::HashMap;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::bytes::{put_f32s, put_u32, to_u32, Reader};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"NTC1";

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    /// As a 2-D tensor, collapsing leading dims into rows (rank 1 becomes one row).
    pub fn to_matrix(&self) -> Tensor {
        let cols = self.shape.last().copied().unwrap_or(1);
        let rows = if cols == 0 { 0 } else { self.data.len() / cols };
        Tensor::new(rows, cols, self.data.iter().map(|&v| v as f64).collect()).expect("sizes checked on insert")
    }
}

/// Ordered set of uniquely named `f32` tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorContainer {
    tensors: Vec<NamedTensor>,
    index: HashMap<String, usize>,
}

impl TensorContainer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<()> {
        let name = name.into();
        if name.len() > u16::MAX as usize {
            return Err(Error::format("tensor container", "tensor name too long"));
        }
        if shape.len() > u8::MAX as usize {
            return Err(Error::format("tensor container", format!("`{name}` has too many dims")));
        }
        let size: usize = shape.iter().product();
        if size != data.len() {
            return Err(Error::format(
                "tensor container",
                format!("`{name}` declares {size} values, has {}", data.len()),
            ));
        }
        if self.index.contains_key(&name) {
            return Err(Error::format("tensor container", format!("duplicate tensor `{name}`")));
        }
        self.index.insert(name.clone(), self.tensors.len());
        self.tensors.push(NamedTensor { name, shape, data });
        Ok(())
    }

    /// Stores a 2-D tensor, rounding to `f32`.
    pub fn insert_matrix(&mut self, name: &str, t: &Tensor) -> Result<()> {
        self.insert(name, vec![t.rows(), t.cols()], t.data().iter().map(|&v| v as f32).collect())
    }

    /// Stores a vector, rounding to `f32`.
    pub fn insert_vector(&mut self, name: &str, v: &[f64]) -> Result<()> {
        self.insert(name, vec![v.len()], v.iter().map(|&x| x as f32).collect())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|t| t.name.as_str())
    }

    pub fn tensors(&self) -> &[NamedTensor] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Result<&NamedTensor> {
        self.index
            .get(name)
            .map(|&i| &self.tensors[i])
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    /// The tensor `name`, which must have exactly `shape`.
    pub fn expect(&self, name: &str, shape: &[usize]) -> Result<&NamedTensor> {
        let t = self.get(name)?;
        if t.shape != shape {
            return Err(Error::TensorShape {
                name: name.to_string(),
                expected: shape.to_vec(),
                actual: t.shape.clone(),
            });
        }
        Ok(t)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, to_u32(self.tensors.len(), "tensor container")?);
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                put_u32(&mut out, to_u32(d, "tensor container")?);
            }
            put_f32s(&mut out, t.data.iter().copied());
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "tensor container");
        r.expect_magic(MAGIC)?;
        let count = r.u32()?;
        let mut out = Self::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::format("tensor container", "tensor name is not UTF-8"))?
                .to_string();
            let ndim = r.u8()? as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let size = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::format("tensor container", format!("`{name}` size overflows")))?;
            let data = r.f32s(size)?;
            out.insert(name, shape, data)?;
        }
        r.finish()?;
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}
