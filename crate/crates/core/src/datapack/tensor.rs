//! `.davt` tensor files.
//!
//! Layout (all integers little-endian):
//!
//! | offset | size      | content                              |
//! |--------|-----------|--------------------------------------|
//! | 0      | 4         | magic `DAVT`                         |
//! | 4      | 1         | version, always `1`                  |
//! | 5      | 1         | dtype (`1` = f32, `2` = u32)         |
//! | 6      | 1         | ndim                                 |
//! | 7      | 8 * ndim  | dims as u64                          |
//! | ...    | 4 * numel | row-major payload                    |

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DAVT";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 1,
    U32 = 2,
}

impl DType {
    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            1 => Ok(DType::F32),
            2 => Ok(DType::U32),
            other => Err(Error::UnsupportedDtype(other)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U32(Vec<u32>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::U32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A dense tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    shape: Vec<u64>,
    data: TensorData,
}

impl TensorFile {
    pub fn new(shape: Vec<u64>, data: TensorData) -> Result<Self> {
        if shape.len() > u8::MAX as usize {
            return Err(Error::Shape(format!(
                "{} dimensions exceed the format limit",
                shape.len()
            )));
        }
        let numel = shape
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Shape(format!("shape {shape:?} overflows")))?;
        if numel != data.len() as u64 {
            return Err(Error::Shape(format!(
                "shape {shape:?} implies {numel} elements but payload has {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn from_matrix(m: &Array2<f32>) -> Self {
        let (r, c) = m.dim();
        let data: Vec<f32> = m.iter().copied().collect();
        Self {
            shape: vec![r as u64, c as u64],
            data: TensorData::F32(data),
        }
    }

    pub fn from_labels(labels: &[u32]) -> Self {
        Self {
            shape: vec![labels.len() as u64],
            data: TensorData::U32(labels.to_vec()),
        }
    }

    pub fn shape(&self) -> &[u64] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        match self.data {
            TensorData::F32(_) => DType::F32,
            TensorData::U32(_) => DType::U32,
        }
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    /// Interprets the tensor as an f32 matrix. One-dimensional tensors are
    /// read as a single column.
    pub fn into_matrix(self) -> Result<Array2<f32>> {
        let TensorData::F32(data) = self.data else {
            return Err(Error::Shape("expected an f32 tensor".into()));
        };
        let (rows, cols) = match self.shape.as_slice() {
            [r] => (*r as usize, 1),
            [r, c] => (*r as usize, *c as usize),
            other => return Err(Error::Shape(format!("expected a matrix, found shape {other:?}"))),
        };
        Array2::from_shape_vec((rows, cols), data).map_err(|e| Error::Shape(e.to_string()))
    }

    pub fn into_labels(self) -> Result<Vec<u32>> {
        let TensorData::U32(data) = self.data else {
            return Err(Error::Shape("expected a u32 tensor".into()));
        };
        match self.shape.as_slice() {
            [_] | [_, 1] => Ok(data),
            other => Err(Error::Shape(format!("expected a label vector, found shape {other:?}"))),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(7 + 8 * self.shape.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(self.dtype() as u8);
        out.push(self.shape.len() as u8);
        for d in &self.shape {
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    /// Decodes bytes; `origin` only labels errors.
    pub fn decode(bytes: &[u8], origin: &Path) -> Result<Self> {
        let corrupt = |reason: String| Error::CorruptHeader {
            path: origin.to_path_buf(),
            reason,
        };
        if bytes.len() < 7 {
            return Err(corrupt(format!("file is only {} bytes", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(corrupt(format!("bad magic {:?}", &bytes[..4])));
        }
        if bytes[4] != VERSION {
            return Err(corrupt(format!("unknown version {}", bytes[4])));
        }
        let dtype = DType::from_code(bytes[5])?;
        let ndim = bytes[6] as usize;
        let header_len = 7 + 8 * ndim;
        if bytes.len() < header_len {
            return Err(corrupt("truncated dimension list".into()));
        }
        let shape: Vec<u64> = bytes[7..header_len]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let numel = shape
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| corrupt(format!("shape {shape:?} overflows")))?;
        let payload = &bytes[header_len..];
        if payload.len() as u64 != numel.saturating_mul(4) {
            return Err(Error::Shape(format!(
                "{}: shape {shape:?} needs {} payload bytes, found {}",
                origin.display(),
                numel.saturating_mul(4),
                payload.len()
            )));
        }
        let words = payload
            .chunks_exact(4)
            .map(|c| <[u8; 4]>::try_from(c).expect("chunk of 4"));
        let data = match dtype {
            DType::F32 => TensorData::F32(words.map(f32::from_le_bytes).collect()),
            DType::U32 => TensorData::U32(words.map(u32::from_le_bytes).collect()),
        };
        Ok(Self { shape, data })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }
}
