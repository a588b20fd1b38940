//! `FMAT` binary matrix container.
//!
//! Layout (all integers little-endian):
//!
//! | offset | size | content                       |
//! |--------|------|-------------------------------|
//! | 0      | 4    | magic `FMAT`                  |
//! | 4      | 1    | version (`0x01`)              |
//! | 5      | 1    | dtype (`1` = f32, `2` = f64)  |
//! | 6      | 8    | rows, u64                     |
//! | 14     | 8    | cols, u64                     |
//! | 22     | ...  | row-major payload             |

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FMAT";
pub const VERSION: u8 = 0x01;
pub const HEADER_LEN: usize = 22;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F32 => 1,
            Dtype::F64 => 2,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(Dtype::F32),
            2 => Some(Dtype::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

/// Dense row-major matrix as stored on disk. Entries are always finite.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    payload: Payload,
}

fn check_finite<I: Iterator<Item = f64>>(values: I) -> Result<()> {
    for (i, v) in values.enumerate() {
        if !v.is_finite() {
            return Err(Error::Validation(format!("non-finite entry {v} at flat index {i}")));
        }
    }
    Ok(())
}

impl FeatureMatrix {
    pub fn from_f64(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Length(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        check_finite(data.iter().copied())?;
        Ok(Self {
            rows,
            cols,
            payload: Payload::F64(data),
        })
    }

    pub fn from_f32(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Length(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        check_finite(data.iter().map(|&v| f64::from(v)))?;
        Ok(Self {
            rows,
            cols,
            payload: Payload::F32(data),
        })
    }

    pub fn from_array(a: &Array2<f64>) -> Result<Self> {
        let (rows, cols) = a.dim();
        Self::from_f64(rows, cols, a.iter().copied().collect())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dtype(&self) -> Dtype {
        match self.payload {
            Payload::F32(_) => Dtype::F32,
            Payload::F64(_) => Dtype::F64,
        }
    }

    /// Widened copy as an f64 array; all downstream computation is f64.
    pub fn to_array(&self) -> Array2<f64> {
        let data: Vec<f64> = match &self.payload {
            Payload::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            Payload::F64(v) => v.clone(),
        };
        Array2::from_shape_vec((self.rows, self.cols), data).expect("length checked on construction")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.rows * self.cols * self.dtype().size());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(self.dtype().code());
        out.extend_from_slice(&(self.rows as u64).to_le_bytes());
        out.extend_from_slice(&(self.cols as u64).to_le_bytes());
        match &self.payload {
            Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let format = |message: String| Error::Format {
            path: path.to_path_buf(),
            message,
        };
        if bytes.len() < HEADER_LEN {
            return Err(Error::Length(format!(
                "{}: {} bytes is shorter than the {HEADER_LEN}-byte header",
                path.display(),
                bytes.len()
            )));
        }
        if &bytes[0..4] != MAGIC {
            return Err(format(format!("bad magic {:?}", String::from_utf8_lossy(&bytes[0..4]))));
        }
        if bytes[4] != VERSION {
            return Err(format(format!("unsupported version {}", bytes[4])));
        }
        let dtype = Dtype::from_code(bytes[5]).ok_or_else(|| format(format!("unknown dtype code {}", bytes[5])))?;
        let rows = u64::from_le_bytes(bytes[6..14].try_into().unwrap());
        let cols = u64::from_le_bytes(bytes[14..22].try_into().unwrap());
        let count = rows
            .checked_mul(cols)
            .and_then(|c| usize::try_from(c).ok())
            .ok_or_else(|| format(format!("shape {rows}x{cols} overflows")))?;
        let payload = &bytes[HEADER_LEN..];
        let expected = count
            .checked_mul(dtype.size())
            .ok_or_else(|| format(format!("shape {rows}x{cols} overflows")))?;
        if payload.len() != expected {
            return Err(Error::Length(format!(
                "{}: declared {rows}x{cols} {:?} needs {expected} payload bytes, found {}",
                path.display(),
                dtype,
                payload.len()
            )));
        }
        let (rows, cols) = (rows as usize, cols as usize);
        match dtype {
            Dtype::F32 => {
                let data = payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Self::from_f32(rows, cols, data)
            }
            Dtype::F64 => {
                let data = payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Self::from_f64(rows, cols, data)
            }
        }
    }
}

pub fn write_matrix(m: &FeatureMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, m.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    FeatureMatrix::from_bytes(&bytes, path)
}

pub fn write_array(a: &Array2<f64>, path: impl AsRef<Path>) -> Result<()> {
    write_matrix(&FeatureMatrix::from_array(a)?, path)
}

pub fn read_array(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    Ok(read_matrix(path)?.to_array())
}

/// Vectors are stored as 1×n matrices.
pub fn write_vector(v: &Array1<f64>, path: impl AsRef<Path>) -> Result<()> {
    write_matrix(&FeatureMatrix::from_f64(1, v.len(), v.to_vec())?, path)
}

pub fn read_vector(path: impl AsRef<Path>) -> Result<Array1<f64>> {
    let path = path.as_ref();
    let m = read_matrix(path)?;
    if m.rows() != 1 && m.cols() != 1 {
        return Err(Error::Shape(format!(
            "{}: expected a vector, found {}x{}",
            path.display(),
            m.rows(),
            m.cols()
        )));
    }
    Ok(Array1::from_iter(m.to_array().iter().copied()))
}
