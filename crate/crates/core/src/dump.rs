//! Sample dump formats.
//!
//! Array files start with a 16-byte header:
//!
//! | bytes | field |
//! |-------|-------|
//! | 0..4  | magic `CMSD` |
//! | 4     | dtype: 0 = u8, 1 = u16, 2 = u32, 3 = f32 |
//! | 5     | rank, 1 to 3 |
//! | 6..8  | reserved, zero |
//! | 8..12 | dim 0, u32 LE |
//! | 12..14| dim 1, u16 LE (1 when unused) |
//! | 14..16| dim 2, u16 LE (1 when unused) |
//!
//! followed by the row-major little-endian payload. Sequence files hold one
//! sequence per line as space-separated token indices.

use std::path::Path;

pub use crate::checkpoint::write_atomic;
use crate::error::{CouplingError, Result};
use crate::types::TokenSequence;

pub const MAGIC: &[u8; 4] = b"CMSD";
pub const HEADER_LEN: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    U8 = 0,
    U16 = 1,
    U32 = 2,
    F32 = 3,
}

impl DType {
    fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => DType::U8,
            1 => DType::U16,
            2 => DType::U32,
            3 => DType::F32,
            _ => return None,
        })
    }

    pub fn width(self) -> usize {
        match self {
            DType::U8 => 1,
            DType::U16 => 2,
            DType::U32 | DType::F32 => 4,
        }
    }
}

/// A dense array as stored in a dump file. Values are held as f64, which is
/// exact for every supported dtype.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleArray {
    pub dtype: DType,
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

impl SampleArray {
    pub fn new(dtype: DType, dims: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if dims.is_empty() || dims.len() > 3 {
            return Err(CouplingError::Shape(format!("rank {} not in 1..=3", dims.len())));
        }
        if dims[0] > u32::MAX as usize || dims[1..].iter().any(|&d| d > u16::MAX as usize) {
            return Err(CouplingError::Shape(format!("dims {dims:?} exceed the header limits")));
        }
        let count: usize = dims.iter().product();
        if count != values.len() {
            return Err(CouplingError::Shape(format!(
                "dims {dims:?} need {count} values, got {}",
                values.len()
            )));
        }
        Ok(SampleArray { dtype, dims, values })
    }

    /// Token sequences as an `n x T` array of the narrowest integer type.
    pub fn from_sequences(xs: &[TokenSequence]) -> Result<Self> {
        let len = xs.first().map_or(0, TokenSequence::len);
        if xs.iter().any(|x| x.len() != len) {
            return Err(CouplingError::Shape("sequences differ in length".into()));
        }
        let top = xs.iter().flat_map(|x| x.tokens()).copied().max().unwrap_or(0);
        let dtype = if top <= u8::MAX as usize {
            DType::U8
        } else if top <= u16::MAX as usize {
            DType::U16
        } else {
            DType::U32
        };
        let values = xs.iter().flat_map(|x| x.tokens()).map(|&t| t as f64).collect();
        SampleArray::new(dtype, vec![xs.len(), len], values)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.values.len() * self.dtype.width());
        out.extend_from_slice(MAGIC);
        out.push(self.dtype as u8);
        out.push(self.dims.len() as u8);
        out.extend_from_slice(&[0, 0]);
        let dim = |i: usize| self.dims.get(i).copied().unwrap_or(1);
        out.extend_from_slice(&(dim(0) as u32).to_le_bytes());
        out.extend_from_slice(&(dim(1) as u16).to_le_bytes());
        out.extend_from_slice(&(dim(2) as u16).to_le_bytes());
        for &v in &self.values {
            match self.dtype {
                DType::U8 => out.push(v as u8),
                DType::U16 => out.extend_from_slice(&(v as u16).to_le_bytes()),
                DType::U32 => out.extend_from_slice(&(v as u32).to_le_bytes()),
                DType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let bad = |message: String| CouplingError::Format { path: origin.to_string(), message };
        if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
            return Err(bad("missing CMSD header".into()));
        }
        let dtype = DType::from_code(bytes[4]).ok_or_else(|| bad(format!("unknown dtype {}", bytes[4])))?;
        let rank = bytes[5] as usize;
        if !(1..=3).contains(&rank) {
            return Err(bad(format!("rank {rank} not in 1..=3")));
        }
        let all = [
            u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize,
            u16::from_le_bytes(bytes[12..14].try_into().unwrap()) as usize,
            u16::from_le_bytes(bytes[14..16].try_into().unwrap()) as usize,
        ];
        let dims = all[..rank].to_vec();
        let count: usize = dims.iter().product();
        let payload = &bytes[HEADER_LEN..];
        if payload.len() != count * dtype.width() {
            return Err(bad(format!(
                "payload has {} bytes, header implies {}",
                payload.len(),
                count * dtype.width()
            )));
        }
        let values = payload
            .chunks_exact(dtype.width())
            .map(|c| match dtype {
                DType::U8 => c[0] as f64,
                DType::U16 => u16::from_le_bytes([c[0], c[1]]) as f64,
                DType::U32 => u32::from_le_bytes(c.try_into().unwrap()) as f64,
                DType::F32 => f32::from_le_bytes(c.try_into().unwrap()) as f64,
            })
            .collect();
        SampleArray::new(dtype, dims, values)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        SampleArray::from_bytes(&bytes, &path.display().to_string())
    }

    /// Rows of a rank-2 integer array as token sequences.
    pub fn to_sequences(&self, vocab_size: usize) -> Result<Vec<TokenSequence>> {
        if self.dims.len() != 2 || self.dtype == DType::F32 {
            return Err(CouplingError::Shape("sequences need a rank-2 integer array".into()));
        }
        self.values
            .chunks(self.dims[1].max(1))
            .take(self.dims[0])
            .map(|row| TokenSequence::new(row.iter().map(|&v| v as usize).collect(), vocab_size))
            .collect()
    }
}

pub fn sequences_to_text(xs: &[TokenSequence]) -> String {
    let mut out = String::new();
    for x in xs {
        let line: Vec<String> = x.tokens().iter().map(usize::to_string).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

pub fn write_sequences(path: &Path, xs: &[TokenSequence]) -> Result<()> {
    write_atomic(path, sequences_to_text(xs).as_bytes())
}
