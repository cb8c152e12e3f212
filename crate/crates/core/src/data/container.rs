//! Little-endian binary containers.
//!
//! Feature file:
//!
//! ```text
//! "HASD" | u32 version = 1 | u32 n_rows | u32 n_cols | f32 × n_rows·n_cols (row-major)
//! ```
//!
//! Checkpoint file:
//!
//! ```text
//! "HASM" | u32 version = 1 | u32 tensor_count |
//!   per tensor: u32 name_len | name (UTF-8) | u32 rank | u32 dims[rank] | f32 payload
//! ```
//!
//! Values are stored as `f32` and widened to `f64` on load.

use std::path::Path;

use crate::error::{FormatError, HasdError, Result};
use crate::numerics::Matrix;

pub const FEATURE_MAGIC: [u8; 4] = *b"HASD";
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"HASM";
pub const VERSION: u32 = 1;

const HEADER_LEN: u64 = 16;

/// Cursor over a byte slice that reports the offset of every failure.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn offset(&self) -> u64 {
        self.pos as u64
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], FormatError> {
        if self.remaining() < n {
            return Err(FormatError::Truncated {
                offset: self.offset(),
                needed: n as u64,
                available: self.remaining() as u64,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> std::result::Result<u32, FormatError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn magic(&mut self, expected: [u8; 4]) -> std::result::Result<(), FormatError> {
        let b = self.take(4)?;
        let found = [b[0], b[1], b[2], b[3]];
        if found != expected {
            return Err(FormatError::BadMagic {
                offset: 0,
                expected,
                found,
            });
        }
        Ok(())
    }

    fn version(&mut self) -> std::result::Result<(), FormatError> {
        let offset = self.offset();
        let found = self.u32()?;
        if found != VERSION {
            return Err(FormatError::BadVersion {
                offset,
                expected: VERSION,
                found,
            });
        }
        Ok(())
    }

    fn f32s(&mut self, count: usize) -> std::result::Result<Vec<f64>, FormatError> {
        let start = self.offset();
        let raw = self.take(count * 4)?;
        raw.chunks_exact(4)
            .enumerate()
            .map(|(i, c)| {
                let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
                if v.is_finite() {
                    Ok(v as f64)
                } else {
                    Err(FormatError::NonFinite {
                        offset: start + 4 * i as u64,
                    })
                }
            })
            .collect()
    }

    fn finish(&self) -> std::result::Result<(), FormatError> {
        if self.remaining() > 0 {
            return Err(FormatError::SizeMismatch {
                offset: self.offset(),
                expected: self.offset(),
                actual: self.bytes.len() as u64,
            });
        }
        Ok(())
    }
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_f32s(out: &mut Vec<u8>, values: &[f64]) -> Result<()> {
    for (i, &v) in values.iter().enumerate() {
        let narrow = v as f32;
        if !narrow.is_finite() {
            return Err(HasdError::arg(format!(
                "value {v} at index {i} is not representable as a finite f32"
            )));
        }
        out.extend_from_slice(&narrow.to_le_bytes());
    }
    Ok(())
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| HasdError::arg(format!("{what} {v} exceeds u32 range")))
}

pub fn encode_features(m: &Matrix) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(HEADER_LEN as usize + 4 * m.data().len());
    out.extend_from_slice(&FEATURE_MAGIC);
    push_u32(&mut out, VERSION);
    push_u32(&mut out, to_u32(m.rows(), "row count")?);
    push_u32(&mut out, to_u32(m.cols(), "column count")?);
    push_f32s(&mut out, m.data())?;
    Ok(out)
}

pub fn decode_features(bytes: &[u8]) -> std::result::Result<Matrix, FormatError> {
    let mut r = Reader::new(bytes);
    r.magic(FEATURE_MAGIC)?;
    r.version()?;
    let rows = r.u32()? as u64;
    let cols = r.u32()? as u64;
    let expected = rows * cols * 4;
    let available = r.remaining() as u64;
    if available < expected {
        return Err(FormatError::Truncated {
            offset: HEADER_LEN + available,
            needed: expected - available,
            available: 0,
        });
    }
    if available > expected {
        return Err(FormatError::SizeMismatch {
            offset: HEADER_LEN + expected,
            expected,
            actual: available,
        });
    }
    let data = r.f32s((rows * cols) as usize)?;
    Ok(Matrix::new(rows as usize, cols as usize, data)
        .expect("decoded payload is finite and sized"))
}

/// Reads the row and column counts from a feature file header only.
pub fn read_feature_header(path: &Path) -> Result<(usize, usize)> {
    use std::io::Read;
    let mut head = Vec::with_capacity(HEADER_LEN as usize);
    std::fs::File::open(path)
        .and_then(|f| f.take(HEADER_LEN).read_to_end(&mut head))
        .map_err(|e| HasdError::io(path, e))?;
    let fmt = |source| HasdError::Format {
        path: path.to_path_buf(),
        source,
    };
    let mut r = Reader::new(&head);
    r.magic(FEATURE_MAGIC).map_err(fmt)?;
    r.version().map_err(fmt)?;
    let rows = r.u32().map_err(fmt)?;
    let cols = r.u32().map_err(fmt)?;
    Ok((rows as usize, cols as usize))
}

pub fn write_features(path: &Path, m: &Matrix) -> Result<()> {
    let bytes = encode_features(m)?;
    std::fs::write(path, bytes).map_err(|e| HasdError::io(path, e))
}

pub fn read_features(path: &Path) -> Result<Matrix> {
    let bytes = std::fs::read(path).map_err(|e| HasdError::io(path, e))?;
    decode_features(&bytes).map_err(|source| HasdError::Format {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let name = name.into();
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(HasdError::arg(format!(
                "tensor {name}: dims {dims:?} need {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { name, dims, data })
    }

    pub fn scalar(name: impl Into<String>, v: f64) -> Self {
        Self {
            name: name.into(),
            dims: vec![],
            data: vec![v],
        }
    }

    pub fn vector(name: impl Into<String>, v: &[f64]) -> Self {
        Self {
            name: name.into(),
            dims: vec![v.len()],
            data: v.to_vec(),
        }
    }

    pub fn matrix(name: impl Into<String>, m: &Matrix) -> Self {
        Self {
            name: name.into(),
            dims: vec![m.rows(), m.cols()],
            data: m.data().to_vec(),
        }
    }
}

pub fn encode_checkpoint(tensors: &[NamedTensor]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    push_u32(&mut out, VERSION);
    push_u32(&mut out, to_u32(tensors.len(), "tensor count")?);
    for t in tensors {
        let name = t.name.as_bytes();
        push_u32(&mut out, to_u32(name.len(), "name length")?);
        out.extend_from_slice(name);
        push_u32(&mut out, to_u32(t.dims.len(), "rank")?);
        for &d in &t.dims {
            push_u32(&mut out, to_u32(d, "dimension")?);
        }
        push_f32s(&mut out, &t.data)?;
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> std::result::Result<Vec<NamedTensor>, FormatError> {
    let mut r = Reader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    r.version()?;
    let count = r.u32()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name_offset = r.offset();
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| FormatError::InvalidName {
                offset: name_offset,
            })?
            .to_string();
        let rank = r.u32()? as usize;
        let mut dims = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            dims.push(r.u32()? as usize);
        }
        let count: u64 = dims.iter().map(|&d| d as u64).product();
        if count.saturating_mul(4) > r.remaining() as u64 {
            return Err(FormatError::Truncated {
                offset: r.offset(),
                needed: count.saturating_mul(4),
                available: r.remaining() as u64,
            });
        }
        let data = r.f32s(count as usize)?;
        out.push(NamedTensor { name, dims, data });
    }
    r.finish()?;
    Ok(out)
}

pub fn write_checkpoint(path: &Path, tensors: &[NamedTensor]) -> Result<()> {
    let bytes = encode_checkpoint(tensors)?;
    std::fs::write(path, bytes).map_err(|e| HasdError::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<NamedTensor>> {
    let bytes = std::fs::read(path).map_err(|e| HasdError::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|source| HasdError::Format {
        path: path.to_path_buf(),
        source,
    })
}

/// Looks up `name` with the given shape, or reports the expected schema.
pub fn take_tensor<'a>(
    tensors: &'a [NamedTensor],
    name: &str,
    dims: Option<&[usize]>,
    schema: &[&str],
) -> Result<&'a NamedTensor> {
    let t = tensors.iter().find(|t| t.name == name).ok_or_else(|| {
        let found: Vec<&str> = tensors.iter().map(|t| t.name.as_str()).collect();
        HasdError::Schema(format!(
            "missing tensor {name:?}; expected tensors {schema:?}, found {found:?}"
        ))
    })?;
    if let Some(d) = dims {
        if t.dims != d {
            return Err(HasdError::Schema(format!(
                "tensor {name:?} has dims {:?}, expected {d:?}",
                t.dims
            )));
        }
    }
    Ok(t)
}
