//! Flat parameter vectors and the `KAI0PV1` checkpoint format.
//!
//! Layout on disk (all integers little-endian):
//!
//! ```text
//! "KAI0PV1\0"            8 bytes magic
//! u32                     byte length of layout_id
//! [u8; n]                 layout_id, UTF-8
//! u64                     number of values
//! [f64; len]              IEEE-754 binary64 values
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"KAI0PV1\0";

/// Longest layout identifier accepted on save or load.
pub const MAX_LAYOUT_LEN: usize = 64 * 1024;

/// Flat real-valued model parameters tagged with the architecture they flatten.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterVector {
    layout_id: String,
    values: Vec<f64>,
}

impl ParameterVector {
    pub fn new(layout_id: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidParams("empty vector".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidParams(format!("non-finite entry at {i}")));
        }
        Ok(Self {
            layout_id: layout_id.into(),
            values,
        })
    }

    pub fn zeros(layout_id: impl Into<String>, len: usize) -> Result<Self> {
        Self::new(layout_id, vec![0.0; len])
    }

    pub fn layout_id(&self) -> &str {
        &self.layout_id
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn check_compatible(&self, other: &ParameterVector) -> Result<()> {
        if self.layout_id != other.layout_id || self.values.len() != other.values.len() {
            return Err(Error::LayoutMismatch {
                left: self.layout_id.clone(),
                left_len: self.values.len(),
                right: other.layout_id.clone(),
                right_len: other.values.len(),
            });
        }
        Ok(())
    }

    /// `self + alpha * src`, leaving both inputs untouched.
    pub fn axpy(&self, alpha: f64, src: &ParameterVector) -> Result<ParameterVector> {
        self.check_compatible(src)?;
        let values = self
            .values
            .iter()
            .zip(&src.values)
            .map(|(d, s)| d + alpha * s)
            .collect();
        ParameterVector::new(self.layout_id.clone(), values)
    }

    pub fn dot(&self, other: &ParameterVector) -> Result<f64> {
        self.check_compatible(other)?;
        Ok(self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum())
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let id = self.layout_id.as_bytes();
        if id.len() > MAX_LAYOUT_LEN {
            return Err(Error::LayoutOverflow(id.len()));
        }
        let mut out = Vec::with_capacity(8 + 4 + id.len() + 8 + 8 * self.values.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(id.len() as u32).to_le_bytes());
        out.extend_from_slice(id);
        out.extend_from_slice(&(self.values.len() as u64).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::BadMagic);
        }
        cur.pos = MAGIC.len();
        let id_len = u32::from_le_bytes(cur.take::<4>("layout length")?) as usize;
        if id_len > MAX_LAYOUT_LEN {
            return Err(Error::LayoutOverflow(id_len));
        }
        let id = cur.take_slice(id_len, "layout id")?;
        let layout_id = std::str::from_utf8(id)
            .map_err(|e| Error::InvalidParams(format!("layout id is not UTF-8: {e}")))?
            .to_owned();
        let len = u64::from_le_bytes(cur.take::<8>("value count")?) as usize;
        let remaining = bytes.len() - cur.pos;
        if remaining / 8 < len {
            return Err(Error::Truncated(format!(
                "expected {len} values, {remaining} bytes remain"
            )));
        }
        let values = (0..len)
            .map(|_| cur.take::<8>("value").map(f64::from_le_bytes))
            .collect::<Result<Vec<_>>>()?;
        if cur.pos != bytes.len() {
            return Err(Error::InvalidParams(format!(
                "{} trailing bytes",
                bytes.len() - cur.pos
            )));
        }
        ParameterVector::new(layout_id, values)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take_slice(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Truncated(what.to_owned()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn take<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let s = self.take_slice(N, what)?;
        Ok(s.try_into().expect("slice length checked"))
    }
}

/// `dst + alpha * src`.
pub fn param_axpy(
    dst: &ParameterVector,
    alpha: f64,
    src: &ParameterVector,
) -> Result<ParameterVector> {
    dst.axpy(alpha, src)
}

pub fn save_params(p: &ParameterVector, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = p.to_bytes()?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_params(path: impl AsRef<Path>) -> Result<ParameterVector> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    ParameterVector::from_bytes(&bytes)
}
