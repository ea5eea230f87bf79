//! `XPR1` parameter checkpoints.
//!
//! Layout (all integers little-endian u32):
//! magic `XPR1`, tensor count, then per tensor: name length, UTF-8 name
//! bytes, rank, one u32 per dimension, and the values as little-endian f64.

use std::path::Path;

use super::Matrix;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"XPR1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    tensors: Vec<(String, Matrix)>,
}

impl Checkpoint {
    pub fn push(&mut self, name: impl Into<String>, value: Matrix) {
        self.tensors.push((name.into(), value));
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn tensors(&self) -> &[(String, Matrix)] {
        &self.tensors
    }

    /// Merge another checkpoint under a name prefix.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &Checkpoint) {
        for (n, m) in &other.tensors {
            self.tensors.push((format!("{prefix}{n}"), m.clone()));
        }
    }

    /// Tensors whose names start with `prefix`, with the prefix stripped.
    pub fn sub(&self, prefix: &str) -> Checkpoint {
        Checkpoint {
            tensors: self
                .tensors
                .iter()
                .filter_map(|(n, m)| n.strip_prefix(prefix).map(|s| (s.to_string(), m.clone())))
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, m) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&2u32.to_le_bytes());
            out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(Error::format(path, 0, "bad magic, expected XPR1"));
        }
        let count = r.u32()?;
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let at = r.pos;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::format(path, at as u64, "tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u32()?;
            let (rows, cols) = match rank {
                1 => (1, r.u32()? as usize),
                2 => (r.u32()? as usize, r.u32()? as usize),
                other => return Err(Error::format(path, r.pos as u64, format!("unsupported rank {other}"))),
            };
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                let at = r.pos;
                let v = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
                if !v.is_finite() {
                    return Err(Error::format(path, at as u64, format!("non-finite value in tensor {name}")));
                }
                data.push(v);
            }
            tensors.push((name, Matrix::from_vec(rows, cols, data)));
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, r.pos as u64, "trailing bytes after last tensor"));
        }
        Ok(Checkpoint { tensors })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.path, self.pos as u64, "truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn write_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, ck.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut ck = Checkpoint::default();
        ck.push("w1", Matrix::from_rows(&[[0.1, -2.5e-300], [3.0, 1.0 / 3.0]]));
        ck.push("b", Matrix::row_vector(&[f64::MIN_POSITIVE]));
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back, ck);
    }

    #[test]
    fn truncated_and_bad_magic_rejected() {
        let mut ck = Checkpoint::default();
        ck.push("w", Matrix::scalar(1.0));
        let bytes = ck.to_bytes();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3], Path::new("m")),
            Err(Error::Format { .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'Y';
        assert!(matches!(Checkpoint::from_bytes(&bad, Path::new("m")), Err(Error::Format { offset: 0, .. })));
    }
}
