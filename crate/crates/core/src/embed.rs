//! Sentence embedding storage and the `XEM1` file format.
//!
//! An embedding file is the 4-byte magic `XEM1`, a little-endian u32 row
//! count, a u32 dimension, then `rows * dim` little-endian f32 values in row
//! order. A `<file>.meta` sidecar records the corpus it was computed from and
//! a SHA-256 of that corpus's bytes.

use std::path::{Component, Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{ensure, Error, Result};
use crate::numerics::Matrix;

const MAGIC: &[u8; 4] = b"XEM1";

/// n x d sentence embeddings; row `i` belongs to sentence `i` of the
/// referenced corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f32>,
    pub corpus_ref: Option<String>,
}

impl EmbeddingMatrix {
    pub fn new(rows: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        ensure!(data.len() == rows * dim, "embedding data has {} values, expected {rows}x{dim}", data.len());
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Precondition(format!("non-finite embedding at row {} col {}", i / dim, i % dim)));
        }
        Ok(EmbeddingMatrix { rows, dim, data, corpus_ref: None })
    }

    pub fn from_matrix(m: &Matrix) -> Result<Self> {
        EmbeddingMatrix::new(m.rows(), m.cols(), m.data().iter().map(|&v| v as f32).collect())
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_vec(self.rows, self.dim, self.data.iter().map(|&v| v as f64).collect())
    }

    /// Rows at `ids`, widened to f64.
    pub fn select(&self, ids: &[usize]) -> Matrix {
        let mut out = Vec::with_capacity(ids.len() * self.dim);
        for &i in ids {
            out.extend(self.row(i).iter().map(|&v| v as f64));
        }
        Matrix::from_vec(ids.len(), self.dim, out)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&v| v as f64).collect()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.data.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(Error::format(path, bytes.len() as u64, "truncated header"));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::format(path, 0, "bad magic, expected XEM1"));
        }
        let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let need = 12 + rows * dim * 4;
        if bytes.len() < need {
            return Err(Error::format(
                path,
                bytes.len() as u64,
                format!("truncated payload: header declares {rows}x{dim}, file holds {} values", (bytes.len() - 12) / 4),
            ));
        }
        if bytes.len() > need {
            return Err(Error::format(path, need as u64, "trailing bytes after payload"));
        }
        let mut data = Vec::with_capacity(rows * dim);
        for (i, chunk) in bytes[12..].chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::format(
                    path,
                    12 + 4 * i as u64,
                    format!("non-finite value at row {} col {}", i / dim.max(1), i % dim.max(1)),
                ));
            }
            data.push(v);
        }
        Ok(EmbeddingMatrix { rows, dim, data, corpus_ref: None })
    }
}

pub fn write_embeddings(m: &EmbeddingMatrix, path: &Path) -> Result<()> {
    std::fs::write(path, m.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingMatrix> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    EmbeddingMatrix::from_bytes(&bytes, path)
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    s.into()
}

/// `path` as seen from `base`; both must be canonical. Paths on different
/// roots stay absolute.
fn relative_to(path: &Path, base: &Path) -> PathBuf {
    let (p, b): (Vec<Component>, Vec<Component>) = (path.components().collect(), base.components().collect());
    let common = p.iter().zip(&b).take_while(|(x, y)| x == y).count();
    if common == 0 {
        return path.to_path_buf();
    }
    let mut out: PathBuf = b[common..].iter().map(|_| Component::ParentDir).collect();
    out.extend(&p[common..]);
    out
}

/// Write the `.meta` sidecar tying an embedding file to its corpus.
pub fn write_sidecar(embedding_path: &Path, corpus_path: &Path) -> Result<()> {
    let bytes = std::fs::read(corpus_path).map_err(|e| Error::io(corpus_path, e))?;
    let hash = hex::encode(Sha256::digest(&bytes));
    let side = sidecar_path(embedding_path);
    let canon = |p: &Path| std::fs::canonicalize(p).map_err(|e| Error::io(p, e));
    let base = canon(side.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new(".")))?;
    let text = format!("corpus={}\nsha256={hash}\n", relative_to(&canon(corpus_path)?, &base).display());
    std::fs::write(&side, text).map_err(|e| Error::io(side, e))
}

/// Check that the corpus named in the sidecar still hashes to the recorded
/// value.
pub fn verify_sidecar(embedding_path: &Path) -> Result<bool> {
    let side = sidecar_path(embedding_path);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let field = |key: &str| text.lines().find_map(|l| l.strip_prefix(key)).map(str::to_string);
    let (Some(corpus), Some(hash)) = (field("corpus="), field("sha256=")) else {
        return Err(Error::format(&side, 0, "sidecar lacks corpus= or sha256="));
    };
    let corpus = side.parent().unwrap_or(Path::new("")).join(corpus);
    let bytes = std::fs::read(&corpus).map_err(|e| Error::io(&corpus, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)) == hash)
}

pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch { expected: u.len(), found: v.len() });
    }
    let (mut uv, mut uu, mut vv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        uv += a * b;
        uu += a * a;
        vv += b * b;
    }
    if uu == 0.0 {
        return Err(Error::DegenerateVector { row: 0 });
    }
    if vv == 0.0 {
        return Err(Error::DegenerateVector { row: 1 });
    }
    Ok((uv / (uu.sqrt() * vv.sqrt())).clamp(-1.0, 1.0))
}

/// Mean of the selected rows, accumulated in f64.
pub fn centroid(m: &EmbeddingMatrix, row_ids: &[usize]) -> Result<Vec<f64>> {
    ensure!(!row_ids.is_empty(), "centroid of an empty row set");
    let mut acc = vec![0.0f64; m.dim()];
    for &i in row_ids {
        ensure!(i < m.rows(), "row {i} out of range ({} rows)", m.rows());
        for (a, &v) in acc.iter_mut().zip(m.row(i)) {
            *a += v as f64;
        }
    }
    let n = row_ids.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

/// Row means of an f64 matrix.
pub fn matrix_centroid(m: &Matrix) -> Result<Vec<f64>> {
    ensure!(m.rows() > 0, "centroid of an empty matrix");
    let mut acc = vec![0.0f64; m.cols()];
    for r in 0..m.rows() {
        for (a, v) in acc.iter_mut().zip(m.row(r)) {
            *a += v;
        }
    }
    acc.iter_mut().for_each(|a| *a /= m.rows() as f64);
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cosine_cases() {
        assert_eq!(cosine(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine(&[1.0, 1.0], &[1.0, 0.0]).unwrap() - 1.0 / 2f64.sqrt()).abs() < 1e-9);
        assert!(matches!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::DegenerateVector { .. })));
    }

    #[test]
    fn centroid_cases() {
        let m = EmbeddingMatrix::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(centroid(&m, &[0, 1]).unwrap(), vec![0.5, 0.5]);
        assert_eq!(centroid(&m, &[1]).unwrap(), vec![0.0, 1.0]);
        assert!(centroid(&m, &[]).is_err());
    }

    #[test]
    fn file_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.xem");
        let m = EmbeddingMatrix::new(2, 3, vec![0.1, -2.0, 3.5e-38, 7.0, f32::MIN_POSITIVE, 1.0 / 3.0]).unwrap();
        write_embeddings(&m, &p).unwrap();
        let back = read_embeddings(&p).unwrap();
        assert_eq!(back.to_bytes(), m.to_bytes());
    }

    #[test]
    fn truncated_payload_rejected() {
        let m = EmbeddingMatrix::new(4, 2, vec![1.0; 8]).unwrap();
        let mut bytes = m.to_bytes();
        bytes[4..8].copy_from_slice(&5u32.to_le_bytes());
        let err = EmbeddingMatrix::from_bytes(&bytes, Path::new("x")).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn nan_rejected_with_position() {
        let m = EmbeddingMatrix::new(2, 2, vec![1.0; 4]).unwrap();
        let mut bytes = m.to_bytes();
        bytes[12 + 3 * 4..12 + 4 * 4].copy_from_slice(&f32::NAN.to_le_bytes());
        let err = EmbeddingMatrix::from_bytes(&bytes, Path::new("x")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("row 1 col 1") && msg.contains("offset 24"), "{msg}");
    }

    #[test]
    fn bad_magic_rejected() {
        let mut bytes = EmbeddingMatrix::new(1, 1, vec![1.0]).unwrap().to_bytes();
        bytes[3] = b'2';
        assert!(matches!(EmbeddingMatrix::from_bytes(&bytes, Path::new("x")), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn sidecar_detects_corpus_change() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = dir.path().join("c.txt");
        std::fs::write(&corpus, "a b\n").unwrap();
        let emb = dir.path().join("e.xem");
        write_embeddings(&EmbeddingMatrix::new(1, 1, vec![1.0]).unwrap(), &emb).unwrap();
        write_sidecar(&emb, &corpus).unwrap();
        assert!(verify_sidecar(&emb).unwrap());
        std::fs::write(&corpus, "a c\n").unwrap();
        assert!(!verify_sidecar(&emb).unwrap());
    }

    #[test]
    fn centroid_matches_naive_sum() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f32> = (0..100 * 8).map(|_| rng.random_range(-5.0..5.0)).collect();
        let m = EmbeddingMatrix::new(100, 8, data.clone()).unwrap();
        let ids: Vec<usize> = (0..100).collect();
        let c = centroid(&m, &ids).unwrap();
        for k in 0..8 {
            let mut s = 0.0f64;
            for r in 0..100 {
                s += data[r * 8 + k] as f64;
            }
            assert!((c[k] - s / 100.0).abs() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn cosine_properties(
            u in proptest::collection::vec(-10.0f64..10.0, 5),
            v in proptest::collection::vec(-10.0f64..10.0, 5),
        ) {
            prop_assume!(u.iter().any(|x| x.abs() > 1e-3) && v.iter().any(|x| x.abs() > 1e-3));
            let uv = cosine(&u, &v).unwrap();
            prop_assert!((uv - cosine(&v, &u).unwrap()).abs() < 1e-15);
            prop_assert!(uv.abs() <= 1.0 + 1e-9);
            prop_assert!((cosine(&u, &u).unwrap() - 1.0).abs() < 1e-12);
        }
    }
}
