//! One-head cross-attention that mixes image features into text hidden states.
//!
//! Hidden states are rows. With `Q = Htxt·Wq`, `K = Himg·Wk`, `V = Himg·Wv`:
//!
//! ```text
//! H = Htxt + softmax_rows(Q·Kᵀ) · V · Woᵀ
//! ```
//!
//! This is the row-major transpose of the column-vector form `Wo·(...)`.
//! Scores are not divided by `√d` unless [`FusionConfig::scale_scores`] is set.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Scalar;

const FEATURE_MAGIC: &[u8; 4] = b"PKGF";

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("non-finite value in input")]
    NonFiniteInput,
    #[error("non-finite value in output")]
    NonFiniteOutput,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("feature file not found: {0}")]
    MissingFile(PathBuf),
    #[error("shape mismatch: declared {rows}x{cols}, found {found} values")]
    ShapeMismatch { rows: usize, cols: usize, found: usize },
    #[error("non-finite value at index {0}")]
    NonFiniteValue(usize),
    #[error("bad feature file: {0}")]
    BadFormat(String),
    #[error("io failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Dense row-major matrix of finite values, at least 1x1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self, FusionError> {
        if rows == 0 || cols == 0 {
            return Err(FusionError::DimensionMismatch(format!("empty shape {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(FusionError::ShapeMismatch {
                rows,
                cols,
                found: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(FusionError::NonFiniteValue(i));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self, FusionError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(FusionError::DimensionMismatch("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `self · other`
    pub fn matmul(&self, other: &Matrix<T>) -> Result<Matrix<T>, FusionError> {
        if self.cols != other.rows {
            return Err(FusionError::DimensionMismatch(format!(
                "{}x{} · {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, &b) in dst.iter_mut().zip(other.row(k)) {
                    *d = *d + a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`
    pub fn matmul_t(&self, other: &Matrix<T>) -> Result<Matrix<T>, FusionError> {
        if self.cols != other.cols {
            return Err(FusionError::DimensionMismatch(format!(
                "{}x{} · ({}x{})ᵀ",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut data = Vec::with_capacity(self.rows * other.rows);
        for i in 0..self.rows {
            for j in 0..other.rows {
                data.push(self.row(i).iter().zip(other.row(j)).map(|(&a, &b)| a * b).sum());
            }
        }
        Ok(Matrix {
            rows: self.rows,
            cols: other.rows,
            data,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .map(|v| U::from(*v).expect("finite values cast between float types"))
                .collect(),
        }
    }

    fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows<T: Scalar>(m: &Matrix<T>) -> Result<Matrix<T>, FusionError> {
    if !m.all_finite() {
        return Err(FusionError::NonFiniteInput);
    }
    let mut data = Vec::with_capacity(m.data.len());
    for r in 0..m.rows {
        let row = m.row(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let sum: T = exps.iter().copied().sum();
        data.extend(exps.into_iter().map(|e| e / sum));
    }
    Ok(Matrix {
        rows: m.rows,
        cols: m.cols,
        data,
    })
}

/// Square `d x d` projections: query, key, value and output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights<T> {
    pub wq: Matrix<T>,
    pub wk: Matrix<T>,
    pub wv: Matrix<T>,
    pub wo: Matrix<T>,
}

impl<T: Scalar> FusionWeights<T> {
    pub fn new(wq: Matrix<T>, wk: Matrix<T>, wv: Matrix<T>, wo: Matrix<T>) -> Result<Self, FusionError> {
        let w = FusionWeights { wq, wk, wv, wo };
        w.dim()?;
        Ok(w)
    }

    /// Shared hidden size, checking every projection is square with it.
    pub fn dim(&self) -> Result<usize, FusionError> {
        let d = self.wq.rows;
        for (name, m) in [("Wq", &self.wq), ("Wk", &self.wk), ("Wv", &self.wv), ("Wo", &self.wo)] {
            if m.rows != d || m.cols != d {
                return Err(FusionError::DimensionMismatch(format!(
                    "{name} is {}x{}, expected {d}x{d}",
                    m.rows, m.cols
                )));
            }
        }
        Ok(d)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionConfig {
    /// Divide scores by `√d` before the softmax.
    pub scale_scores: bool,
}

fn check_dims<T: Scalar>(htxt: &Matrix<T>, himg: &Matrix<T>, w: &FusionWeights<T>) -> Result<usize, FusionError> {
    let d = w.dim()?;
    if htxt.cols != d || himg.cols != d {
        return Err(FusionError::DimensionMismatch(format!(
            "text width {}, image width {}, weights {d}",
            htxt.cols, himg.cols
        )));
    }
    Ok(d)
}

/// Pre-softmax scores `(Htxt·Wq)(Himg·Wk)ᵀ`, `n x m`.
pub fn attention_scores<T: Scalar>(
    htxt: &Matrix<T>,
    himg: &Matrix<T>,
    w: &FusionWeights<T>,
    config: FusionConfig,
) -> Result<Matrix<T>, FusionError> {
    let d = check_dims(htxt, himg, w)?;
    let q = htxt.matmul(&w.wq)?;
    let k = himg.matmul(&w.wk)?;
    let scores = q.matmul_t(&k)?;
    Ok(if config.scale_scores {
        let s = T::from_usize_lossy(d).sqrt();
        scores.map(|v| v / s)
    } else {
        scores
    })
}

/// Row-stochastic attention weights, `n x m`.
pub fn attention_weights<T: Scalar>(
    htxt: &Matrix<T>,
    himg: &Matrix<T>,
    w: &FusionWeights<T>,
    config: FusionConfig,
) -> Result<Matrix<T>, FusionError> {
    softmax_rows(&attention_scores(htxt, himg, w, config)?)
}

pub fn cross_attend<T: Scalar>(
    htxt: &Matrix<T>,
    himg: &Matrix<T>,
    w: &FusionWeights<T>,
) -> Result<Matrix<T>, FusionError> {
    cross_attend_with(htxt, himg, w, FusionConfig::default())
}

pub fn cross_attend_with<T: Scalar>(
    htxt: &Matrix<T>,
    himg: &Matrix<T>,
    w: &FusionWeights<T>,
    config: FusionConfig,
) -> Result<Matrix<T>, FusionError> {
    let attn = attention_weights(htxt, himg, w, config)?;
    let values = himg.matmul(&w.wv)?;
    let delta = attn.matmul(&values)?.matmul_t(&w.wo)?;
    // Zero contributions leave the residual untouched, so Wo = 0 returns Htxt bit for bit.
    let data = htxt
        .data
        .iter()
        .zip(&delta.data)
        .map(|(&h, &dv)| if dv == T::zero() { h } else { h + dv })
        .collect();
    let out = Matrix {
        rows: htxt.rows,
        cols: htxt.cols,
        data,
    };
    if !out.all_finite() {
        return Err(FusionError::NonFiniteOutput);
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct JsonFeatures {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Binary layout: `PKGF`, u32 rows, u32 cols, then `rows * cols` little-endian f64.
pub fn encode_features(m: &Matrix<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + m.data.len() * 8);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&(m.rows as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols as u32).to_le_bytes());
    for v in &m.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_features(bytes: &[u8]) -> Result<Matrix<f64>, FusionError> {
    if bytes.len() < 12 || &bytes[..4] != FEATURE_MAGIC {
        return Err(FusionError::BadFormat("missing PKGF magic".into()));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = &bytes[12..];
    if !body.len().is_multiple_of(8) || body.len() / 8 != rows * cols {
        return Err(FusionError::ShapeMismatch {
            rows,
            cols,
            found: body.len() / 8,
        });
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Matrix::new(rows, cols, data)
}

pub fn save_features(m: &Matrix<f64>, path: &Path) -> Result<(), FusionError> {
    fs::write(path, encode_features(m)).map_err(|source| FusionError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn save_features_json(m: &Matrix<f64>, path: &Path) -> Result<(), FusionError> {
    let j = JsonFeatures {
        rows: m.rows,
        cols: m.cols,
        data: m.data.clone(),
    };
    fs::write(path, serde_json::to_vec(&j).expect("features serialize")).map_err(|source| FusionError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads a feature file in either the binary or the JSON debug format.
pub fn load_features(path: &Path) -> Result<Matrix<f64>, FusionError> {
    if !path.exists() {
        return Err(FusionError::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|source| FusionError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    if bytes.starts_with(FEATURE_MAGIC) {
        return decode_features(&bytes);
    }
    // serde_json rejects NaN/Infinity literals, so non-finite JSON fails here.
    let j: JsonFeatures = serde_json::from_slice(&bytes).map_err(|e| FusionError::BadFormat(e.to_string()))?;
    Matrix::new(j.rows, j.cols, j.data)
}
