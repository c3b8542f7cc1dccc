//! A small reverse-mode differentiation kernel over dense f64 matrices.
//!
//! Only the operations the models need are provided. A [`Tape`] is built
//! fresh for every training example, evaluated eagerly, and then walked
//! backwards once to produce [`Gradients`] for the [`ParamSet`] it borrows.

mod checkpoint;
mod gradcheck;
mod optim;
mod tape;

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{gradient_check, GradCheck, FD_STEP};
pub use optim::{Adagrad, AdagradConfig};
pub use tape::{log_softmax, NodeId, Tape};

use crate::features::SpaceHash;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("{op}: shape mismatch ({detail})")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: non-finite value")]
    NonFinite { op: &'static str },
    #[error("loss node has {0} entries, expected a scalar")]
    NonScalarLoss(usize),
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
    #[error("duplicate parameter {0:?}")]
    DuplicateParam(String),
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{name} hash mismatch: checkpoint has {found}, expected {expected}")]
    HashMismatch {
        name: String,
        expected: SpaceHash,
        found: SpaceHash,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = DiffError> = std::result::Result<T, E>;

/// Row-major dense matrix. Column vectors are `n × 1`.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{})", self.rows, self.cols)
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(DiffError::ShapeMismatch {
                op: "matrix",
                detail: format!(
                    "{rows}x{cols} needs {} values, got {}",
                    rows * cols,
                    data.len()
                ),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(DiffError::NonFinite { op: "matrix" });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn uniform<R: Rng>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-scale..scale))
            .collect();
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `self · x` where `x` supplies columns `offset..offset + x.len()`.
    pub fn matvec_cols(&self, x: &[f64], offset: usize) -> Vec<f64> {
        debug_assert!(offset + x.len() <= self.cols);
        (0..self.rows)
            .map(|r| {
                let row = &self.row(r)[offset..offset + x.len()];
                row.iter().zip(x).map(|(w, v)| w * v).sum()
            })
            .collect()
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        self.matvec_cols(x, 0)
    }

    /// Add `Σ_j W[:, j]` over the listed columns (with repetition) to `acc`.
    pub fn add_columns(&self, cols: &[u32], acc: &mut [f64]) {
        for (r, a) in acc.iter_mut().enumerate() {
            let row = self.row(r);
            *a += cols.iter().map(|&c| row[c as usize]).sum::<f64>();
        }
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// Opaque handle to a parameter matrix inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named parameter matrices with fixed shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    mats: Vec<Matrix>,
    seed: u64,
}

/// Half-width of the uniform initialization interval.
pub const INIT_SCALE: f64 = 0.1;

impl ParamSet {
    /// Initialize every listed matrix from `uniform(-0.1, 0.1)`, drawing in
    /// the listed order from a stream seeded by `seed`.
    pub fn init(seed: u64, shapes: &[(&str, usize, usize)]) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = ParamSet {
            names: Vec::new(),
            mats: Vec::new(),
            seed,
        };
        for &(name, rows, cols) in shapes {
            set.insert(name, Matrix::uniform(rows, cols, INIT_SCALE, &mut rng))?;
        }
        Ok(set)
    }

    pub fn from_matrices(seed: u64, mats: Vec<(String, Matrix)>) -> Result<Self> {
        let mut set = ParamSet {
            names: Vec::new(),
            mats: Vec::new(),
            seed,
        };
        for (name, m) in mats {
            set.insert(&name, m)?;
        }
        Ok(set)
    }

    fn insert(&mut self, name: &str, m: Matrix) -> Result<ParamId> {
        if self.names.iter().any(|n| n == name) {
            return Err(DiffError::DuplicateParam(name.to_string()));
        }
        self.names.push(name.to_string());
        self.mats.push(m);
        Ok(ParamId(self.mats.len() - 1))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.mats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mats.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(ParamId)
            .ok_or_else(|| DiffError::UnknownParam(name.to_string()))
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.mats[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.mats[id.0]
    }

    pub fn by_name(&self, name: &str) -> Result<&Matrix> {
        Ok(self.get(self.id(name)?))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Matrix)> {
        self.names
            .iter()
            .zip(&self.mats)
            .enumerate()
            .map(|(i, (n, m))| (ParamId(i), n.as_str(), m))
    }

    pub fn shapes(&self) -> BTreeMap<String, (usize, usize)> {
        self.iter()
            .map(|(_, n, m)| (n.to_string(), m.shape()))
            .collect()
    }

    /// SHA-256 over names, shapes and little-endian values, as hex.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (_, name, m) in self.iter() {
            h.update(name.as_bytes());
            h.update((m.rows as u64).to_le_bytes());
            h.update((m.cols as u64).to_le_bytes());
            for v in &m.data {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize()
            .iter()
            .take(16)
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn zeros_like(&self) -> Gradients {
        Gradients {
            mats: self
                .mats
                .iter()
                .map(|m| Matrix::zeros(m.rows, m.cols))
                .collect(),
        }
    }
}

/// Per-parameter gradient matrices, aligned with a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    mats: Vec<Matrix>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.mats[id.0]
    }

    pub(crate) fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.mats[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Matrix> {
        self.mats.iter()
    }

    pub fn len(&self) -> usize {
        self.mats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mats.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.mats.iter().map(Matrix::norm_sq).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, c: f64) {
        for m in &mut self.mats {
            m.data.iter_mut().for_each(|v| *v *= c);
        }
    }
}
