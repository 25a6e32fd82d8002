//! Pre-embedded calibration corpora.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use super::container::{self, Container, RawTensor};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

const EMBEDDINGS: &str = "embeddings";

/// A batch of token embeddings, `s × d_model` with `s ≥ 2`.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationBatch<T> {
    embeddings: Matrix<T>,
    pub source_id: String,
}

impl<T: Scalar> CalibrationBatch<T> {
    pub fn new(embeddings: Matrix<T>, source_id: impl Into<String>) -> Result<Self> {
        if embeddings.rows() < 2 {
            return Err(Error::Degenerate(format!(
                "calibration batch needs at least 2 rows, got {}",
                embeddings.rows()
            )));
        }
        if !embeddings.is_finite() {
            return Err(Error::Degenerate("calibration batch contains NaN or Inf".into()));
        }
        Ok(Self {
            embeddings,
            source_id: source_id.into(),
        })
    }

    pub fn embeddings(&self) -> &Matrix<T> {
        &self.embeddings
    }

    pub fn len(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.rows() == 0
    }
}

pub fn save_embeddings<T: Scalar>(path: impl AsRef<Path>, x: &Matrix<T>, source_id: &str) -> Result<()> {
    let mut c = Container::default();
    c.fields.insert("kind".into(), Value::from("embeddings"));
    c.fields.insert("d_model".into(), Value::from(x.cols()));
    c.fields.insert("rows".into(), Value::from(x.rows()));
    c.fields.insert("source_id".into(), Value::from(source_id));
    c.tensors.push((
        EMBEDDINGS.into(),
        RawTensor {
            shape: vec![x.rows(), x.cols()],
            data: x.as_slice().iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect(),
        },
    ));
    container::write(path, &c)
}

pub fn load_embeddings<T: Scalar>(path: impl AsRef<Path>) -> Result<Matrix<T>> {
    let c = container::read(path)?;
    let t = c.tensor(EMBEDDINGS).ok_or_else(|| Error::Tensor {
        tensor: EMBEDDINGS.into(),
        reason: "missing from calibration container".into(),
    })?;
    let [rows, cols] = t.shape[..] else {
        return Err(Error::Tensor {
            tensor: EMBEDDINGS.into(),
            reason: format!("expected a matrix, got shape {:?}", t.shape),
        });
    };
    Matrix::new(rows, cols, t.data.iter().map(|&v| T::from(v).unwrap()).collect())
}

/// Samples `n_batches` disjoint batches of `s_per_batch` rows without
/// replacement, deterministically from `seed`.
pub fn sample_batches<T: Scalar>(
    x: &Matrix<T>,
    s_per_batch: usize,
    n_batches: usize,
    seed: u64,
    source: &str,
) -> Result<Vec<CalibrationBatch<T>>> {
    let needed = s_per_batch * n_batches;
    if needed > x.rows() {
        return Err(Error::Config(format!(
            "requested {needed} calibration rows but only {} are available",
            x.rows()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = rand::seq::index::sample(&mut rng, x.rows(), needed).into_vec();
    picked
        .chunks(s_per_batch.max(1))
        .take(n_batches)
        .enumerate()
        .map(|(b, rows)| CalibrationBatch::new(x.select_rows(rows), format!("{source}#{b}")))
        .collect()
}

pub fn load_calibration<T: Scalar>(
    path: impl AsRef<Path>,
    s_per_batch: usize,
    n_batches: usize,
    seed: u64,
) -> Result<Vec<CalibrationBatch<T>>> {
    let path = path.as_ref();
    let x = load_embeddings(path)?;
    let source = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    sample_batches(&x, s_per_batch, n_batches, seed, &source)
}
