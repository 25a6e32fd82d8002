//! Task-agnostic pruning of sparse mixture-of-experts layers.
//!
//! Experts in each layer are compared through a representation (their
//! outputs on a shared calibration batch, their flattened weights, or a
//! surrogate `d_model × d_model` weight), the resulting similarity graph is
//! partitioned into `r` groups, and each group is merged in weight space
//! together with its router rows.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`). Model files
//! are float32; analysis normally runs on [`Real`] = `f64`.

pub mod error;
pub mod grouping;
pub mod io;
pub mod linalg;
pub mod matrix;
pub mod merging;
pub mod model;
pub mod pipeline;
pub mod scalar;
pub mod similarity;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use model::{
    expert_forward, layer_forward, model_forward, route, Activation, ExpertParams, LayerVisits, MoELayer, MoEModel,
    VisitCounter,
};
pub use scalar::Scalar;

/// Working precision for analysis and pruning.
pub type Real = f64;

/// Storage precision of model containers.
pub type Storage = f32;

pub type Model = MoEModel<Real>;
pub type Layer = MoELayer<Real>;
pub type Expert = ExpertParams<Real>;
pub type RealMatrix = Matrix<Real>;
pub type StoredModel = MoEModel<Storage>;
pub type Batch = io::CalibrationBatch<Real>;
pub type Similarity = similarity::SimilarityMatrix<Real>;
