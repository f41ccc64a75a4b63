//! Distribution-guided data-free knowledge distillation for semantic
//! segmentation, at desk scale.
//!
//! The crate trains a toy teacher on a synthetic labeled corpus, harvests the
//! teacher's batch-normalization running statistics, scores an unlabeled
//! open-world corpus by how closely each sample's feature statistics match
//! those references, and distills a student with per-sample weights that
//! ramp toward uniform over the first half of training. Random and
//! confidence-based sampling plus unweighted distillation are included as
//! baselines.
//!
//! Everything is deterministic given its seeds: corpora, initialization,
//! batch order, selections, checkpoints and reports reproduce byte-for-byte
//! on one platform.

pub mod batchnorm;
pub mod checkpoint;
pub mod corpus;
pub mod distill;
pub mod entropy;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod layer;
pub mod loss;
pub mod nets;
pub mod ops;
pub mod optim;
pub mod parallel;
pub mod rng;
pub mod sampler;
pub mod scalar;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::Tensor;
