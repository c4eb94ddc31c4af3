//! Training-time feature-distribution matching for classifiers, from scratch:
//! a float64 autodiff tape, Gaussian-kernel maximum mean discrepancy with a
//! median-bandwidth mixture, the matching training objective and its
//! baselines, small MLP/CNN models, IDX/CSV/synthetic data handling, a
//! deterministic SGD trainer, and a diagnostics suite that checks the
//! implementation against closed-form gradient identities.

pub mod checkpoint;
pub mod compare;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod graph;
pub mod kernels;
pub mod losses;
pub mod models;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{finite_diff, BnBatchStats, Gradients, Graph, NodeId};
pub use tensor::Tensor;
