//! Multityped deep belief networks.
//!
//! Each feature view of an object (real-valued, count or binary) is modelled
//! by its own typed RBM; the views' hidden posteriors are fused by a joint
//! binary RBM, and the resulting two-layer network is fine-tuned against any
//! mix of typed supervised tasks. The crate also carries the retrieval and
//! multilabel evaluation used to judge the learned embeddings.

pub mod data;
pub mod error;
pub mod finetune;
pub mod heads;
mod math;
pub mod metrics;
pub mod rbm;
pub mod stack;

pub use data::{Dataset, DatasetManifest, Splits, TargetColumn, View};
pub use error::{Error, Result};
pub use finetune::{FinetuneConfig, GradientBundle, Optimizer};
pub use heads::{Prediction, TaskHead, TaskKind, TaskTarget};
pub use math::{sigmoid, softplus};
pub use metrics::{EvalReport, RelevanceJudge, RetrievalSettings};
pub use rbm::{RbmParams, SparseCdConfig, UnitType, VisibleBatch};
pub use stack::{DeepNet, ViewSpec};

/// Version tag written into every manifest and container.
pub const FORMAT: &str = "mtdbn/1";
