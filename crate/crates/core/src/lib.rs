//! Triplet-loss metric learning for image descriptors: a small embedding
//! network trained with batch-all triplet loss, PCA reduction and
//! nearest-neighbour retrieval scored by ANMRR, mAP and P@k.

mod error;

pub mod dataio;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod reduce;
pub mod retrieval;
pub mod sampler;
pub mod trainer;

pub use error::{Error, Result};

/// Dense class index, assigned in sorted label order.
pub type ClassId = u32;

pub use dataio::{Dataset, EmbeddingRecord, Payload, Record, Split};
pub use loss::{batch_all_loss, LossResult, Normalization, TripletBatchView};
pub use metrics::{evaluate, MetricsReport};
pub use model::{forward, init_params, InputKind, ModelConfig, ParamSet};
pub use numerics::{FeatureMap, Matrix};
pub use reduce::{pca_fit, pca_transform, PcaModel};
pub use retrieval::{build_index, EmbeddingIndex};
pub use trainer::{train, AdamConfig, TrainConfig};
