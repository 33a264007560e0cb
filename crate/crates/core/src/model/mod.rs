//! The learnable pipeline: shared 3D feature extractor, masked-average-pool
//! prototypes, cosine-softmax query prediction over local windows,
//! base-class segmentation head, affine alignment head, and the mask atlas.

pub mod checkpoint;
pub mod config;
pub mod net;
pub mod params;
pub mod proto;

use thiserror::Error;

pub use checkpoint::{load_checkpoint, save_checkpoint, AdamState, Checkpoint};
pub use config::{ModelConfig, Variant};
pub use net::{
    extract_features, forward_episode, forward_supervised, predict_affine, segment_base_classes,
    EpisodeData, EpisodeForward,
};
pub use params::{init_params, parameter_count, ParamSet};
pub use proto::{
    build_atlas, cosine_softmax, local_prototypes, masked_average_pool,
    predict_query_mask_global, predict_query_mask_local, Atlas, Prototype, PrototypeKind,
    WindowGrid,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape error: {0}")]
    ShapeError(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("mask sums to (almost) zero; no prototype can be pooled")]
    EmptyMask,
    #[error("no non-empty window prototype for the {0} kind")]
    NoValidPrototype(&'static str),
    #[error("{0} is disabled in this model config")]
    HeadDisabled(&'static str),
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
