//! Registration-assisted prototypical few-shot segmentation for 3D volumes,
//! exercised end-to-end on a synthetic multi-institution phantom dataset.
//!
//! The pipeline: a shared 3D UNet encodes support and query volumes; class
//! and background prototypes are masked-average-pooled from the support
//! features inside overlapping 3D windows; each query voxel is classified by
//! a two-way softmax over maximum cosine similarities to those prototypes.
//! An optional alignment module (base-class segmentation head + affine head)
//! registers both subjects to a mask atlas before matching and warps the
//! prediction back afterwards.

pub mod episodes;
pub mod eval;
pub mod geom;
pub mod model;
pub mod nn;
pub mod phantom;
pub mod train;
pub mod util;

pub use episodes::{
    augment, enumerate_eval_episodes, fold_novel_classes, make_splits, sample_training_episode,
    AugmentRanges, EpisodeError, EpisodeSpec, SplitSpec, SupportScenario,
};
pub use eval::{
    count_parameters, dice_score, evaluate, paired_dice_diffs, paired_significance,
    permutation_pvalue, report, summarize, EpisodeResult, EvalError, ScenarioSummary, Summary,
};
pub use geom::{
    compose, invert, warp_feature_map, warp_mask, warp_volume, AffineTransform, FeatureMap,
    GeomError, Interpolation, MaskVolume, Volume,
};
pub use model::{
    build_atlas, cosine_softmax, extract_features, forward_episode, masked_average_pool,
    predict_affine, predict_query_mask_global, predict_query_mask_local, segment_base_classes,
    Atlas, Checkpoint, EpisodeData, ModelConfig, ModelError, ParamSet, Prototype, Variant,
    WindowGrid,
};
pub use phantom::{
    generate_dataset, generate_subject, load_dataset, load_manifest, load_subject, save_subject,
    Dataset, DatasetManifest, GenerationConfig, LabeledSubject, PhantomError,
};
pub use train::{dice_loss_value, train, train_supervised, LossReport, TrainConfig, TrainError};
