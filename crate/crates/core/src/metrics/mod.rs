//! Evaluation metrics: feature distances, MS-SSIM, localized crops and the
//! planar embedding.

pub mod distance;
pub mod embed;
pub mod eval;
pub mod features;
pub mod ssim;

pub use distance::{fid, mmd, mmd_permutation_threshold, MmdResult};
pub use embed::{ellipse_fit, mds_embed, Ellipse, Embedding};
pub use eval::{evaluate, evaluate_sets, localized_crop, union_bbox, EmbeddingData, EvalConfig, MethodPoints, MetricsReport};
pub use features::{FeatureExtractor, FeatureSet, FEATURE_WIDTH};
pub use ssim::{ms_ssim, ms_ssim_pairs, ms_ssim_scales, usable_scales, PairScore};
