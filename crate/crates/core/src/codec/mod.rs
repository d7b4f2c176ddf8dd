//! Vector-quantized 3D autoencoder and its training objective.

pub mod loss;
pub mod model;
pub mod quantize;
pub mod train;

pub use loss::{locality_loss, locality_loss_value, mask_bbox, total_loss, GlobalTerms, LossBreakdown, TermWeights};
pub use model::{check_divisible, Codec, CodecConfig, Discriminator, LocalityMode};
pub use quantize::{quantize, Codebook, LatentGrid};
pub use train::{train_codec, train_codec_on, CodecCheckpoint, CodecTrainer};
