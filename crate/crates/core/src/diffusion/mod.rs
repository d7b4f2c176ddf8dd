//! Conditional latent diffusion: schedule, denoiser, training and sampling.

pub mod sample;
pub mod schedule;
pub mod train;
pub mod unet;

pub use sample::{cfg_predict, reverse_chain, sample, sample_for_masks, sample_latents, sample_unconditional, SampleOptions};
pub use schedule::{combine_cfg, make_schedule, NoiseSchedule, ScheduleKind, VarianceKind};
pub use train::{train_diffusion, train_diffusion_on, DenoiserCheckpoint, DiffusionConfig, DiffusionTrainer, LatentStats};
pub use unet::{Denoiser, UNetConfig};
