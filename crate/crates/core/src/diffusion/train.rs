//! Denoiser fitting on quantized codec latents.

use std::path::Path;

use lad_tensor::nn::Bind;
use lad_tensor::{Adam, AdamConfig, Graph, ParamStore, Tensor};
use log::{info, warn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::schedule::{make_schedule, NoiseSchedule, ScheduleKind, VarianceKind};
use super::unet::{Denoiser, UNetConfig};
use crate::checkpoint::{self, LossLog, Meta};
use crate::codec::model::volumes_to_batch;
use crate::codec::Codec;
use crate::condition::{self, condition_dropout, ConditionInput, StructureNorm};
use crate::error::{LadError, Result};
use crate::hashing;
use crate::seeds;
use crate::volume::{LabelMask, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionConfig {
    pub timesteps: usize,
    pub schedule: ScheduleKind,
    pub variance: VarianceKind,
    pub unet: UNetConfig,
    pub p_uncond: f64,
    pub structure_norm: StructureNorm,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub checkpoint_every: u64,
    pub seed: u64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            timesteps: 300,
            schedule: ScheduleKind::Linear,
            variance: VarianceKind::Beta,
            unet: UNetConfig::default(),
            p_uncond: 0.25,
            structure_norm: StructureNorm::Log,
            lr: 1e-3,
            batch_size: 4,
            steps: 500,
            checkpoint_every: 100,
            seed: 0,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.timesteps < 2 {
            return Err(LadError::Config(format!("timesteps must be >= 2, got {}", self.timesteps)));
        }
        if !(0.0..=1.0).contains(&self.p_uncond) {
            return Err(LadError::Config(format!("p_uncond {} outside [0, 1]", self.p_uncond)));
        }
        if self.batch_size == 0 {
            return Err(LadError::Config("diffusion batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(LadError::Config("diffusion lr must be positive".into()));
        }
        Ok(())
    }

    /// Model hash excluding the step budget and checkpoint cadence.
    pub fn model_hash(&self) -> String {
        let mut c = self.clone();
        c.steps = 0;
        c.checkpoint_every = 0;
        hashing::hash_serialized(&c)
    }
}

/// Per-channel latent statistics used to standardize diffusion targets.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl LatentStats {
    /// From a `[B, C, ...]` tensor.
    pub fn fit(z: &Tensor) -> Self {
        let s = z.shape();
        let (b, c) = (s[0], s[1]);
        let spatial: usize = s[2..].iter().product();
        let d = z.data();
        let mut mean = vec![0f32; c];
        let mut std = vec![1f32; c];
        for ch in 0..c {
            let vals = (0..b).flat_map(|bi| d[(bi * c + ch) * spatial..(bi * c + ch + 1) * spatial].iter());
            let (mut s1, mut s2, mut n) = (0f64, 0f64, 0f64);
            for v in vals {
                s1 += *v as f64;
                s2 += (*v as f64) * (*v as f64);
                n += 1.0;
            }
            let m = s1 / n;
            mean[ch] = m as f32;
            std[ch] = ((s2 / n - m * m).max(0.0).sqrt()).max(1e-3) as f32;
        }
        LatentStats { mean, std }
    }

    /// Standardize a `[B, C, spatial...]` buffer in place.
    pub fn standardize(&self, z: &mut [f32], shape: &[usize]) {
        self.apply(z, shape, |v, m, s| (v - m) / s);
    }

    pub fn unstandardize(&self, z: &mut [f32], shape: &[usize]) {
        self.apply(z, shape, |v, m, s| v * s + m);
    }

    fn apply(&self, z: &mut [f32], shape: &[usize], f: impl Fn(f32, f32, f32) -> f32) {
        let c = shape[1];
        let spatial: usize = shape[2..].iter().product();
        for (i, v) in z.iter_mut().enumerate() {
            let ch = (i / spatial) % c;
            *v = f(*v, self.mean[ch], self.std[ch]);
        }
    }

    pub fn to_store(&self) -> ParamStore {
        let mut p = ParamStore::new();
        p.add("mean", Tensor::new(&[self.mean.len()], self.mean.clone()).expect("1-D"));
        p.add("std", Tensor::new(&[self.std.len()], self.std.clone()).expect("1-D"));
        p
    }

    pub fn from_store(p: &ParamStore) -> Result<Self> {
        let get = |n: &str| {
            p.find(n)
                .map(|id| p.get(id).data().to_vec())
                .ok_or_else(|| LadError::Data(format!("latent stats lack {n}")))
        };
        Ok(LatentStats {
            mean: get("mean")?,
            std: get("std")?,
        })
    }
}

/// Quantized latents `[B, C, d, h, w]` of a set of volumes, in chunks.
pub fn encode_quantized(codec: &Codec, volumes: &[Volume]) -> Result<Tensor> {
    let mut parts = Vec::new();
    for chunk in volumes.chunks(4) {
        let refs: Vec<&Volume> = chunk.iter().collect();
        let z = codec.encode_tensor(volumes_to_batch(&refs)?)?;
        let (_, q) = codec.codebook().assign(z.data(), z.shape())?;
        let s = z.shape().to_vec();
        for i in 0..s[0] {
            let per = q.len() / s[0];
            let mut shape = s.clone();
            shape[0] = 1;
            parts.push(Tensor::new(&shape, q[i * per..(i + 1) * per].to_vec())?);
        }
    }
    Ok(Tensor::stack_batch(&parts)?)
}

pub struct DenoiserCheckpoint {
    pub denoiser: Denoiser,
    pub schedule: NoiseSchedule,
    pub stats: LatentStats,
    pub config: DiffusionConfig,
    pub step: u64,
    pub config_hash: String,
    pub codec_hash: String,
    pub depth: usize,
}

impl DenoiserCheckpoint {
    pub fn load(dir: &Path) -> Result<Self> {
        let (merged, meta) = checkpoint::load_checkpoint(dir)?;
        let config: DiffusionConfig = serde_json::from_str(meta.get("config")?)?;
        let depth: usize = meta.parse_value("depth")?;
        let channels: usize = meta.parse_value("channels")?;
        let mut denoiser = Denoiser::new(config.unet.clone(), channels, depth, 0)?;
        let n = denoiser.params.load_matching(&checkpoint::split_store(&merged, "denoiser"))?;
        if n != denoiser.params.len() {
            return Err(LadError::Data(format!("{}: denoiser checkpoint is incomplete", dir.display())));
        }
        let stats = LatentStats::from_store(&checkpoint::split_store(&merged, "stats"))?;
        let t: usize = meta.parse_value("timesteps")?;
        if t != config.timesteps {
            return Err(LadError::Data(format!("{}: schedule T={t} but config T={}", dir.display(), config.timesteps)));
        }
        Ok(DenoiserCheckpoint {
            schedule: make_schedule(config.timesteps, config.schedule)?,
            denoiser,
            stats,
            step: meta.parse_value("step")?,
            config_hash: meta.get("config_hash")?.to_string(),
            codec_hash: meta.get("codec_hash")?.to_string(),
            depth,
            config,
        })
    }
}

pub struct DiffusionTrainer {
    pub config: DiffusionConfig,
    pub denoiser: Denoiser,
    pub schedule: NoiseSchedule,
    pub stats: LatentStats,
    opt: Adam,
    pub step: u64,
    /// Standardized latents `[N, C, d, h, w]`.
    latents: Tensor,
    conditions: Vec<ConditionInput>,
    codec_hash: String,
    depth: usize,
}

/// One drawn training batch.
pub struct Batch {
    pub indices: Vec<usize>,
    pub timesteps: Vec<usize>,
    pub dropped: Vec<bool>,
    pub noise: Vec<f32>,
}

impl DiffusionTrainer {
    pub fn new(config: DiffusionConfig, codec: &Codec, volumes: &[Volume], masks: &[LabelMask]) -> Result<Self> {
        config.validate()?;
        let (latents, stats, conditions, depth) = prepare(&config, codec, volumes, masks, None)?;
        let denoiser = Denoiser::new(
            config.unet.clone(),
            codec.config.channels,
            depth,
            seeds::derive_seed(config.seed, "diffusion.init", 0),
        )?;
        let opt = Adam::new(&denoiser.params, AdamConfig::with_lr(config.lr as f32));
        Ok(DiffusionTrainer {
            schedule: make_schedule(config.timesteps, config.schedule)?,
            config,
            denoiser,
            stats,
            opt,
            step: 0,
            latents,
            conditions,
            codec_hash: codec.config.model_hash(),
            depth,
        })
    }

    pub fn resume(dir: &Path, config: DiffusionConfig, codec: &Codec, volumes: &[Volume], masks: &[LabelMask]) -> Result<Self> {
        config.validate()?;
        let (merged, meta) = checkpoint::load_checkpoint(dir)?;
        if meta.get("config_hash")? != config.model_hash() || meta.get("codec_hash")? != codec.config.model_hash() {
            return Err(LadError::Config(format!("{}: checkpoint was trained with a different config", dir.display())));
        }
        let stats = LatentStats::from_store(&checkpoint::split_store(&merged, "stats"))?;
        let (latents, stats, conditions, depth) = prepare(&config, codec, volumes, masks, Some(stats))?;
        let mut denoiser = Denoiser::new(config.unet.clone(), codec.config.channels, depth, 0)?;
        denoiser.params.load_matching(&checkpoint::split_store(&merged, "denoiser"))?;
        let opt = Adam::restore(
            &denoiser.params,
            &checkpoint::split_store(&merged, "adam"),
            AdamConfig::with_lr(config.lr as f32),
        )?;
        Ok(DiffusionTrainer {
            schedule: make_schedule(config.timesteps, config.schedule)?,
            denoiser,
            stats,
            opt,
            step: meta.parse_value("step")?,
            latents,
            conditions,
            codec_hash: codec.config.model_hash(),
            depth,
            config,
        })
    }

    pub fn len(&self) -> usize {
        self.conditions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conditions.is_empty()
    }

    /// Batch drawn for `step`: a pure function of `(seed, step)`.
    pub fn draw_batch(&self, step: u64) -> Batch {
        let c = &self.config;
        let mut rng = seeds::rng_for(c.seed, seeds::stream::DIFFUSION, step);
        let indices: Vec<usize> = (0..c.batch_size).map(|_| rng.random_range(0..self.len())).collect();
        let timesteps: Vec<usize> = (0..c.batch_size).map(|_| rng.random_range(0..c.timesteps)).collect();
        let per = self.latents.numel() / self.len();
        let noise: Vec<f32> = (0..c.batch_size * per).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
        let dropped = (0..c.batch_size)
            .map(|i| condition_dropout(c.seed, step, i, c.p_uncond))
            .collect();
        Batch {
            indices,
            timesteps,
            dropped,
            noise,
        }
    }

    /// Noise-prediction loss of a batch and the gradients for the denoiser.
    pub fn loss_and_grads(&self, batch: &Batch) -> Result<(f64, Vec<(lad_tensor::ParamId, Tensor)>)> {
        let s = self.latents.shape().to_vec();
        let per = self.latents.numel() / s[0];
        let n = batch.indices.len();
        let mut zt = Vec::with_capacity(n * per);
        for (k, (&i, &t)) in batch.indices.iter().zip(&batch.timesteps).enumerate() {
            let z0 = &self.latents.data()[i * per..(i + 1) * per];
            zt.extend(self.schedule.q_sample(z0, t, &batch.noise[k * per..(k + 1) * per])?);
        }
        let null = condition::null_condition(s[1], [s[2], s[3], s[4]], self.depth);
        let conds: Vec<&ConditionInput> = batch
            .indices
            .iter()
            .zip(&batch.dropped)
            .map(|(&i, &d)| if d { &null } else { &self.conditions[i] })
            .collect();
        let mut shape = s.clone();
        shape[0] = n;
        let mut g = Graph::new();
        let zv = g.constant(Tensor::new(&shape, zt)?);
        let pred = self.denoiser.forward(&mut g, Bind::train(&self.denoiser.params), zv, &batch.timesteps, &conds)?;
        let target = g.constant(Tensor::new(&shape, batch.noise.clone())?);
        let loss = g.mse(pred, target)?;
        let value = g.value(loss).item() as f64;
        Ok((value, g.backward(loss).for_store(&self.denoiser.params)))
    }

    pub fn train_step(&mut self) -> Result<f64> {
        let batch = self.draw_batch(self.step);
        let (loss, grads) = self.loss_and_grads(&batch)?;
        if !loss.is_finite() || grads.iter().any(|(_, g)| !g.is_finite()) {
            return Err(LadError::NonFinite {
                term: "diffusion loss".into(),
                step: self.step,
            });
        }
        self.opt.step(&mut self.denoiser.params, &grads);
        self.step += 1;
        Ok(loss)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let adam = self.opt.state_store(&self.denoiser.params);
        let stats = self.stats.to_store();
        let mut meta = Meta::default();
        meta.set("step", self.step)
            .set("config_hash", self.config.model_hash())
            .set("codec_hash", &self.codec_hash)
            .set("timesteps", self.config.timesteps)
            .set("depth", self.depth)
            .set("channels", self.denoiser.channels)
            .set("config", serde_json::to_string(&self.config)?);
        checkpoint::save_checkpoint(
            dir,
            &[("denoiser", &self.denoiser.params), ("stats", &stats), ("adam", &adam)],
            &meta,
        )
    }
}

type Prepared = (Tensor, LatentStats, Vec<ConditionInput>, usize);

fn prepare(config: &DiffusionConfig, codec: &Codec, volumes: &[Volume], masks: &[LabelMask], stats: Option<LatentStats>) -> Result<Prepared> {
    if volumes.is_empty() || volumes.len() != masks.len() {
        return Err(LadError::Data(format!(
            "diffusion needs paired volumes and masks, got {} and {}",
            volumes.len(),
            masks.len()
        )));
    }
    let dims = volumes[0].dims();
    for (v, m) in volumes.iter().zip(masks) {
        if v.dims() != dims || m.dims() != dims {
            return Err(LadError::Shape("diffusion volumes and masks must share one shape".into()));
        }
    }
    codec.latent_dims(dims)?;
    let mut latents = encode_quantized(codec, volumes)?;
    let stats = stats.unwrap_or_else(|| LatentStats::fit(&latents));
    let shape = latents.shape().to_vec();
    stats.standardize(latents.data_mut(), &shape);
    let conditions = masks
        .iter()
        .map(|m| condition::condition_input(m, codec, config.structure_norm))
        .collect::<Result<Vec<_>>>()?;
    Ok((latents, stats, conditions, dims.d))
}

pub const LOSS_COLUMNS: [&str; 2] = ["loss", "null_fraction"];

pub fn train_diffusion_on(
    codec: &Codec,
    volumes: &[Volume],
    masks: &[LabelMask],
    out: &Path,
    config: &DiffusionConfig,
) -> Result<DenoiserCheckpoint> {
    let mut trainer = if checkpoint::has_checkpoint(out) {
        match DiffusionTrainer::resume(out, config.clone(), codec, volumes, masks) {
            Ok(t) => {
                info!("diffusion: resuming at step {}", t.step);
                t
            }
            Err(LadError::Config(msg)) => {
                warn!("diffusion: {msg}; starting over");
                DiffusionTrainer::new(config.clone(), codec, volumes, masks)?
            }
            Err(e) => return Err(e),
        }
    } else {
        DiffusionTrainer::new(config.clone(), codec, volumes, masks)?
    };
    let mut log = LossLog::open(out, &LOSS_COLUMNS, trainer.step)?;
    if trainer.step == 0 {
        trainer.save(out)?;
    }
    while trainer.step < config.steps {
        let step = trainer.step;
        let batch = trainer.draw_batch(step);
        let nulls = batch.dropped.iter().filter(|d| **d).count() as f64 / batch.dropped.len() as f64;
        let loss = trainer.train_step()?;
        log.append(step, &[loss, nulls])?;
        if step % 50 == 0 {
            info!("diffusion step {step}: loss {loss:.4}");
        }
        let done = trainer.step;
        if (config.checkpoint_every > 0 && done % config.checkpoint_every == 0) || done == config.steps {
            trainer.save(out)?;
        }
    }
    DenoiserCheckpoint::load(out)
}

/// Train on dataset directories with a trained codec checkpoint.
pub fn train_diffusion(data_dir: &Path, masks_dir: &Path, codec_dir: &Path, out: &Path, config: &DiffusionConfig) -> Result<DenoiserCheckpoint> {
    let codec = crate::codec::CodecCheckpoint::load(codec_dir)?.codec;
    let volumes = crate::dataset::read_volumes(data_dir)?;
    let masks = crate::dataset::read_masks(masks_dir)?;
    train_diffusion_on(&codec, &volumes, &masks, out, config)
}
