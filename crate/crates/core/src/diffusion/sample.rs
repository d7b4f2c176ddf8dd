//! Guided ancestral sampling in latent space, then decoding.

use lad_tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::schedule::{combine_cfg, NoiseSchedule, VarianceKind};
use super::train::DenoiserCheckpoint;
use super::unet::Denoiser;
use crate::codec::model::tensor_to_volume;
use crate::codec::Codec;
use crate::condition::{self, ConditionInput, StructureNorm};
use crate::error::{LadError, Result};
use crate::seeds;
use crate::volume::{LabelMask, Volume};

#[derive(Clone, Debug, PartialEq)]
pub struct SampleOptions {
    pub guidance: f64,
    pub seed: u64,
    /// Snap the final latent to the codebook before decoding.
    pub quantize: bool,
    /// Samples per denoiser call.
    pub batch: usize,
    pub variance: Option<VarianceKind>,
}

impl Default for SampleOptions {
    fn default() -> Self {
        SampleOptions {
            guidance: 1.0,
            seed: 0,
            quantize: true,
            batch: 4,
            variance: None,
        }
    }
}

/// Guided noise prediction for a batch.
///
/// `w = 0` runs the conditional pass alone. Null items get the plain
/// unconditional prediction whatever `w` is.
pub fn cfg_predict(denoiser: &Denoiser, z_t: &Tensor, ts: &[usize], conds: &[&ConditionInput], w: f64) -> Result<Tensor> {
    let s = z_t.shape().to_vec();
    let n = s[0];
    if w == 0.0 || conds.iter().all(|c| c.is_null) {
        return denoiser.predict(z_t.clone(), ts, conds);
    }
    let null = condition::null_condition(s[1], [s[2], s[3], s[4]], denoiser.structure_len / 6);
    let mut both = z_t.data().to_vec();
    both.extend_from_slice(z_t.data());
    let mut shape2 = s.clone();
    shape2[0] = 2 * n;
    let mut ts2 = ts.to_vec();
    ts2.extend_from_slice(ts);
    let mut conds2: Vec<&ConditionInput> = conds.to_vec();
    conds2.extend(std::iter::repeat_n(&null, n));
    let out = denoiser.predict(Tensor::new(&shape2, both)?, &ts2, &conds2)?;
    let half = out.numel() / 2;
    let (ec, eu) = out.data().split_at(half);
    let per = half / n;
    let mut data = Vec::with_capacity(half);
    for (k, c) in conds.iter().enumerate() {
        let r = k * per..(k + 1) * per;
        if c.is_null {
            data.extend_from_slice(&eu[r]);
        } else {
            data.extend(combine_cfg(&ec[r.clone()], &eu[r], w));
        }
    }
    Ok(Tensor::new(&s, data)?)
}

/// Ancestral reverse chain from `T−1` down to `0` over a batch.
///
/// Item `k` draws its start and its step noise from `rngs[k]` only, so a
/// sample does not depend on how the batch is chunked. `predict` maps
/// `(z_t, t)` to the noise estimate.
pub fn reverse_chain<F>(
    schedule: &NoiseSchedule,
    per_item: usize,
    rngs: &mut [ChaCha8Rng],
    variance: VarianceKind,
    mut predict: F,
) -> Result<Vec<f64>>
where
    F: FnMut(&[f64], usize) -> Result<Vec<f64>>,
{
    let mut z: Vec<f64> = Vec::with_capacity(rngs.len() * per_item);
    for r in rngs.iter_mut() {
        z.extend((0..per_item).map(|_| r.sample::<f64, _>(StandardNormal)));
    }
    for t in (0..schedule.len()).rev() {
        let eps = predict(&z, t)?;
        let noise: Vec<f64> = if t == 0 {
            vec![0.0; z.len()]
        } else {
            let mut v = Vec::with_capacity(z.len());
            for r in rngs.iter_mut() {
                v.extend((0..per_item).map(|_| r.sample::<f64, _>(StandardNormal)));
            }
            v
        };
        z = schedule.reverse_step(&z, &eps, t, &noise, variance)?;
        if z.iter().any(|v| !v.is_finite()) {
            return Err(LadError::NonFinite {
                term: "reverse chain".into(),
                step: t as u64,
            });
        }
    }
    Ok(z)
}

/// Latents `[N, C, d, h, w]` in codec units for the given conditions; the
/// sample with global index `first + k` is seeded by that index.
pub fn sample_latents(ckpt: &DenoiserCheckpoint, conds: &[ConditionInput], first: usize, opts: &SampleOptions) -> Result<Tensor> {
    let den = &ckpt.denoiser;
    let c = den.channels;
    let Some(c0) = conds.first() else {
        return Ok(Tensor::zeros(&[0]));
    };
    let grid = c0.encoded.shape().to_vec();
    if grid.len() != 4 {
        return Err(LadError::Shape(format!("condition content {grid:?} is not [C,d,h,w]")));
    }
    let latent = [grid[1], grid[2], grid[3]];
    for cond in conds {
        condition::check_condition(cond, c, latent)?;
    }
    let per = c * latent.iter().product::<usize>();
    let variance = opts.variance.unwrap_or(ckpt.config.variance);
    let mut out = Vec::with_capacity(conds.len() * per);
    for (chunk_idx, chunk) in conds.chunks(opts.batch.max(1)).enumerate() {
        let base = first + chunk_idx * opts.batch.max(1);
        let mut rngs: Vec<ChaCha8Rng> = (0..chunk.len())
            .map(|k| seeds::rng_for(opts.seed, seeds::stream::SAMPLE, (base + k) as u64))
            .collect();
        let refs: Vec<&ConditionInput> = chunk.iter().collect();
        let shape = [chunk.len(), c, latent[0], latent[1], latent[2]];
        let z = reverse_chain(&ckpt.schedule, per, &mut rngs, variance, |z, t| {
            let zt = Tensor::new(&shape, z.iter().map(|v| *v as f32).collect())?;
            let ts = vec![t; chunk.len()];
            let e = cfg_predict(den, &zt, &ts, &refs, opts.guidance)?;
            Ok(e.data().iter().map(|v| *v as f64).collect())
        })?;
        out.extend(z.iter().map(|v| *v as f32));
    }
    let shape = [conds.len(), c, latent[0], latent[1], latent[2]];
    ckpt.stats.unstandardize(&mut out, &shape);
    Ok(Tensor::new(&shape, out)?)
}

/// Decoded volumes for the given conditions.
pub fn sample(codec: &Codec, ckpt: &DenoiserCheckpoint, conds: &[ConditionInput], first: usize, opts: &SampleOptions) -> Result<Vec<Volume>> {
    if codec.config.channels != ckpt.denoiser.channels {
        return Err(LadError::Shape(format!(
            "codec has {} latent channels, denoiser expects {}",
            codec.config.channels, ckpt.denoiser.channels
        )));
    }
    let z = sample_latents(ckpt, conds, first, opts)?;
    let mut vols = Vec::with_capacity(conds.len());
    for i in 0..conds.len() {
        let mut zi = z.batch_item(i);
        if opts.quantize {
            let (_, q) = codec.codebook().assign(zi.data(), zi.shape())?;
            zi = Tensor::new(zi.shape(), q)?;
        }
        let x = codec.decode_tensor(zi)?;
        let s = x.shape().to_vec();
        let x = x.reshape(&s[2..])?;
        vols.push(tensor_to_volume(&x, codec.spacing, &format!("sample_{:04}", first + i))?);
    }
    Ok(vols)
}

/// Samples steered by masks; `masks[i]` conditions sample `first + i`.
pub fn sample_for_masks(
    codec: &Codec,
    ckpt: &DenoiserCheckpoint,
    masks: &[LabelMask],
    first: usize,
    norm: StructureNorm,
    opts: &SampleOptions,
) -> Result<Vec<Volume>> {
    let conds = masks
        .iter()
        .map(|m| condition::condition_input(m, codec, norm))
        .collect::<Result<Vec<_>>>()?;
    sample(codec, ckpt, &conds, first, opts)
}

/// Unconditional samples from the null condition.
pub fn sample_unconditional(codec: &Codec, ckpt: &DenoiserCheckpoint, count: usize, dims: crate::volume::Dims, opts: &SampleOptions) -> Result<Vec<Volume>> {
    let l = codec.latent_dims(dims)?;
    let null = condition::null_condition(codec.config.channels, [l.d, l.h, l.w], dims.d);
    sample(codec, ckpt, &vec![null; count], 0, opts)
}
