//! Fit a small denoiser on codec latents and draw mask-guided samples at
//! several guidance weights.

use lad::codec::{train_codec_on, CodecConfig};
use lad::condition::{condition_input, StructureNorm};
use lad::diffusion::{sample, train_diffusion_on, DiffusionConfig, SampleOptions, UNetConfig};
use lad::metrics::ms_ssim;
use lad::phantom::{generate_phantom, truncate_normalize, PhantomSpec, WINDOW_HI, WINDOW_LO};
use lad::volume::Dims;

fn main() -> anyhow::Result<()> {
    let spec = PhantomSpec {
        dims: Dims::new(16, 32, 32),
        ..PhantomSpec::default()
    };
    let mut vols = Vec::new();
    let mut masks = Vec::new();
    for seed in 0..8 {
        let (raw, m) = generate_phantom(seed, &spec)?;
        vols.push(truncate_normalize(&raw, WINDOW_LO, WINDOW_HI, spec.spacing, format!("p{seed}"))?);
        masks.push(m);
    }
    let codec_dir = tempfile::tempdir()?;
    let codec_cfg = CodecConfig {
        steps: 80,
        checkpoint_every: 80,
        disc_start: 40,
        ..CodecConfig::default()
    };
    let codec = train_codec_on(vols.clone(), masks.clone(), codec_dir.path(), &codec_cfg)?.codec;
    let out = tempfile::tempdir()?;
    let config = DiffusionConfig {
        timesteps: 100,
        unet: UNetConfig {
            base_width: 16,
            embed_dim: 32,
            groups: 4,
        },
        steps: 150,
        checkpoint_every: 150,
        ..DiffusionConfig::default()
    };
    let ck = train_diffusion_on(&codec, &vols, &masks, out.path(), &config)?;
    let (_, log) = lad::checkpoint::read_loss_log(out.path())?;
    let tail: Vec<f64> = log.iter().rev().take(10).map(|r| r.1[0]).collect();
    println!("denoiser at step {}, recent loss {:.4}", ck.step, tail.iter().sum::<f64>() / tail.len() as f64);

    let conds = vec![condition_input(&masks[0], &codec, StructureNorm::Log)?];
    for w in [0.0, 1.0, 3.0] {
        let opts = SampleOptions {
            guidance: w,
            seed: 5,
            ..SampleOptions::default()
        };
        let s = sample(&codec, &ck, &conds, 0, &opts)?;
        let mean = s[0].data().iter().map(|v| *v as f64).sum::<f64>() / s[0].dims().voxels() as f64;
        let recon = codec.reconstruct(&vols[0])?;
        println!(
            "w={w}: mean {mean:.3}, ms-ssim to the reconstruction of its source {:.3}",
            ms_ssim(&s[0], &recon)?
        );
    }
    Ok(())
}
