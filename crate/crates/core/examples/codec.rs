//! Train the vector-quantized codec briefly and inspect reconstructions.
//!
//! `cargo run --release --example codec -- 40` trains for 40 steps.

use lad::codec::{train_codec_on, CodecConfig};
use lad::phantom::{generate_phantom, truncate_normalize, PhantomSpec, WINDOW_HI, WINDOW_LO};
use lad::volume::Dims;

fn main() -> anyhow::Result<()> {
    let steps: u64 = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(20);
    let spec = PhantomSpec {
        dims: Dims::new(16, 32, 32),
        ..PhantomSpec::default()
    };
    let mut vols = Vec::new();
    let mut masks = Vec::new();
    for seed in 0..6 {
        let (raw, m) = generate_phantom(seed, &spec)?;
        vols.push(truncate_normalize(&raw, WINDOW_LO, WINDOW_HI, spec.spacing, format!("p{seed}"))?);
        masks.push(m);
    }
    let out = tempfile::tempdir()?;
    let config = CodecConfig {
        steps,
        checkpoint_every: steps,
        disc_start: steps / 2,
        ..CodecConfig::default()
    };
    let ck = train_codec_on(vols.clone(), masks, out.path(), &config)?;
    let (_, log) = lad::checkpoint::read_loss_log(out.path())?;
    if let (Some(first), Some(last)) = (log.first(), log.last()) {
        println!("total loss {:.4} at step {} -> {:.4} at step {}", first.1[0], first.0, last.1[0], last.0);
    }
    let latent = ck.codec.encode(&vols[0])?;
    println!("latent grid: {} channels over {:?}", latent.channels(), latent.spatial());
    for v in &vols {
        let r = ck.codec.reconstruct(v)?;
        let mae = (r.data() - v.data()).mapv(f32::abs).mean().unwrap_or(f32::NAN);
        println!("{}: reconstruction MAE {mae:.4}", v.id);
    }
    Ok(())
}
