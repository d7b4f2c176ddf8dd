//! Compare phantom sets with holistic and localized distances, then embed
//! their features in 2-D and fit one ellipse per set.

use lad::metrics::{evaluate_sets, EvalConfig};
use lad::phantom::{generate_phantom, truncate_normalize, PhantomSpec, WINDOW_HI, WINDOW_LO};
use lad::volume::{Dims, LabelMask, Volume};

fn set(seeds: std::ops::Range<u64>, spec: &PhantomSpec) -> anyhow::Result<(Vec<Volume>, Vec<LabelMask>)> {
    let mut vols = Vec::new();
    let mut masks = Vec::new();
    for seed in seeds {
        let (raw, m) = generate_phantom(seed, spec)?;
        vols.push(truncate_normalize(&raw, WINDOW_LO, WINDOW_HI, spec.spacing, format!("p{seed}"))?);
        masks.push(m);
    }
    Ok((vols, masks))
}

fn main() -> anyhow::Result<()> {
    let spec = PhantomSpec {
        dims: Dims::new(16, 32, 32),
        ..PhantomSpec::default()
    };
    let (real, masks) = set(0..12, &spec)?;
    let (same, _) = set(100..112, &spec)?;
    let noisy_spec = PhantomSpec {
        noise_hu: 250.0,
        ..spec.clone()
    };
    let (noisy, _) = set(200..212, &noisy_spec)?;
    let cfg = EvalConfig {
        n_pairs: 40,
        ..EvalConfig::default()
    };
    for (name, synth) in [("same distribution", &same), ("heavy noise", &noisy)] {
        let (r, emb) = evaluate_sets(&real, synth, &masks, &cfg)?;
        println!("{name}:");
        println!("  fid holistic {:.5} localized {:.5}", r.fid_holistic.unwrap_or(f64::NAN), r.fid_localized.unwrap_or(f64::NAN));
        println!("  mmd holistic {:.5} localized {:.5}", r.mmd_holistic.unwrap_or(f64::NAN), r.mmd_localized.unwrap_or(f64::NAN));
        println!("  ms-ssim over {} pairs {:.4}", r.pair_count, r.ms_ssim.unwrap_or(f64::NAN));
        for (m, pts, el) in &emb.methods {
            match el {
                Some(e) => println!("  {m}: {} points, ellipse axes ({:.3}, {:.3})", pts.len(), e.semi_axes[0], e.semi_axes[1]),
                None => println!("  {m}: {} points, no ellipse", pts.len()),
            }
        }
    }
    Ok(())
}
