//! Generate a few phantoms, window them and cut depth crops.

use lad::phantom::{generate_phantom, resample, sliding_window_crop, truncate_normalize, PhantomSpec, WINDOW_HI, WINDOW_LO};
use lad::volume::{ORGAN, TUMOR};

fn main() -> anyhow::Result<()> {
    let spec = PhantomSpec::default();
    for seed in 0..4 {
        let (raw, mask) = generate_phantom(seed, &spec)?;
        let vol = truncate_normalize(&raw, WINDOW_LO, WINDOW_HI, spec.spacing, format!("phantom_{seed}"))?;
        let mean = vol.data().iter().map(|v| *v as f64).sum::<f64>() / vol.dims().voxels() as f64;
        println!(
            "seed {seed}: {} voxels, organ {}, tumor {}, mean intensity {mean:.3}",
            vol.dims(),
            mask.count(ORGAN),
            mask.count(TUMOR)
        );
        let crops = sliding_window_crop(&vol, &mask, 16, 8)?;
        let with_organ = crops.iter().filter(|c| c.has_organ).count();
        println!("  {} crops of depth 16, {with_organ} contain organ", crops.len());
        let (iso, iso_mask) = resample(&vol, &mask, [2.0, 2.0, 2.0])?;
        println!("  resampled to 2 mm: {} (organ {})", iso.dims(), iso_mask.count(ORGAN));
    }
    Ok(())
}
