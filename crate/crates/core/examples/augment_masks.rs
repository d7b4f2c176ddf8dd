//! Expand a small maskset with flips, affine warps and elastic deformation.

use lad::augment::{augment_maskset, AugmentParams};
use lad::phantom::{generate_phantom, PhantomSpec};
use lad::topo::structure_vector_volume;
use lad::volume::{LabelMask, ORGAN, TUMOR};

fn main() -> anyhow::Result<()> {
    let spec = PhantomSpec::default();
    let masks: Vec<LabelMask> = (0..4).map(|s| generate_phantom(s, &spec).map(|p| p.1)).collect::<Result<_, _>>()?;
    let params = AugmentParams {
        seed: 42,
        ..AugmentParams::default()
    };
    let out = augment_maskset(&masks, 12, &params)?;
    for (i, m) in out.iter().enumerate() {
        let topo = structure_vector_volume(m);
        let components: u32 = (0..m.dims().d).map(|z| topo.slice(z)[2]).max().unwrap_or(0);
        println!(
            "aug {i:>2}: organ {:>6} tumor {:>5} max organ components per slice {components}",
            m.count(ORGAN),
            m.count(TUMOR)
        );
    }
    let again = augment_maskset(&masks, 12, &params)?;
    println!("reproducible: {}", again == out);
    Ok(())
}
