//! Label-preserving spatial augmentation of masks.
//!
//! Every transform resamples with nearest-neighbour lookup so the output
//! alphabet stays `{0, 1, 2}`. Affine and elastic transforms act in-plane
//! (H, W) and are shared (affine) or drawn independently (elastic) per slice.

use ndarray::{Array2, Array3, Axis as NdAxis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{LadError, Result};
use crate::seeds;
use crate::volume::{Axis, LabelMask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentParams {
    pub flip_axes: Vec<Axis>,
    pub flip_probability: f64,
    /// Degrees.
    pub rotation: (f64, f64),
    pub scale: (f64, f64),
    /// Voxels, applied independently on H and W.
    pub translation: (f64, f64),
    /// Maximum displacement in voxels.
    pub elastic_amplitude: f64,
    /// Gaussian smoothing width of the displacement field, voxels.
    pub elastic_sigma: f64,
    pub seed: u64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            flip_axes: vec![Axis::H, Axis::W],
            flip_probability: 0.5,
            rotation: (-15.0, 15.0),
            scale: (0.9, 1.1),
            translation: (-8.0, 8.0),
            elastic_amplitude: 4.0,
            elastic_sigma: 8.0,
            seed: 0,
        }
    }
}

impl AugmentParams {
    /// Parameters under which every transform is the identity.
    pub fn identity(seed: u64) -> Self {
        AugmentParams {
            flip_axes: Vec::new(),
            flip_probability: 0.0,
            rotation: (0.0, 0.0),
            scale: (1.0, 1.0),
            translation: (0.0, 0.0),
            elastic_amplitude: 0.0,
            elastic_sigma: 8.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |name: &str, r: (f64, f64)| {
            if r.0.is_finite() && r.1.is_finite() && r.0 <= r.1 {
                Ok(())
            } else {
                Err(LadError::Config(format!("augment {name} range {r:?} is not ordered")))
            }
        };
        ordered("rotation", self.rotation)?;
        ordered("scale", self.scale)?;
        ordered("translation", self.translation)?;
        if self.scale.0 <= 0.0 {
            return Err(LadError::Config("augment scale must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(LadError::Config("augment flip_probability outside [0, 1]".into()));
        }
        if !(self.elastic_amplitude >= 0.0 && self.elastic_amplitude.is_finite()) {
            return Err(LadError::Config("augment elastic_amplitude must be >= 0".into()));
        }
        if !(self.elastic_sigma > 0.0 && self.elastic_sigma.is_finite()) {
            return Err(LadError::Config("augment elastic_sigma must be > 0".into()));
        }
        Ok(())
    }
}

fn uniform(rng: &mut impl Rng, r: (f64, f64)) -> f64 {
    r.0 + (r.1 - r.0) * rng.random::<f64>()
}

pub fn flip(mask: &LabelMask, axis: Axis) -> LabelMask {
    let mut data = mask.data().clone();
    data.invert_axis(NdAxis(axis.index()));
    LabelMask::new(data.as_standard_layout().to_owned()).expect("flip keeps labels")
}

/// In-plane rotation, isotropic scale and translation about the slice centre,
/// identical for every slice. Out-of-bounds lookups read background.
pub fn random_affine(mask: &LabelMask, params: &AugmentParams, seed: u64) -> LabelMask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let angle = uniform(&mut rng, params.rotation).to_radians();
    let scale = uniform(&mut rng, params.scale);
    let ty = uniform(&mut rng, params.translation);
    let tx = uniform(&mut rng, params.translation);
    if angle == 0.0 && scale == 1.0 && ty == 0.0 && tx == 0.0 {
        return mask.clone();
    }
    let (d, h, w) = mask.data().dim();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = angle.sin_cos();
    let src = mask.data();
    let out = Array3::from_shape_fn((d, h, w), |(z, y, x)| {
        // inverse map: output -> source
        let (py, px) = (y as f64 - cy - ty, x as f64 - cx - tx);
        let sy = (cos * py + sin * px) / scale + cy;
        let sx = (-sin * py + cos * px) / scale + cx;
        let (ry, rx) = (sy.round(), sx.round());
        if ry >= 0.0 && rx >= 0.0 && (ry as usize) < h && (rx as usize) < w {
            src[[z, ry as usize, rx as usize]]
        } else {
            0
        }
    });
    LabelMask::new(out).expect("nearest lookup keeps labels")
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect()
}

/// Separable Gaussian blur with kernel renormalization at the borders.
fn smooth(field: &Array2<f64>, kernel: &[f64]) -> Array2<f64> {
    let (h, w) = field.dim();
    let r = (kernel.len() / 2) as isize;
    let pass = |src: &Array2<f64>, along_y: bool| {
        Array2::from_shape_fn((h, w), |(y, x)| {
            let (mut acc, mut norm) = (0.0, 0.0);
            for (k, kv) in kernel.iter().enumerate() {
                let o = k as isize - r;
                let (yy, xx) = if along_y { (y as isize + o, x as isize) } else { (y as isize, x as isize + o) };
                if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                    acc += kv * src[[yy as usize, xx as usize]];
                    norm += kv;
                }
            }
            acc / norm
        })
    };
    pass(&pass(field, true), false)
}

/// Per-slice smooth random displacement. The smoothed field is rescaled so
/// its largest component equals the configured amplitude.
pub fn elastic_deform(mask: &LabelMask, params: &AugmentParams, seed: u64) -> LabelMask {
    if params.elastic_amplitude == 0.0 {
        return mask.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, h, w) = mask.data().dim();
    let kernel = gaussian_kernel(params.elastic_sigma);
    let mut out = Array3::<u8>::zeros((d, h, w));
    for z in 0..d {
        let mut fields = [0, 1].map(|_| {
            let noise = Array2::from_shape_fn((h, w), |_| rng.random::<f64>() * 2.0 - 1.0);
            smooth(&noise, &kernel)
        });
        let peak = fields
            .iter()
            .flat_map(|f| f.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()));
        if peak > 0.0 {
            let k = params.elastic_amplitude / peak;
            for f in fields.iter_mut() {
                f.mapv_inplace(|v| v * k);
            }
        }
        let src = mask.data().index_axis(NdAxis(0), z);
        let mut dst = out.index_axis_mut(NdAxis(0), z);
        for y in 0..h {
            for x in 0..w {
                let sy = (y as f64 + fields[0][[y, x]]).round();
                let sx = (x as f64 + fields[1][[y, x]]).round();
                if sy >= 0.0 && sx >= 0.0 && (sy as usize) < h && (sx as usize) < w {
                    dst[[y, x]] = src[[sy as usize, sx as usize]];
                }
            }
        }
    }
    LabelMask::new(out).expect("nearest lookup keeps labels")
}

/// One augmented mask per output index: pick a source, then flip, affine,
/// elastic, each driven by seeds derived from `(params.seed, index)`.
pub fn augment_one(masks: &[LabelMask], params: &AugmentParams, index: usize) -> Result<LabelMask> {
    if masks.is_empty() {
        return Err(LadError::Data("cannot augment an empty maskset".into()));
    }
    let mut rng = seeds::rng_for(params.seed, seeds::stream::AUGMENT, index as u64);
    let source = rng.random_range(0..masks.len());
    let mut m = masks[source].clone();
    for axis in &params.flip_axes {
        if rng.random::<f64>() < params.flip_probability {
            m = flip(&m, *axis);
        }
    }
    let affine_seed = rng.random::<u64>();
    let elastic_seed = rng.random::<u64>();
    m = random_affine(&m, params, affine_seed);
    Ok(elastic_deform(&m, params, elastic_seed))
}

pub fn augment_maskset(masks: &[LabelMask], n_out: usize, params: &AugmentParams) -> Result<Vec<LabelMask>> {
    params.validate()?;
    if n_out == 0 {
        return Err(LadError::Config("augment count must be >= 1".into()));
    }
    (0..n_out).map(|i| augment_one(masks, params, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Dims;

    fn blob(dims: Dims) -> LabelMask {
        let mut a = Array3::<u8>::zeros((dims.d, dims.h, dims.w));
        for z in 0..dims.d {
            for y in 4..10 {
                for x in 3..12 {
                    a[[z, y, x]] = if y == 6 && x == 6 { 2 } else { 1 };
                }
            }
        }
        LabelMask::new(a).unwrap()
    }

    #[test]
    fn flip_is_an_involution_and_preserves_counts() {
        let m = blob(Dims::new(3, 16, 16));
        for axis in Axis::ALL {
            let f = flip(&m, axis);
            assert_eq!(f.count(1), m.count(1));
            assert_eq!(flip(&f, axis), m);
        }
        assert_ne!(flip(&m, Axis::W), m);
    }

    #[test]
    fn identity_params_leave_masks_alone() {
        let m = blob(Dims::new(2, 16, 16));
        let p = AugmentParams::identity(3);
        assert_eq!(random_affine(&m, &p, 9), m);
        assert_eq!(elastic_deform(&m, &p, 9), m);
    }

    #[test]
    fn pure_translation_shifts_pattern() {
        let m = blob(Dims::new(1, 16, 16));
        let mut p = AugmentParams::identity(0);
        p.translation = (2.0, 2.0);
        let t = random_affine(&m, &p, 0);
        assert_eq!(t.data()[[0, 6, 5]], 1);
        assert_eq!(t.data()[[0, 8, 8]], 2);
        assert_eq!(t.count(1), m.count(1));
    }

    #[test]
    fn elastic_displacement_is_bounded_by_amplitude() {
        // a single-pixel mask moves by at most `amplitude` (plus rounding)
        let mut a = Array3::<u8>::zeros((1, 24, 24));
        for y in 8..16 {
            for x in 8..16 {
                a[[0, y, x]] = 1;
            }
        }
        let m = LabelMask::new(a).unwrap();
        let mut p = AugmentParams::identity(0);
        p.elastic_amplitude = 2.0;
        let e = elastic_deform(&m, &p, 5);
        for ((_, y, x), v) in e.data().indexed_iter() {
            if *v == 1 {
                assert!((5..19).contains(&y) && (5..19).contains(&x), "({y},{x})");
            }
        }
    }

    #[test]
    fn maskset_is_reproducible() {
        let masks = vec![blob(Dims::new(2, 16, 16))];
        let p = AugmentParams::default();
        let a = augment_maskset(&masks, 5, &p).unwrap();
        assert_eq!(a, augment_maskset(&masks, 5, &p).unwrap());
        assert!(augment_maskset(&[], 1, &p).is_err());
    }
}
