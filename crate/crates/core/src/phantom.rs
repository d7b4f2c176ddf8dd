//! Synthetic abdomen-like CT phantoms and the intensity/geometry preprocessing
//! applied to every training volume.
//!
//! A phantom is an elliptical body cross-section in soft-tissue intensity,
//! a bony disc behind it, an organ built from a chain of overlapping
//! ellipsoids (label 1) and optional tumor spheres clipped to the organ
//! (label 2). Raw intensities are Hounsfield-like.

use ndarray::{s, Array3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{LadError, Result};
use crate::seeds;
use crate::volume::{Dims, LabelMask, Volume, ORGAN, TUMOR};

/// Raw (Hounsfield-like) volume before windowing.
pub type RawVolume = Array3<f32>;

/// Default HU window.
pub const WINDOW_LO: f32 = -1000.0;
pub const WINDOW_HI: f32 = 400.0;

/// Minimum organ semi-axis in voxels.
const MIN_RADIUS: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: Dims,
    /// mm per voxel, `(D, H, W)`.
    pub spacing: [f64; 3],
    /// Inclusive range for the number of ellipsoid lobes forming the organ.
    pub organ_lobes: (usize, usize),
    /// Inclusive range for the number of tumor blobs when a tumor is present.
    pub tumor_count: (usize, usize),
    /// Organ semi-axes as fractions of the grid extent per axis.
    pub organ_radius_frac: (f64, f64),
    pub air_hu: (f64, f64),
    pub body_hu: (f64, f64),
    pub organ_hu: (f64, f64),
    pub tumor_hu: (f64, f64),
    pub bone_hu: (f64, f64),
    /// Standard deviation of additive Gaussian noise, HU.
    pub noise_hu: f64,
    pub tumor_probability: f64,
    /// Hard bounds for raw values.
    pub raw_range: (f64, f64),
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: Dims::new(32, 64, 64),
            spacing: [2.3, 1.6, 1.6],
            organ_lobes: (1, 3),
            tumor_count: (1, 2),
            organ_radius_frac: (0.08, 0.16),
            air_hu: (-1000.0, -980.0),
            body_hu: (-20.0, 60.0),
            organ_hu: (90.0, 180.0),
            tumor_hu: (-60.0, 10.0),
            bone_hu: (500.0, 900.0),
            noise_hu: 15.0,
            tumor_probability: 0.5,
            raw_range: (-1000.0, 1000.0),
        }
    }
}

fn ordered(r: (f64, f64)) -> bool {
    r.0.is_finite() && r.1.is_finite() && r.0 <= r.1
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let dims = self.dims.as_array();
        if dims.iter().any(|d| *d < 8) {
            return Err(LadError::Config(format!("phantom shape {} must be at least 8 per axis", self.dims)));
        }
        if self.spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(LadError::Config("phantom spacing must be positive".into()));
        }
        let (rlo, rhi) = self.raw_range;
        for (name, r) in [
            ("air", self.air_hu),
            ("body", self.body_hu),
            ("organ", self.organ_hu),
            ("tumor", self.tumor_hu),
            ("bone", self.bone_hu),
        ] {
            if !ordered(r) || r.0 < rlo || r.1 > rhi {
                return Err(LadError::Config(format!("{name} intensity range {r:?} not inside {:?}", self.raw_range)));
            }
        }
        if !ordered(self.organ_radius_frac) || self.organ_radius_frac.0 <= 0.0 {
            return Err(LadError::Config("organ radius fractions must be positive and ordered".into()));
        }
        if self.organ_lobes.0 == 0 || self.organ_lobes.0 > self.organ_lobes.1 || self.tumor_count.0 > self.tumor_count.1 {
            return Err(LadError::Config("lobe/tumor count ranges must be ordered and non-empty".into()));
        }
        if !(0.0..=1.0).contains(&self.tumor_probability) || !(self.noise_hu >= 0.0) {
            return Err(LadError::Config("tumor probability must be in [0,1], noise >= 0".into()));
        }
        for (axis, &d) in ["D", "H", "W"].iter().zip(&dims) {
            let r = (self.organ_radius_frac.0 * d as f64).max(MIN_RADIUS).round();
            let diameter = 2.0 * r + 1.0;
            if diameter + 2.0 > d as f64 {
                return Err(LadError::Config(format!(
                    "axis {axis}={d} too small to contain the smallest organ (diameter {diameter})"
                )));
            }
        }
        Ok(())
    }
}

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }
}

fn uniform<R: Rng>(rng: &mut R, r: (f64, f64)) -> f64 {
    if r.0 == r.1 {
        r.0
    } else {
        rng.random_range(r.0..=r.1)
    }
}

/// Deterministic phantom `(raw volume, label mask)` for `(seed, spec)`.
pub fn generate_phantom(seed: u64, spec: &PhantomSpec) -> Result<(RawVolume, LabelMask)> {
    spec.validate()?;
    let mut rng = seeds::rng_for(seed, seeds::stream::DATA, 0);
    let [nd, nh, nw] = spec.dims.as_array();
    let (fd, fh, fw) = (nd as f64, nh as f64, nw as f64);

    // Body cross-section, constant along depth with a gentle taper.
    let body_c = [fh / 2.0 + uniform(&mut rng, (-0.03, 0.03)) * fh, fw / 2.0 + uniform(&mut rng, (-0.03, 0.03)) * fw];
    let body_r = [fh * uniform(&mut rng, (0.36, 0.44)), fw * uniform(&mut rng, (0.40, 0.46))];
    let taper = uniform(&mut rng, (0.0, 0.08));
    let bone_r = (fh.min(fw) * 0.06).max(1.5);
    let bone_c = [body_c[0] + body_r[0] * 0.7, body_c[1]];

    let air = uniform(&mut rng, spec.air_hu);
    let body = uniform(&mut rng, spec.body_hu);
    let organ_base = uniform(&mut rng, spec.organ_hu);
    let tumor_base = uniform(&mut rng, spec.tumor_hu);
    let bone = uniform(&mut rng, spec.bone_hu);

    // Organ: a chain of ellipsoids, each centred on a voxel inside the previous.
    let radius = |rng: &mut _, n: f64| (uniform(rng, spec.organ_radius_frac) * n).max(MIN_RADIUS);
    let lobes = rng.random_range(spec.organ_lobes.0..=spec.organ_lobes.1);
    let mut ell: Vec<Ellipsoid> = Vec::with_capacity(lobes);
    let first_radii = [radius(&mut rng, fd), radius(&mut rng, fh), radius(&mut rng, fw)];
    let lim = |n: f64, r: f64| ((r).min(n / 2.0 - 1.0), (n - 1.0 - r).max(n / 2.0));
    let center0 = [
        {
            let (lo, hi) = lim(fd, first_radii[0]);
            uniform(&mut rng, (lo, hi)).round()
        },
        {
            let span = body_r[0] * 0.35;
            (body_c[0] - span + uniform(&mut rng, (0.0, 2.0 * span))).round().clamp(0.0, fh - 1.0)
        },
        {
            let span = body_r[1] * 0.35;
            (body_c[1] - span + uniform(&mut rng, (0.0, 2.0 * span))).round().clamp(0.0, fw - 1.0)
        },
    ];
    ell.push(Ellipsoid {
        center: center0,
        radii: first_radii,
    });
    for _ in 1..lobes {
        let prev = ell.last().expect("non-empty");
        let dir: [f64; 3] = {
            let v = [
                uniform(&mut rng, (-1.0, 1.0)) * 0.5,
                uniform(&mut rng, (-1.0, 1.0)),
                uniform(&mut rng, (-1.0, 1.0)),
            ];
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-9);
            [v[0] / n, v[1] / n, v[2] / n]
        };
        let mut c = [0.0; 3];
        for a in 0..3 {
            let n = [fd, fh, fw][a];
            c[a] = (prev.center[a] + 0.6 * prev.radii[a] * dir[a]).round().clamp(0.0, n - 1.0);
        }
        if !prev.contains(c) {
            c = prev.center;
        }
        ell.push(Ellipsoid {
            center: c,
            radii: [radius(&mut rng, fd), radius(&mut rng, fh), radius(&mut rng, fw)],
        });
    }

    let mut labels = Array3::<u8>::zeros((nd, nh, nw));
    let mut raw = Array3::<f32>::zeros((nd, nh, nw));
    for z in 0..nd {
        let shrink = 1.0 - taper * ((z as f64 + 0.5) / fd - 0.5).abs() * 2.0;
        for y in 0..nh {
            for x in 0..nw {
                let (py, px) = (y as f64, x as f64);
                let in_body = ((py - body_c[0]) / (body_r[0] * shrink)).powi(2) + ((px - body_c[1]) / (body_r[1] * shrink)).powi(2) <= 1.0;
                let in_bone = ((py - bone_c[0]).powi(2) + (px - bone_c[1]).powi(2)).sqrt() <= bone_r;
                let p = [z as f64, py, px];
                let in_organ = ell.iter().any(|e| e.contains(p));
                let v = if in_organ {
                    labels[[z, y, x]] = ORGAN;
                    organ_base
                } else if in_bone {
                    bone
                } else if in_body {
                    body
                } else {
                    air
                };
                raw[[z, y, x]] = v as f32;
            }
        }
    }

    if rng.random_bool(spec.tumor_probability) {
        let organ_voxels: Vec<[usize; 3]> = labels
            .indexed_iter()
            .filter(|(_, v)| **v == ORGAN)
            .map(|((z, y, x), _)| [z, y, x])
            .collect();
        let count = rng.random_range(spec.tumor_count.0..=spec.tumor_count.1);
        for _ in 0..count {
            let c = organ_voxels[rng.random_range(0..organ_voxels.len())];
            let r = uniform(&mut rng, (1.5, 3.0));
            let ri = r.ceil() as usize;
            for z in c[0].saturating_sub(ri)..(c[0] + ri + 1).min(nd) {
                for y in c[1].saturating_sub(ri)..(c[1] + ri + 1).min(nh) {
                    for x in c[2].saturating_sub(ri)..(c[2] + ri + 1).min(nw) {
                        let d2 = (z as f64 - c[0] as f64).powi(2) + (y as f64 - c[1] as f64).powi(2) + (x as f64 - c[2] as f64).powi(2);
                        if d2 <= r * r && labels[[z, y, x]] != 0 {
                            labels[[z, y, x]] = TUMOR;
                            raw[[z, y, x]] = tumor_base as f32;
                        }
                    }
                }
            }
        }
    }

    if spec.noise_hu > 0.0 {
        let noise = Normal::new(0.0, spec.noise_hu).expect("finite noise");
        let (lo, hi) = (spec.raw_range.0 as f32, spec.raw_range.1 as f32);
        raw.mapv_inplace(|v| (v + noise.sample(&mut rng) as f32).clamp(lo, hi));
    }

    Ok((raw, LabelMask::new(labels)?))
}

/// Clamp to `[lo, hi]` then map affinely so `lo -> 0`, `hi -> 1`.
pub fn truncate_normalize(raw: &RawVolume, lo: f32, hi: f32, spacing: [f64; 3], id: impl Into<String>) -> Result<Volume> {
    if !(lo < hi) {
        return Err(LadError::Config(format!("window lo={lo} must be below hi={hi}")));
    }
    let span = hi - lo;
    let data = raw.mapv(|v| ((v.clamp(lo, hi) - lo) / span).clamp(0.0, 1.0));
    Volume::new(data, spacing, id)
}

/// Output extent for resampling `n` voxels of size `from` to size `to`.
fn resampled_len(n: usize, from: f64, to: f64) -> usize {
    (n as f64 * from / to).round() as usize
}

/// Resample to `target` spacing: trilinear for intensities, nearest-neighbour
/// for labels. Sample positions are voxel-centre aligned.
pub fn resample(volume: &Volume, mask: &LabelMask, target: [f64; 3]) -> Result<(Volume, LabelMask)> {
    if target.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
        return Err(LadError::Config(format!("target spacing {target:?} must be positive")));
    }
    if volume.dims() != mask.dims() {
        return Err(LadError::Shape(format!("volume {} vs mask {}", volume.dims(), mask.dims())));
    }
    let src = volume.spacing();
    if src == target {
        return Ok((volume.clone(), mask.clone()));
    }
    let inp = volume.dims().as_array();
    let mut out = [0usize; 3];
    for a in 0..3 {
        out[a] = resampled_len(inp[a], src[a], target[a]);
        if out[a] < 1 {
            return Err(LadError::Shape(format!("resampling collapses axis {a} to zero voxels")));
        }
    }
    // source coordinate for each output index along each axis
    let coords: Vec<Vec<f64>> = (0..3)
        .map(|a| {
            (0..out[a])
                .map(|i| ((i as f64 + 0.5) * target[a] / src[a] - 0.5).clamp(0.0, (inp[a] - 1) as f64))
                .collect()
        })
        .collect();
    let vd = volume.data();
    let md = mask.data();
    let mut vo = Array3::<f32>::zeros((out[0], out[1], out[2]));
    let mut mo = Array3::<u8>::zeros((out[0], out[1], out[2]));
    let lerp = |a: f32, b: f32, t: f32| a + (b - a) * t;
    for (z, &cz) in coords[0].iter().enumerate() {
        let (z0, tz) = (cz.floor() as usize, (cz - cz.floor()) as f32);
        let z1 = (z0 + 1).min(inp[0] - 1);
        for (y, &cy) in coords[1].iter().enumerate() {
            let (y0, ty) = (cy.floor() as usize, (cy - cy.floor()) as f32);
            let y1 = (y0 + 1).min(inp[1] - 1);
            for (x, &cx) in coords[2].iter().enumerate() {
                let (x0, tx) = (cx.floor() as usize, (cx - cx.floor()) as f32);
                let x1 = (x0 + 1).min(inp[2] - 1);
                let c00 = lerp(vd[[z0, y0, x0]], vd[[z0, y0, x1]], tx);
                let c01 = lerp(vd[[z0, y1, x0]], vd[[z0, y1, x1]], tx);
                let c10 = lerp(vd[[z1, y0, x0]], vd[[z1, y0, x1]], tx);
                let c11 = lerp(vd[[z1, y1, x0]], vd[[z1, y1, x1]], tx);
                vo[[z, y, x]] = lerp(lerp(c00, c01, ty), lerp(c10, c11, ty), tz).clamp(0.0, 1.0);
                mo[[z, y, x]] = md[[cz.round() as usize, cy.round() as usize, cx.round() as usize]];
            }
        }
    }
    Ok((Volume::new(vo, target, volume.id.clone())?, LabelMask::new(mo)?))
}

/// One depth window of a volume/mask pair.
#[derive(Clone, Debug)]
pub struct Crop {
    pub volume: Volume,
    pub mask: LabelMask,
    /// First depth index of the window in the source.
    pub z0: usize,
    /// Whether the window contains any organ voxel.
    pub has_organ: bool,
}

/// Window start offsets: multiples of `stride`, plus a final window shifted
/// back so the last slice is covered.
pub fn window_starts(depth: usize, window: usize, stride: usize) -> Result<Vec<usize>> {
    if window == 0 || window > depth {
        return Err(LadError::Config(format!("window depth {window} must be in 1..={depth}")));
    }
    if stride == 0 {
        return Err(LadError::Config("stride must be at least 1".into()));
    }
    let mut starts: Vec<usize> = (0..).map(|k| k * stride).take_while(|s| s + window <= depth).collect();
    let last = depth - window;
    if starts.last() != Some(&last) {
        starts.push(last);
    }
    Ok(starts)
}

pub fn sliding_window_crop(volume: &Volume, mask: &LabelMask, window: usize, stride: usize) -> Result<Vec<Crop>> {
    if volume.dims() != mask.dims() {
        return Err(LadError::Shape(format!("volume {} vs mask {}", volume.dims(), mask.dims())));
    }
    let starts = window_starts(volume.dims().d, window, stride)?;
    starts
        .into_iter()
        .map(|z0| {
            let v = volume.data().slice(s![z0..z0 + window, .., ..]).to_owned();
            let m = LabelMask::new(mask.data().slice(s![z0..z0 + window, .., ..]).to_owned())?;
            let has_organ = m.data().iter().any(|l| *l == ORGAN || *l == TUMOR);
            Ok(Crop {
                volume: Volume::new(v, volume.spacing(), format!("{}@z{z0}", volume.id))?,
                mask: m,
                z0,
                has_organ,
            })
        })
        .collect()
}
