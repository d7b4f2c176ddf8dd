//! Image-domain types: intensity volumes, label masks and voxel boxes.

use std::fmt;
use std::str::FromStr;

use lad_tensor::Tensor;
use ndarray::{s, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{LadError, Result};

/// Grid extent in `(D, H, W)` order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub const fn new(d: usize, h: usize, w: usize) -> Self {
        Dims { d, h, w }
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.d, self.h, self.w]
    }

    pub fn voxels(&self) -> usize {
        self.d * self.h * self.w
    }

    pub fn from_shape(shape: &[usize]) -> Self {
        Dims::new(shape[0], shape[1], shape[2])
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.d, self.h, self.w)
    }
}

impl FromStr for Dims {
    type Err = LadError;

    /// Parses `DxHxW`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(['x', 'X']).collect();
        if parts.len() != 3 {
            return Err(LadError::Config(format!("shape {s:?} is not DxHxW")));
        }
        let mut v = [0usize; 3];
        for (slot, p) in v.iter_mut().zip(&parts) {
            *slot = p
                .trim()
                .parse()
                .map_err(|_| LadError::Config(format!("shape {s:?}: {p:?} is not an integer")))?;
        }
        Ok(Dims::new(v[0], v[1], v[2]))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Axis {
    D,
    H,
    W,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::D, Axis::H, Axis::W];

    pub fn index(self) -> usize {
        match self {
            Axis::D => 0,
            Axis::H => 1,
            Axis::W => 2,
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::D => "D",
            Axis::H => "H",
            Axis::W => "W",
        })
    }
}

/// Intensity volume normalized to `[0, 1]`, with voxel spacing in mm.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    data: Array3<f32>,
    spacing: [f64; 3],
    pub id: String,
}

impl Volume {
    pub fn new(data: Array3<f32>, spacing: [f64; 3], id: impl Into<String>) -> Result<Self> {
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(LadError::Data("volume values must lie in [0, 1]".into()));
        }
        Self::check_geometry(data.dim(), spacing)?;
        Ok(Volume {
            data,
            spacing,
            id: id.into(),
        })
    }

    fn check_geometry(dim: (usize, usize, usize), spacing: [f64; 3]) -> Result<()> {
        if dim.0 == 0 || dim.1 == 0 || dim.2 == 0 {
            return Err(LadError::Shape(format!("empty volume {dim:?}")));
        }
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(LadError::Config(format!("spacing {spacing:?} must be positive")));
        }
        Ok(())
    }

    /// Build from arbitrary reals by clamping into `[0, 1]`.
    pub fn from_clamped(mut data: Array3<f32>, spacing: [f64; 3], id: impl Into<String>) -> Result<Self> {
        data.mapv_inplace(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
        Self::new(data, spacing, id)
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn dims(&self) -> Dims {
        let (d, h, w) = self.data.dim();
        Dims::new(d, h, w)
    }

    /// `[1, 1, D, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        let d = self.dims();
        Tensor::new(&[1, 1, d.d, d.h, d.w], self.data.iter().copied().collect()).expect("volume shape")
    }

    pub fn crop(&self, b: &BBox) -> Result<Volume> {
        b.check_within(self.dims())?;
        let data = self
            .data
            .slice(s![b.lo[0]..b.hi[0], b.lo[1]..b.hi[1], b.lo[2]..b.hi[2]])
            .to_owned();
        Ok(Volume {
            data,
            spacing: self.spacing,
            id: self.id.clone(),
        })
    }
}

/// Label map over `{0, 1, 2}` = background / organ / tumor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    data: Array3<u8>,
}

pub const BACKGROUND: u8 = 0;
pub const ORGAN: u8 = 1;
pub const TUMOR: u8 = 2;
pub const NUM_LABELS: usize = 3;

impl LabelMask {
    pub fn new(data: Array3<u8>) -> Result<Self> {
        if let Some(v) = data.iter().find(|v| **v as usize >= NUM_LABELS) {
            return Err(LadError::Data(format!("label {v} outside {{0,1,2}}")));
        }
        let (d, h, w) = data.dim();
        if d == 0 || h == 0 || w == 0 {
            return Err(LadError::Shape("empty mask".into()));
        }
        Ok(LabelMask { data })
    }

    pub fn zeros(dims: Dims) -> Self {
        LabelMask {
            data: Array3::zeros((dims.d, dims.h, dims.w)),
        }
    }

    pub fn data(&self) -> &Array3<u8> {
        &self.data
    }

    pub fn dims(&self) -> Dims {
        let (d, h, w) = self.data.dim();
        Dims::new(d, h, w)
    }

    pub fn count(&self, label: u8) -> usize {
        self.data.iter().filter(|v| **v == label).count()
    }

    /// Labels scaled by 1/2 into `[0, 1]`, as a `[1, 1, D, H, W]` tensor.
    pub fn to_unit_tensor(&self) -> Tensor {
        let d = self.dims();
        Tensor::new(
            &[1, 1, d.d, d.h, d.w],
            self.data.iter().map(|v| *v as f32 / 2.0).collect(),
        )
        .expect("mask shape")
    }

    pub fn crop(&self, b: &BBox) -> Result<LabelMask> {
        b.check_within(self.dims())?;
        Ok(LabelMask {
            data: self
                .data
                .slice(s![b.lo[0]..b.hi[0], b.lo[1]..b.hi[1], b.lo[2]..b.hi[2]])
                .to_owned(),
        })
    }

    /// Tight box around voxels equal to `label`.
    pub fn label_bbox(&self, label: u8) -> Option<BBox> {
        self.bbox_where(|v| v == label)
    }

    /// Tight box around every nonzero voxel.
    pub fn foreground_bbox(&self) -> Option<BBox> {
        self.bbox_where(|v| v != BACKGROUND)
    }

    fn bbox_where(&self, pred: impl Fn(u8) -> bool) -> Option<BBox> {
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let mut any = false;
        for ((z, y, x), v) in self.data.indexed_iter() {
            if pred(*v) {
                any = true;
                for (a, c) in [z, y, x].into_iter().enumerate() {
                    lo[a] = lo[a].min(c);
                    hi[a] = hi[a].max(c + 1);
                }
            }
        }
        any.then_some(BBox { lo, hi })
    }
}

/// Half-open voxel box `[lo, hi)` per axis, `(D, H, W)` order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl BBox {
    pub fn new(lo: [usize; 3], hi: [usize; 3]) -> Result<Self> {
        if (0..3).any(|a| lo[a] >= hi[a]) {
            return Err(LadError::Shape(format!("empty box {lo:?}..{hi:?}")));
        }
        Ok(BBox { lo, hi })
    }

    pub fn full(dims: Dims) -> Self {
        BBox {
            lo: [0; 3],
            hi: dims.as_array(),
        }
    }

    pub fn extents(&self) -> Dims {
        Dims::new(self.hi[0] - self.lo[0], self.hi[1] - self.lo[1], self.hi[2] - self.lo[2])
    }

    pub fn voxels(&self) -> usize {
        self.extents().voxels()
    }

    pub fn contains(&self, z: usize, y: usize, x: usize) -> bool {
        let p = [z, y, x];
        (0..3).all(|a| p[a] >= self.lo[a] && p[a] < self.hi[a])
    }

    pub fn union(&self, other: &BBox) -> BBox {
        let mut out = *self;
        for a in 0..3 {
            out.lo[a] = out.lo[a].min(other.lo[a]);
            out.hi[a] = out.hi[a].max(other.hi[a]);
        }
        out
    }

    /// Grow by `margin` on every side, clipped to `dims`.
    pub fn expand(&self, margin: usize, dims: Dims) -> BBox {
        let lim = dims.as_array();
        let mut out = *self;
        for a in 0..3 {
            out.lo[a] = out.lo[a].saturating_sub(margin);
            out.hi[a] = (out.hi[a] + margin).min(lim[a]);
        }
        out
    }

    pub fn check_within(&self, dims: Dims) -> Result<()> {
        let lim = dims.as_array();
        if (0..3).any(|a| self.lo[a] >= self.hi[a] || self.hi[a] > lim[a]) {
            return Err(LadError::Shape(format!(
                "box {:?}..{:?} outside grid {}",
                self.lo, self.hi, dims
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dims_parse_and_display() {
        let d: Dims = "32x64x48".parse().unwrap();
        assert_eq!(d, Dims::new(32, 64, 48));
        assert_eq!(d.to_string(), "32x64x48");
        assert!("32x64".parse::<Dims>().is_err());
        assert!("axbxc".parse::<Dims>().is_err());
    }

    #[test]
    fn volume_rejects_out_of_range_and_bad_spacing() {
        let mut a = Array3::<f32>::zeros((2, 2, 2));
        assert!(Volume::new(a.clone(), [1.0; 3], "ok").is_ok());
        assert!(Volume::new(a.clone(), [1.0, 0.0, 1.0], "sp").is_err());
        a[[0, 0, 0]] = 1.5;
        assert!(Volume::new(a.clone(), [1.0; 3], "hi").is_err());
        let v = Volume::from_clamped(a, [1.0; 3], "c").unwrap();
        assert_eq!(v.data()[[0, 0, 0]], 1.0);
    }

    #[test]
    fn mask_rejects_foreign_labels() {
        let mut a = Array3::<u8>::zeros((2, 2, 2));
        a[[1, 1, 1]] = 3;
        assert!(LabelMask::new(a).is_err());
    }

    #[test]
    fn bbox_of_single_voxel() {
        let mut a = Array3::<u8>::zeros((6, 6, 6));
        a[[2, 3, 4]] = 1;
        let m = LabelMask::new(a).unwrap();
        let b = m.foreground_bbox().unwrap();
        assert_eq!(b.lo, [2, 3, 4]);
        assert_eq!(b.hi, [3, 4, 5]);
        assert!(LabelMask::zeros(Dims::new(3, 3, 3)).foreground_bbox().is_none());
    }
}
