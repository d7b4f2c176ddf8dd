//! Global loss terms, the mask-guided locality loss and their weighted total.

use lad_tensor::{Graph, Tensor, Var};
use ndarray::ArrayView3;

use super::model::LocalityMode;
use crate::error::{LadError, Result};
use crate::volume::{BBox, LabelMask};

/// Foreground box grown by `margin` and clipped to the grid.
pub fn mask_bbox(mask: &LabelMask, margin: usize) -> Option<BBox> {
    mask.foreground_bbox().map(|b| b.expand(margin, mask.dims()))
}

/// Per-voxel weights realizing the batch mean of per-sample region means.
/// Layout matches a `[B, 1, D, H, W]` tensor. Samples with no region get 0.
pub fn locality_weights(masks: &[LabelMask], margin: usize, mode: LocalityMode) -> Vec<f32> {
    let b = masks.len();
    let mut out = Vec::new();
    for m in masks {
        let region = region_indicator(m, margin, mode);
        let count = region.iter().filter(|r| **r).count();
        let w = if count == 0 { 0.0 } else { 1.0 / (b as f64 * count as f64) };
        out.extend(region.iter().map(|r| if *r { w as f32 } else { 0.0 }));
    }
    out
}

fn region_indicator(m: &LabelMask, margin: usize, mode: LocalityMode) -> Vec<bool> {
    match mode {
        LocalityMode::Bbox => match mask_bbox(m, margin) {
            Some(b) => m.data().indexed_iter().map(|((z, y, x), _)| b.contains(z, y, x)).collect(),
            None => vec![false; m.dims().voxels()],
        },
        LocalityMode::Masked => m.data().iter().map(|v| *v != 0).collect(),
    }
}

/// Differentiable locality loss on `[B, 1, D, H, W]` batches.
pub fn locality_loss(g: &mut Graph, x: Var, xhat: Var, masks: &[LabelMask], margin: usize, mode: LocalityMode) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s != g.shape(xhat) || s.len() != 5 || s[0] != masks.len() {
        return Err(LadError::Shape(format!(
            "locality loss: x {:?}, x̂ {:?}, {} masks",
            s,
            g.shape(xhat),
            masks.len()
        )));
    }
    for m in masks {
        if m.dims().as_array() != [s[2], s[3], s[4]] {
            return Err(LadError::Shape(format!("mask {} does not match volume {:?}", m.dims(), &s[2..])));
        }
    }
    let diff = g.sub(xhat, x)?;
    let ad = g.abs(diff);
    Ok(g.weighted_sum(ad, locality_weights(masks, margin, mode))?)
}

/// Reference evaluation in double precision on plain grids.
pub fn locality_loss_value(x: &[ArrayView3<f64>], xhat: &[ArrayView3<f64>], masks: &[LabelMask], margin: usize) -> Result<f64> {
    if x.len() != xhat.len() || x.len() != masks.len() || x.is_empty() {
        return Err(LadError::Shape("locality loss batch sizes differ".into()));
    }
    let mut total = 0.0;
    for ((a, b), m) in x.iter().zip(xhat).zip(masks) {
        if a.dim() != b.dim() || a.dim() != m.data().dim() {
            return Err(LadError::Shape("locality loss sample shapes differ".into()));
        }
        if let Some(bb) = mask_bbox(m, margin) {
            let mut s = 0.0;
            for z in bb.lo[0]..bb.hi[0] {
                for y in bb.lo[1]..bb.hi[1] {
                    for xx in bb.lo[2]..bb.hi[2] {
                        s += (a[[z, y, xx]] - b[[z, y, xx]]).abs();
                    }
                }
            }
            total += s / bb.voxels() as f64;
        }
    }
    Ok(total / x.len() as f64)
}

/// Unweighted values of the global terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GlobalTerms {
    pub reconstruction: f64,
    pub codebook: f64,
    pub commitment: f64,
    pub perceptual: f64,
    pub adversarial: f64,
    pub feature_matching: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TermWeights {
    pub commitment: f64,
    pub perceptual: f64,
    pub adversarial: f64,
    pub feature_matching: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub terms: GlobalTerms,
    pub global: f64,
    pub locality: f64,
    pub lambda: f64,
    pub total: f64,
}

impl GlobalTerms {
    pub fn named(&self) -> [(&'static str, f64); 6] {
        [
            ("reconstruction", self.reconstruction),
            ("codebook", self.codebook),
            ("commitment", self.commitment),
            ("perceptual", self.perceptual),
            ("adversarial", self.adversarial),
            ("feature_matching", self.feature_matching),
        ]
    }

    pub fn weighted_sum(&self, w: &TermWeights) -> f64 {
        self.reconstruction
            + self.codebook
            + w.commitment * self.commitment
            + w.perceptual * self.perceptual
            + w.adversarial * self.adversarial
            + w.feature_matching * self.feature_matching
    }
}

/// `L = L_glo + λ·L_loc` with a per-term breakdown. Non-finite terms are
/// reported by name.
pub fn total_loss(terms: &GlobalTerms, weights: &TermWeights, locality: f64, lambda: f64, step: u64) -> Result<LossBreakdown> {
    for (name, v) in terms.named().into_iter().chain([("locality", locality)]) {
        if !v.is_finite() {
            return Err(LadError::NonFinite {
                term: name.to_string(),
                step,
            });
        }
    }
    let global = terms.weighted_sum(weights);
    Ok(LossBreakdown {
        terms: *terms,
        global,
        locality,
        lambda,
        total: global + lambda * locality,
    })
}

/// Graph nodes of one generator step.
pub struct GeneratorVars {
    pub reconstruction: Var,
    pub codebook: Var,
    pub commitment: Var,
    pub perceptual: Var,
    pub adversarial: Option<Var>,
    pub feature_matching: Option<Var>,
    pub locality: Var,
}

impl GeneratorVars {
    pub fn values(&self, g: &Graph) -> (GlobalTerms, f64) {
        let v = |x: Var| g.value(x).item() as f64;
        (
            GlobalTerms {
                reconstruction: v(self.reconstruction),
                codebook: v(self.codebook),
                commitment: v(self.commitment),
                perceptual: v(self.perceptual),
                adversarial: self.adversarial.map(v).unwrap_or(0.0),
                feature_matching: self.feature_matching.map(v).unwrap_or(0.0),
            },
            v(self.locality),
        )
    }

    /// Differentiable counterpart of [`total_loss`].
    pub fn total(&self, g: &mut Graph, w: &TermWeights, lambda: f64) -> Result<Var> {
        let mut acc = g.add(self.reconstruction, self.codebook)?;
        let c = g.scale(self.commitment, w.commitment as f32);
        acc = g.add(acc, c)?;
        let p = g.scale(self.perceptual, w.perceptual as f32);
        acc = g.add(acc, p)?;
        if let Some(a) = self.adversarial {
            let a = g.scale(a, w.adversarial as f32);
            acc = g.add(acc, a)?;
        }
        if let Some(f) = self.feature_matching {
            let f = g.scale(f, w.feature_matching as f32);
            acc = g.add(acc, f)?;
        }
        let l = g.scale(self.locality, lambda as f32);
        Ok(g.add(acc, l)?)
    }
}

/// Hinge critic loss `mean(relu(1 - D(x))) + mean(relu(1 + D(x̂)))`.
pub fn hinge_disc_loss(g: &mut Graph, real_logits: Var, fake_logits: Var) -> Result<Var> {
    let ones_r = g.constant(Tensor::full(g.shape(real_logits), 1.0));
    let neg_r = g.scale(real_logits, -1.0);
    let r = g.add(ones_r, neg_r)?;
    let r = g.relu(r);
    let r = g.mean(r);
    let ones_f = g.constant(Tensor::full(g.shape(fake_logits), 1.0));
    let f = g.add(ones_f, fake_logits)?;
    let f = g.relu(f);
    let f = g.mean(f);
    Ok(g.add(r, f)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn weights() -> TermWeights {
        TermWeights {
            commitment: 0.25,
            perceptual: 1.0,
            adversarial: 0.1,
            feature_matching: 0.1,
        }
    }

    #[test]
    fn lambda_arithmetic() {
        let t = GlobalTerms {
            reconstruction: 0.4,
            ..Default::default()
        };
        let b = total_loss(&t, &weights(), 0.1, 1.0, 0).unwrap();
        assert!((b.total - 0.5).abs() < 1e-15);
        let z = total_loss(&t, &weights(), 0.1, 0.0, 0).unwrap();
        assert_eq!(z.total, z.global);
    }

    #[test]
    fn non_finite_term_is_named() {
        let t = GlobalTerms {
            perceptual: f64::NAN,
            ..Default::default()
        };
        match total_loss(&t, &weights(), 0.0, 1.0, 7) {
            Err(LadError::NonFinite { term, step }) => {
                assert_eq!(term, "perceptual");
                assert_eq!(step, 7);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn maximal_error_inside_box_is_one() {
        let mut m = Array3::<u8>::zeros((6, 6, 6));
        m[[3, 3, 3]] = 1;
        let mask = LabelMask::new(m).unwrap();
        let x = Array3::<f64>::ones((6, 6, 6));
        let mut xh = Array3::<f64>::ones((6, 6, 6));
        let b = mask_bbox(&mask, 1).unwrap();
        for ((z, y, xx), v) in xh.indexed_iter_mut() {
            if b.contains(z, y, xx) {
                *v = 0.0;
            }
        }
        let l = locality_loss_value(&[x.view()], &[xh.view()], std::slice::from_ref(&mask), 1).unwrap();
        assert_eq!(l, 1.0);
        let empty = LabelMask::zeros(mask.dims());
        assert_eq!(locality_loss_value(&[x.view()], &[xh.view()], &[empty], 1).unwrap(), 0.0);
    }

    #[test]
    fn graph_and_reference_agree() {
        let mut m = Array3::<u8>::zeros((4, 5, 6));
        m[[1, 2, 3]] = 2;
        m[[2, 1, 1]] = 1;
        let mask = LabelMask::new(m).unwrap();
        let x = Array3::from_shape_fn((4, 5, 6), |(a, b, c)| ((a * 7 + b * 3 + c) % 11) as f64 / 10.0);
        let xh = x.mapv(|v| (1.0 - v) * 0.5);
        let want = locality_loss_value(&[x.view()], &[xh.view()], std::slice::from_ref(&mask), 1).unwrap();
        let mut g = Graph::new();
        let t = |a: &Array3<f64>| Tensor::new(&[1, 1, 4, 5, 6], a.iter().map(|v| *v as f32).collect()).unwrap();
        let xv = g.constant(t(&x));
        let xhv = g.input(t(&xh));
        let l = locality_loss(&mut g, xv, xhv, &[mask], 1, LocalityMode::Bbox).unwrap();
        assert!((g.value(l).item() as f64 - want).abs() < 1e-6);
    }
}
