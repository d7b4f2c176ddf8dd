//! Three-scale 3D MS-SSIM with a separable Gaussian window.

use log::warn;
use ndarray::{Array3, Axis as NdAxis};
use rand::Rng;

use crate::error::{LadError, Result};
use crate::seeds;
use crate::volume::Volume;

pub const WINDOW_SIGMA: f64 = 1.5;
pub const WINDOW_TAPS: usize = 11;
/// Leading three of the standard five-scale weights, renormalized on use.
pub const SCALE_WEIGHTS: [f64; 3] = [0.0448, 0.2856, 0.3001];
/// Smallest axis length allowed at the coarsest scale.
pub const MIN_SCALE_EXTENT: usize = 4;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn gaussian_taps() -> Vec<f64> {
    let r = (WINDOW_TAPS / 2) as isize;
    let w: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Same-size separable blur; taps past the border are dropped and the rest
/// renormalized.
fn blur(x: &Array3<f64>, taps: &[f64]) -> Array3<f64> {
    let mut out = x.clone();
    let r = (taps.len() / 2) as isize;
    for ax in 0..3 {
        let src = out.clone();
        let n = src.shape()[ax] as isize;
        for (mut o, s) in out.lanes_mut(NdAxis(ax)).into_iter().zip(src.lanes(NdAxis(ax))) {
            for i in 0..n {
                let (mut acc, mut wsum) = (0.0, 0.0);
                for (k, w) in taps.iter().enumerate() {
                    let j = i + k as isize - r;
                    if (0..n).contains(&j) {
                        acc += w * s[j as usize];
                        wsum += w;
                    }
                }
                o[i as usize] = acc / wsum;
            }
        }
    }
    out
}

/// 2× average pooling, dropping a trailing odd slab.
fn downsample(x: &Array3<f64>) -> Array3<f64> {
    let (d, h, w) = x.dim();
    Array3::from_shape_fn((d / 2, h / 2, w / 2), |(z, y, xx)| {
        let mut acc = 0.0;
        for dz in 0..2 {
            for dy in 0..2 {
                for dx in 0..2 {
                    acc += x[[2 * z + dz, 2 * y + dy, 2 * xx + dx]];
                }
            }
        }
        acc / 8.0
    })
}

/// Mean luminance and contrast-structure terms at one scale.
fn ssim_terms(x: &Array3<f64>, y: &Array3<f64>, taps: &[f64]) -> (f64, f64) {
    let c1 = K1 * K1;
    let c2 = K2 * K2;
    let mx = blur(x, taps);
    let my = blur(y, taps);
    let sxx = blur(&(x * x), taps);
    let syy = blur(&(y * y), taps);
    let sxy = blur(&(x * y), taps);
    let n = x.len() as f64;
    let (mut l_sum, mut cs_sum) = (0.0, 0.0);
    for i in 0..x.len() {
        let (a, b) = (mx.as_slice().unwrap()[i], my.as_slice().unwrap()[i]);
        let vx = sxx.as_slice().unwrap()[i] - a * a;
        let vy = syy.as_slice().unwrap()[i] - b * b;
        let cov = sxy.as_slice().unwrap()[i] - a * b;
        l_sum += (2.0 * a * b + c1) / (a * a + b * b + c1);
        cs_sum += (2.0 * cov + c2) / (vx + vy + c2);
    }
    (l_sum / n, cs_sum / n)
}

/// Scales usable for a volume of these dims, at most three.
pub fn usable_scales(dims: [usize; 3]) -> usize {
    let min = *dims.iter().min().unwrap_or(&0);
    (1..=SCALE_WEIGHTS.len()).rev().find(|s| min >> (s - 1) >= MIN_SCALE_EXTENT).unwrap_or(1)
}

/// MS-SSIM of two same-shape volumes over `scales` levels.
pub fn ms_ssim_scales(a: &Volume, b: &Volume, scales: usize) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(LadError::Shape(format!("ms-ssim of {} and {}", a.dims(), b.dims())));
    }
    let scales = scales.clamp(1, SCALE_WEIGHTS.len());
    let wsum: f64 = SCALE_WEIGHTS[..scales].iter().sum();
    let taps = gaussian_taps();
    let mut x = a.data().mapv(|v| v as f64);
    let mut y = b.data().mapv(|v| v as f64);
    let mut out = 1.0;
    for s in 0..scales {
        let (l, cs) = ssim_terms(&x, &y, &taps);
        let w = SCALE_WEIGHTS[s] / wsum;
        out *= cs.max(0.0).powf(w);
        if s + 1 == scales {
            out *= l.max(0.0).powf(w);
        } else {
            x = downsample(&x);
            y = downsample(&y);
        }
    }
    Ok(out)
}

pub fn ms_ssim(a: &Volume, b: &Volume) -> Result<f64> {
    ms_ssim_scales(a, b, usable_scales(a.dims().as_array()))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairScore {
    pub mean: f64,
    pub pairs: usize,
    pub scales: usize,
}

/// Mean MS-SSIM over `n_pairs` seeded random pairs of distinct indices.
pub fn ms_ssim_pairs(volumes: &[Volume], n_pairs: usize, seed: u64) -> Result<PairScore> {
    if volumes.len() < 2 || n_pairs == 0 {
        return Err(LadError::Data(format!("ms-ssim needs >= 2 volumes and >= 1 pair, got {} and {n_pairs}", volumes.len())));
    }
    let dims = volumes[0].dims();
    let scales = usable_scales(dims.as_array());
    if scales < SCALE_WEIGHTS.len() {
        warn!("ms-ssim: {dims} supports only {scales} scale(s)");
    }
    let mut rng = seeds::rng_for(seed, seeds::stream::METRICS, 1);
    let mut acc = 0.0;
    for _ in 0..n_pairs {
        let i = rng.random_range(0..volumes.len());
        let mut j = rng.random_range(0..volumes.len() - 1);
        if j >= i {
            j += 1;
        }
        acc += ms_ssim_scales(&volumes[i], &volumes[j], scales)?;
    }
    Ok(PairScore {
        mean: acc / n_pairs as f64,
        pairs: n_pairs,
        scales,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scale_count_follows_size() {
        assert_eq!(usable_scales([32, 64, 64]), 3);
        assert_eq!(usable_scales([8, 64, 64]), 2);
        assert_eq!(usable_scales([3, 3, 3]), 1);
    }

    #[test]
    fn taps_sum_to_one() {
        let t = gaussian_taps();
        assert_eq!(t.len(), 11);
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
