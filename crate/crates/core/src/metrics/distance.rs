//! Set-level distances between feature sets: Fréchet distance and kernel MMD.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::features::FeatureSet;
use crate::error::{LadError, Result};
use crate::seeds;

/// Covariance regularizer.
pub const FID_EPS: f64 = 1e-6;

fn check_pair(a: &FeatureSet, b: &FeatureSet) -> Result<()> {
    if a.len() < 2 || b.len() < 2 {
        return Err(LadError::Data(format!("need at least 2 rows per set, got {} and {}", a.len(), b.len())));
    }
    if a.width() != b.width() {
        return Err(LadError::Shape(format!("feature widths {} and {} differ", a.width(), b.width())));
    }
    Ok(())
}

/// Column means and unbiased covariance.
pub fn moments(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows() as f64;
    let mu = x.row_mean().transpose();
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= mu.transpose();
    }
    let cov = centered.transpose() * &centered / (n - 1.0);
    (mu, cov)
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let e = SymmetricEigen::new(sym);
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &e.eigenvectors * d * e.eigenvectors.transpose()
}

/// Fréchet distance between Gaussians with the given moments.
pub fn frechet(mu_a: &DVector<f64>, cov_a: &DMatrix<f64>, mu_b: &DVector<f64>, cov_b: &DMatrix<f64>) -> f64 {
    let f = cov_a.nrows();
    let eye = DMatrix::<f64>::identity(f, f) * FID_EPS;
    let ca = cov_a + &eye;
    let cb = cov_b + &eye;
    let ra = sym_sqrt(&ca);
    let inner = &ra * &cb * &ra;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let diff = mu_a - mu_b;
    (diff.norm_squared() + ca.trace() + cb.trace() - 2.0 * tr_sqrt).max(0.0)
}

pub fn fid(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    check_pair(a, b)?;
    let (ma, ca) = moments(&a.data);
    let (mb, cb) = moments(&b.data);
    Ok(frechet(&ma, &ca, &mb, &cb))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MmdResult {
    /// Unbiased estimate, may be slightly negative.
    pub raw: f64,
    pub bandwidth: f64,
    /// Set when every pooled point coincided and bandwidth 1 was used.
    pub bandwidth_fallback: bool,
}

impl MmdResult {
    pub fn value(&self) -> f64 {
        self.raw.max(0.0)
    }
}

fn sq_dists(rows: &[DVector<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    let mut d = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let v = (&rows[i] - &rows[j]).norm_squared();
            d[(i, j)] = v;
            d[(j, i)] = v;
        }
    }
    d
}

/// Median pairwise distance over distinct pairs.
pub fn median_bandwidth(d2: &DMatrix<f64>) -> f64 {
    let n = d2.nrows();
    let mut v: Vec<f64> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).map(|(i, j)| d2[(i, j)].sqrt()).collect();
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len();
    if m % 2 == 1 {
        v[m / 2]
    } else {
        0.5 * (v[m / 2 - 1] + v[m / 2])
    }
}

/// Unbiased squared MMD for a split `idx[..na]` vs `idx[na..]` of pooled
/// squared distances.
fn mmd_split(d2: &DMatrix<f64>, idx: &[usize], na: usize, bw: f64) -> f64 {
    let k = |i: usize, j: usize| (-d2[(i, j)] / (2.0 * bw * bw)).exp();
    let (a, b) = idx.split_at(na);
    let within = |s: &[usize]| {
        let n = s.len() as f64;
        let mut acc = 0.0;
        for (p, &i) in s.iter().enumerate() {
            for &j in &s[p + 1..] {
                acc += k(i, j);
            }
        }
        2.0 * acc / (n * (n - 1.0))
    };
    let mut cross = 0.0;
    for &i in a {
        for &j in b {
            cross += k(i, j);
        }
    }
    within(a) + within(b) - 2.0 * cross / (a.len() * b.len()) as f64
}

fn pooled(a: &FeatureSet, b: &FeatureSet) -> (DMatrix<f64>, f64, bool) {
    let rows: Vec<DVector<f64>> = a.data.row_iter().chain(b.data.row_iter()).map(|r| r.transpose()).collect();
    let d2 = sq_dists(&rows);
    let bw = median_bandwidth(&d2);
    if bw > 0.0 && bw.is_finite() {
        (d2, bw, false)
    } else {
        (d2, 1.0, true)
    }
}

/// Unbiased RBF-kernel MMD² with the pooled median bandwidth.
pub fn mmd(a: &FeatureSet, b: &FeatureSet) -> Result<MmdResult> {
    check_pair(a, b)?;
    let (d2, bw, fallback) = pooled(a, b);
    let idx: Vec<usize> = (0..d2.nrows()).collect();
    Ok(MmdResult {
        raw: mmd_split(&d2, &idx, a.len(), bw),
        bandwidth: bw,
        bandwidth_fallback: fallback,
    })
}

/// Quantile `q` of the MMD² permutation null for the pooled sets.
pub fn mmd_permutation_threshold(a: &FeatureSet, b: &FeatureSet, permutations: usize, q: f64, seed: u64) -> Result<f64> {
    check_pair(a, b)?;
    let (d2, bw, _) = pooled(a, b);
    let mut idx: Vec<usize> = (0..d2.nrows()).collect();
    let mut rng = seeds::rng_for(seed, seeds::stream::METRICS, 0);
    let mut null: Vec<f64> = (0..permutations.max(1))
        .map(|_| {
            idx.shuffle(&mut rng);
            mmd_split(&d2, &idx, a.len(), bw)
        })
        .collect();
    null.sort_by(f64::total_cmp);
    let pos = ((q.clamp(0.0, 1.0) * (null.len() - 1) as f64).round() as usize).min(null.len() - 1);
    Ok(null[pos])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> FeatureSet {
        FeatureSet::new(DMatrix::from_fn(rows, cols, f), "t").unwrap()
    }

    #[test]
    fn one_dimensional_mean_shift() {
        // samples {-1, 1} have mean 0 and unbiased variance 2 in both sets
        let a = set(2, 1, |i, _| if i == 0 { -1.0 } else { 1.0 });
        let b = set(2, 1, |i, _| if i == 0 { 0.0 } else { 2.0 });
        assert!((fid(&a, &b).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn mmd_symmetric_and_bandwidth_fallback() {
        let a = set(5, 3, |i, j| (i * 3 + j) as f64 * 0.1);
        let b = set(4, 3, |i, j| ((i + 7) * j) as f64 * 0.05);
        let ab = mmd(&a, &b).unwrap();
        let ba = mmd(&b, &a).unwrap();
        assert!((ab.raw - ba.raw).abs() < 1e-12);
        let c = set(3, 2, |_, _| 1.0);
        let r = mmd(&c, &c).unwrap();
        assert!(r.bandwidth_fallback);
        assert_eq!(r.bandwidth, 1.0);
    }

    #[test]
    fn rejects_tiny_sets() {
        let a = set(1, 2, |_, _| 0.0);
        let b = set(3, 2, |_, _| 0.0);
        assert!(fid(&a, &b).is_err());
        assert!(mmd(&a, &b).is_err());
    }
}
