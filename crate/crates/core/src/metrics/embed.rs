//! Classical MDS to the plane and direct least-squares ellipse fitting.

use nalgebra::{DMatrix, Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use super::features::FeatureSet;
use crate::error::{LadError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    /// `N × 2`.
    pub points: Vec<[f64; 2]>,
    /// Set when the input had fewer than two positive directions.
    pub rank_deficient: bool,
}

/// Classical MDS: top two eigenpairs of the double-centred squared-distance
/// matrix; each axis is signed so its first nonzero coordinate is positive.
pub fn mds_embed(features: &FeatureSet) -> Result<Embedding> {
    let x = &features.data;
    let n = x.nrows();
    if n < 3 {
        return Err(LadError::Data(format!("mds needs at least 3 points, got {n}")));
    }
    let mut d2 = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let v = (x.row(i) - x.row(j)).norm_squared();
            d2[(i, j)] = v;
            d2[(j, i)] = v;
        }
    }
    let j = DMatrix::<f64>::identity(n, n) - DMatrix::from_element(n, n, 1.0 / n as f64);
    let b = (&j * d2 * &j) * -0.5;
    let b = (&b + b.transpose()) * 0.5;
    let e = SymmetricEigen::new(b);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|p, q| e.eigenvalues[*q].total_cmp(&e.eigenvalues[*p]));
    let scale = e.eigenvalues.iter().fold(0f64, |m, v| m.max(v.abs())).max(1e-300);
    let tol = 1e-10 * scale;
    let mut axes = [vec![0.0; n], vec![0.0; n]];
    let mut rank = 0;
    for (k, axis) in axes.iter_mut().enumerate() {
        let lam = e.eigenvalues[order[k]];
        if lam <= tol {
            continue;
        }
        rank += 1;
        let v = e.eigenvectors.column(order[k]);
        let s = lam.sqrt();
        for (i, a) in axis.iter_mut().enumerate() {
            *a = v[i] * s;
        }
        let peak = axis.iter().fold(0f64, |m, v| m.max(v.abs()));
        if let Some(first) = axis.iter().find(|v| v.abs() > 1e-9 * peak) {
            if *first < 0.0 {
                axis.iter_mut().for_each(|v| *v = -*v);
            }
        }
    }
    Ok(Embedding {
        points: (0..n).map(|i| [axes[0][i], axes[1][i]]).collect(),
        rank_deficient: rank < 2,
    })
}

/// Conic `a x² + b xy + c y² + d x + e y + f = 0`, normalized to `a + c = 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub conic: [f64; 6],
    pub center: [f64; 2],
    /// Major then minor.
    pub semi_axes: [f64; 2],
    /// Angle of the major axis from the x axis, radians.
    pub angle: f64,
}

/// Direct least-squares ellipse fit in the numerically stable split form.
pub fn ellipse_fit(points: &[[f64; 2]]) -> Result<Ellipse> {
    let n = points.len();
    if n < 5 {
        return Err(LadError::Degenerate(format!("ellipse fit needs at least 5 points, got {n}")));
    }
    if points.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
        return Err(LadError::Data("ellipse fit got non-finite points".into()));
    }
    // centre and scale for conditioning
    let mx = points.iter().map(|p| p[0]).sum::<f64>() / n as f64;
    let my = points.iter().map(|p| p[1]).sum::<f64>() / n as f64;
    let s = (points.iter().map(|p| (p[0] - mx).powi(2) + (p[1] - my).powi(2)).sum::<f64>() / n as f64).sqrt();
    if s <= 1e-300 {
        return Err(LadError::Degenerate("ellipse fit on coincident points".into()));
    }
    let mut s1 = Matrix3::<f64>::zeros();
    let mut s2 = Matrix3::<f64>::zeros();
    let mut s3 = Matrix3::<f64>::zeros();
    for p in points {
        let (x, y) = ((p[0] - mx) / s, (p[1] - my) / s);
        let q = Vector3::new(x * x, x * y, y * y);
        let l = Vector3::new(x, y, 1.0);
        s1 += q * q.transpose();
        s2 += q * l.transpose();
        s3 += l * l.transpose();
    }
    let s3_inv = s3
        .try_inverse()
        .filter(|_| s3.determinant().abs() > 1e-12 * s3.norm().powi(3))
        .ok_or_else(|| LadError::Degenerate("ellipse fit on collinear points".into()))?;
    let t = -s3_inv * s2.transpose();
    let m = s1 + s2 * t;
    // premultiply by the inverse of the constraint matrix [[0,0,2],[0,-1,0],[2,0,0]]
    let m = Matrix3::from_rows(&[
        (m.row(2) / 2.0).into_owned(),
        (-m.row(1)).into_owned(),
        (m.row(0) / 2.0).into_owned(),
    ]);
    let mut best: Option<(f64, Vector3<f64>)> = None;
    for lam in m.complex_eigenvalues().iter() {
        if lam.im.abs() > 1e-9 * (1.0 + lam.re.abs()) {
            continue;
        }
        let v = null_vector(&(m - Matrix3::identity() * lam.re));
        let cond = 4.0 * v[0] * v[2] - v[1] * v[1];
        if cond > 0.0 && best.as_ref().is_none_or(|(c, _)| cond > *c) {
            best = Some((cond, v));
        }
    }
    let (_, a1) = best.ok_or_else(|| LadError::Degenerate("no elliptic solution for these points".into()))?;
    let a2 = t * a1;
    let (aa, bb, cc, dd, ee, ff) = (a1[0], a1[1], a1[2], a2[0], a2[1], a2[2]);
    // undo the conditioning transform
    let s2_ = s * s;
    let a = aa / s2_;
    let b = bb / s2_;
    let c = cc / s2_;
    let d = (-2.0 * aa * mx - bb * my) / s2_ + dd / s;
    let e = (-2.0 * cc * my - bb * mx) / s2_ + ee / s;
    let f = (aa * mx * mx + bb * mx * my + cc * my * my) / s2_ - (dd * mx + ee * my) / s + ff;
    let norm = a + c;
    let conic = [a / norm, b / norm, c / norm, d / norm, e / norm, f / norm];
    geometry(conic)
}

fn null_vector(m: &Matrix3<f64>) -> Vector3<f64> {
    let svd = m.svd(false, true);
    let vt = svd.v_t.expect("requested V^T");
    let k = (0..3).min_by(|i, j| svd.singular_values[*i].total_cmp(&svd.singular_values[*j])).unwrap_or(2);
    vt.row(k).transpose()
}

/// Centre, semi-axes and orientation of an elliptic conic.
pub fn geometry(conic: [f64; 6]) -> Result<Ellipse> {
    let [a, b, c, d, e, f] = conic;
    let disc = b * b - 4.0 * a * c;
    if disc >= 0.0 {
        return Err(LadError::Degenerate(format!("conic is not an ellipse (b^2 - 4ac = {disc})")));
    }
    let den = 4.0 * a * c - b * b;
    let cx = (b * e - 2.0 * c * d) / den;
    let cy = (b * d - 2.0 * a * e) / den;
    let f0 = f + 0.5 * (d * cx + e * cy);
    let q = nalgebra::Matrix2::new(a, b / 2.0, b / 2.0, c);
    let eig = SymmetricEigen::new(q);
    let mut axes = [(0.0, 0usize); 2];
    for (k, ax) in axes.iter_mut().enumerate() {
        let lam = eig.eigenvalues[k];
        let r2 = -f0 / lam;
        if r2.is_nan() || r2 <= 0.0 {
            return Err(LadError::Degenerate("conic describes an empty ellipse".into()));
        }
        *ax = (r2.sqrt(), k);
    }
    axes.sort_by(|p, q| q.0.total_cmp(&p.0));
    let v = eig.eigenvectors.column(axes[0].1);
    let mut angle = v[1].atan2(v[0]);
    if angle < 0.0 {
        angle += std::f64::consts::PI;
    }
    if angle >= std::f64::consts::PI {
        angle -= std::f64::consts::PI;
    }
    Ok(Ellipse {
        conic,
        center: [cx, cy],
        semi_axes: [axes[0].0, axes[1].0],
        angle,
    })
}
