//! 3D convolution kernels (im2col + sgemm) and nearest-neighbour upsampling.
//!
//! Layout is `[batch, channels, depth, height, width]`, row-major. The im2col
//! buffer is built for a band of output depth slices at a time so memory stays
//! bounded for full-resolution volumes.

use crate::tensor::conv_out_len;

/// Upper bound on im2col buffer size, in floats.
const COL_BUDGET: usize = 1 << 21;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    pub fn new(cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize, input: [usize; 3]) -> Self {
        let output = [
            conv_out_len(input[0], kernel, stride, pad),
            conv_out_len(input[1], kernel, stride, pad),
            conv_out_len(input[2], kernel, stride, pad),
        ];
        ConvGeom {
            cin,
            cout,
            kernel,
            stride,
            pad,
            input,
            output,
        }
    }

    fn rows(&self) -> usize {
        self.cin * self.kernel.pow(3)
    }

    fn in_len(&self) -> usize {
        self.cin * self.input.iter().product::<usize>()
    }

    fn out_spatial(&self) -> usize {
        self.output.iter().product()
    }

    fn plane(&self) -> usize {
        self.output[1] * self.output[2]
    }

    /// Output depth bands `[start, end)` sized to the im2col budget.
    fn bands(&self) -> Vec<(usize, usize)> {
        let per_slice = self.rows() * self.plane();
        let step = (COL_BUDGET / per_slice.max(1)).max(1);
        let mut out = Vec::new();
        let mut z = 0;
        while z < self.output[0] {
            let end = (z + step).min(self.output[0]);
            out.push((z, end));
            z = end;
        }
        out
    }
}

/// Output indices `o` in `[0, out_len)` with `o * stride + offset` inside `[0, in_len)`.
fn valid_range(out_len: usize, in_len: usize, stride: usize, offset: isize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { ((-offset) + s - 1) / s };
    // largest o with o*s + offset <= in_len - 1
    let top = in_len as isize - 1 - offset;
    let hi = if top < 0 { 0 } else { top / s + 1 };
    let lo = lo.max(0) as usize;
    let hi = (hi.max(0) as usize).min(out_len);
    (lo.min(hi), hi)
}

fn im2col(x: &[f32], g: &ConvGeom, band: (usize, usize), col: &mut [f32]) {
    let [id_, ih_, iw_] = g.input;
    let [_, oh_, ow_] = g.output;
    let k = g.kernel;
    let s = g.stride;
    let n = (band.1 - band.0) * g.plane();
    for ci in 0..g.cin {
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let row = ((ci * k + kd) * k + kh) * k + kw;
                    let dst = &mut col[row * n..(row + 1) * n];
                    dst.fill(0.0);
                    let (w_lo, w_hi) = valid_range(ow_, iw_, s, kw as isize - g.pad as isize);
                    for od in band.0..band.1 {
                        let id = (od * s + kd) as isize - g.pad as isize;
                        if id < 0 || id >= id_ as isize {
                            continue;
                        }
                        for oh in 0..oh_ {
                            let ih = (oh * s + kh) as isize - g.pad as isize;
                            if ih < 0 || ih >= ih_ as isize {
                                continue;
                            }
                            let src = ((ci * id_ + id as usize) * ih_ + ih as usize) * iw_;
                            let dbase = ((od - band.0) * oh_ + oh) * ow_;
                            if s == 1 {
                                let iw0 = (w_lo as isize + kw as isize - g.pad as isize) as usize;
                                dst[dbase + w_lo..dbase + w_hi]
                                    .copy_from_slice(&x[src + iw0..src + iw0 + (w_hi - w_lo)]);
                            } else {
                                for ow in w_lo..w_hi {
                                    let iw = (ow * s + kw) - g.pad;
                                    dst[dbase + ow] = x[src + iw];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add(col: &[f32], g: &ConvGeom, band: (usize, usize), dx: &mut [f32]) {
    let [id_, ih_, iw_] = g.input;
    let [_, oh_, ow_] = g.output;
    let k = g.kernel;
    let s = g.stride;
    let n = (band.1 - band.0) * g.plane();
    for ci in 0..g.cin {
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let row = ((ci * k + kd) * k + kh) * k + kw;
                    let src_row = &col[row * n..(row + 1) * n];
                    let (w_lo, w_hi) = valid_range(ow_, iw_, s, kw as isize - g.pad as isize);
                    for od in band.0..band.1 {
                        let id = (od * s + kd) as isize - g.pad as isize;
                        if id < 0 || id >= id_ as isize {
                            continue;
                        }
                        for oh in 0..oh_ {
                            let ih = (oh * s + kh) as isize - g.pad as isize;
                            if ih < 0 || ih >= ih_ as isize {
                                continue;
                            }
                            let dst = ((ci * id_ + id as usize) * ih_ + ih as usize) * iw_;
                            let sbase = ((od - band.0) * oh_ + oh) * ow_;
                            for ow in w_lo..w_hi {
                                let iw = (ow * s + kw) - g.pad;
                                dx[dst + iw] += src_row[sbase + ow];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution. `x` is `[batch, cin, D, H, W]`, `w` is
/// `[cout, cin, k, k, k]`; returns `[batch, cout, D', H', W']`.
pub fn conv3d_forward(x: &[f32], batch: usize, w: &[f32], bias: Option<&[f32]>, g: &ConvGeom) -> Vec<f32> {
    let rows = g.rows();
    let nout = g.out_spatial();
    let mut out = vec![0.0f32; batch * g.cout * nout];
    let bands = g.bands();
    let max_n = bands.iter().map(|b| (b.1 - b.0) * g.plane()).max().unwrap_or(0);
    let mut col = vec![0.0f32; rows * max_n];
    for b in 0..batch {
        let xb = &x[b * g.in_len()..(b + 1) * g.in_len()];
        let ob = &mut out[b * g.cout * nout..(b + 1) * g.cout * nout];
        for &band in &bands {
            let n = (band.1 - band.0) * g.plane();
            im2col(xb, g, band, &mut col[..rows * n]);
            let off = band.0 * g.plane();
            // SAFETY: all pointers cover the strided extents described by
            // (m, k, n) and the row/column strides passed alongside them.
            unsafe {
                matrixmultiply::sgemm(
                    g.cout,
                    rows,
                    n,
                    1.0,
                    w.as_ptr(),
                    rows as isize,
                    1,
                    col.as_ptr(),
                    n as isize,
                    1,
                    0.0,
                    ob.as_mut_ptr().add(off),
                    nout as isize,
                    1,
                );
            }
        }
        if let Some(bias) = bias {
            for (co, chunk) in ob.chunks_mut(nout).enumerate() {
                let bv = bias[co];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

/// Gradients of [`conv3d_forward`]. Returns `(dx, dw, db)`; `dx` is only
/// computed when `need_dx`.
pub fn conv3d_backward(
    x: &[f32],
    batch: usize,
    w: &[f32],
    dy: &[f32],
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<f32>>, Vec<f32>, Vec<f32>) {
    let rows = g.rows();
    let nout = g.out_spatial();
    let mut dw = vec![0.0f32; if need_dw { g.cout * rows } else { 0 }];
    let mut db = vec![0.0f32; g.cout];
    let mut dx = if need_dx {
        Some(vec![0.0f32; batch * g.in_len()])
    } else {
        None
    };
    let bands = g.bands();
    let max_n = bands.iter().map(|b| (b.1 - b.0) * g.plane()).max().unwrap_or(0);
    let mut col = vec![0.0f32; rows * max_n];
    for b in 0..batch {
        let xb = &x[b * g.in_len()..(b + 1) * g.in_len()];
        let dyb = &dy[b * g.cout * nout..(b + 1) * g.cout * nout];
        for (co, chunk) in dyb.chunks(nout).enumerate() {
            db[co] += chunk.iter().sum::<f32>();
        }
        for &band in &bands {
            let n = (band.1 - band.0) * g.plane();
            let off = band.0 * g.plane();
            if need_dw {
                im2col(xb, g, band, &mut col[..rows * n]);
                // SAFETY: see conv3d_forward.
                unsafe {
                    matrixmultiply::sgemm(
                        g.cout,
                        n,
                        rows,
                        1.0,
                        dyb.as_ptr().add(off),
                        nout as isize,
                        1,
                        col.as_ptr(),
                        1,
                        n as isize,
                        1.0,
                        dw.as_mut_ptr(),
                        rows as isize,
                        1,
                    );
                }
            }
            if let Some(dx) = dx.as_mut() {
                // SAFETY: see conv3d_forward.
                unsafe {
                    matrixmultiply::sgemm(
                        rows,
                        g.cout,
                        n,
                        1.0,
                        w.as_ptr(),
                        1,
                        rows as isize,
                        dyb.as_ptr().add(off),
                        nout as isize,
                        1,
                        0.0,
                        col.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
                let dxb = &mut dx[b * g.in_len()..(b + 1) * g.in_len()];
                col2im_add(&col[..rows * n], g, band, dxb);
            }
        }
    }
    (dx, dw, db)
}

/// Nearest-neighbour x2 upsampling of the three trailing spatial axes.
pub fn upsample2_forward(x: &[f32], lead: usize, dims: [usize; 3]) -> Vec<f32> {
    let [d, h, w] = dims;
    let (d2, h2, w2) = (2 * d, 2 * h, 2 * w);
    let mut out = vec![0.0f32; lead * d2 * h2 * w2];
    for c in 0..lead {
        let src = &x[c * d * h * w..(c + 1) * d * h * w];
        let dst = &mut out[c * d2 * h2 * w2..(c + 1) * d2 * h2 * w2];
        for z in 0..d2 {
            for y in 0..h2 {
                let srow = &src[((z / 2) * h + y / 2) * w..][..w];
                let drow = &mut dst[(z * h2 + y) * w2..][..w2];
                for (xo, v) in drow.iter_mut().enumerate() {
                    *v = srow[xo / 2];
                }
            }
        }
    }
    out
}

pub fn upsample2_backward(dy: &[f32], lead: usize, dims: [usize; 3]) -> Vec<f32> {
    let [d, h, w] = dims;
    let (d2, h2, w2) = (2 * d, 2 * h, 2 * w);
    let mut dx = vec![0.0f32; lead * d * h * w];
    for c in 0..lead {
        let src = &dy[c * d2 * h2 * w2..(c + 1) * d2 * h2 * w2];
        let dst = &mut dx[c * d * h * w..(c + 1) * d * h * w];
        for z in 0..d2 {
            for y in 0..h2 {
                let srow = &src[(z * h2 + y) * w2..][..w2];
                let drow = &mut dst[((z / 2) * h + y / 2) * w..][..w];
                for (xo, v) in srow.iter().enumerate() {
                    drow[xo / 2] += v;
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct 7-loop convolution used as the reference.
    fn naive(x: &[f32], batch: usize, w: &[f32], bias: &[f32], g: &ConvGeom) -> Vec<f32> {
        let [id, ih, iw] = g.input;
        let [od, oh, ow] = g.output;
        let k = g.kernel;
        let mut out = vec![0.0f32; batch * g.cout * od * oh * ow];
        for b in 0..batch {
            for co in 0..g.cout {
                for z in 0..od {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let mut acc = bias[co] as f64;
                            for ci in 0..g.cin {
                                for kd in 0..k {
                                    for kh in 0..k {
                                        for kw in 0..k {
                                            let zi = (z * g.stride + kd) as isize - g.pad as isize;
                                            let yi = (y * g.stride + kh) as isize - g.pad as isize;
                                            let xi = (xx * g.stride + kw) as isize - g.pad as isize;
                                            if zi < 0 || yi < 0 || xi < 0 || zi >= id as isize || yi >= ih as isize || xi >= iw as isize {
                                                continue;
                                            }
                                            let xv = x[(((b * g.cin + ci) * id + zi as usize) * ih + yi as usize) * iw + xi as usize];
                                            let wv = w[(((co * g.cin + ci) * k + kd) * k + kh) * k + kw];
                                            acc += (xv * wv) as f64;
                                        }
                                    }
                                }
                            }
                            out[(((b * g.cout + co) * od + z) * oh + y) * ow + xx] = acc as f32;
                        }
                    }
                }
            }
        }
        out
    }

    fn pseudo(n: usize, seed: u32) -> Vec<f32> {
        let mut s = seed.wrapping_mul(2654435761).wrapping_add(12345);
        (0..n)
            .map(|_| {
                s ^= s << 13;
                s ^= s >> 17;
                s ^= s << 5;
                (s % 2001) as f32 / 1000.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn forward_matches_naive_for_several_geometries() {
        for &(cin, cout, k, s, p, dims) in &[
            (2usize, 3usize, 3usize, 1usize, 1usize, [4usize, 5usize, 6usize]),
            (3, 2, 3, 2, 1, [5, 6, 7]),
            (1, 4, 1, 1, 0, [3, 3, 3]),
            (2, 2, 4, 2, 1, [8, 6, 4]),
        ] {
            let g = ConvGeom::new(cin, cout, k, s, p, dims);
            let batch = 2;
            let x = pseudo(batch * cin * dims.iter().product::<usize>(), 1);
            let w = pseudo(cout * cin * k * k * k, 2);
            let bias = pseudo(cout, 3);
            let fast = conv3d_forward(&x, batch, &w, Some(&bias), &g);
            let slow = naive(&x, batch, &w, &bias, &g);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-4, "{a} vs {b} for {g:?}");
            }
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <dy, conv(x)> == <conv^T(dy), x> and == <dW, w> (bias excluded)
        let g = ConvGeom::new(2, 3, 3, 2, 1, [5, 4, 6]);
        let batch = 2;
        let x = pseudo(batch * 2 * 120, 7);
        let w = pseudo(3 * 2 * 27, 8);
        let y = conv3d_forward(&x, batch, &w, None, &g);
        let dy = pseudo(y.len(), 9);
        let (dx, dw, _) = conv3d_backward(&x, batch, &w, &dy, &g, true, true);
        let lhs: f64 = y.iter().zip(&dy).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        let via_x: f64 = dx.unwrap().iter().zip(&x).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        let via_w: f64 = dw.iter().zip(&w).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        assert!((lhs - via_x).abs() < 1e-3 * lhs.abs().max(1.0));
        assert!((lhs - via_w).abs() < 1e-3 * lhs.abs().max(1.0));
    }

    #[test]
    fn upsample_backward_sums_children() {
        let x = pseudo(2 * 2 * 3 * 2, 4);
        let y = upsample2_forward(&x, 2, [2, 3, 2]);
        assert_eq!(y.len(), x.len() * 8);
        let dx = upsample2_backward(&vec![1.0; y.len()], 2, [2, 3, 2]);
        assert!(dx.iter().all(|v| *v == 8.0));
    }

    #[test]
    fn valid_range_edges() {
        assert_eq!(valid_range(4, 4, 1, -1), (1, 4));
        assert_eq!(valid_range(4, 4, 1, 1), (0, 3));
        assert_eq!(valid_range(2, 4, 2, -1), (1, 2));
        assert_eq!(valid_range(2, 4, 2, 1), (0, 2));
    }
}
