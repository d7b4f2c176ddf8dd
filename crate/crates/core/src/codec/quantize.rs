//! Latent grids and nearest-entry vector quantization.

use lad_tensor::Tensor;

use crate::error::{LadError, Result};

/// `[C, d, h, w]` feature grid.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid {
    pub data: Tensor,
    pub quantized: bool,
    /// One index per spatial position, raster order.
    pub code_indices: Option<Vec<usize>>,
}

impl LatentGrid {
    pub fn new(data: Tensor) -> Result<Self> {
        if data.shape().len() != 4 {
            return Err(LadError::Shape(format!("latent grid must be [C,d,h,w], got {:?}", data.shape())));
        }
        Ok(LatentGrid {
            data,
            quantized: false,
            code_indices: None,
        })
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn spatial(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[1], s[2], s[3]]
    }

    /// `[1, C, d, h, w]`.
    pub fn to_batch(&self) -> Tensor {
        let s = self.data.shape();
        self.data.clone().reshape(&[1, s[0], s[1], s[2], s[3]]).expect("same numel")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    entries: Vec<f32>,
    k: usize,
    c: usize,
}

impl Codebook {
    pub fn new(entries: Vec<f32>, k: usize, c: usize) -> Result<Self> {
        if k < 2 || c == 0 || entries.len() != k * c {
            return Err(LadError::Shape(format!("codebook of {} values is not {k}x{c} with K >= 2", entries.len())));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(LadError::Data("codebook has non-finite entries".into()));
        }
        Ok(Codebook { entries, k, c })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() != 2 {
            return Err(LadError::Shape(format!("codebook tensor {s:?}")));
        }
        Codebook::new(t.data().to_vec(), s[0], s[1])
    }

    pub fn len(&self) -> usize {
        self.k
    }

    pub fn is_empty(&self) -> bool {
        self.k == 0
    }

    pub fn dim(&self) -> usize {
        self.c
    }

    pub fn entry(&self, i: usize) -> &[f32] {
        &self.entries[i * self.c..(i + 1) * self.c]
    }

    /// Index of the nearest entry under squared Euclidean distance; ties go
    /// to the lowest index.
    pub fn nearest(&self, v: &[f32]) -> usize {
        let mut best = (0usize, f32::INFINITY);
        for i in 0..self.k {
            let d: f32 = self.entry(i).iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.1 {
                best = (i, d);
            }
        }
        best.0
    }

    /// Nearest entries for a `[B, C, spatial...]` channel-major layout.
    /// Returns batch-major indices and the quantized values in the same layout.
    pub fn assign(&self, data: &[f32], shape: &[usize]) -> Result<(Vec<usize>, Vec<f32>)> {
        if shape.len() < 2 || shape[1] != self.c {
            return Err(LadError::Shape(format!(
                "latent {:?} has {} channels, codebook dim is {}",
                shape,
                shape.get(1).copied().unwrap_or(0),
                self.c
            )));
        }
        let (b, c) = (shape[0], shape[1]);
        let spatial: usize = shape[2..].iter().product();
        let mut idx = Vec::with_capacity(b * spatial);
        let mut out = vec![0.0f32; data.len()];
        let mut v = vec![0.0f32; c];
        for bi in 0..b {
            for s in 0..spatial {
                for (ch, slot) in v.iter_mut().enumerate() {
                    *slot = data[(bi * c + ch) * spatial + s];
                }
                let k = self.nearest(&v);
                idx.push(k);
                for (ch, e) in self.entry(k).iter().enumerate() {
                    out[(bi * c + ch) * spatial + s] = *e;
                }
            }
        }
        Ok((idx, out))
    }
}

/// Replace every spatial vector by its nearest codebook entry.
pub fn quantize(latent: &LatentGrid, codebook: &Codebook) -> Result<LatentGrid> {
    let s = latent.data.shape();
    let shape = [1, s[0], s[1], s[2], s[3]];
    let (idx, values) = codebook.assign(latent.data.data(), &shape)?;
    Ok(LatentGrid {
        data: Tensor::new(s, values)?,
        quantized: true,
        code_indices: Some(idx),
    })
}
