//! Guidance signal assembled from a label mask.
//!
//! Content: the mask scaled into `[0, 1]`, passed through the frozen codec
//! encoder, then two trainable 3×3×3 convolutions that keep the latent grid.
//! Structure: per-slice Betti numbers, squashed by `log(1 + v) / log(17)`.

use lad_tensor::nn::{Bind, Conv3d};
use lad_tensor::{Graph, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::Codec;
use crate::error::{LadError, Result};
use crate::seeds;
use crate::topo;
use crate::volume::LabelMask;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StructureNorm {
    /// `log(1 + v) / log(17)`.
    Log,
    /// Raw counts.
    Raw,
}

pub fn normalize_structure(counts: &[u32], norm: StructureNorm) -> Vec<f32> {
    let scale = 1.0 / 17f64.ln();
    counts
        .iter()
        .map(|&v| match norm {
            StructureNorm::Log => ((v as f64).ln_1p() * scale) as f32,
            StructureNorm::Raw => v as f32,
        })
        .collect()
}

/// Condition ahead of the trainable layers.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionInput {
    /// Frozen-encoder features `[C, d, h, w]`.
    pub encoded: Tensor,
    /// Normalized structure vector, length `6·D`.
    pub structure: Vec<f32>,
    pub is_null: bool,
}

/// Evaluated condition.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionVector {
    /// `[C, d, h, w]`; all zeros when null.
    pub content: Tensor,
    pub structure: Vec<f32>,
    pub is_null: bool,
}

/// Frozen-encoder features of a mask, `[C, d, h, w]`.
pub fn encode_mask(mask: &LabelMask, codec: &Codec) -> Result<Tensor> {
    let z = codec.encode_tensor(mask.to_unit_tensor())?;
    let s = z.shape().to_vec();
    Ok(z.reshape(&s[1..])?)
}

pub fn condition_input(mask: &LabelMask, codec: &Codec, norm: StructureNorm) -> Result<ConditionInput> {
    Ok(ConditionInput {
        encoded: encode_mask(mask, codec)?,
        structure: normalize_structure(&topo::structure_vector_volume(mask).0, norm),
        is_null: false,
    })
}

/// Unconditional identifier: zero content and a zero structure slot that the
/// denoiser replaces with its learned null token.
pub fn null_condition(channels: usize, latent: [usize; 3], depth: usize) -> ConditionInput {
    ConditionInput {
        encoded: Tensor::zeros(&[channels, latent[0], latent[1], latent[2]]),
        structure: vec![0.0; 6 * depth],
        is_null: true,
    }
}

/// The two trainable content convolutions.
#[derive(Clone, Copy, Debug)]
pub struct ContentHead {
    c1: Conv3d,
    c2: Conv3d,
}

impl ContentHead {
    pub fn new<R: Rng>(store: &mut ParamStore, channels: usize, rng: &mut R) -> Self {
        ContentHead {
            c1: Conv3d::new(store, "content.c1", channels, channels, 3, 1, rng),
            c2: Conv3d::new(store, "content.c2", channels, channels, 3, 1, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: Bind, encoded: Var) -> Result<Var> {
        let h = self.c1.forward(g, p, encoded)?;
        let h = g.silu(h);
        Ok(self.c2.forward(g, p, h)?)
    }

    pub fn params(&self) -> [lad_tensor::ParamId; 4] {
        [self.c1.weight, self.c1.bias, self.c2.weight, self.c2.bias]
    }

    /// Evaluate a condition outside of training.
    pub fn evaluate(&self, store: &ParamStore, input: &ConditionInput) -> Result<ConditionVector> {
        if input.is_null {
            return Ok(ConditionVector {
                content: Tensor::zeros(input.encoded.shape()),
                structure: input.structure.clone(),
                is_null: true,
            });
        }
        let s = input.encoded.shape().to_vec();
        let mut g = Graph::new();
        let e = g.constant(input.encoded.clone().reshape(&[1, s[0], s[1], s[2], s[3]])?);
        let c = self.forward(&mut g, Bind::frozen(store), e)?;
        Ok(ConditionVector {
            content: g.value(c).clone().reshape(&s)?,
            structure: input.structure.clone(),
            is_null: false,
        })
    }
}

/// Whether batch item `index` at `step` trains unconditionally. A pure
/// function of its arguments; `p = 0` never and `p = 1` always drops.
pub fn condition_dropout(seed: u64, step: u64, index: usize, p: f64) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive_seed(seed, "dropout", step.wrapping_mul(1 << 20) + index as u64));
    rng.random::<f64>() < p
}

/// Checks a condition against the latent grid it will steer.
pub fn check_condition(c: &ConditionInput, channels: usize, latent: [usize; 3]) -> Result<()> {
    let want = [channels, latent[0], latent[1], latent[2]];
    if c.encoded.shape() != want {
        return Err(LadError::Shape(format!(
            "condition content {:?} does not match latent {:?}",
            c.encoded.shape(),
            want
        )));
    }
    Ok(())
}
