//! Encoder, decoder and patch discriminator.

use lad_tensor::nn::{Bind, Conv3d};
use lad_tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::quantize::{Codebook, LatentGrid};
use crate::error::{LadError, Result};
use crate::hashing;
use crate::volume::{Axis, Dims, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalityMode {
    /// Every voxel of the (margin-expanded) foreground box.
    Bbox,
    /// Only voxels with a nonzero label.
    Masked,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecConfig {
    pub channels: usize,
    pub codebook_size: usize,
    /// Per-axis `(D, H, W)` downsampling; uniform power of two.
    pub compression: [usize; 3],
    pub base_width: usize,
    pub commitment: f64,
    pub perceptual_weight: f64,
    pub adversarial_weight: f64,
    pub feature_matching_weight: f64,
    /// First step at which the discriminator trains and feeds the generator.
    pub disc_start: u64,
    pub lambda_loc: f64,
    pub bbox_margin: usize,
    pub locality_mode: LocalityMode,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub checkpoint_every: u64,
    pub seed: u64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            channels: 8,
            codebook_size: 512,
            compression: [4, 4, 4],
            base_width: 8,
            commitment: 0.25,
            perceptual_weight: 1.0,
            adversarial_weight: 0.05,
            feature_matching_weight: 0.1,
            disc_start: 100,
            lambda_loc: 1.0,
            bbox_margin: 2,
            locality_mode: LocalityMode::Bbox,
            lr: 1e-3,
            batch_size: 2,
            steps: 200,
            checkpoint_every: 50,
            seed: 0,
        }
    }
}

impl CodecConfig {
    pub fn levels(&self) -> Result<usize> {
        let r = self.compression[0];
        if self.compression.iter().any(|c| *c != r) || !r.is_power_of_two() || r > 16 {
            return Err(LadError::Config(format!(
                "compression {:?} must be the same power of two on every axis",
                self.compression
            )));
        }
        Ok(r.trailing_zeros() as usize)
    }

    pub fn validate(&self) -> Result<()> {
        self.levels()?;
        if self.channels == 0 || self.base_width == 0 {
            return Err(LadError::Config("codec widths must be positive".into()));
        }
        if self.codebook_size < 2 {
            return Err(LadError::Config("codebook_size must be >= 2".into()));
        }
        if self.batch_size == 0 {
            return Err(LadError::Config("codec batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(LadError::Config("codec lr must be positive".into()));
        }
        for (name, v) in [
            ("lambda_loc", self.lambda_loc),
            ("commitment", self.commitment),
            ("perceptual_weight", self.perceptual_weight),
            ("adversarial_weight", self.adversarial_weight),
            ("feature_matching_weight", self.feature_matching_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(LadError::Config(format!("codec {name} must be >= 0")));
            }
        }
        Ok(())
    }

    /// Hash of everything that shapes the trained model; the step budget and
    /// checkpoint cadence are excluded so that a longer run can resume.
    pub fn model_hash(&self) -> String {
        let mut c = self.clone();
        c.steps = 0;
        c.checkpoint_every = 0;
        hashing::hash_serialized(&c)
    }
}

/// Shape error naming the first axis not divisible by the compression rate.
pub fn check_divisible(dims: Dims, rate: [usize; 3]) -> Result<()> {
    let arr = dims.as_array();
    for axis in Axis::ALL {
        let (n, r) = (arr[axis.index()], rate[axis.index()]);
        if r == 0 || n % r != 0 {
            return Err(LadError::Shape(format!("axis {axis}={n} is not divisible by compression {r}")));
        }
    }
    Ok(())
}

pub struct Codec {
    pub config: CodecConfig,
    pub params: ParamStore,
    /// Spacing stamped on decoded volumes.
    pub spacing: [f64; 3],
    enc_in: Conv3d,
    enc_down: Vec<Conv3d>,
    enc_mid: Conv3d,
    enc_out: Conv3d,
    dec_in: Conv3d,
    dec_up: Vec<Conv3d>,
    dec_out: Conv3d,
    pub codebook: ParamId,
}

impl Codec {
    pub fn new(config: CodecConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let levels = config.levels()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let w = config.base_width;
        let width = |i: usize| w << i;
        let enc_in = Conv3d::new(&mut p, "enc.in", 1, w, 3, 1, &mut rng);
        let enc_down = (0..levels)
            .map(|i| Conv3d::new(&mut p, &format!("enc.down{i}"), width(i), width(i + 1), 3, 2, &mut rng))
            .collect();
        let top = width(levels);
        let enc_mid = Conv3d::new(&mut p, "enc.mid", top, top, 3, 1, &mut rng);
        let enc_out = Conv3d::new(&mut p, "enc.out", top, config.channels, 1, 1, &mut rng);
        let dec_in = Conv3d::new(&mut p, "dec.in", config.channels, top, 3, 1, &mut rng);
        let dec_up = (0..levels)
            .rev()
            .map(|i| Conv3d::new(&mut p, &format!("dec.up{i}"), width(i + 1), width(i), 3, 1, &mut rng))
            .collect();
        let dec_out = Conv3d::new(&mut p, "dec.out", w, 1, 3, 1, &mut rng);
        let k = config.codebook_size as f32;
        let codebook = p.add_uniform("codebook", &[config.codebook_size, config.channels], 1, 1.0 / k, &mut rng);
        Ok(Codec {
            config,
            params: p,
            spacing: [1.0; 3],
            enc_in,
            enc_down,
            enc_mid,
            enc_out,
            dec_in,
            dec_up,
            dec_out,
            codebook,
        })
    }

    pub fn rate(&self) -> [usize; 3] {
        self.config.compression
    }

    pub fn latent_dims(&self, dims: Dims) -> Result<Dims> {
        check_divisible(dims, self.rate())?;
        let r = self.rate();
        Ok(Dims::new(dims.d / r[0], dims.h / r[1], dims.w / r[2]))
    }

    /// `[B, 1, D, H, W]` → `[B, C, D/r, H/r, W/r]` (unquantized).
    pub fn encode_var(&self, g: &mut Graph, p: Bind, x: Var) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 5 || s[1] != 1 {
            return Err(LadError::Shape(format!("encoder input {s:?} is not [B,1,D,H,W]")));
        }
        check_divisible(Dims::from_shape(&s[2..]), self.rate())?;
        let mut h = self.enc_in.forward(g, p, x)?;
        h = g.silu(h);
        for c in &self.enc_down {
            h = c.forward(g, p, h)?;
            h = g.silu(h);
        }
        h = self.enc_mid.forward(g, p, h)?;
        h = g.silu(h);
        Ok(self.enc_out.forward(g, p, h)?)
    }

    /// `[B, C, d, h, w]` → `[B, 1, d·r, h·r, w·r]` in `(0, 1)`.
    pub fn decode_var(&self, g: &mut Graph, p: Bind, z: Var) -> Result<Var> {
        let s = g.shape(z);
        if s.len() != 5 || s[1] != self.config.channels {
            return Err(LadError::Shape(format!(
                "decoder input {s:?} is not [B,{},d,h,w]",
                self.config.channels
            )));
        }
        let mut h = self.dec_in.forward(g, p, z)?;
        h = g.silu(h);
        for c in &self.dec_up {
            h = g.upsample2(h)?;
            h = c.forward(g, p, h)?;
            h = g.silu(h);
        }
        h = self.dec_out.forward(g, p, h)?;
        Ok(g.sigmoid(h))
    }

    pub fn codebook(&self) -> Codebook {
        Codebook::from_tensor(self.params.get(self.codebook)).expect("codebook parameter shape")
    }

    /// Unquantized latents of a `[B, 1, D, H, W]` batch.
    pub fn encode_tensor(&self, x: Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x);
        let z = self.encode_var(&mut g, Bind::frozen(&self.params), xv)?;
        Ok(g.value(z).clone())
    }

    /// Decoded `[B, 1, D, H, W]` batch.
    pub fn decode_tensor(&self, z: Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let zv = g.constant(z);
        let x = self.decode_var(&mut g, Bind::frozen(&self.params), zv)?;
        Ok(g.value(x).clone())
    }

    pub fn encode(&self, volume: &Volume) -> Result<LatentGrid> {
        let z = self.encode_tensor(volume.to_tensor())?;
        let s = z.shape().to_vec();
        LatentGrid::new(z.reshape(&s[1..])?)
    }

    pub fn quantize(&self, latent: &LatentGrid) -> Result<LatentGrid> {
        super::quantize::quantize(latent, &self.codebook())
    }

    pub fn decode(&self, latent: &LatentGrid) -> Result<Volume> {
        let x = self.decode_tensor(latent.to_batch())?;
        let s = x.shape().to_vec();
        tensor_to_volume(&x.reshape(&s[2..])?, self.spacing, "decoded")
    }

    /// Encode, quantize and decode.
    pub fn reconstruct(&self, volume: &Volume) -> Result<Volume> {
        let q = self.quantize(&self.encode(volume)?)?;
        let mut v = self.decode(&q)?;
        v.id = volume.id.clone();
        Ok(v)
    }
}

/// `[D, H, W]` tensor into a volume, clamping to `[0, 1]`.
pub fn tensor_to_volume(t: &Tensor, spacing: [f64; 3], id: &str) -> Result<Volume> {
    let s = t.shape();
    if s.len() != 3 {
        return Err(LadError::Shape(format!("expected [D,H,W], got {s:?}")));
    }
    let arr = ndarray::Array3::from_shape_vec((s[0], s[1], s[2]), t.data().to_vec())
        .map_err(|e| LadError::Shape(e.to_string()))?;
    Volume::from_clamped(arr, spacing, id)
}

/// Stack volumes into a `[B, 1, D, H, W]` tensor.
pub fn volumes_to_batch(vols: &[&Volume]) -> Result<Tensor> {
    let items: Vec<Tensor> = vols.iter().map(|v| v.to_tensor()).collect();
    Ok(Tensor::stack_batch(&items)?)
}

/// Small fully convolutional patch critic.
pub struct Discriminator {
    pub params: ParamStore,
    c1: Conv3d,
    c2: Conv3d,
    c3: Conv3d,
}

impl Discriminator {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let c1 = Conv3d::new(&mut p, "disc.c1", 1, 8, 3, 2, &mut rng);
        let c2 = Conv3d::new(&mut p, "disc.c2", 8, 16, 3, 2, &mut rng);
        let c3 = Conv3d::new(&mut p, "disc.c3", 16, 1, 3, 1, &mut rng);
        Discriminator { params: p, c1, c2, c3 }
    }

    /// Patch logits and the intermediate activations used for feature matching.
    pub fn forward(&self, g: &mut Graph, p: Bind, x: Var) -> Result<(Var, Vec<Var>)> {
        let h1 = self.c1.forward(g, p, x)?;
        let h1 = g.leaky_relu(h1, 0.2);
        let h2 = self.c2.forward(g, p, h1)?;
        let h2 = g.leaky_relu(h2, 0.2);
        let logits = self.c3.forward(g, p, h2)?;
        Ok((logits, vec![h1, h2]))
    }
}

/// Fixed random feature net standing in for a pretrained perceptual model.
pub struct PerceptualNet {
    params: ParamStore,
    c1: Conv3d,
    c2: Conv3d,
}

pub const PERCEPTUAL_SEED: u64 = 0x7065_7263;

impl PerceptualNet {
    pub fn new() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(PERCEPTUAL_SEED);
        let mut p = ParamStore::new();
        let c1 = Conv3d::new(&mut p, "perc.c1", 1, 8, 3, 2, &mut rng);
        let c2 = Conv3d::new(&mut p, "perc.c2", 8, 16, 3, 2, &mut rng);
        PerceptualNet { params: p, c1, c2 }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Vec<Var>> {
        let p = Bind::frozen(&self.params);
        let h1 = self.c1.forward(g, p, x)?;
        let h1 = g.relu(h1);
        let h2 = self.c2.forward(g, p, h1)?;
        let h2 = g.relu(h2);
        Ok(vec![h1, h2])
    }
}

impl Default for PerceptualNet {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> CodecConfig {
        CodecConfig {
            channels: 4,
            codebook_size: 16,
            base_width: 4,
            ..CodecConfig::default()
        }
    }

    #[test]
    fn latent_shape_and_decode_round_trip() {
        let codec = Codec::new(tiny(), 1).unwrap();
        let a = ndarray::Array3::from_shape_fn((8, 16, 12), |(z, y, x)| ((z + y + x) % 5) as f32 / 4.0);
        let v = Volume::new(a, [1.0; 3], "t").unwrap();
        let z = codec.encode(&v).unwrap();
        assert_eq!(z.data.shape(), &[4, 2, 4, 3]);
        let x = codec.reconstruct(&v).unwrap();
        assert_eq!(x.dims(), v.dims());
        assert!(x.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn indivisible_axis_is_named() {
        let err = check_divisible(Dims::new(32, 65, 64), [4, 4, 4]).unwrap_err().to_string();
        assert!(err.contains("axis H=65"), "{err}");
        assert!(check_divisible(Dims::new(32, 256, 256), [4, 4, 4]).is_ok());
    }

    #[test]
    fn model_hash_ignores_step_budget() {
        let a = CodecConfig::default();
        let b = CodecConfig {
            steps: 999,
            ..a.clone()
        };
        let c = CodecConfig {
            lambda_loc: 0.0,
            ..a.clone()
        };
        assert_eq!(a.model_hash(), b.model_hash());
        assert_ne!(a.model_hash(), c.model_hash());
    }

    #[test]
    fn uneven_compression_is_rejected() {
        let c = CodecConfig {
            compression: [2, 4, 4],
            ..CodecConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
