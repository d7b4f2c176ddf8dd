//! Conditional 3-level 3D U-Net noise predictor over codec latents.
//!
//! Input: `z_t` concatenated with the content grid along channels. The
//! timestep embedding plus the structure embedding (or the learned null
//! token) modulates every residual block.

use lad_tensor::nn::{Bind, Conv3d, GroupNorm, Linear};
use lad_tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::condition::{ConditionInput, ContentHead};
use crate::error::{LadError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    pub base_width: usize,
    pub embed_dim: usize,
    pub groups: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            base_width: 32,
            embed_dim: 64,
            groups: 8,
        }
    }
}

const TIME_FEATURES: usize = 32;
const OUT_INIT_SCALE: f32 = 0.05;

struct ResBlock {
    n1: GroupNorm,
    c1: Conv3d,
    emb: Linear,
    n2: GroupNorm,
    c2: Conv3d,
    skip: Option<Conv3d>,
}

impl ResBlock {
    fn new(p: &mut ParamStore, name: &str, cin: usize, cout: usize, cfg: &UNetConfig, rng: &mut ChaCha8Rng) -> Self {
        ResBlock {
            n1: GroupNorm::new(p, &format!("{name}.n1"), cin, cfg.groups),
            c1: Conv3d::new(p, &format!("{name}.c1"), cin, cout, 3, 1, rng),
            emb: Linear::new(p, &format!("{name}.emb"), cfg.embed_dim, cout, rng),
            n2: GroupNorm::new(p, &format!("{name}.n2"), cout, cfg.groups),
            c2: Conv3d::new(p, &format!("{name}.c2"), cout, cout, 3, 1, rng),
            skip: (cin != cout).then(|| Conv3d::new(p, &format!("{name}.skip"), cin, cout, 1, 1, rng)),
        }
    }

    fn forward(&self, g: &mut Graph, b: Bind, x: Var, emb: Var) -> Result<Var> {
        let h = self.n1.forward(g, b, x)?;
        let h = g.silu(h);
        let h = self.c1.forward(g, b, h)?;
        let e = self.emb.forward(g, b, emb)?;
        let h = g.add_channel(h, e)?;
        let h = self.n2.forward(g, b, h)?;
        let h = g.silu(h);
        let h = self.c2.forward(g, b, h)?;
        let s = match &self.skip {
            Some(c) => c.forward(g, b, x)?,
            None => x,
        };
        Ok(g.add(s, h)?)
    }
}

pub struct Denoiser {
    pub config: UNetConfig,
    pub channels: usize,
    pub structure_len: usize,
    pub params: ParamStore,
    pub content: ContentHead,
    time1: Linear,
    time2: Linear,
    struct1: Linear,
    struct2: Linear,
    /// `[E, 1]` so that a linear map of the null indicator broadcasts it.
    pub null_token: ParamId,
    conv_in: Conv3d,
    down0: ResBlock,
    pool0: Conv3d,
    down1: ResBlock,
    pool1: Conv3d,
    mid: ResBlock,
    up1: ResBlock,
    up0: ResBlock,
    norm_out: GroupNorm,
    conv_out: Conv3d,
}

/// Sinusoidal features of integer timesteps, `[B, 32]`.
pub fn timestep_features(ts: &[usize]) -> Tensor {
    let half = TIME_FEATURES / 2;
    let mut data = Vec::with_capacity(ts.len() * TIME_FEATURES);
    for &t in ts {
        for i in 0..half {
            let f = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            data.push((t as f64 * f).sin() as f32);
        }
        for i in 0..half {
            let f = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            data.push((t as f64 * f).cos() as f32);
        }
    }
    Tensor::new(&[ts.len(), TIME_FEATURES], data).expect("feature shape")
}

impl Denoiser {
    /// `channels`: latent channels; `depth`: volume depth fixing the structure
    /// vector length `6·depth`.
    pub fn new(config: UNetConfig, channels: usize, depth: usize, seed: u64) -> Result<Self> {
        if !config.base_width.is_multiple_of(config.groups) || config.embed_dim == 0 {
            return Err(LadError::Config(format!(
                "U-Net width {} must be a multiple of groups {}",
                config.base_width, config.groups
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let (w, e) = (config.base_width, config.embed_dim);
        let structure_len = 6 * depth;
        let content = ContentHead::new(&mut p, channels, &mut rng);
        let time1 = Linear::new(&mut p, "time1", TIME_FEATURES, e, &mut rng);
        let time2 = Linear::new(&mut p, "time2", e, e, &mut rng);
        let struct1 = Linear::new(&mut p, "struct1", structure_len, e, &mut rng);
        let struct2 = Linear::new(&mut p, "struct2", e, e, &mut rng);
        let null_token = p.add_uniform("null_token", &[e, 1], 1, 1.0, &mut rng);
        let conv_in = Conv3d::new(&mut p, "conv_in", 2 * channels, w, 3, 1, &mut rng);
        let down0 = ResBlock::new(&mut p, "down0", w, w, &config, &mut rng);
        let pool0 = Conv3d::new(&mut p, "pool0", w, 2 * w, 3, 2, &mut rng);
        let down1 = ResBlock::new(&mut p, "down1", 2 * w, 2 * w, &config, &mut rng);
        let pool1 = Conv3d::new(&mut p, "pool1", 2 * w, 2 * w, 3, 2, &mut rng);
        let mid = ResBlock::new(&mut p, "mid", 2 * w, 2 * w, &config, &mut rng);
        let up1 = ResBlock::new(&mut p, "up1", 4 * w, 2 * w, &config, &mut rng);
        let up0 = ResBlock::new(&mut p, "up0", 3 * w, w, &config, &mut rng);
        let norm_out = GroupNorm::new(&mut p, "norm_out", w, config.groups);
        let conv_out = Conv3d::new(&mut p, "conv_out", w, channels, 3, 1, &mut rng);
        // small output layer: initial predictions near zero but still condition-dependent
        p.get_mut(conv_out.weight).data_mut().iter_mut().for_each(|v| *v *= OUT_INIT_SCALE);
        Ok(Denoiser {
            config,
            channels,
            structure_len,
            params: p,
            content,
            time1,
            time2,
            struct1,
            struct2,
            null_token,
            conv_in,
            down0,
            pool0,
            down1,
            pool1,
            mid,
            up1,
            up0,
            norm_out,
            conv_out,
        })
    }

    /// Latent grids must have spatial dims divisible by 4 to pass two
    /// stride-2 levels and come back to the same size.
    pub fn check_latent(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 5 || shape[1] != self.channels || shape[2..].iter().any(|d| d % 4 != 0) {
            return Err(LadError::Shape(format!(
                "denoiser input {shape:?} must be [B,{},d,h,w] with d,h,w divisible by 4",
                self.channels
            )));
        }
        Ok(())
    }

    /// Predicted noise `[B, C, d, h, w]` for `z_t`, per-item timesteps and
    /// per-item conditions.
    pub fn forward(&self, g: &mut Graph, b: Bind, z_t: Var, ts: &[usize], conds: &[&ConditionInput]) -> Result<Var> {
        let zs = g.shape(z_t).to_vec();
        self.check_latent(&zs)?;
        let n = zs[0];
        if ts.len() != n || conds.len() != n {
            return Err(LadError::Shape(format!("{} timesteps and {} conditions for batch {n}", ts.len(), conds.len())));
        }
        for c in conds {
            crate::condition::check_condition(c, self.channels, [zs[2], zs[3], zs[4]])?;
            if c.structure.len() != self.structure_len {
                return Err(LadError::Shape(format!(
                    "structure vector of length {} where {} is expected",
                    c.structure.len(),
                    self.structure_len
                )));
            }
        }
        let e = self.config.embed_dim;
        let keep: Vec<bool> = conds.iter().map(|c| !c.is_null).collect();
        let any_cond = keep.iter().any(|k| *k);
        let any_null = keep.iter().any(|k| !*k);

        // content grid, zero for null items
        let spatial: usize = zs[2..].iter().product();
        let per_item = self.channels * spatial;
        let content = if any_cond {
            let mut enc = Vec::with_capacity(n * per_item);
            for c in conds {
                enc.extend_from_slice(c.encoded.data());
            }
            let ev = g.constant(Tensor::new(&zs, enc)?);
            let h = self.content.forward(g, b, ev)?;
            if any_null {
                let gate: Vec<f32> = keep
                    .iter()
                    .flat_map(|k| std::iter::repeat_n(if *k { 1.0 } else { 0.0 }, per_item))
                    .collect();
                let gv = g.constant(Tensor::new(&zs, gate)?);
                g.mul(h, gv)?
            } else {
                h
            }
        } else {
            g.constant(Tensor::zeros(&zs))
        };

        // timestep embedding
        let tf = g.constant(timestep_features(ts));
        let t = self.time1.forward(g, b, tf)?;
        let t = g.silu(t);
        let temb = self.time2.forward(g, b, t)?;

        // structure embedding or null token
        let mut emb = temb;
        if any_cond {
            let mut sv = Vec::with_capacity(n * self.structure_len);
            for c in conds {
                if c.is_null {
                    sv.extend(std::iter::repeat_n(0.0, self.structure_len));
                } else {
                    sv.extend_from_slice(&c.structure);
                }
            }
            let s = g.constant(Tensor::new(&[n, self.structure_len], sv)?);
            let s = self.struct1.forward(g, b, s)?;
            let s = g.silu(s);
            let mut s = self.struct2.forward(g, b, s)?;
            if any_null {
                let gate: Vec<f32> = keep
                    .iter()
                    .flat_map(|k| std::iter::repeat_n(if *k { 1.0 } else { 0.0 }, e))
                    .collect();
                let gv = g.constant(Tensor::new(&[n, e], gate)?);
                s = g.mul(s, gv)?;
            }
            emb = g.add(emb, s)?;
        }
        if any_null {
            let ind: Vec<f32> = keep.iter().map(|k| if *k { 0.0 } else { 1.0 }).collect();
            let iv = g.constant(Tensor::new(&[n, 1], ind)?);
            let tok = b.var(g, self.null_token);
            let zero = g.constant(Tensor::zeros(&[e]));
            let nt = g.linear(iv, tok, zero)?;
            emb = g.add(emb, nt)?;
        }
        let emb = g.silu(emb);

        // U-Net body
        let x = g.concat(&[z_t, content])?;
        let h0 = self.conv_in.forward(g, b, x)?;
        let h0 = self.down0.forward(g, b, h0, emb)?;
        let h1 = self.pool0.forward(g, b, h0)?;
        let h1 = self.down1.forward(g, b, h1, emb)?;
        let h2 = self.pool1.forward(g, b, h1)?;
        let h2 = self.mid.forward(g, b, h2, emb)?;
        let u1 = g.upsample2(h2)?;
        let u1 = g.concat(&[u1, h1])?;
        let u1 = self.up1.forward(g, b, u1, emb)?;
        let u0 = g.upsample2(u1)?;
        let u0 = g.concat(&[u0, h0])?;
        let u0 = self.up0.forward(g, b, u0, emb)?;
        let o = self.norm_out.forward(g, b, u0)?;
        let o = g.silu(o);
        Ok(self.conv_out.forward(g, b, o)?)
    }

    /// Inference pass on plain tensors.
    pub fn predict(&self, z_t: Tensor, ts: &[usize], conds: &[&ConditionInput]) -> Result<Tensor> {
        let mut g = Graph::new();
        let z = g.constant(z_t);
        let out = self.forward(&mut g, Bind::frozen(&self.params), z, ts, conds)?;
        Ok(g.value(out).clone())
    }
}
