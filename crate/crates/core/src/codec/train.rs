//! Codec training loop with atomic checkpoints and exact resume.

use std::path::Path;

use lad_tensor::nn::Bind;
use lad_tensor::{Adam, AdamConfig, Graph, Tensor, Var};
use log::{info, warn};
use rand::Rng;

use super::loss::{self, GeneratorVars, LossBreakdown, TermWeights};
use super::model::{volumes_to_batch, Codec, CodecConfig, Discriminator, PerceptualNet};
use crate::checkpoint::{self, LossLog, Meta};
use crate::dataset;
use crate::error::{LadError, Result};
use crate::seeds;
use crate::volume::{LabelMask, Volume};

pub const LOSS_COLUMNS: [&str; 10] = [
    "total",
    "global",
    "locality",
    "reconstruction",
    "codebook",
    "commitment",
    "perceptual",
    "adversarial",
    "feature_matching",
    "disc",
];

/// Trained codec as loaded from a checkpoint directory.
pub struct CodecCheckpoint {
    pub codec: Codec,
    pub step: u64,
    pub config_hash: String,
}

impl CodecCheckpoint {
    pub fn load(dir: &Path) -> Result<Self> {
        let (merged, meta) = checkpoint::load_checkpoint(dir)?;
        let config: CodecConfig = serde_json::from_str(meta.get("config")?)?;
        let mut codec = Codec::new(config, 0)?;
        let n = codec.params.load_matching(&checkpoint::split_store(&merged, "codec"))?;
        if n != codec.params.len() {
            return Err(LadError::Data(format!("{}: codec checkpoint is incomplete", dir.display())));
        }
        codec.spacing = parse_spacing(meta.get("spacing")?)?;
        let hash = meta.get("config_hash")?.to_string();
        if hash != codec.config.model_hash() {
            return Err(LadError::Data(format!("{}: config hash does not match stored config", dir.display())));
        }
        Ok(CodecCheckpoint {
            codec,
            step: meta.parse_value("step")?,
            config_hash: hash,
        })
    }
}

fn parse_spacing(s: &str) -> Result<[f64; 3]> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| LadError::Data(format!("bad spacing {s:?}")))?;
    v.try_into().map_err(|_| LadError::Data(format!("bad spacing {s:?}")))
}

pub struct CodecTrainer {
    pub codec: Codec,
    pub disc: Discriminator,
    perceptual: PerceptualNet,
    opt: Adam,
    opt_disc: Adam,
    pub step: u64,
    volumes: Vec<Volume>,
    masks: Vec<LabelMask>,
}

impl CodecTrainer {
    /// Fresh trainer. The codebook is initialized from encoder outputs on the
    /// training data so that every entry starts near the latent distribution.
    pub fn new(config: CodecConfig, volumes: Vec<Volume>, masks: Vec<LabelMask>) -> Result<Self> {
        check_data(&config, &volumes, &masks)?;
        let seed = config.seed;
        let mut codec = Codec::new(config, seeds::derive_seed(seed, "codec.init", 0))?;
        codec.spacing = volumes[0].spacing();
        init_codebook(&mut codec, &volumes, seed)?;
        let disc = Discriminator::new(seeds::derive_seed(seed, "codec.disc", 0));
        let lr = codec.config.lr as f32;
        let opt = Adam::new(&codec.params, AdamConfig::with_lr(lr));
        let opt_disc = Adam::new(&disc.params, AdamConfig::with_lr(lr));
        Ok(CodecTrainer {
            codec,
            disc,
            perceptual: PerceptualNet::new(),
            opt,
            opt_disc,
            step: 0,
            volumes,
            masks,
        })
    }

    /// Trainer restored from `dir`. The stored config must hash like `config`
    /// up to the step budget.
    pub fn resume(dir: &Path, config: CodecConfig, volumes: Vec<Volume>, masks: Vec<LabelMask>) -> Result<Self> {
        check_data(&config, &volumes, &masks)?;
        let (merged, meta) = checkpoint::load_checkpoint(dir)?;
        if meta.get("config_hash")? != config.model_hash() {
            return Err(LadError::Config(format!("{}: checkpoint was trained with a different config", dir.display())));
        }
        let mut codec = Codec::new(config, 0)?;
        codec.params.load_matching(&checkpoint::split_store(&merged, "codec"))?;
        codec.spacing = parse_spacing(meta.get("spacing")?)?;
        let mut disc = Discriminator::new(0);
        disc.params.load_matching(&checkpoint::split_store(&merged, "disc"))?;
        let lr = AdamConfig::with_lr(codec.config.lr as f32);
        let opt = Adam::restore(&codec.params, &checkpoint::split_store(&merged, "adam"), lr)?;
        let opt_disc = Adam::restore(&disc.params, &checkpoint::split_store(&merged, "adam_disc"), lr)?;
        Ok(CodecTrainer {
            codec,
            disc,
            perceptual: PerceptualNet::new(),
            opt,
            opt_disc,
            step: meta.parse_value("step")?,
            volumes,
            masks,
        })
    }

    pub fn weights(&self) -> TermWeights {
        let c = &self.codec.config;
        TermWeights {
            commitment: c.commitment,
            perceptual: c.perceptual_weight,
            adversarial: c.adversarial_weight,
            feature_matching: c.feature_matching_weight,
        }
    }

    /// Batch indices for `step`, a pure function of `(seed, step)`.
    pub fn batch_indices(&self, step: u64) -> Vec<usize> {
        let mut rng = seeds::rng_for(self.codec.config.seed, seeds::stream::CODEC, step);
        (0..self.codec.config.batch_size)
            .map(|_| rng.random_range(0..self.volumes.len()))
            .collect()
    }

    /// Build the generator graph for a batch. Returns the graph, the term
    /// nodes and the reconstruction node.
    pub fn generator_graph(&self, x: Tensor, masks: &[LabelMask], with_disc: bool) -> Result<(Graph, GeneratorVars, Var)> {
        let c = &self.codec.config;
        let mut g = Graph::new();
        let p = Bind::train(&self.codec.params);
        let xv = g.constant(x);
        let z = self.codec.encode_var(&mut g, p, xv)?;
        let zshape = g.shape(z).to_vec();
        let (idx, qvals) = self.codec.codebook().assign(g.value(z).data(), &zshape)?;
        let q = Tensor::new(&zshape, qvals)?;
        let zq = g.straight_through(z, q.clone())?;
        let table = p.var(&mut g, self.codec.codebook);
        let e = g.gather_rows(table, idx, &zshape)?;
        let zd = g.detach(z);
        let codebook = g.mse(e, zd)?;
        let qc = g.constant(q);
        let commitment = g.mse(z, qc)?;
        let xhat = self.codec.decode_var(&mut g, p, zq)?;
        let reconstruction = g.l1(xhat, xv)?;

        let fh = self.perceptual.forward(&mut g, xhat)?;
        let fx = self.perceptual.forward(&mut g, xv)?;
        let mut perceptual = g.mse(fh[0], fx[0])?;
        for (a, b) in fh.iter().zip(&fx).skip(1) {
            let t = g.mse(*a, *b)?;
            perceptual = g.add(perceptual, t)?;
        }

        let (adversarial, feature_matching) = if with_disc {
            let dp = Bind::frozen(&self.disc.params);
            let (fake, ff) = self.disc.forward(&mut g, dp, xhat)?;
            let (_, fr) = self.disc.forward(&mut g, dp, xv)?;
            let m = g.mean(fake);
            let adv = g.scale(m, -1.0);
            let mut fm = g.l1(ff[0], fr[0])?;
            for (a, b) in ff.iter().zip(&fr).skip(1) {
                let t = g.l1(*a, *b)?;
                fm = g.add(fm, t)?;
            }
            (Some(adv), Some(fm))
        } else {
            (None, None)
        };
        let locality = loss::locality_loss(&mut g, xv, xhat, masks, c.bbox_margin, c.locality_mode)?;
        Ok((
            g,
            GeneratorVars {
                reconstruction,
                codebook,
                commitment,
                perceptual,
                adversarial,
                feature_matching,
                locality,
            },
            xhat,
        ))
    }

    /// One optimizer step. Nothing is updated when any term is non-finite.
    pub fn train_step(&mut self) -> Result<(LossBreakdown, f64)> {
        let step = self.step;
        let idx = self.batch_indices(step);
        let vols: Vec<&Volume> = idx.iter().map(|i| &self.volumes[*i]).collect();
        let masks: Vec<LabelMask> = idx.iter().map(|i| self.masks[*i].clone()).collect();
        let x = volumes_to_batch(&vols)?;
        let with_disc = step >= self.codec.config.disc_start;
        let lambda = self.codec.config.lambda_loc;
        let weights = self.weights();

        let (mut g, vars, xhat) = self.generator_graph(x.clone(), &masks, with_disc)?;
        let (terms, loc) = vars.values(&g);
        let breakdown = loss::total_loss(&terms, &weights, loc, lambda, step)?;
        let total = vars.total(&mut g, &weights, lambda)?;
        let grads = g.backward(total).for_store(&self.codec.params);
        if grads.iter().any(|(_, t)| !t.is_finite()) {
            return Err(LadError::NonFinite {
                term: "codec gradient".into(),
                step,
            });
        }

        let mut disc_loss = 0.0;
        let disc_grads = if with_disc {
            let mut dg = Graph::new();
            let dp = Bind::train(&self.disc.params);
            let xr = dg.constant(x);
            let xf = dg.constant(g.value(xhat).clone());
            let (lr, _) = self.disc.forward(&mut dg, dp, xr)?;
            let (lf, _) = self.disc.forward(&mut dg, dp, xf)?;
            let l = loss::hinge_disc_loss(&mut dg, lr, lf)?;
            disc_loss = dg.value(l).item() as f64;
            if !disc_loss.is_finite() {
                return Err(LadError::NonFinite {
                    term: "disc".into(),
                    step,
                });
            }
            Some(dg.backward(l).for_store(&self.disc.params))
        } else {
            None
        };
        drop(g);
        self.opt.step(&mut self.codec.params, &grads);
        if let Some(dgr) = disc_grads {
            self.opt_disc.step(&mut self.disc.params, &dgr);
        }
        self.step += 1;
        Ok((breakdown, disc_loss))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let adam = self.opt.state_store(&self.codec.params);
        let adam_d = self.opt_disc.state_store(&self.disc.params);
        let c = &self.codec.config;
        let mut meta = Meta::default();
        meta.set("step", self.step)
            .set("config_hash", c.model_hash())
            .set("lambda_loc", c.lambda_loc)
            .set(
                "compression",
                format!("{},{},{}", c.compression[0], c.compression[1], c.compression[2]),
            )
            .set("spacing", {
                let s = self.codec.spacing;
                format!("{},{},{}", s[0], s[1], s[2])
            })
            .set("config", serde_json::to_string(c)?);
        checkpoint::save_checkpoint(
            dir,
            &[
                ("codec", &self.codec.params),
                ("disc", &self.disc.params),
                ("adam", &adam),
                ("adam_disc", &adam_d),
            ],
            &meta,
        )
    }
}

fn check_data(config: &CodecConfig, volumes: &[Volume], masks: &[LabelMask]) -> Result<()> {
    config.validate()?;
    if volumes.is_empty() {
        return Err(LadError::Data("codec training set is empty".into()));
    }
    if volumes.len() != masks.len() {
        return Err(LadError::Data(format!("{} volumes but {} masks", volumes.len(), masks.len())));
    }
    for (v, m) in volumes.iter().zip(masks) {
        if v.dims() != volumes[0].dims() || m.dims() != v.dims() {
            return Err(LadError::Shape("codec training volumes and masks must share one shape".into()));
        }
    }
    super::model::check_divisible(volumes[0].dims(), config.compression)
}

/// Codebook rows set to encoder outputs at random latent positions of up to
/// four training volumes, plus a small jitter so duplicates separate.
fn init_codebook(codec: &mut Codec, volumes: &[Volume], seed: u64) -> Result<()> {
    let take: Vec<&Volume> = volumes.iter().take(4).collect();
    let z = codec.encode_tensor(volumes_to_batch(&take)?)?;
    let s = z.shape().to_vec();
    let (b, c) = (s[0], s[1]);
    let spatial: usize = s[2..].iter().product();
    let mut rng = seeds::rng_for(seed, "codec.codebook", 0);
    let k = codec.config.codebook_size;
    let zd = z.data();
    let mut rows = Vec::with_capacity(k * c);
    for _ in 0..k {
        let (bi, si) = (rng.random_range(0..b), rng.random_range(0..spatial));
        for ch in 0..c {
            let jitter = (rng.random::<f32>() - 0.5) * 1e-2;
            rows.push(zd[(bi * c + ch) * spatial + si] + jitter);
        }
    }
    *codec.params.get_mut(codec.codebook) = Tensor::new(&[k, c], rows)?;
    Ok(())
}

/// Train on a dataset directory, checkpointing into `out`. An existing
/// checkpoint with the same model hash is resumed; one with a different hash
/// is replaced.
pub fn train_codec(data_dir: &Path, out: &Path, config: &CodecConfig) -> Result<CodecCheckpoint> {
    let volumes = dataset::read_volumes(data_dir)?;
    let masks = dataset::read_masks(data_dir)?;
    train_codec_on(volumes, masks, out, config)
}

pub fn train_codec_on(volumes: Vec<Volume>, masks: Vec<LabelMask>, out: &Path, config: &CodecConfig) -> Result<CodecCheckpoint> {
    let mut trainer = if checkpoint::has_checkpoint(out) {
        match CodecTrainer::resume(out, config.clone(), volumes.clone(), masks.clone()) {
            Ok(t) => {
                info!("codec: resuming at step {}", t.step);
                t
            }
            Err(LadError::Config(msg)) => {
                warn!("codec: {msg}; starting over");
                CodecTrainer::new(config.clone(), volumes, masks)?
            }
            Err(e) => return Err(e),
        }
    } else {
        CodecTrainer::new(config.clone(), volumes, masks)?
    };
    let mut log = LossLog::open(out, &LOSS_COLUMNS, trainer.step)?;
    if trainer.step == 0 {
        trainer.save(out)?;
    }
    while trainer.step < config.steps {
        let step = trainer.step;
        let (b, d) = trainer.train_step()?;
        let t = b.terms;
        log.append(
            step,
            &[
                b.total,
                b.global,
                b.locality,
                t.reconstruction,
                t.codebook,
                t.commitment,
                t.perceptual,
                t.adversarial,
                t.feature_matching,
                d,
            ],
        )?;
        if step % 20 == 0 {
            info!("codec step {step}: total {:.4} rec {:.4} loc {:.4}", b.total, t.reconstruction, b.locality);
        }
        let done = trainer.step;
        if (config.checkpoint_every > 0 && done % config.checkpoint_every == 0) || done == config.steps {
            trainer.save(out)?;
        }
    }
    CodecCheckpoint::load(out)
}
