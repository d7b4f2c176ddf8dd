//! Stage runners and the cached end-to-end pipeline.
//!
//! Every stage writes into its own directory under the artifact root and
//! finishes by writing a `stage` stamp holding its input hash. A stage whose
//! stamp matches is skipped.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;

use crate::augment::{augment_maskset, AugmentParams};
use crate::codec::{train_codec, CodecCheckpoint};
use crate::config::{validate_config, RunConfig};
use crate::condition::StructureNorm;
use crate::dataset::{self, Manifest};
use crate::diffusion::{sample_for_masks, train_diffusion, DenoiserCheckpoint, SampleOptions};
use crate::error::{LadError, Result};
use crate::hashing;
use crate::metrics::{evaluate, MetricsReport};
use crate::phantom::{generate_phantom, truncate_normalize, PhantomSpec, WINDOW_HI, WINDOW_LO};
use crate::seeds::{self, stream};
use crate::volume::{LabelMask, ORGAN, TUMOR};

pub const ARTIFACT_ROOT_ENV: &str = "LAD_ARTIFACT_ROOT";
pub const DEFAULT_ARTIFACT_ROOT: &str = "lad-artifacts";
pub const STAMP_FILE: &str = "stage";

/// Explicit path, else the environment variable, else `./lad-artifacts`.
pub fn artifact_root(explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(ARTIFACT_ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_ARTIFACT_ROOT))
}

/// Stage stamp: `pending <hash>` while running, `done <hash>` after.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Stamp {
    Pending(String),
    Done(String),
}

pub fn read_stamp(dir: &Path) -> Option<Stamp> {
    let text = fs::read_to_string(dir.join(STAMP_FILE)).ok()?;
    let (state, hash) = text.trim().split_once(' ')?;
    match state {
        "pending" => Some(Stamp::Pending(hash.to_string())),
        "done" => Some(Stamp::Done(hash.to_string())),
        _ => None,
    }
}

pub fn write_stamp(dir: &Path, stamp: &Stamp) -> Result<()> {
    fs::create_dir_all(dir)?;
    let text = match stamp {
        Stamp::Pending(h) => format!("pending {h}\n"),
        Stamp::Done(h) => format!("done {h}\n"),
    };
    lad_tensor::write_atomic(&dir.join(STAMP_FILE), text.as_bytes())?;
    Ok(())
}

/// Phantoms `0..count`, windowed into `[0, 1]`, written as a dataset.
pub fn gen_data(out: &Path, seed: u64, count: usize, spec: &PhantomSpec, config_hash: Option<&str>) -> Result<Manifest> {
    spec.validate()?;
    if count == 0 {
        return Err(LadError::Config("count must be >= 1".into()));
    }
    let mut vols = Vec::with_capacity(count);
    let mut masks = Vec::with_capacity(count);
    for i in 0..count {
        let (raw, mask) = generate_phantom(seeds::derive_seed(seed, stream::DATA, i as u64), spec)?;
        vols.push(truncate_normalize(&raw, WINDOW_LO, WINDOW_HI, spec.spacing, format!("phantom_{i:04}"))?);
        masks.push(mask);
    }
    let organ: Vec<String> = masks
        .iter()
        .map(|m| u8::from(m.count(ORGAN) + m.count(TUMOR) > 0).to_string())
        .collect();
    let mut extra = BTreeMap::new();
    extra.insert("organ_present".into(), organ.join(","));
    extra.insert("seed".into(), seed.to_string());
    dataset::write_dataset(out, Some(&vols), Some(&masks), config_hash, extra)
}

/// Augmented masks written as a mask-only dataset.
pub fn augment_masks(masks_dir: &Path, out: &Path, count: usize, params: &AugmentParams, config_hash: Option<&str>) -> Result<Vec<LabelMask>> {
    let masks = dataset::read_masks(masks_dir)?;
    let aug = augment_maskset(&masks, count, params)?;
    let mut extra = BTreeMap::new();
    extra.insert("seed".into(), params.seed.to_string());
    dataset::write_dataset(out, None, Some(&aug), config_hash, extra)?;
    Ok(aug)
}

/// `count` samples, sample `i` steered by mask `i mod M`; volumes and their
/// masks are written together.
#[allow(clippy::too_many_arguments)]
pub fn sample_dataset(
    diffusion_dir: &Path,
    codec_dir: &Path,
    masks_dir: &Path,
    out: &Path,
    count: usize,
    norm: StructureNorm,
    opts: &SampleOptions,
    config_hash: Option<&str>,
) -> Result<Manifest> {
    let codec = CodecCheckpoint::load(codec_dir)?.codec;
    let den = DenoiserCheckpoint::load(diffusion_dir)?;
    if den.codec_hash != codec.config.model_hash() {
        return Err(LadError::Config(format!(
            "{} was trained on a different codec than {}",
            diffusion_dir.display(),
            codec_dir.display()
        )));
    }
    let masks = dataset::read_masks(masks_dir)?;
    if masks.is_empty() || count == 0 {
        return Err(LadError::Data("sampling needs masks and count >= 1".into()));
    }
    let chosen: Vec<LabelMask> = (0..count).map(|i| masks[i % masks.len()].clone()).collect();
    let vols = sample_for_masks(&codec, &den, &chosen, 0, norm, opts)?;
    let mut extra = BTreeMap::new();
    extra.insert("guidance".into(), opts.guidance.to_string());
    extra.insert("seed".into(), opts.seed.to_string());
    dataset::write_dataset(out, Some(&vols), Some(&chosen), config_hash, extra)
}

/// Directories of one pipeline run.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn codec(&self) -> PathBuf {
        self.root.join("codec")
    }
    pub fn diffusion(&self) -> PathBuf {
        self.root.join("diffusion")
    }
    pub fn augment(&self) -> PathBuf {
        self.root.join("augment")
    }
    pub fn samples(&self) -> PathBuf {
        self.root.join("samples")
    }
    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }
    pub fn report(&self) -> PathBuf {
        self.eval().join("report.json")
    }
    pub fn embedding(&self) -> PathBuf {
        self.eval().join("embedding.txt")
    }
}

/// Input hash of every stage, each chained to the stages it reads.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageHashes {
    pub data: String,
    pub codec: String,
    pub diffusion: String,
    pub augment: String,
    pub sample: String,
    pub evaluate: String,
}

pub fn stage_hashes(config: &RunConfig) -> StageHashes {
    let c = config.with_derived_seeds();
    let data = hashing::chain(&["data", &hashing::hash_serialized(&c.data), &c.data_seed().to_string()]);
    let codec = hashing::chain(&["codec", &data, &hashing::hash_serialized(&c.codec)]);
    let diffusion = hashing::chain(&["diffusion", &codec, &hashing::hash_serialized(&c.diffusion)]);
    let augment = hashing::chain(&["augment", &data, &hashing::hash_serialized(&c.augment)]);
    let sample = hashing::chain(&["sample", &diffusion, &augment, &hashing::hash_serialized(&c.sample), &c.sample_seed().to_string()]);
    let evaluate = hashing::chain(&["evaluate", &sample, &hashing::hash_serialized(&c.eval)]);
    StageHashes {
        data,
        codec,
        diffusion,
        augment,
        sample,
        evaluate,
    }
}

pub const STAGES: [&str; 6] = ["gen-data", "train-codec", "train-diffusion", "augment-masks", "sample", "evaluate"];

#[derive(Clone, Debug)]
pub struct PipelineOutcome {
    pub report: MetricsReport,
    /// Stage names with whether each one ran (false: skipped on a hash match).
    pub stages: Vec<(&'static str, bool)>,
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        LadError::Config(_) => e,
        other => LadError::Stage {
            stage: name.to_string(),
            source: Box::new(other),
        },
    })
}

/// Run every stage in order, skipping those whose stamp matches.
///
/// Stage directories under `root` are owned by the pipeline and are cleared
/// when their inputs change.
pub fn run_pipeline(config: &RunConfig, root: &Path) -> Result<PipelineOutcome> {
    let violations = validate_config(config, Some(root));
    if !violations.is_empty() {
        return Err(LadError::Config(violations.join("; ")));
    }
    let c = config.with_derived_seeds();
    let hashes = stage_hashes(config);
    let layout = Layout::new(root);
    let mut ran = Vec::new();
    let run_hash = config.hash();

    // Done with the same hash: skip. Pending with the same hash: rerun in
    // place so checkpoints resume. Anything else: start from an empty dir.
    let mut step = |name: &'static str, dir: PathBuf, hash: &str, f: &mut dyn FnMut() -> Result<()>| -> Result<()> {
        match read_stamp(&dir) {
            Some(Stamp::Done(h)) if h == hash => {
                info!("{name}: up to date, skipped");
                ran.push((name, false));
                return Ok(());
            }
            Some(Stamp::Pending(h)) if h == hash => info!("{name}: resuming"),
            _ => {
                info!("{name}: running");
                if dir.exists() {
                    fs::remove_dir_all(&dir)?;
                }
            }
        }
        write_stamp(&dir, &Stamp::Pending(hash.to_string()))?;
        stage(name, f())?;
        write_stamp(&dir, &Stamp::Done(hash.to_string()))?;
        ran.push((name, true));
        Ok(())
    };

    step("gen-data", layout.data(), &hashes.data, &mut || {
        gen_data(&layout.data(), c.data_seed(), c.data.count, &c.data.phantom_spec(), Some(&hashes.data)).map(|_| ())
    })?;
    step("train-codec", layout.codec(), &hashes.codec, &mut || {
        train_codec(&layout.data(), &layout.codec(), &c.codec).map(|_| ())
    })?;
    step("train-diffusion", layout.diffusion(), &hashes.diffusion, &mut || {
        train_diffusion(&layout.data(), &layout.data(), &layout.codec(), &layout.diffusion(), &c.diffusion).map(|_| ())
    })?;
    step("augment-masks", layout.augment(), &hashes.augment, &mut || {
        augment_masks(&layout.data(), &layout.augment(), c.augment.count, &c.augment.params, Some(&hashes.augment)).map(|_| ())
    })?;
    let opts = SampleOptions {
        guidance: c.sample.guidance,
        seed: c.sample_seed(),
        quantize: c.sample.quantize,
        batch: c.sample.batch,
        variance: None,
    };
    step("sample", layout.samples(), &hashes.sample, &mut || {
        sample_dataset(
            &layout.diffusion(),
            &layout.codec(),
            &layout.augment(),
            &layout.samples(),
            c.sample.count,
            c.diffusion.structure_norm,
            &opts,
            Some(&hashes.sample),
        )
        .map(|_| ())
    })?;
    step("evaluate", layout.eval(), &hashes.evaluate, &mut || {
        let mut report = evaluate(&layout.data(), &layout.samples(), &layout.data(), &c.eval, &layout.report(), Some(&layout.embedding()))?;
        report.config_hash = Some(run_hash.clone());
        lad_tensor::write_atomic(&layout.report(), report.to_json()?.as_bytes())?;
        Ok(())
    })?;
    let text = fs::read_to_string(layout.report())?;
    let report: MetricsReport = serde_json::from_str(&text)?;
    Ok(PipelineOutcome { report, stages: ran })
}
