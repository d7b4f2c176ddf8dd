//! Run configuration: one TOML file covering every stage.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::AugmentParams;
use crate::codec::model::check_divisible;
use crate::codec::CodecConfig;
use crate::diffusion::DiffusionConfig;
use crate::error::{LadError, Result};
use crate::hashing;
use crate::metrics::EvalConfig;
use crate::phantom::PhantomSpec;
use crate::seeds::{self, stream};
use crate::volume::Dims;

mod dims_text {
    use serde::{Deserialize, Deserializer, Serializer};

    use crate::volume::Dims;

    pub fn serialize<S: Serializer>(d: &Dims, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&d.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Dims, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub count: usize,
    /// `DxHxW`.
    #[serde(with = "dims_text")]
    pub shape: Dims,
    pub spacing: [f64; 3],
    pub tumor_probability: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let p = PhantomSpec::default();
        DataConfig {
            count: 64,
            shape: p.dims,
            spacing: p.spacing,
            tumor_probability: p.tumor_probability,
        }
    }
}

impl DataConfig {
    pub fn phantom_spec(&self) -> PhantomSpec {
        PhantomSpec {
            dims: self.shape,
            spacing: self.spacing,
            tumor_probability: self.tumor_probability,
            ..PhantomSpec::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Augmented masks to produce.
    pub count: usize,
    #[serde(flatten)]
    pub params: AugmentParams,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            count: 16,
            params: AugmentParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleConfig {
    pub count: usize,
    /// Guidance strength `w`.
    pub guidance: f64,
    pub quantize: bool,
    pub batch: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            count: 16,
            guidance: 1.0,
            quantize: true,
            batch: 4,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub codec: CodecConfig,
    pub diffusion: DiffusionConfig,
    pub augment: AugmentConfig,
    pub sample: SampleConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| LadError::Config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LadError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| LadError::Config(format!("config: {e}")))
    }

    /// Hash of the canonical serialized contents.
    pub fn hash(&self) -> String {
        hashing::hash_serialized(self)
    }

    /// Copy with every stage seed derived from the root seed.
    pub fn with_derived_seeds(&self) -> Self {
        let mut c = self.clone();
        c.codec.seed = seeds::derive_seed(self.seed, stream::CODEC, 0);
        c.diffusion.seed = seeds::derive_seed(self.seed, stream::DIFFUSION, 0);
        c.augment.params.seed = seeds::derive_seed(self.seed, stream::AUGMENT, 0);
        c.eval.seed = seeds::derive_seed(self.seed, stream::METRICS, 0);
        c
    }

    pub fn data_seed(&self) -> u64 {
        seeds::derive_seed(self.seed, stream::DATA, 0)
    }

    pub fn sample_seed(&self) -> u64 {
        seeds::derive_seed(self.seed, stream::SAMPLE, 0)
    }
}

/// Every problem with a configuration; empty means valid.
pub fn validate_config(config: &RunConfig, artifact_root: Option<&Path>) -> Vec<String> {
    let mut v = Vec::new();
    let mut push = |r: Result<()>| {
        if let Err(e) = r {
            v.push(match e {
                LadError::Config(m) | LadError::Shape(m) => m,
                other => other.to_string(),
            });
        }
    };
    push(config.data.phantom_spec().validate());
    push(config.codec.validate());
    push(check_divisible(config.data.shape, config.codec.compression));
    if config.codec.compression.iter().all(|r| *r > 0) {
        let s = config.data.shape.as_array();
        let latent: Vec<usize> = (0..3).map(|a| s[a] / config.codec.compression[a]).collect();
        if latent.iter().any(|l| l % 4 != 0) {
            push(Err(LadError::Config(format!(
                "latent grid {latent:?} must be divisible by 4 on every axis for the denoiser"
            ))));
        }
    }
    push(config.diffusion.validate());
    push(config.augment.params.validate());
    if config.data.count < 2 {
        push(Err(LadError::Config(format!("data count must be >= 2, got {}", config.data.count))));
    }
    if config.augment.count == 0 || config.sample.count == 0 {
        push(Err(LadError::Config("augment and sample counts must be >= 1".into())));
    }
    if config.sample.count < 2 {
        push(Err(LadError::Config("sample count must be >= 2 for set metrics".into())));
    }
    if !(config.sample.guidance >= 0.0 && config.sample.guidance.is_finite()) {
        push(Err(LadError::Config(format!("guidance w must be >= 0, got {}", config.sample.guidance))));
    }
    if config.sample.batch == 0 {
        push(Err(LadError::Config("sample batch must be >= 1".into())));
    }
    if config.eval.n_pairs == 0 {
        push(Err(LadError::Config("eval n_pairs must be >= 1".into())));
    }
    if let Some(root) = artifact_root {
        push(check_writable(root));
    }
    v
}

fn check_writable(root: &Path) -> Result<()> {
    let probe = root.join(".lad-write-probe");
    std::fs::create_dir_all(root)
        .and_then(|_| std::fs::write(&probe, b""))
        .and_then(|_| std::fs::remove_file(&probe))
        .map_err(|e| LadError::Config(format!("artifact root {} is not writable: {e}", root.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let c = RunConfig::default();
        let back = RunConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let c = RunConfig::from_toml("seed = 3\n[codec]\nlambda_loc = 0.0\n[data]\nshape = \"16x32x32\"\n").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.codec.lambda_loc, 0.0);
        assert_eq!(c.data.shape, Dims::new(16, 32, 32));
        assert_eq!(c.diffusion.p_uncond, 0.25);
    }

    #[test]
    fn unknown_shape_text_is_a_config_error() {
        assert!(RunConfig::from_toml("[data]\nshape = \"64x64\"\n").is_err());
    }
}
