//! Fixed random 3D conv feature extractor.

use lad_tensor::nn::{Bind, Conv3d};
use lad_tensor::{Graph, ParamStore};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codec::model::volumes_to_batch;
use crate::error::{LadError, Result};
use crate::hashing;
use crate::volume::Volume;

pub const FEATURE_WIDTH: usize = 256;
const EXTRACTOR_SEED: u64 = 0x00fe_a7e5;
const ARCH: &str = "conv3(1-16,s2)-relu-conv3(16-32,s2)-relu-conv3(32-64,s2)-relu-conv1(64-256)-relu-gap";

/// `N × F` features plus the hash of the extractor that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub data: DMatrix<f64>,
    pub extractor: String,
}

impl FeatureSet {
    pub fn new(data: DMatrix<f64>, extractor: impl Into<String>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(LadError::Data("feature matrix has non-finite entries".into()));
        }
        Ok(FeatureSet {
            data,
            extractor: extractor.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    pub fn width(&self) -> usize {
        self.data.ncols()
    }
}

pub struct FeatureExtractor {
    params: ParamStore,
    convs: [Conv3d; 4],
    hash: String,
}

impl Default for FeatureExtractor {
    fn default() -> Self {
        Self::new()
    }
}

impl FeatureExtractor {
    pub fn new() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(EXTRACTOR_SEED);
        let mut p = ParamStore::new();
        let convs = [
            Conv3d::new(&mut p, "f1", 1, 16, 3, 2, &mut rng),
            Conv3d::new(&mut p, "f2", 16, 32, 3, 2, &mut rng),
            Conv3d::new(&mut p, "f3", 32, 64, 3, 2, &mut rng),
            Conv3d::new(&mut p, "f4", 64, FEATURE_WIDTH, 1, 1, &mut rng),
        ];
        let hash = hashing::chain(&[ARCH, &hashing::sha256_hex(&p.to_bytes())]);
        FeatureExtractor { params: p, convs, hash }
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn extract(&self, volumes: &[Volume]) -> Result<FeatureSet> {
        let Some(first) = volumes.first() else {
            return Err(LadError::Data("feature extraction needs at least one volume".into()));
        };
        let dims = first.dims();
        if let Some(v) = volumes.iter().find(|v| v.dims() != dims) {
            return Err(LadError::Shape(format!("volume {} is {} but the set is {}", v.id, v.dims(), dims)));
        }
        let mut rows = Vec::with_capacity(volumes.len() * FEATURE_WIDTH);
        for chunk in volumes.chunks(8) {
            let refs: Vec<&Volume> = chunk.iter().collect();
            let mut g = Graph::new();
            let mut h = g.constant(volumes_to_batch(&refs)?);
            for c in &self.convs {
                h = c.forward(&mut g, Bind::frozen(&self.params), h)?;
                h = g.relu(h);
            }
            let t = g.value(h);
            let spatial: usize = t.shape()[2..].iter().product();
            for item in t.data().chunks(FEATURE_WIDTH * spatial) {
                for ch in item.chunks(spatial) {
                    rows.push(ch.iter().map(|v| *v as f64).sum::<f64>() / spatial as f64);
                }
            }
        }
        FeatureSet::new(DMatrix::from_row_slice(volumes.len(), FEATURE_WIDTH, &rows), self.hash.clone())
    }
}
