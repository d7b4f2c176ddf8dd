//! On-disk dataset container.
//!
//! A directory holding a `manifest` (one `key=value` per line) and per-sample
//! raw files: `vol_%04d.raw` (little-endian `f32`) and `msk_%04d.raw` (`u8`),
//! both laid out D-major, then H, then W. Either file family may be absent;
//! the manifest records which are present.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use lad_tensor::write_atomic;
use ndarray::Array3;

use crate::error::{LadError, Result};
use crate::volume::{Dims, LabelMask, Volume};

pub const MANIFEST: &str = "manifest";

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub count: usize,
    pub dims: Dims,
    pub spacing: [f64; 3],
    pub has_volumes: bool,
    pub has_masks: bool,
    pub config_hash: Option<String>,
    /// Free-form extra keys (e.g. organ presence per crop).
    pub extra: BTreeMap<String, String>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut lines = vec![
            format!("count={}", self.count),
            format!("shape={}", self.dims),
            format!("spacing={},{},{}", self.spacing[0], self.spacing[1], self.spacing[2]),
            "dtype=f32".to_string(),
            "mask_dtype=u8".to_string(),
            format!("volumes={}", self.has_volumes),
            format!("masks={}", self.has_masks),
        ];
        if let Some(h) = &self.config_hash {
            lines.push(format!("config_hash={h}"));
        }
        for (k, v) in &self.extra {
            lines.push(format!("{k}={v}"));
        }
        lines.join("\n") + "\n"
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| LadError::Data(format!("manifest line {line:?} lacks '='")))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let mut take = |k: &str| kv.remove(k).ok_or_else(|| LadError::Data(format!("manifest lacks {k}")));
        let count = take("count")?
            .parse()
            .map_err(|_| LadError::Data("manifest count is not an integer".into()))?;
        let dims: Dims = take("shape")?.parse()?;
        let spacing_s = take("spacing")?;
        let sp: Vec<f64> = spacing_s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| LadError::Data(format!("bad spacing {spacing_s:?}")))?;
        if sp.len() != 3 {
            return Err(LadError::Data(format!("bad spacing {spacing_s:?}")));
        }
        let dtype = take("dtype")?;
        if dtype != "f32" {
            return Err(LadError::Data(format!("unsupported dtype {dtype}")));
        }
        kv.remove("mask_dtype");
        let flag = |kv: &mut BTreeMap<String, String>, k: &str| kv.remove(k).map(|v| v == "true").unwrap_or(true);
        let has_volumes = flag(&mut kv, "volumes");
        let has_masks = flag(&mut kv, "masks");
        let config_hash = kv.remove("config_hash");
        Ok(Manifest {
            count,
            dims,
            spacing: [sp[0], sp[1], sp[2]],
            has_volumes,
            has_masks,
            config_hash,
            extra: kv,
        })
    }
}

pub fn volume_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("vol_{i:04}.raw"))
}

pub fn mask_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("msk_{i:04}.raw"))
}

pub fn encode_volume(v: &Volume) -> Vec<u8> {
    let mut out = Vec::with_capacity(v.dims().voxels() * 4);
    for x in v.data().iter() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn decode_volume(bytes: &[u8], dims: Dims, spacing: [f64; 3], id: String) -> Result<Volume> {
    if bytes.len() != dims.voxels() * 4 {
        return Err(LadError::Data(format!(
            "volume file has {} bytes, expected {}",
            bytes.len(),
            dims.voxels() * 4
        )));
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let arr = Array3::from_shape_vec((dims.d, dims.h, dims.w), data).map_err(|e| LadError::Shape(e.to_string()))?;
    Volume::new(arr, spacing, id)
}

pub fn encode_mask(m: &LabelMask) -> Vec<u8> {
    m.data().iter().copied().collect()
}

pub fn decode_mask(bytes: &[u8], dims: Dims) -> Result<LabelMask> {
    if bytes.len() != dims.voxels() {
        return Err(LadError::Data(format!(
            "mask file has {} bytes, expected {}",
            bytes.len(),
            dims.voxels()
        )));
    }
    let arr = Array3::from_shape_vec((dims.d, dims.h, dims.w), bytes.to_vec()).map_err(|e| LadError::Shape(e.to_string()))?;
    LabelMask::new(arr)
}

/// Write a container. `volumes` and `masks`, when both given, must pair up.
pub fn write_dataset(
    dir: &Path,
    volumes: Option<&[Volume]>,
    masks: Option<&[LabelMask]>,
    config_hash: Option<&str>,
    extra: BTreeMap<String, String>,
) -> Result<Manifest> {
    let (count, dims, spacing) = match (volumes, masks) {
        (Some(v), Some(m)) if v.len() != m.len() => {
            return Err(LadError::Data(format!("{} volumes vs {} masks", v.len(), m.len())))
        }
        (Some(v), _) if !v.is_empty() => (v.len(), v[0].dims(), v[0].spacing()),
        (_, Some(m)) if !m.is_empty() => (m.len(), m[0].dims(), [1.0; 3]),
        _ => return Err(LadError::Data("nothing to write".into())),
    };
    fs::create_dir_all(dir)?;
    if let Some(vs) = volumes {
        for (i, v) in vs.iter().enumerate() {
            if v.dims() != dims {
                return Err(LadError::Shape(format!("volume {i} is {}, expected {dims}", v.dims())));
            }
            write_atomic(&volume_path(dir, i), &encode_volume(v))?;
        }
    }
    if let Some(ms) = masks {
        for (i, m) in ms.iter().enumerate() {
            if m.dims() != dims {
                return Err(LadError::Shape(format!("mask {i} is {}, expected {dims}", m.dims())));
            }
            write_atomic(&mask_path(dir, i), &encode_mask(m))?;
        }
    }
    let manifest = Manifest {
        count,
        dims,
        spacing,
        has_volumes: volumes.is_some(),
        has_masks: masks.is_some(),
        config_hash: config_hash.map(str::to_string),
        extra,
    };
    write_atomic(&dir.join(MANIFEST), manifest.to_text().as_bytes())?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(dir.join(MANIFEST))
        .map_err(|e| LadError::Data(format!("{}: {e}", dir.join(MANIFEST).display())))?;
    Manifest::parse(&text)
}

pub fn read_volumes(dir: &Path) -> Result<Vec<Volume>> {
    let m = read_manifest(dir)?;
    if !m.has_volumes {
        return Err(LadError::Data(format!("{} holds no volumes", dir.display())));
    }
    (0..m.count)
        .map(|i| {
            let bytes = fs::read(volume_path(dir, i))?;
            decode_volume(&bytes, m.dims, m.spacing, format!("{}#{i}", dir.display()))
        })
        .collect()
}

pub fn read_masks(dir: &Path) -> Result<Vec<LabelMask>> {
    let m = read_manifest(dir)?;
    if !m.has_masks {
        return Err(LadError::Data(format!("{} holds no masks", dir.display())));
    }
    (0..m.count)
        .map(|i| decode_mask(&fs::read(mask_path(dir, i))?, m.dims))
        .collect()
}
