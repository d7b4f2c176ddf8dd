//! Holistic and localized evaluation of a synthetic set against a real one.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::distance::{fid, mmd};
use super::embed::{ellipse_fit, mds_embed, Ellipse};
use super::features::{FeatureExtractor, FeatureSet};
use super::ssim::ms_ssim_pairs;
use crate::dataset;
use crate::error::{LadError, Result};
use crate::volume::{BBox, LabelMask, Volume, ORGAN};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub n_pairs: usize,
    pub seed: u64,
    /// Label whose union box defines the localized crop.
    pub label: u8,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_pairs: 400,
            seed: 0,
            label: ORGAN,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub fid_holistic: Option<f64>,
    pub fid_localized: Option<f64>,
    pub mmd_holistic: Option<f64>,
    pub mmd_localized: Option<f64>,
    pub ms_ssim: Option<f64>,
    pub pair_count: usize,
    pub ms_ssim_scales: usize,
    pub mmd_bandwidth_fallback: bool,
    pub localized_box: Option<[[usize; 3]; 2]>,
    pub extractor_hash: String,
    pub real_count: usize,
    pub synth_count: usize,
    pub config: EvalConfig,
    /// Hash of the run configuration that produced the compared sets.
    pub config_hash: Option<String>,
    /// Failed fields and why.
    pub errors: BTreeMap<String, String>,
}

impl MetricsReport {
    pub fn is_complete(&self) -> bool {
        self.errors.is_empty()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Smallest box holding `label` in every mask.
pub fn union_bbox(masks: &[LabelMask], label: u8) -> Result<BBox> {
    masks
        .iter()
        .filter_map(|m| m.label_bbox(label))
        .reduce(|a, b| a.union(&b))
        .ok_or_else(|| LadError::Data(format!("label {label} is absent from every mask")))
}

pub fn localized_crop(volumes: &[Volume], bbox: &BBox) -> Result<Vec<Volume>> {
    volumes.iter().map(|v| v.crop(bbox)).collect()
}

fn record<T>(errors: &mut BTreeMap<String, String>, field: &str, r: Result<T>) -> Option<T> {
    match r {
        Ok(v) => Some(v),
        Err(e) => {
            errors.insert(field.to_string(), e.to_string());
            None
        }
    }
}

/// Method name, its embedded points and the fitted ellipse.
pub type MethodPoints = (String, Vec<[f64; 2]>, Option<Ellipse>);

/// Per-method points and fitted ellipse for plotting.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingData {
    pub methods: Vec<MethodPoints>,
}

impl EmbeddingData {
    pub fn to_text(&self) -> String {
        let mut s = String::from("# method x y\n");
        for (m, pts, _) in &self.methods {
            for p in pts {
                let _ = writeln!(s, "point {m} {:.17e} {:.17e}", p[0], p[1]);
            }
        }
        s.push_str("# method a b c d e f cx cy major minor angle\n");
        for (m, _, el) in &self.methods {
            if let Some(el) = el {
                let c = el.conic;
                let _ = writeln!(
                    s,
                    "ellipse {m} {:e} {:e} {:e} {:e} {:e} {:e} {:e} {:e} {:e} {:e} {:e}",
                    c[0], c[1], c[2], c[3], c[4], c[5], el.center[0], el.center[1], el.semi_axes[0], el.semi_axes[1], el.angle
                );
            }
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut methods: Vec<MethodPoints> = Vec::new();
        let slot = |methods: &mut Vec<MethodPoints>, m: &str| -> usize {
            match methods.iter().position(|e| e.0 == m) {
                Some(i) => i,
                None => {
                    methods.push((m.to_string(), Vec::new(), None));
                    methods.len() - 1
                }
            }
        };
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let parts: Vec<&str> = line.split_whitespace().collect();
            let nums = parts[2.min(parts.len())..]
                .iter()
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<Vec<f64>, _>>()
                .map_err(|_| LadError::Data(format!("embedding line {line:?} has a bad number")))?;
            match (parts.first().copied(), parts.len()) {
                (Some("point"), 4) => {
                    let i = slot(&mut methods, parts[1]);
                    methods[i].1.push([nums[0], nums[1]]);
                }
                (Some("ellipse"), 13) => {
                    let i = slot(&mut methods, parts[1]);
                    methods[i].2 = Some(Ellipse {
                        conic: [nums[0], nums[1], nums[2], nums[3], nums[4], nums[5]],
                        center: [nums[6], nums[7]],
                        semi_axes: [nums[8], nums[9]],
                        angle: nums[10],
                    });
                }
                _ => return Err(LadError::Data(format!("unrecognized embedding line {line:?}"))),
            }
        }
        Ok(EmbeddingData { methods })
    }
}

/// MDS of the pooled feature sets with one ellipse per method.
pub fn embedding(sets: &[(&str, &FeatureSet)]) -> Result<EmbeddingData> {
    let width = sets.first().map(|s| s.1.width()).unwrap_or(0);
    let rows: usize = sets.iter().map(|s| s.1.len()).sum();
    let mut pooled = DMatrix::zeros(rows, width);
    let mut r = 0;
    for (_, s) in sets {
        pooled.rows_mut(r, s.len()).copy_from(&s.data);
        r += s.len();
    }
    let emb = mds_embed(&FeatureSet::new(pooled, sets.first().map(|s| s.1.extractor.clone()).unwrap_or_default())?)?;
    let mut methods = Vec::new();
    let mut r = 0;
    for (name, s) in sets {
        let pts = emb.points[r..r + s.len()].to_vec();
        r += s.len();
        let el = ellipse_fit(&pts).ok();
        methods.push((name.to_string(), pts, el));
    }
    Ok(EmbeddingData { methods })
}

/// Full evaluation on in-memory sets.
pub fn evaluate_sets(real: &[Volume], synth: &[Volume], masks: &[LabelMask], config: &EvalConfig) -> Result<(MetricsReport, EmbeddingData)> {
    let (Some(r0), Some(s0)) = (real.first(), synth.first()) else {
        return Err(LadError::Data("evaluation needs non-empty real and synthetic sets".into()));
    };
    if r0.dims() != s0.dims() {
        return Err(LadError::Shape(format!(
            "real volumes are {} but synthetic volumes are {}; refusing to compare",
            r0.dims(),
            s0.dims()
        )));
    }
    if let Some(m) = masks.iter().find(|m| m.dims() != r0.dims()) {
        return Err(LadError::Shape(format!("mask of {} does not match volumes of {}", m.dims(), r0.dims())));
    }
    let ex = FeatureExtractor::new();
    let fr = ex.extract(real)?;
    let fs = ex.extract(synth)?;
    let mut errors = BTreeMap::new();
    let fid_h = record(&mut errors, "fid_holistic", fid(&fr, &fs));
    let mmd_h = record(&mut errors, "mmd_holistic", mmd(&fr, &fs));
    let bbox = record(&mut errors, "localized_box", union_bbox(masks, config.label));
    let (mut fid_l, mut mmd_l) = (None, None);
    if let Some(b) = &bbox {
        let local = localized_crop(real, b).and_then(|r| Ok((ex.extract(&r)?, ex.extract(&localized_crop(synth, b)?)?)));
        if let Some((lr, ls)) = record(&mut errors, "localized_features", local) {
            fid_l = record(&mut errors, "fid_localized", fid(&lr, &ls));
            mmd_l = record(&mut errors, "mmd_localized", mmd(&lr, &ls)).map(|m| m.value());
        }
    }
    let ms = record(&mut errors, "ms_ssim", ms_ssim_pairs(synth, config.n_pairs, config.seed));
    let emb = embedding(&[("real", &fr), ("synth", &fs)])?;
    let report = MetricsReport {
        fid_holistic: fid_h,
        fid_localized: fid_l,
        mmd_holistic: mmd_h.map(|m| m.value()),
        mmd_localized: mmd_l,
        ms_ssim: ms.map(|s| s.mean),
        pair_count: ms.map(|s| s.pairs).unwrap_or(0),
        ms_ssim_scales: ms.map(|s| s.scales).unwrap_or(0),
        mmd_bandwidth_fallback: mmd_h.map(|m| m.bandwidth_fallback).unwrap_or(false),
        localized_box: bbox.map(|b| [b.lo, b.hi]),
        extractor_hash: ex.hash().to_string(),
        real_count: real.len(),
        synth_count: synth.len(),
        config: config.clone(),
        config_hash: None,
        errors,
    };
    Ok((report, emb))
}

/// Evaluate dataset directories; writes `report` and, if given, the
/// embedding file.
pub fn evaluate(real_dir: &Path, synth_dir: &Path, masks_dir: &Path, config: &EvalConfig, report: &Path, embedding_out: Option<&Path>) -> Result<MetricsReport> {
    let real = dataset::read_volumes(real_dir)?;
    let synth = dataset::read_volumes(synth_dir)?;
    let masks = dataset::read_masks(masks_dir)?;
    let (r, emb) = evaluate_sets(&real, &synth, &masks, config)?;
    lad_tensor::write_atomic(report, r.to_json()?.as_bytes())?;
    if let Some(p) = embedding_out {
        lad_tensor::write_atomic(p, emb.to_text().as_bytes())?;
    }
    Ok(r)
}
