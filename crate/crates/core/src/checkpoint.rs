//! Checkpoint directories and per-step loss logs.
//!
//! A checkpoint directory holds `state.bin` (every parameter store of a
//! trainer, merged under name prefixes), a `meta` text file and the loss log.
//! `state.bin` is written first and `meta` last, each atomically; `meta`
//! records the blob's sha256 so a torn pair is detected on load.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use lad_tensor::{write_atomic, ParamStore};

use crate::error::{LadError, Result};
use crate::hashing::sha256_hex;

pub const STATE_FILE: &str = "state.bin";
pub const META_FILE: &str = "meta";
pub const LOSS_LOG: &str = "losses.tsv";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Meta(pub BTreeMap<String, String>);

impl Meta {
    pub fn set(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.0.insert(key.to_string(), value.to_string());
        self
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.0
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| LadError::Data(format!("checkpoint meta lacks {key}")))
    }

    pub fn parse_value<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key)?;
        v.parse()
            .map_err(|_| LadError::Data(format!("checkpoint meta {key}={v:?} does not parse")))
    }

    pub fn to_text(&self) -> String {
        self.0.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| LadError::Data(format!("meta line {line:?} lacks '='")))?;
            m.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(Meta(m))
    }
}

/// Merge stores under `prefix/` names.
pub fn merge_stores(parts: &[(&str, &ParamStore)]) -> ParamStore {
    let mut out = ParamStore::new();
    for (prefix, store) in parts {
        for id in store.ids() {
            out.add(format!("{prefix}/{}", store.name(id)), store.get(id).clone());
        }
    }
    out
}

/// Entries of `merged` under `prefix/`, with the prefix stripped.
pub fn split_store(merged: &ParamStore, prefix: &str) -> ParamStore {
    let lead = format!("{prefix}/");
    let mut out = ParamStore::new();
    for id in merged.ids() {
        if let Some(name) = merged.name(id).strip_prefix(&lead) {
            out.add(name, merged.get(id).clone());
        }
    }
    out
}

pub fn has_checkpoint(dir: &Path) -> bool {
    dir.join(META_FILE).is_file() && dir.join(STATE_FILE).is_file()
}

pub fn save_checkpoint(dir: &Path, parts: &[(&str, &ParamStore)], meta: &Meta) -> Result<()> {
    fs::create_dir_all(dir)?;
    let bytes = merge_stores(parts).to_bytes();
    let mut meta = meta.clone();
    meta.set("state_sha256", sha256_hex(&bytes));
    write_atomic(&dir.join(STATE_FILE), &bytes)?;
    write_atomic(&dir.join(META_FILE), meta.to_text().as_bytes())?;
    Ok(())
}

pub fn read_meta(dir: &Path) -> Result<Meta> {
    let path = dir.join(META_FILE);
    let text = fs::read_to_string(&path).map_err(|e| LadError::Data(format!("{}: {e}", path.display())))?;
    Meta::parse(&text)
}

pub fn load_checkpoint(dir: &Path) -> Result<(ParamStore, Meta)> {
    let meta = read_meta(dir)?;
    let bytes = fs::read(dir.join(STATE_FILE))?;
    if sha256_hex(&bytes) != meta.get("state_sha256")? {
        return Err(LadError::Data(format!("{}: state.bin does not match meta", dir.display())));
    }
    Ok((ParamStore::from_bytes(&bytes)?, meta))
}

/// Tab-separated per-step loss log.
pub struct LossLog {
    path: PathBuf,
}

impl LossLog {
    /// Open for appending from `from_step`; rows at or after it are dropped
    /// so a resumed run rewrites them.
    pub fn open(dir: &Path, header: &[&str], from_step: u64) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(LOSS_LOG);
        let head = format!("step\t{}", header.join("\t"));
        let mut kept = vec![head.clone()];
        if from_step > 0 {
            if let Ok(text) = fs::read_to_string(&path) {
                let mut lines = text.lines();
                if lines.next() == Some(head.as_str()) {
                    kept.extend(
                        lines
                            .filter(|l| l.split('\t').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s < from_step))
                            .map(str::to_string),
                    );
                }
            }
        }
        write_atomic(&path, (kept.join("\n") + "\n").as_bytes())?;
        Ok(LossLog { path })
    }

    pub fn append(&mut self, step: u64, values: &[f64]) -> Result<()> {
        let mut f = fs::OpenOptions::new().append(true).open(&self.path)?;
        let row: Vec<String> = values.iter().map(|v| format!("{v:.9e}")).collect();
        writeln!(f, "{step}\t{}", row.join("\t"))?;
        Ok(())
    }
}

/// Column names and `(step, values)` rows.
pub type LossRows = (Vec<String>, Vec<(u64, Vec<f64>)>);

pub fn read_loss_log(dir: &Path) -> Result<LossRows> {
    let text = fs::read_to_string(dir.join(LOSS_LOG))?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| LadError::Data("empty loss log".into()))?
        .split('\t')
        .skip(1)
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for l in lines.filter(|l| !l.is_empty()) {
        let mut it = l.split('\t');
        let step = it
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| LadError::Data(format!("bad loss row {l:?}")))?;
        let vals = it
            .map(|v| v.parse::<f64>().map_err(|_| LadError::Data(format!("bad loss value {v:?}"))))
            .collect::<Result<Vec<_>>>()?;
        rows.push((step, vals));
    }
    Ok((header, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use lad_tensor::Tensor;

    #[test]
    fn save_load_and_torn_detection() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = ParamStore::new();
        a.add("w", Tensor::full(&[2], 1.5));
        let mut meta = Meta::default();
        meta.set("step", 3);
        save_checkpoint(dir.path(), &[("model", &a)], &meta).unwrap();
        let (merged, m) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(m.parse_value::<u64>("step").unwrap(), 3);
        let back = split_store(&merged, "model");
        assert_eq!(back.get(back.find("w").unwrap()).data(), &[1.5, 1.5]);
        fs::write(dir.path().join(STATE_FILE), b"junk").unwrap();
        assert!(load_checkpoint(dir.path()).is_err());
    }

    #[test]
    fn loss_log_truncates_on_resume() {
        let dir = tempfile::tempdir().unwrap();
        let mut log = LossLog::open(dir.path(), &["a"], 0).unwrap();
        for s in 0..5 {
            log.append(s, &[s as f64]).unwrap();
        }
        let mut log = LossLog::open(dir.path(), &["a"], 3).unwrap();
        log.append(3, &[30.0]).unwrap();
        let (_, rows) = read_loss_log(dir.path()).unwrap();
        let steps: Vec<u64> = rows.iter().map(|r| r.0).collect();
        assert_eq!(steps, vec![0, 1, 2, 3]);
        assert_eq!(rows[3].1[0], 30.0);
    }
}
