//! Binary checkpoints: magic, little-endian u64 header length, a JSON header
//! describing named sections of tensors, then the f64 payload in header order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::config::RunConfig;
use crate::numerics::{ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"LMCKPT01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file")]
    BadMagic,
    #[error("truncated or corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("missing section {0:?}")]
    MissingSection(String),
    #[error("checkpoint built with {key} = {stored}, current config has {current}")]
    ConfigMismatch { key: String, stored: String, current: String },
    #[error("section {section}: {reason}")]
    Layout { section: String, reason: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SectionEntry {
    name: String,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    stage: String,
    config: RunConfig,
    meta: BTreeMap<String, String>,
    sections: Vec<SectionEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: String,
    pub config: RunConfig,
    /// Free-form text entries (vocabularies, scalars serialized as text).
    pub meta: BTreeMap<String, String>,
    pub sections: Vec<(String, Vec<(String, Tensor)>)>,
}

impl Checkpoint {
    pub fn new(stage: &str, config: &RunConfig) -> Checkpoint {
        Checkpoint { stage: stage.into(), config: config.clone(), meta: BTreeMap::new(), sections: Vec::new() }
    }

    pub fn add_section(&mut self, name: &str, tensors: Vec<(String, Tensor)>) {
        self.sections.retain(|(n, _)| n != name);
        self.sections.push((name.into(), tensors));
    }

    pub fn add_store(&mut self, name: &str, store: &ParamStore) {
        self.add_section(name, store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect());
    }

    pub fn section(&self, name: &str) -> Result<&[(String, Tensor)], CheckpointError> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.as_slice())
            .ok_or_else(|| CheckpointError::MissingSection(name.into()))
    }

    pub fn has_section(&self, name: &str) -> bool {
        self.sections.iter().any(|(n, _)| n == name)
    }

    /// Copies a section into `store`; names and shapes must match exactly.
    pub fn load_store(&self, name: &str, store: &mut ParamStore) -> Result<(), CheckpointError> {
        let entries = self.section(name)?.to_vec();
        store.load(entries).map_err(|e| CheckpointError::Layout { section: name.into(), reason: e.to_string() })
    }

    pub fn meta(&self, key: &str) -> Result<&str, CheckpointError> {
        self.meta.get(key).map(String::as_str).ok_or_else(|| CheckpointError::MissingSection(format!("meta:{key}")))
    }

    /// Errors when any of `keys` differs from `current`.
    pub fn check_config(&self, current: &RunConfig, keys: &[&str]) -> Result<(), CheckpointError> {
        match self.config.architecture_mismatch(current, keys) {
            Some((key, stored, current)) => Err(CheckpointError::ConfigMismatch { key, stored, current }),
            None => Ok(()),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let mut sections = Vec::with_capacity(self.sections.len());
        for (name, tensors) in &self.sections {
            let mut entries = Vec::with_capacity(tensors.len());
            for (tn, t) in tensors {
                entries.push(TensorEntry { name: tn.clone(), shape: t.shape().to_vec(), offset });
                offset += t.len();
            }
            sections.push(SectionEntry { name: name.clone(), tensors: entries });
        }
        let header = Header {
            version: FORMAT_VERSION,
            stage: self.stage.clone(),
            config: self.config.clone(),
            meta: self.meta.clone(),
            sections,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + offset * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, tensors) in &self.sections {
            for (_, t) in tensors {
                for x in t.data() {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16usize.saturating_add(hlen)).ok_or_else(|| CheckpointError::Corrupt("header length".into()))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        if header.version != FORMAT_VERSION {
            return Err(CheckpointError::Version(header.version));
        }
        let payload = &bytes[16 + hlen..];
        if !payload.len().is_multiple_of(8) {
            return Err(CheckpointError::Corrupt("payload is not a whole number of f64".into()));
        }
        let floats: Vec<f64> =
            payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let mut expected = 0;
        let mut sections = Vec::with_capacity(header.sections.len());
        for s in header.sections {
            let mut tensors = Vec::with_capacity(s.tensors.len());
            for e in s.tensors {
                let n: usize = e.shape.iter().product();
                if e.offset != expected || e.offset + n > floats.len() {
                    return Err(CheckpointError::Corrupt(format!("tensor {} out of place", e.name)));
                }
                let t = Tensor::new(&e.shape, floats[e.offset..e.offset + n].to_vec())
                    .map_err(|err| CheckpointError::Corrupt(err.to_string()))?;
                tensors.push((e.name, t));
                expected += n;
            }
            sections.push((s.name, tensors));
        }
        if expected != floats.len() {
            return Err(CheckpointError::Corrupt("trailing payload".into()));
        }
        Ok(Checkpoint { stage: header.stage, config: header.config, meta: header.meta, sections })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::config::ARCHITECTURE_KEYS;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut c = Checkpoint::new("train-decoder", &RunConfig::default());
        c.meta.insert("vocab".into(), "a\nb\n".into());
        c.add_section("decoder", vec![("w".into(), Tensor::randn(&[3, 4], 1.0, &mut rng)), ("b".into(), Tensor::zeros(&[4]))]);
        c.add_section("schedule", vec![("betas".into(), Tensor::new(&[2], vec![f64::MIN_POSITIVE, -0.0]).unwrap())]);
        c
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        let w0 = &c.section("schedule").unwrap()[0].1;
        let w1 = &back.section("schedule").unwrap()[0].1;
        assert!(w0.data().iter().zip(w1.data()).all(|(a, b)| a.to_bits() == b.to_bits()));

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x/c.ckpt");
        c.save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), c);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let bytes = sample().to_bytes();
        assert!(matches!(Checkpoint::from_bytes(b"nonsense"), Err(CheckpointError::BadMagic)));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]), Err(CheckpointError::Corrupt(_))));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..40]), Err(CheckpointError::Corrupt(_))));
        assert!(matches!(sample().section("dit"), Err(CheckpointError::MissingSection(_))));
    }

    #[test]
    fn config_echo_guards_architecture() {
        let c = sample();
        let mut other = RunConfig::default();
        other.seed = 9;
        assert!(c.check_config(&other, ARCHITECTURE_KEYS).is_ok());
        other.dit_width = 32;
        let err = c.check_config(&other, ARCHITECTURE_KEYS).unwrap_err();
        assert!(matches!(err, CheckpointError::ConfigMismatch { ref key, .. } if key == "dit_width"));
        assert!(err.to_string().contains("dit_width = 64"));

        let mut store = ParamStore::new();
        store.add("w", Tensor::zeros(&[3, 5]));
        store.add("b", Tensor::zeros(&[4]));
        assert!(matches!(c.load_store("decoder", &mut store), Err(CheckpointError::Layout { .. })));
    }
}
