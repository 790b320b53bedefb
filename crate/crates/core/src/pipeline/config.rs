//! Flat `key = value` run configuration.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::codec::{CodecConfig, CodecTrainConfig};
use crate::diffusion::{DitConfig, Method, SamplerConfig};
use crate::encoder::{EncoderConfig, EncoderTrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("unknown key {0:?}")]
    UnknownKey(String),
    #[error("bad value for {key}: {value:?}")]
    BadValue { key: String, value: String },
    #[error("inconsistent config: {0}")]
    Inconsistent(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Every hyperparameter of a run. Defaults are the toy reference setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus_size: usize,
    pub holdout: usize,

    pub smiles_vocab: usize,
    pub caption_vocab: usize,
    pub max_len: usize,
    pub caption_len: usize,

    pub d_enc: usize,
    pub enc_layers: usize,
    pub enc_heads: usize,
    pub proj_dim: usize,
    pub tau: f64,
    pub queue: usize,
    pub enc_steps: usize,
    pub enc_batch: usize,
    pub enc_lr: f64,

    pub d_z: usize,
    pub compress: bool,
    pub dec_dim: usize,
    pub dec_layers: usize,
    pub dec_heads: usize,
    pub codec_steps: usize,
    pub codec_batch: usize,
    pub codec_lr: f64,
    pub spellings: usize,
    pub codec_noise: f64,

    pub diffusion_t: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub dit_blocks: usize,
    pub dit_width: usize,
    pub dit_heads: usize,
    pub caption_layers: usize,
    pub null_len: usize,
    pub diff_steps: usize,
    pub diff_batch: usize,
    pub diff_lr: f64,
    pub p_null: f64,
    /// Per-clause keep probability when captions are subsampled in training.
    pub caption_keep: f64,
    pub frozen_captions: bool,

    pub sampler: String,
    pub sample_steps: usize,
    pub guidance: f64,
    pub bench_guidance: f64,

    pub retrieval_n: usize,
    pub edit_gamma: f64,
    pub edit_guidance: f64,
    pub edit_iterations: usize,

    pub weight_decay: f64,
    pub clip: f64,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            seed: 42,
            corpus_size: 500,
            holdout: 100,
            smiles_vocab: 96,
            caption_vocab: 128,
            max_len: 24,
            caption_len: 32,
            d_enc: 32,
            enc_layers: 2,
            enc_heads: 4,
            proj_dim: 32,
            tau: 0.07,
            queue: 256,
            enc_steps: 600,
            enc_batch: 32,
            enc_lr: 1e-3,
            d_z: 4,
            compress: true,
            dec_dim: 64,
            dec_layers: 2,
            dec_heads: 4,
            codec_steps: 3000,
            codec_batch: 32,
            codec_lr: 2e-3,
            spellings: 0,
            codec_noise: 0.0,
            diffusion_t: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            dit_blocks: 4,
            dit_width: 64,
            dit_heads: 4,
            caption_layers: 2,
            null_len: 4,
            diff_steps: 8000,
            diff_batch: 32,
            diff_lr: 2e-3,
            p_null: 0.03,
            caption_keep: 0.3,
            frozen_captions: false,
            sampler: "ddim".into(),
            sample_steps: 100,
            guidance: 5.0,
            bench_guidance: 3.5,
            retrieval_n: 10,
            edit_gamma: 0.4,
            edit_guidance: 2.0,
            edit_iterations: 200,
            weight_decay: 0.01,
            clip: 1.0,
        }
    }
}

/// Keys that fix parameter shapes, ordered by the stage that first depends on
/// them: encoder (first 8), codec (next 5), denoiser (rest).
pub const ARCHITECTURE_KEYS: &[&str] = &[
    "smiles_vocab",
    "caption_vocab",
    "max_len",
    "caption_len",
    "d_enc",
    "enc_layers",
    "enc_heads",
    "proj_dim",
    "d_z",
    "compress",
    "dec_dim",
    "dec_layers",
    "dec_heads",
    "dit_blocks",
    "dit_width",
    "dit_heads",
    "caption_layers",
    "null_len",
];

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::Syntax { line: i + 1, reason: format!("expected key = value, got {raw:?}") })?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        RunConfig::parse(&fs::read_to_string(path)?)
    }

    /// Sets one field, parsed according to the field's type.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let mut map = self.to_map();
        let bad = || ConfigError::BadValue { key: key.into(), value: value.into() };
        let slot = map.get_mut(key).ok_or_else(|| ConfigError::UnknownKey(key.into()))?;
        *slot = match slot {
            Value::Bool(_) => Value::Bool(value.parse().map_err(|_| bad())?),
            Value::Number(n) if n.is_u64() => Value::from(value.parse::<u64>().map_err(|_| bad())?),
            Value::Number(_) => {
                let x: f64 = value.parse().map_err(|_| bad())?;
                if !x.is_finite() {
                    return Err(bad());
                }
                Value::from(x)
            }
            _ => Value::String(value.into()),
        };
        *self = serde_json::from_value(Value::Object(map)).map_err(|_| bad())?;
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        self.to_map().get(key).map(|v| match v {
            Value::String(s) => s.clone(),
            other => other.to_string(),
        })
    }

    pub(crate) fn to_map(&self) -> Map<String, Value> {
        match serde_json::to_value(self).expect("config serializes") {
            Value::Object(m) => m,
            _ => unreachable!("struct serializes to an object"),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, _) in self.to_map() {
            out.push_str(&format!("{k} = {}\n", self.get(&k).expect("present")));
        }
        out
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |m: String| Err(ConfigError::Inconsistent(m));
        if self.compress && self.d_z > self.d_enc {
            return fail(format!("d_z {} exceeds d_enc {}", self.d_z, self.d_enc));
        }
        if self.sample_steps == 0 || self.sample_steps > self.diffusion_t {
            return fail(format!("sample_steps {} must lie in 1..={}", self.sample_steps, self.diffusion_t));
        }
        if !(0.0 < self.beta_start && self.beta_start <= self.beta_end && self.beta_end < 1.0) {
            return fail(format!("beta range {}..{}", self.beta_start, self.beta_end));
        }
        for (w, h, what) in [
            (self.d_enc, self.enc_heads, "d_enc/enc_heads"),
            (self.dec_dim, self.dec_heads, "dec_dim/dec_heads"),
            (self.dit_width, self.dit_heads, "dit_width/dit_heads"),
        ] {
            if h == 0 || w % h != 0 {
                return fail(format!("{what}: {w} not divisible by {h}"));
            }
        }
        if self.null_len == 0 || self.null_len > self.caption_len {
            return fail(format!("null_len {} must lie in 1..={}", self.null_len, self.caption_len));
        }
        if !(0.0..=1.0).contains(&self.p_null) || !(0.0..=1.0).contains(&self.caption_keep) {
            return fail("probabilities must lie in [0, 1]".into());
        }
        if self.tau <= 0.0 || self.guidance < 0.0 || self.bench_guidance < 0.0 || self.edit_gamma < 0.0 {
            return fail("tau must be positive; guidance and gamma non-negative".into());
        }
        if self.max_len < 4 || self.caption_len < 2 || self.corpus_size == 0 {
            return fail("lengths and corpus size too small".into());
        }
        if self.sampler.parse::<Method>().is_err() {
            return fail(format!("unknown sampler {:?}", self.sampler));
        }
        if self.retrieval_n == 0 || self.enc_batch < 2 || self.codec_batch == 0 || self.diff_batch == 0 {
            return fail("retrieval_n and batch sizes must be positive (encoder batch at least 2)".into());
        }
        Ok(())
    }

    /// First of `keys` whose value differs from `other`.
    pub fn architecture_mismatch(&self, other: &RunConfig, keys: &[&str]) -> Option<(String, String, String)> {
        keys.iter().find_map(|&k| {
            let (a, b) = (self.get(k)?, other.get(k)?);
            (a != b).then(|| (k.to_string(), a, b))
        })
    }

    pub fn encoder_config(&self, vocab: usize) -> EncoderConfig {
        EncoderConfig {
            vocab,
            len: self.max_len,
            d_enc: self.d_enc,
            layers: self.enc_layers,
            heads: self.enc_heads,
            proj_dim: self.proj_dim,
            tau: self.tau,
        }
    }

    pub fn encoder_train_config(&self) -> EncoderTrainConfig {
        EncoderTrainConfig {
            steps: self.enc_steps,
            batch: self.enc_batch,
            lr: self.enc_lr,
            lr_min: self.enc_lr * 0.1,
            weight_decay: self.weight_decay,
            queue: self.queue,
            clip: self.clip,
        }
    }

    pub fn codec_config(&self, vocab: usize) -> CodecConfig {
        CodecConfig {
            vocab,
            len: self.max_len,
            d_enc: self.d_enc,
            d_z: self.d_z,
            compress: self.compress,
            d_model: self.dec_dim,
            layers: self.dec_layers,
            heads: self.dec_heads,
        }
    }

    pub fn codec_train_config(&self) -> CodecTrainConfig {
        CodecTrainConfig {
            steps: self.codec_steps,
            batch: self.codec_batch,
            lr: self.codec_lr,
            lr_min: self.codec_lr * 0.05,
            weight_decay: self.weight_decay,
            clip: self.clip,
            spellings: self.spellings,
            noise: self.codec_noise,
        }
    }

    pub fn latent_dim(&self) -> usize {
        if self.compress {
            self.d_z
        } else {
            self.d_enc
        }
    }

    pub fn dit_config(&self, caption_vocab: usize) -> DitConfig {
        DitConfig {
            latent_len: self.max_len,
            latent_dim: self.latent_dim(),
            width: self.dit_width,
            blocks: self.dit_blocks,
            heads: self.dit_heads,
            caption_vocab,
            caption_len: self.caption_len,
            caption_layers: self.caption_layers,
            null_len: self.null_len,
        }
    }

    pub fn sampler_config(&self, guidance: f64, steps: usize, seed: u64) -> SamplerConfig {
        SamplerConfig {
            method: self.sampler.parse().expect("validated"),
            steps,
            guidance,
            seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_echo() {
        let cfg = RunConfig::parse("# toy\nseed = 7\nguidance = 3\ncompress = false\n\nsampler = ddpm  # full chain\n").unwrap();
        assert_eq!((cfg.seed, cfg.guidance, cfg.compress, cfg.sampler.as_str()), (7, 3.0, false, "ddpm"));
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(RunConfig::parse("nope = 1"), Err(ConfigError::UnknownKey(_))));
        assert!(matches!(RunConfig::parse("seed = -1"), Err(ConfigError::BadValue { .. })));
        assert!(matches!(RunConfig::parse("tau = abc"), Err(ConfigError::BadValue { .. })));
        assert!(matches!(RunConfig::parse("compress = 1"), Err(ConfigError::BadValue { .. })));
        assert!(matches!(RunConfig::parse("seed 3"), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(matches!(RunConfig::parse("d_z = 65\nd_enc = 64"), Err(ConfigError::Inconsistent(_))));
        assert!(matches!(RunConfig::parse("sample_steps = 3000"), Err(ConfigError::Inconsistent(_))));
        assert!(matches!(RunConfig::parse("dit_heads = 5"), Err(ConfigError::Inconsistent(_))));
        assert!(matches!(RunConfig::parse("sampler = euler"), Err(ConfigError::Inconsistent(_))));
        // no-compression may use any d_z
        assert!(RunConfig::parse("compress = false\nd_z = 128").is_ok());
    }

    #[test]
    fn architecture_comparison() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.seed = 1;
        b.guidance = 2.0;
        assert_eq!(a.architecture_mismatch(&b, ARCHITECTURE_KEYS), None);
        b.d_z = 8;
        assert_eq!(a.architecture_mismatch(&b, ARCHITECTURE_KEYS), Some(("d_z".into(), "4".into(), "8".into())));
    }
}
