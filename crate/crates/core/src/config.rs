//! Run configuration: presets, the key = value config file format, and
//! checkpoint serialization.
//!
//! Config files are plain text, one `key = value` per line, `#` comments.
//! Keys mirror the field paths documented in the README (e.g.
//! `model.k_points = 11`). The environment variable `TSRLAB_SEED`
//! overrides the seed.

use crate::losses::LossConfig;
use crate::matching::MatchingMode;
use crate::model::{ModelConfig, ModelError, TsrModel};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;
use tsrlab_nn::Tensor;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{0}")]
    Model(#[from] ModelError),
    #[error("unknown preset '{0}' (expected paper, desk or light)")]
    UnknownPreset(String),
    #[error("config line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSchedule {
    /// Epochs for the three stages (reference / + lines / + merging).
    pub stage_epochs: [usize; 3],
    pub batch_size: usize,
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    /// Shorter-side choices for multi-scale training.
    pub train_scales: Vec<usize>,
    /// Longer side at test time.
    pub test_longer_side: usize,
    /// OHEM cap per polarity.
    pub ohem_cap: usize,
    /// Global gradient-norm clip (0 disables).
    pub clip_norm: f64,
    /// Linear learning-rate warmup steps at the start of each stage.
    pub warmup_steps: usize,
}

impl TrainSchedule {
    pub fn paper() -> Self {
        Self {
            stage_epochs: [20, 20, 20],
            batch_size: 16,
            lr: 1e-4,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 5e-4,
            poly_power: 0.9,
            train_scales: vec![416, 512, 608, 704, 800],
            test_longer_side: 1024,
            ohem_cap: 64,
            clip_norm: 4.0,
            warmup_steps: 25,
        }
    }

    pub fn desk() -> Self {
        Self {
            stage_epochs: [20, 50, 20],
            batch_size: 4,
            lr: 4e-4,
            train_scales: vec![128, 160, 192, 224, 256],
            test_longer_side: 320,
            ..Self::paper()
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenConfig {
    pub k_points: usize,
    /// WTW-style fixed separator band width, when set.
    pub fixed_separator_width: Option<f64>,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self { k_points: 15, fixed_separator_width: None }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: String,
    pub seed: u64,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub schedule: TrainSchedule,
    pub gen: GenConfig,
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self, ConfigError> {
        let (model, schedule) = match name {
            "paper" => (ModelConfig::paper(), TrainSchedule::paper()),
            "desk" => (ModelConfig::desk(), TrainSchedule::desk()),
            "light" => (ModelConfig::light(), TrainSchedule::desk()),
            other => return Err(ConfigError::UnknownPreset(other.to_string())),
        };
        let cfg = Self {
            preset: name.to_string(),
            seed: 0,
            model,
            loss: LossConfig::default(),
            schedule,
            gen: GenConfig::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Growth consistency is checked at load time so a bad (K, L) pair
    /// fails before any training starts.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.check_growth()?;
        Ok(())
    }

    pub fn apply_env(&mut self) {
        if let Ok(s) = std::env::var("TSRLAB_SEED") {
            if let Ok(v) = s.parse::<u64>() {
                self.seed = v;
            }
        }
    }

    /// Apply `key = value` overrides from a config file.
    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        self.apply_text(&text)?;
        self.validate()
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Parse {
                    line: ln + 1,
                    message: format!("expected key = value, got '{raw}'"),
                });
            };
            self.set_key(key.trim(), value.trim()).map_err(|message| ConfigError::Parse {
                line: ln + 1,
                message,
            })?;
        }
        Ok(())
    }

    fn set_key(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn p<T: std::str::FromStr>(v: &str) -> Result<T, String>
        where
            T::Err: std::fmt::Display,
        {
            v.parse::<T>().map_err(|e| format!("bad value '{v}': {e}"))
        }
        match key {
            "seed" => self.seed = p(value)?,
            "model.k_points" => self.model.k_points = p(value)?,
            "model.layers" => self.model.layers = p(value)?,
            "model.dim" => self.model.dim = p(value)?,
            "model.heads" => self.model.heads = p(value)?,
            "model.ffn_dim" => self.model.ffn_dim = p(value)?,
            "model.p2_channels" => self.model.p2_channels = p(value)?,
            "model.highres_channels" => self.model.highres_channels = p(value)?,
            "model.cell_dim" => self.model.cell_dim = p(value)?,
            "model.sampling_points" => self.model.sampling_points = p(value)?,
            "model.class_threshold" => self.model.class_threshold = p(value)?,
            "model.top_k" => self.model.top_k = p(value)?,
            "model.score_threshold" => self.model.score_threshold = p(value)?,
            "loss.lambda" => self.loss.lambda = p(value)?,
            "loss.reg_weight" => self.loss.reg_weight = p(value)?,
            "loss.cls_weight" => self.loss.cls_weight = p(value)?,
            "loss.matching" => {
                self.loss.matching = match value {
                    "prior_enhanced" => MatchingMode::PriorEnhanced,
                    "original_detr" => MatchingMode::OriginalDetr,
                    other => return Err(format!("unknown matching mode '{other}'")),
                }
            }
            "schedule.stage1_epochs" => self.schedule.stage_epochs[0] = p(value)?,
            "schedule.stage2_epochs" => self.schedule.stage_epochs[1] = p(value)?,
            "schedule.stage3_epochs" => self.schedule.stage_epochs[2] = p(value)?,
            "schedule.batch_size" => self.schedule.batch_size = p(value)?,
            "schedule.lr" => self.schedule.lr = p(value)?,
            "schedule.weight_decay" => self.schedule.weight_decay = p(value)?,
            "schedule.test_longer_side" => self.schedule.test_longer_side = p(value)?,
            "schedule.clip_norm" => self.schedule.clip_norm = p(value)?,
            "schedule.warmup_steps" => self.schedule.warmup_steps = p(value)?,
            "schedule.train_scales" => {
                self.schedule.train_scales = value
                    .split(',')
                    .map(|v| p::<usize>(v.trim()))
                    .collect::<Result<_, _>>()?;
            }
            "gen.k_points" => self.gen.k_points = p(value)?,
            "gen.fixed_separator_width" => {
                self.gen.fixed_separator_width = Some(p(value)?);
            }
            other => return Err(format!("unknown key '{other}'")),
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 8] = b"TSRLAB01";

/// Binary checkpoint: run config header (JSON) plus raw little-endian f64
/// parameter payloads, keyed by name. Loading restores bit-identical
/// parameters.
pub fn save_checkpoint(model: &TsrModel, run: &RunConfig, path: &Path) -> Result<(), ConfigError> {
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    let header = serde_json::to_vec(run).expect("config serializable");
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(model.store.len() as u64).to_le_bytes());
    for id in model.store.ids() {
        let name = model.store.name(id).as_bytes();
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name);
        let t = model.store.get(id);
        out.extend_from_slice(&(t.numel() as u64).to_le_bytes());
        for v in t.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        }
    }
    std::fs::write(path, out).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })
}

pub fn load_checkpoint(path: &Path) -> Result<(TsrModel, RunConfig), ConfigError> {
    let bad = |message: &str| ConfigError::Checkpoint {
        path: path.to_path_buf(),
        message: message.to_string(),
    };
    let data = std::fs::read(path)
        .map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
    let mut off = 0usize;
    let take = |off: &mut usize, n: usize| -> Result<&[u8], ConfigError> {
        if *off + n > data.len() {
            return Err(bad("truncated"));
        }
        let s = &data[*off..*off + n];
        *off += n;
        Ok(s)
    };
    if take(&mut off, 8)? != CKPT_MAGIC {
        return Err(bad("bad magic"));
    }
    let u64_at = |off: &mut usize| -> Result<u64, ConfigError> {
        Ok(u64::from_le_bytes(take(off, 8)?.try_into().unwrap()))
    };
    let hlen = u64_at(&mut off)? as usize;
    let run: RunConfig = serde_json::from_slice(take(&mut off, hlen)?)
        .map_err(|e| bad(&format!("config header: {e}")))?;
    let mut model = TsrModel::new(run.model, run.seed)?;
    let count = u64_at(&mut off)? as usize;
    if count != model.store.len() {
        return Err(bad(&format!(
            "parameter count {count} does not match the architecture ({})",
            model.store.len()
        )));
    }
    for id in model.store.ids().collect::<Vec<_>>() {
        let nlen = u64_at(&mut off)? as usize;
        let name = String::from_utf8(take(&mut off, nlen)?.to_vec())
            .map_err(|_| bad("bad parameter name"))?;
        if name != model.store.name(id) {
            return Err(bad(&format!("parameter order mismatch at '{name}'")));
        }
        let numel = u64_at(&mut off)? as usize;
        let expected = model.store.get(id).numel();
        if numel != expected {
            return Err(bad(&format!("'{name}': {numel} values, expected {expected}")));
        }
        let mut vals = Vec::with_capacity(numel);
        for _ in 0..numel {
            vals.push(f64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap()));
        }
        let shape = model.store.get(id).shape().to_vec();
        model.store.set(id, Tensor::new(&shape, vals));
    }
    Ok((model, run))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for name in ["paper", "desk", "light"] {
            let c = RunConfig::preset(name).unwrap();
            assert_eq!(c.preset, name);
        }
        assert!(RunConfig::preset("huge").is_err());
    }

    #[test]
    fn light_preset_matches_reduced_decoder() {
        let c = RunConfig::preset("light").unwrap();
        assert_eq!(c.model.k_points, 11);
        assert_eq!(c.model.dim, 128);
        assert_eq!(c.model.heads, 8);
        assert_eq!(c.model.ffn_dim, 512);
        assert_eq!(c.model.layers, 4);
    }

    #[test]
    fn config_file_overrides_and_growth_check() {
        let mut c = RunConfig::preset("desk").unwrap();
        c.apply_text("seed = 9\nmodel.k_points = 11\nmodel.layers = 4 # light growth\n").unwrap();
        assert_eq!(c.seed, 9);
        c.validate().unwrap();
        // inconsistent growth pair is rejected with (K, L) in the message
        let mut bad = RunConfig::preset("desk").unwrap();
        bad.apply_text("model.k_points = 12").unwrap();
        let err = bad.validate().unwrap_err().to_string();
        assert!(err.contains("K=12") && err.contains("L=5"), "{err}");
    }

    #[test]
    fn unknown_key_is_an_error() {
        let mut c = RunConfig::preset("desk").unwrap();
        assert!(c.apply_text("model.bogus = 3").is_err());
        assert!(c.apply_text("no equals sign").is_err());
    }
}
