//! Flat key=value run configuration with `[section]` headers. Flags
//! override file values, file values override the built-in defaults.

use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config line {line}: expected key=value, got {text:?}")]
    Malformed { line: usize, text: String },
    #[error("config line {line}: unknown key {section}.{key}")]
    UnknownKey {
        line: usize,
        section: String,
        key: String,
    },
    #[error("config line {line}: bad value for {key}: {value:?}")]
    BadValue {
        line: usize,
        key: String,
        value: String,
    },
}

/// Every tunable of the command-line front end, with documented defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // [data]
    pub data_n: usize,
    pub data_seed: u64,
    pub data_max_tokens: usize,
    // [vae]
    pub vae_beta: f64,
    pub vae_epochs: usize,
    pub vae_lr: f64,
    pub vae_batch: usize,
    pub vae_latent_dim: usize,
    pub vae_hidden: usize,
    // [scores]
    pub scores_n_per_group: usize,
    pub scores_ood_std: f64,
    // [lso]
    pub lso_method: String,
    pub lso_lambda: f64,
    pub lso_eta: f64,
    pub lso_seeds: usize,
    pub lso_init_n: usize,
    pub lso_budget: usize,
    pub lso_batch: usize,
    // [paths]
    pub path_dataset: PathBuf,
    pub path_checkpoint: PathBuf,
    pub path_out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data_n: 20_000,
            data_seed: 1,
            data_max_tokens: 16,
            vae_beta: 0.1,
            vae_epochs: 100,
            vae_lr: 1e-3,
            vae_batch: 256,
            vae_latent_dim: 16,
            vae_hidden: 256,
            scores_n_per_group: 500,
            scores_ood_std: 5.0,
            lso_method: "les".into(),
            lso_lambda: 0.05,
            lso_eta: 0.8,
            lso_seeds: 5,
            lso_init_n: 500,
            lso_budget: 500,
            lso_batch: 20,
            path_dataset: "data.txt".into(),
            path_checkpoint: "model.ckpt".into(),
            path_out_dir: "out".into(),
        }
    }
}

impl RunConfig {
    /// Loads and applies a config file on top of the defaults. Unknown
    /// keys are rejected.
    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        let mut section = String::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            if trimmed.starts_with('[') && trimmed.ends_with(']') {
                section = trimmed[1..trimmed.len() - 1].trim().to_string();
                continue;
            }
            let Some((key, value)) = trimmed.split_once('=') else {
                return Err(ConfigError::Malformed {
                    line,
                    text: trimmed.to_string(),
                });
            };
            let key = key.trim();
            let value = value.trim();
            self.apply_kv(&section, key, value, line)?;
        }
        Ok(())
    }

    fn apply_kv(
        &mut self,
        section: &str,
        key: &str,
        value: &str,
        line: usize,
    ) -> Result<(), ConfigError> {
        macro_rules! parse {
            ($ty:ty) => {
                value
                    .parse::<$ty>()
                    .map_err(|_| ConfigError::BadValue {
                        line,
                        key: format!("{section}.{key}"),
                        value: value.to_string(),
                    })?
            };
        }
        match (section, key) {
            ("data", "n") => self.data_n = parse!(usize),
            ("data", "seed") => self.data_seed = parse!(u64),
            ("data", "max_tokens") => self.data_max_tokens = parse!(usize),
            ("vae", "beta") => self.vae_beta = parse!(f64),
            ("vae", "epochs") => self.vae_epochs = parse!(usize),
            ("vae", "lr") => self.vae_lr = parse!(f64),
            ("vae", "batch") => self.vae_batch = parse!(usize),
            ("vae", "latent_dim") => self.vae_latent_dim = parse!(usize),
            ("vae", "hidden") => self.vae_hidden = parse!(usize),
            ("scores", "n_per_group") => self.scores_n_per_group = parse!(usize),
            ("scores", "ood_std") => self.scores_ood_std = parse!(f64),
            ("lso", "method") => self.lso_method = value.to_string(),
            ("lso", "lambda") => self.lso_lambda = parse!(f64),
            ("lso", "eta") => self.lso_eta = parse!(f64),
            ("lso", "seeds") => self.lso_seeds = parse!(usize),
            ("lso", "init_n") => self.lso_init_n = parse!(usize),
            ("lso", "budget") => self.lso_budget = parse!(usize),
            ("lso", "batch") => self.lso_batch = parse!(usize),
            ("paths", "dataset") => self.path_dataset = value.into(),
            ("paths", "checkpoint") => self.path_checkpoint = value.into(),
            ("paths", "out_dir") => self.path_out_dir = value.into(),
            _ => {
                return Err(ConfigError::UnknownKey {
                    line,
                    section: section.to_string(),
                    key: key.to_string(),
                })
            }
        }
        Ok(())
    }
}
