//! Run configuration, read from TOML.

use std::fs;
use std::path::{Path, PathBuf};

use loggraph_core::embed::{Provider, DEFAULT_DIM};
use loggraph_core::model::ModelConfig;
use loggraph_core::parse::{DrainParams, HeaderPattern, HDFS_HEADER};
use loggraph_core::synth::BLOCK_ID_PATTERN;
use loggraph_core::train::TrainConfig;
use loggraph_core::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    #[default]
    Session,
    Fixed,
    Sliding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub logs: PathBuf,
    /// One 0/1 label per raw log line. Without it every line is normal.
    pub labels: Option<PathBuf>,
    pub header_pattern: String,
    /// Regex whose first match in a raw line is the session key.
    pub session_pattern: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            logs: PathBuf::from("logs.txt"),
            labels: None,
            header_pattern: HDFS_HEADER.to_string(),
            session_pattern: BLOCK_ID_PATTERN.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    pub strategy: Strategy,
    pub size: usize,
    pub step: usize,
    /// Leading share of sequences used for training; the rest is the test set.
    pub train_fraction: f64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Session,
            size: 20,
            step: 1,
            train_fraction: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub provider: Provider,
    pub dim: usize,
    /// Vector file for the `file` provider.
    pub path: Option<PathBuf>,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            provider: Provider::Hashed,
            dim: DEFAULT_DIM,
            path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; model initialisation and training seeds derive from it.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub precision: Precision,
    pub data: DataConfig,
    pub parse: DrainParams,
    pub window: WindowConfig,
    pub embedding: EmbeddingConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("run"),
            precision: Precision::F32,
            data: DataConfig::default(),
            parse: DrainParams::default(),
            window: WindowConfig::default(),
            embedding: EmbeddingConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let location = e
                .span()
                .map(|s| {
                    let line = text[..s.start].matches('\n').count() + 1;
                    format!("line {line}")
                })
                .unwrap_or_else(|| "unknown location".into());
            Error::format(origin, location, e.message())
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Derives the per-component seeds from the root seed. Derived seeds
    /// are kept below 2^63 so they fit TOML integers.
    pub fn resolve(mut self) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        self.model.init_seed = rng.gen::<u64>() >> 1;
        self.train.seed = rng.gen::<u64>() >> 1;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.seed > i64::MAX as u64 {
            return Err(Error::Config(format!("seed must be at most {}", i64::MAX)));
        }
        self.parse.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        HeaderPattern::new(&self.data.header_pattern)?;
        Regex::new(&self.data.session_pattern).map_err(|e| Error::Config(format!("invalid session pattern: {e}")))?;
        let w = &self.window;
        if w.size == 0 || w.step == 0 {
            return Err(Error::Config("window size and step must be >= 1".into()));
        }
        if !(w.train_fraction > 0.0 && w.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "window.train_fraction must lie in (0, 1), got {}",
                w.train_fraction
            )));
        }
        if self.embedding.dim != self.model.d_v {
            return Err(Error::Config(format!(
                "embedding.dim = {} but model.d_v = {}",
                self.embedding.dim, self.model.d_v
            )));
        }
        if self.embedding.provider == Provider::File && self.embedding.path.is_none() {
            return Err(Error::Config("embedding provider `file` needs embedding.path".into()));
        }
        Ok(())
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.output_dir.join(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default().resolve();
        cfg.validate().unwrap();
        let back = RunConfig::from_toml(&cfg.to_toml(), Path::new("x.toml")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = RunConfig::from_toml(
            "seed = 3\n[window]\nstrategy = \"fixed\"\n[model]\nuse_degree = false\n",
            Path::new("x.toml"),
        )
        .unwrap();
        assert_eq!(cfg.window.strategy, Strategy::Fixed);
        assert_eq!(cfg.window.size, 20);
        assert!(!cfg.model.use_degree);
        assert_eq!(cfg.train.batch_size, 64);
    }

    #[test]
    fn unknown_keys_are_rejected_with_location() {
        let err = RunConfig::from_toml("seed = 1\n[model]\nheadz = 3\n", Path::new("bad.toml")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bad.toml") && msg.contains("line 3"), "{msg}");
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let mut cfg = RunConfig::default();
        cfg.embedding.dim = 32;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn seeds_derive_from_root() {
        let a = RunConfig {
            seed: 5,
            ..RunConfig::default()
        }
        .resolve();
        let b = RunConfig {
            seed: 5,
            ..RunConfig::default()
        }
        .resolve();
        let c = RunConfig {
            seed: 6,
            ..RunConfig::default()
        }
        .resolve();
        assert_eq!((a.model.init_seed, a.train.seed), (b.model.init_seed, b.train.seed));
        assert_ne!(a.model.init_seed, c.model.init_seed);
    }
}
