use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::corpus::{CorpusConfig, EOS};
use crate::attack::AttackConfig;
use crate::error::{Error, Result};
use crate::inference::GenerationConfig;
use crate::model::{ModelConfig, PartitionSpec};
use crate::parallel::StrategyConfig;
use crate::train::{NoiseConfig, TransportKind};
use crate::wire::ScalarWidth;

pub const SCHEMA_VERSION: u32 = 1;
pub const ENV_ADDR: &str = "FEDSPLIT_ADDR";
pub const ENV_OUTPUT_DIR: &str = "FEDSPLIT_OUTPUT_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub compress_mask: bool,
    pub width: ScalarWidth,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            lr: 0.3,
            batch_size: 8,
            compress_mask: true,
            width: ScalarWidth::F64,
        }
    }
}

/// Optional pass/fail thresholds; a miss gives exit code 4.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Checks {
    /// Final-epoch mean loss over first-step loss must stay below this.
    pub max_loss_ratio: Option<f64>,
    /// Cached and uncached generations must agree.
    pub cache_identity: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub transport: TransportKind,
    pub addr: String,
    /// JSON corpus file; generated from `corpus` when absent.
    pub dataset: Option<PathBuf>,
    /// Seed of the held-out corpus used by the honest client and by eval.
    pub heldout_seed: u64,
    pub model: ModelConfig,
    pub partition: PartitionSpec,
    pub noise: NoiseConfig,
    pub strategy: StrategyConfig,
    pub generation: GenerationConfig,
    pub train: TrainConfig,
    pub corpus: CorpusConfig,
    pub attack: AttackConfig,
    pub checks: Checks,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            transport: TransportKind::Loopback,
            addr: "127.0.0.1:0".into(),
            dataset: None,
            heldout_seed: 1007,
            model: ModelConfig::default(),
            partition: PartitionSpec::new(1, 4, 1),
            noise: NoiseConfig::forward(0.02, 0),
            strategy: StrategyConfig::default(),
            generation: GenerationConfig {
                stop_token: Some(EOS),
                ..GenerationConfig::default()
            },
            train: TrainConfig::default(),
            corpus: CorpusConfig::default(),
            attack: AttackConfig::default(),
            checks: Checks::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Apply `FEDSPLIT_ADDR` and `FEDSPLIT_OUTPUT_DIR` from `lookup`.
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) {
        if let Some(addr) = lookup(ENV_ADDR) {
            self.addr = addr;
        }
        if let Some(dir) = lookup(ENV_OUTPUT_DIR) {
            self.output_dir = PathBuf::from(dir);
        }
    }

    /// Every cross-field problem, checked before any compute.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut push = |r: Result<()>| {
            if let Err(e) = r {
                out.push(e.to_string());
            }
        };
        if self.schema_version != SCHEMA_VERSION {
            push(Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            ))));
        }
        push(self.model.validate());
        if self.model.validate().is_ok() {
            if self.partition.p == 0 {
                if self.partition != PartitionSpec::embedding_only(self.model.num_blocks) {
                    push(Err(Error::Partition(format!(
                        "a client without blocks needs the split (0, {}, 1)",
                        self.model.num_blocks - 1
                    ))));
                }
            } else {
                push(self.partition.validate(&self.model));
            }
        }
        push(self.noise.validate());
        push(self.strategy.validate());
        push(self.generation.validate());
        if self.train.steps == 0 || self.train.batch_size == 0 {
            push(Err(Error::Config("train.steps and train.batch_size must be positive".into())));
        }
        if !(self.train.lr.is_finite() && self.train.lr >= 0.0) {
            push(Err(Error::Config(format!("train.lr must be finite and non-negative, got {}", self.train.lr))));
        }
        if self.dataset.is_none() && content_end(&self.corpus) > self.model.vocab_size {
            push(Err(Error::Config(format!(
                "corpus alphabet {} does not fit vocab {}",
                self.corpus.alphabet, self.model.vocab_size
            ))));
        }
        if self.corpus.max_len * 2 + 2 > self.model.max_context {
            push(Err(Error::Config(format!(
                "corpus sequences of up to {} tokens exceed max_context {}",
                self.corpus.max_len * 2 + 2,
                self.model.max_context
            ))));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

fn content_end(c: &CorpusConfig) -> usize {
    super::corpus::FIRST_CONTENT as usize + c.alphabet
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_roundtrips_through_toml() {
        let cfg = ExperimentConfig::default();
        assert!(cfg.validate().is_ok());
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = ExperimentConfig::from_toml("seed = 4\n[partition]\np = 2\nk = 3\nq = 1\n").unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.partition, PartitionSpec::new(2, 3, 1));
        assert_eq!(cfg.model, ModelConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_toml("sed = 4\n").is_err());
    }

    #[test]
    fn all_problems_are_listed() {
        let mut cfg = ExperimentConfig::default();
        cfg.partition = PartitionSpec::new(3, 3, 3);
        cfg.strategy.clients = 0;
        cfg.noise.scale = -1.0;
        assert_eq!(cfg.problems().len(), 3, "{:?}", cfg.problems());
    }

    #[test]
    fn env_overrides_address_and_output() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_env(|k| match k {
            ENV_ADDR => Some("127.0.0.1:9000".into()),
            ENV_OUTPUT_DIR => Some("/tmp/x".into()),
            _ => None,
        });
        assert_eq!(cfg.addr, "127.0.0.1:9000");
        assert_eq!(cfg.output_dir, PathBuf::from("/tmp/x"));
    }
}
