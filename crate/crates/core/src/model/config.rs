use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub num_blocks: usize,
    pub mlp_hidden: usize,
    pub max_context: usize,
    pub rms_eps: f64,
    pub rope_base: f64,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    /// Standard deviation of the token-embedding initialization.
    pub embed_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            hidden_size: 64,
            num_heads: 4,
            num_blocks: 6,
            mlp_hidden: 172,
            max_context: 128,
            rms_eps: 1e-6,
            rope_base: 10000.0,
            lora_rank: 8,
            lora_alpha: 16.0,
            embed_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("hidden_size", self.hidden_size),
            ("num_heads", self.num_heads),
            ("mlp_hidden", self.mlp_hidden),
            ("max_context", self.max_context),
            ("lora_rank", self.lora_rank),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be positive")));
        }
        if self.num_blocks < 3 {
            return Err(Error::Config("model.num_blocks must be at least 3".into()));
        }
        if !self.hidden_size.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "hidden_size {} not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            )));
        }
        if !self.head_dim().is_multiple_of(2) {
            return Err(Error::Config("rotary head dim must be even".into()));
        }
        if !(self.rms_eps > 0.0) || !(self.rope_base > 0.0) || !(self.embed_std >= 0.0) {
            return Err(Error::Config(
                "rms_eps and rope_base must be positive, embed_std non-negative".into(),
            ));
        }
        if !self.lora_alpha.is_finite() {
            return Err(Error::Config("lora_alpha must be finite".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }

    pub fn lora_scaling(&self) -> f64 {
        self.lora_alpha / self.lora_rank as f64
    }
}

/// Block counts of the client-input, server and client-output segments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    pub p: usize,
    pub k: usize,
    pub q: usize,
}

impl PartitionSpec {
    pub fn new(p: usize, k: usize, q: usize) -> Self {
        Self { p, k, q }
    }

    /// Client keeps only the embedding; used to model an unprotected split.
    pub fn embedding_only(num_blocks: usize) -> Self {
        Self {
            p: 0,
            k: num_blocks - 1,
            q: 1,
        }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        self.check(config, 1)
    }

    pub(crate) fn check(&self, config: &ModelConfig, min_p: usize) -> Result<()> {
        if self.p < min_p || self.k < 1 || self.q < 1 {
            return Err(Error::Partition(format!(
                "({}, {}, {}): every segment needs at least one block",
                self.p, self.k, self.q
            )));
        }
        if self.p + self.k + self.q != config.num_blocks {
            return Err(Error::Partition(format!(
                "({}, {}, {}) sums to {}, model has {} blocks",
                self.p,
                self.k,
                self.q,
                self.p + self.k + self.q,
                config.num_blocks
            )));
        }
        Ok(())
    }

    /// Every valid partition of an `n`-block model.
    pub fn all(n: usize) -> Vec<PartitionSpec> {
        let mut out = Vec::new();
        for p in 1..n {
            for q in 1..n {
                if p + q < n {
                    out.push(PartitionSpec::new(p, n - p - q, q));
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n: usize) -> ModelConfig {
        ModelConfig {
            num_blocks: n,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn sum_must_match_block_count() {
        assert!(PartitionSpec::new(1, 2, 1).validate(&cfg(4)).is_ok());
        assert!(matches!(
            PartitionSpec::new(2, 2, 1).validate(&cfg(4)),
            Err(Error::Partition(_))
        ));
        assert!(PartitionSpec::new(0, 3, 1).validate(&cfg(4)).is_err());
    }

    #[test]
    fn six_blocks_have_ten_partitions() {
        let all = PartitionSpec::all(6);
        assert_eq!(all.len(), 10);
        assert!(all.iter().all(|s| s.validate(&cfg(6)).is_ok()));
    }

    #[test]
    fn heads_must_divide_hidden() {
        let c = ModelConfig {
            num_heads: 5,
            ..ModelConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}
