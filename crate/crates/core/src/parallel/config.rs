use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::train::{ServeMode, DEFAULT_BARRIER_TIMEOUT};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyMode {
    #[default]
    Sequential,
    ClientBatch,
    ServerHierarchical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrategyConfig {
    pub mode: StrategyMode,
    pub clients: usize,
    /// Steps between merges in hierarchical mode.
    pub sync_interval: usize,
    /// Per-client aggregation weights; uniform when absent.
    pub weights: Option<Vec<f64>>,
    /// Also average client-side adapters at each merge.
    pub merge_clients: bool,
    pub barrier_timeout_ms: u64,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            mode: StrategyMode::Sequential,
            clients: 1,
            sync_interval: 10,
            weights: None,
            merge_clients: false,
            barrier_timeout_ms: DEFAULT_BARRIER_TIMEOUT.as_millis() as u64,
        }
    }
}

impl StrategyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(Error::Config("strategy needs at least one client".into()));
        }
        if self.sync_interval == 0 {
            return Err(Error::Config("sync_interval must be at least 1".into()));
        }
        if let Some(w) = &self.weights {
            if w.len() != self.clients {
                return Err(Error::Config(format!(
                    "{} aggregation weights for {} clients",
                    w.len(),
                    self.clients
                )));
            }
            if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
                return Err(Error::Config("aggregation weights must be non-negative with a positive sum".into()));
            }
        }
        if self.barrier_timeout_ms == 0 {
            return Err(Error::Config("barrier timeout must be positive".into()));
        }
        Ok(())
    }

    pub fn weights(&self) -> Vec<f64> {
        self.weights.clone().unwrap_or_else(|| vec![1.0; self.clients])
    }

    pub fn barrier_timeout(&self) -> Duration {
        Duration::from_millis(self.barrier_timeout_ms)
    }

    /// Server loop mode for a single shared server.
    pub fn serve_mode(&self) -> ServeMode {
        match self.mode {
            StrategyMode::ClientBatch => ServeMode::ClientBatch {
                clients: self.clients,
                timeout: self.barrier_timeout(),
            },
            _ => ServeMode::PerRequest,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_configs() {
        let ok = StrategyConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            StrategyConfig { clients: 0, ..ok.clone() },
            StrategyConfig { sync_interval: 0, ..ok.clone() },
            StrategyConfig { weights: Some(vec![1.0, 1.0]), ..ok.clone() },
            StrategyConfig { weights: Some(vec![0.0]), ..ok.clone() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }
}
