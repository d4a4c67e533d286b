use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseTarget {
    #[default]
    None,
    /// Perturb `h_A` before it leaves the client.
    ForwardHA,
    /// Perturb `∇h_B` before it is returned to the server. Experimental.
    BackwardGradHB,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// Standard deviation δ of the zero-mean Gaussian.
    pub scale: f64,
    pub target: NoiseTarget,
    pub seed: u64,
    /// Also perturb `h_A` during generation and scoring.
    pub at_inference: bool,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            scale: 0.0,
            target: NoiseTarget::None,
            seed: 0,
            at_inference: false,
        }
    }
}

impl NoiseConfig {
    pub fn forward(scale: f64, seed: u64) -> Self {
        Self {
            scale,
            target: NoiseTarget::ForwardHA,
            seed,
            at_inference: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale >= 0.0 && self.scale.is_finite()) {
            return Err(Error::Config(format!(
                "noise scale must be finite and non-negative, got {}",
                self.scale
            )));
        }
        Ok(())
    }
}

/// `h + ε`, `ε ~ N(0, δ²)` i.i.d. A zero δ returns `h` unchanged without
/// drawing from `rng`.
pub fn inject_noise(h: &Tensor, delta: f64, rng: &mut ChaCha8Rng) -> Tensor {
    if delta == 0.0 {
        return h.clone();
    }
    let normal = Normal::new(0.0, delta).expect("validated scale");
    let data = h.data().iter().map(|v| v + normal.sample(rng)).collect();
    Tensor::new(h.shape().to_vec(), data).expect("same shape")
}

/// Seeded noise source owned by one client.
#[derive(Clone, Debug)]
pub struct NoiseInjector {
    pub config: NoiseConfig,
    rng: ChaCha8Rng,
}

impl NoiseInjector {
    pub fn new(config: NoiseConfig, client_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(client_id);
        Self { config, rng }
    }

    pub fn off() -> Self {
        Self::new(NoiseConfig::default(), 0)
    }

    fn apply_if(&mut self, h: Tensor, target: NoiseTarget) -> Tensor {
        if self.config.target == target && self.config.scale > 0.0 {
            inject_noise(&h, self.config.scale, &mut self.rng)
        } else {
            h
        }
    }

    pub fn forward(&mut self, h: Tensor) -> Tensor {
        self.apply_if(h, NoiseTarget::ForwardHA)
    }

    pub fn inference(&mut self, h: Tensor) -> Tensor {
        if self.config.at_inference {
            self.apply_if(h, NoiseTarget::ForwardHA)
        } else {
            h
        }
    }

    pub fn backward(&mut self, g: Tensor) -> Tensor {
        self.apply_if(g, NoiseTarget::BackwardGradHB)
    }
}
