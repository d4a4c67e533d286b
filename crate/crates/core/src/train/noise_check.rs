use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::batch::Batch;
use super::client::token_loss;
use super::noise::inject_noise;
use crate::error::{Error, Result};
use crate::model::{GradMode, SegmentInput, SegmentModel};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize)]
pub struct NoiseCheckReport {
    /// Parameter whose gradient is compared: the down projection of the
    /// first server block.
    pub param: String,
    pub delta: f64,
    pub draws: usize,
    pub clean_grad_norm: f64,
    /// `‖∂L/∂W_n(h_A + ε) − ∂L/∂W_n(h_A)‖` per draw.
    pub perturbations: Vec<f64>,
    pub mean_perturbation: f64,
}

/// Recomputes `∂L/∂W_n` through segments B and C with and without Gaussian
/// noise of standard deviation `delta` on `h_A`.
pub fn noise_gradient_check(
    a: &SegmentModel,
    b: &SegmentModel,
    c: &SegmentModel,
    batch: &Batch,
    delta: f64,
    draws: usize,
    seed: u64,
) -> Result<NoiseCheckReport> {
    if !(delta >= 0.0 && delta.is_finite()) || draws == 0 {
        return Err(Error::Config(format!(
            "noise check needs δ ≥ 0 and at least one draw, got δ={delta}, draws={draws}"
        )));
    }
    let param = format!("blocks.{}.mlp.down.weight", b.first_block());
    let positions = batch.positions();
    let h_a = a.forward(
        SegmentInput::Tokens {
            ids: &batch.tokens,
            batch: batch.batch,
        },
        &batch.meta,
        &positions,
        None,
    )?;
    let grad_wn = |h: &Tensor| -> Result<Tensor> {
        let (h_b, tape_b) = b.forward_train(SegmentInput::Hidden(h), &batch.meta, &positions)?;
        let (logits, tape_c) = c.forward_train(SegmentInput::Hidden(&h_b), &batch.meta, &positions)?;
        let (_, dlogits) = token_loss(&logits, &batch.targets)?;
        let back_c = c.backward(tape_c, &dlogits, GradMode::LoraOnly)?;
        let back_b = b.backward(tape_b, &back_c.input.expect("hidden input"), GradMode::Full)?;
        back_b
            .params
            .get(&param)
            .cloned()
            .ok_or_else(|| Error::Config(format!("segment B has no parameter {param}")))
    };
    let clean = grad_wn(&h_a)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perturbations = Vec::with_capacity(draws);
    for _ in 0..draws {
        let noisy = grad_wn(&inject_noise(&h_a, delta, &mut rng))?;
        perturbations.push(noisy.sub(&clean)?.norm());
    }
    let mean_perturbation = perturbations.iter().sum::<f64>() / draws as f64;
    Ok(NoiseCheckReport {
        param,
        delta,
        draws,
        clean_grad_norm: clean.norm(),
        perturbations,
        mean_perturbation,
    })
}
