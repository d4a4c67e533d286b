use super::segment::is_trainable;
use super::SegmentModel;
use crate::error::{Error, Result};

/// Weighted average of the adapters of architecturally identical models.
///
/// Each adapter entry becomes `Σ (wᵢ/W)·θᵢ` accumulated in input order; an
/// entry on which every input agrees bitwise keeps that value. Base
/// weights must be bitwise identical across inputs.
pub fn fedavg_merge(models: &[&SegmentModel], weights: &[f64]) -> Result<SegmentModel> {
    let first = *models
        .first()
        .ok_or_else(|| Error::Merge("no models to merge".into()))?;
    if weights.len() != models.len() {
        return Err(Error::Merge(format!(
            "{} weights for {} models",
            weights.len(),
            models.len()
        )));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::Merge("weights must be finite and non-negative".into()));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Merge("weights sum to zero".into()));
    }
    let norm: Vec<f64> = weights.iter().map(|w| w / total).collect();
    let all: Vec<Vec<(String, crate::tensor::Tensor)>> =
        models.iter().map(|m| m.named_params()).collect();
    let reference = &all[0];
    for (i, params) in all.iter().enumerate().skip(1) {
        if models[i].role != first.role
            || params.len() != reference.len()
            || params
                .iter()
                .zip(reference)
                .any(|((n, t), (rn, rt))| n != rn || t.shape() != rt.shape())
        {
            return Err(Error::Merge(format!("model {i} differs in architecture")));
        }
        for ((name, t), (_, rt)) in params.iter().zip(reference) {
            if !is_trainable(name) && t.data() != rt.data() {
                return Err(Error::Consistency(name.clone()));
            }
        }
    }
    let mut merged = first.clone();
    let mut updates = Vec::new();
    for (idx, (name, rt)) in reference.iter().enumerate() {
        if !is_trainable(name) {
            continue;
        }
        let mut out = vec![0.0; rt.numel()];
        for (j, o) in out.iter_mut().enumerate() {
            let v0 = rt.data()[j];
            if all.iter().all(|p| p[idx].1.data()[j].to_bits() == v0.to_bits()) {
                *o = v0;
                continue;
            }
            let mut acc = 0.0;
            for (p, w) in all.iter().zip(&norm) {
                acc += w * p[idx].1.data()[j];
            }
            *o = acc;
        }
        updates.push((name.clone(), crate::tensor::Tensor::new(rt.shape().to_vec(), out)?));
    }
    merged.set_params(updates.iter().map(|(n, t)| (n, t)))?;
    Ok(merged)
}
