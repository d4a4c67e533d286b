use super::Tensor;
use crate::error::{Error, Result};

fn check(x: &Tensor, weight: &Tensor, eps: f64) -> Result<usize> {
    let d = x.last_dim();
    if weight.shape() != [d] {
        return Err(Error::shape(format!(
            "rms_norm weight {:?} vs last dim {d}",
            weight.shape()
        )));
    }
    if eps <= 0.0 {
        return Err(Error::shape("rms_norm eps must be positive"));
    }
    Ok(d)
}

fn inv_rms(row: &[f64], eps: f64) -> f64 {
    let mean_sq = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
    1.0 / (mean_sq + eps).sqrt()
}

/// `out_i = w_i · x_i / sqrt(mean_j x_j² + eps)` along the last axis.
pub fn rms_norm(x: &Tensor, weight: &Tensor, eps: f64) -> Result<Tensor> {
    let d = check(x, weight, eps)?;
    let w = weight.data();
    let mut out = vec![0.0; x.numel()];
    for (row, dst) in x.data().chunks(d).zip(out.chunks_mut(d)) {
        let r = inv_rms(row, eps);
        for i in 0..d {
            dst[i] = w[i] * row[i] * r;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Returns `(dx, dweight)`.
pub fn rms_norm_backward(
    x: &Tensor,
    weight: &Tensor,
    eps: f64,
    dy: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let d = check(x, weight, eps)?;
    if dy.shape() != x.shape() {
        return Err(Error::shape("rms_norm backward: dy shape"));
    }
    let w = weight.data();
    let mut dx = vec![0.0; x.numel()];
    let mut dw = vec![0.0; d];
    for ((row, g), dst) in x.data().chunks(d).zip(dy.data().chunks(d)).zip(dx.chunks_mut(d)) {
        let r = inv_rms(row, eps);
        // d/dx_k of w_i x_i r = w_i r δ_ik − w_i x_i r³ x_k / d
        let dot: f64 = (0..d).map(|i| g[i] * w[i] * row[i]).sum();
        let coef = dot * r * r * r / d as f64;
        for k in 0..d {
            dst[k] = g[k] * w[k] * r - coef * row[k];
            dw[k] += g[k] * row[k] * r;
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(vec![d], dw)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ones_map_to_weight() {
        let x = Tensor::full(&[4], 1.0);
        let w = Tensor::new(vec![4], vec![0.5, -1.0, 2.0, 3.0]).unwrap();
        let y = rms_norm(&x, &w, 1e-12).unwrap();
        assert!(y.max_abs_diff(&w) < 1e-10);
    }

    #[test]
    fn zero_vector_stays_finite() {
        let x = Tensor::zeros(&[2, 3]);
        let w = Tensor::full(&[3], 1.0);
        let y = rms_norm(&x, &w, 1e-6).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0));
        let (dx, _) = rms_norm_backward(&x, &w, 1e-6, &Tensor::full(&[2, 3], 1.0)).unwrap();
        assert!(dx.is_finite());
    }

    #[test]
    fn weight_length_must_match() {
        let x = Tensor::zeros(&[2, 3]);
        let w = Tensor::full(&[4], 1.0);
        assert!(rms_norm(&x, &w, 1e-6).is_err());
    }
}
