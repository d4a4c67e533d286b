use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor, Transpose};

/// Low-rank adapter on a frozen linear map: `Δ = scaling · B·A`.
#[derive(Clone, Debug, PartialEq)]
pub struct Lora {
    /// `[r, in]`
    pub a: Tensor,
    /// `[out, r]`, zero at initialization.
    pub b: Tensor,
    pub scaling: f64,
}

impl Lora {
    pub fn init<R: Rng + ?Sized>(
        d_in: usize,
        d_out: usize,
        rank: usize,
        scaling: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            a: Tensor::uniform(&[rank, d_in], 1.0 / (d_in as f64).sqrt(), rng),
            b: Tensor::zeros(&[d_out, rank]),
            scaling,
        }
    }

    pub fn rank(&self) -> usize {
        self.a.dim(0)
    }
}

/// `y = x·Wᵀ (+ scaling·(x·Aᵀ)·Bᵀ)` with `W: [out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub lora: Option<Lora>,
}

/// Gradients of one [`Linear`]; `weight` is filled only when requested.
#[derive(Clone, Debug, Default)]
pub struct LinearGrads {
    pub weight: Option<Tensor>,
    pub lora_a: Option<Tensor>,
    pub lora_b: Option<Tensor>,
}

impl Linear {
    pub fn init<R: Rng + ?Sized>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Self {
            weight: Tensor::randn(&[d_out, d_in], 1.0 / (d_in as f64).sqrt(), rng),
            lora: None,
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.dim(1)
    }

    pub fn d_out(&self) -> usize {
        self.weight.dim(0)
    }

    fn check_input(&self, x: &[f64]) -> Result<usize> {
        let d_in = self.d_in();
        if !x.len().is_multiple_of(d_in) {
            return Err(Error::shape(format!(
                "linear expects rows of {d_in}, got {} scalars",
                x.len()
            )));
        }
        Ok(x.len() / d_in)
    }

    /// Returns `(y [rows, out], x·Aᵀ [rows, r])`; the second is empty
    /// without an adapter.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let rows = self.check_input(x)?;
        let (d_in, d_out) = (self.d_in(), self.d_out());
        let mut y = vec![0.0; rows * d_out];
        gemm(rows, d_in, d_out, x, Transpose::No, self.weight.data(), Transpose::Yes, &mut y, false);
        let mut xa = Vec::new();
        if let Some(l) = &self.lora {
            let r = l.rank();
            xa = vec![0.0; rows * r];
            gemm(rows, d_in, r, x, Transpose::No, l.a.data(), Transpose::Yes, &mut xa, false);
            let mut delta = vec![0.0; rows * d_out];
            gemm(rows, r, d_out, &xa, Transpose::No, l.b.data(), Transpose::Yes, &mut delta, false);
            for (o, d) in y.iter_mut().zip(&delta) {
                *o += l.scaling * d;
            }
        }
        Ok((y, xa))
    }

    /// Returns `dx` and the parameter gradients. `want_weight` also
    /// produces `dW`.
    pub fn backward(
        &self,
        x: &[f64],
        xa: &[f64],
        dy: &[f64],
        want_weight: bool,
    ) -> Result<(Vec<f64>, LinearGrads)> {
        let rows = self.check_input(x)?;
        let (d_in, d_out) = (self.d_in(), self.d_out());
        if dy.len() != rows * d_out {
            return Err(Error::shape("linear backward: upstream gradient shape"));
        }
        let mut dx = vec![0.0; rows * d_in];
        gemm(rows, d_out, d_in, dy, Transpose::No, self.weight.data(), Transpose::No, &mut dx, false);
        let mut grads = LinearGrads::default();
        if want_weight {
            let mut dw = vec![0.0; d_out * d_in];
            gemm(d_out, rows, d_in, dy, Transpose::Yes, x, Transpose::No, &mut dw, false);
            grads.weight = Some(Tensor::new(vec![d_out, d_in], dw)?);
        }
        if let Some(l) = &self.lora {
            let r = l.rank();
            if xa.len() != rows * r {
                return Err(Error::shape("linear backward: missing adapter activations"));
            }
            // dyB = dy·B  [rows, r]
            let mut dyb = vec![0.0; rows * r];
            gemm(rows, d_out, r, dy, Transpose::No, l.b.data(), Transpose::No, &mut dyb, false);
            dyb.iter_mut().for_each(|v| *v *= l.scaling);
            gemm(rows, r, d_in, &dyb, Transpose::No, l.a.data(), Transpose::No, &mut dx, true);
            let mut da = vec![0.0; r * d_in];
            gemm(r, rows, d_in, &dyb, Transpose::Yes, x, Transpose::No, &mut da, false);
            let mut db = vec![0.0; d_out * r];
            gemm(d_out, rows, r, dy, Transpose::Yes, xa, Transpose::No, &mut db, false);
            db.iter_mut().for_each(|v| *v *= l.scaling);
            grads.lora_a = Some(Tensor::new(vec![r, d_in], da)?);
            grads.lora_b = Some(Tensor::new(vec![d_out, r], db)?);
        }
        Ok((dx, grads))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_b_adapter_leaves_output_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut lin = Linear::init(6, 5, &mut rng);
        let x: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let (plain, _) = lin.forward(&x).unwrap();
        lin.lora = Some(Lora::init(6, 5, 2, 2.0, &mut rng));
        let (adapted, _) = lin.forward(&x).unwrap();
        assert_eq!(plain, adapted);
    }

    #[test]
    fn scalar_adapter_by_hand() {
        // W = 2, A = 3, B = 5, scaling 0.5, x = 1: y = 2 + 0.5·15 = 9.5
        let lin = Linear {
            weight: Tensor::new(vec![1, 1], vec![2.0]).unwrap(),
            lora: Some(Lora {
                a: Tensor::new(vec![1, 1], vec![3.0]).unwrap(),
                b: Tensor::new(vec![1, 1], vec![5.0]).unwrap(),
                scaling: 0.5,
            }),
        };
        let (y, xa) = lin.forward(&[1.0]).unwrap();
        assert_eq!(y, vec![9.5]);
        let (dx, g) = lin.backward(&[1.0], &xa, &[1.0], true).unwrap();
        assert_eq!(dx, vec![2.0 + 7.5]);
        assert_eq!(g.weight.unwrap().data(), &[1.0]);
        assert_eq!(g.lora_a.unwrap().data(), &[2.5]);
        assert_eq!(g.lora_b.unwrap().data(), &[1.5]);
    }
}
