use crate::error::{Error, Result};

/// Rotary position embedding tables (rotate-half pairing: element `i` pairs
/// with `i + head_dim/2`).
#[derive(Clone, Debug)]
pub struct Rope {
    head_dim: usize,
    max_context: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl Rope {
    pub fn new(head_dim: usize, max_context: usize, base: f64) -> Self {
        assert!(head_dim.is_multiple_of(2), "rotary head dim must be even");
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(max_context * half);
        let mut sin = Vec::with_capacity(max_context * half);
        for pos in 0..max_context {
            for i in 0..half {
                let inv_freq = base.powf(-((2 * i) as f64) / head_dim as f64);
                let angle = pos as f64 * inv_freq;
                cos.push(angle.cos());
                sin.push(angle.sin());
            }
        }
        Self {
            head_dim,
            max_context,
            cos,
            sin,
        }
    }

    pub fn max_context(&self) -> usize {
        self.max_context
    }

    pub fn check_positions(&self, positions: &[usize]) -> Result<()> {
        match positions.iter().find(|&&p| p >= self.max_context) {
            Some(&position) => Err(Error::ContextOverflow {
                position,
                max_context: self.max_context,
            }),
            None => Ok(()),
        }
    }

    /// Rotate `x` laid out as `[groups, s, head_dim]` in place. `inverse`
    /// applies the transpose rotation, which is also the backward map.
    pub fn apply(&self, x: &mut [f64], positions: &[usize], inverse: bool) -> Result<()> {
        self.check_positions(positions)?;
        let s = positions.len();
        let dh = self.head_dim;
        let half = dh / 2;
        if s == 0 {
            return Ok(());
        }
        if !x.len().is_multiple_of(s * dh) {
            return Err(Error::shape("rope input is not [groups, s, head_dim]"));
        }
        let sign = if inverse { -1.0 } else { 1.0 };
        for group in x.chunks_mut(s * dh) {
            for (row, &pos) in group.chunks_mut(dh).zip(positions) {
                let cos = &self.cos[pos * half..(pos + 1) * half];
                let sin = &self.sin[pos * half..(pos + 1) * half];
                for i in 0..half {
                    let (a, b) = (row[i], row[i + half]);
                    let sn = sign * sin[i];
                    row[i] = a * cos[i] - b * sn;
                    row[i + half] = b * cos[i] + a * sn;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_undoes_rotation() {
        let rope = Rope::new(4, 16, 10000.0);
        let orig: Vec<f64> = (0..8).map(|v| v as f64 * 0.3 - 1.0).collect();
        let mut x = orig.clone();
        rope.apply(&mut x, &[3, 9], false).unwrap();
        rope.apply(&mut x, &[3, 9], true).unwrap();
        for (a, b) in x.iter().zip(&orig) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn position_zero_is_identity() {
        let rope = Rope::new(4, 4, 10000.0);
        let mut x = vec![1.0, 2.0, 3.0, 4.0];
        rope.apply(&mut x, &[0], false).unwrap();
        assert_eq!(x, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn overflow_is_reported() {
        let rope = Rope::new(4, 4, 10000.0);
        let mut x = vec![0.0; 4];
        assert!(matches!(
            rope.apply(&mut x, &[4], false),
            Err(Error::ContextOverflow { position: 4, max_context: 4 })
        ));
    }
}
