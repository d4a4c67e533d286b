//! Causal-plus-left-padding attention masks and their compressed metadata.
//!
//! A full additive mask is `batch × seq_len × seq_len` with entries in
//! `{0, −∞}`. Under left padding every such mask is determined by
//! `(seq_len, pad_len, batch)`: query row `r` of batch row `b` may attend key
//! `c` iff `pad_len(b) ≤ c ≤ r`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PadLens {
    Uniform(usize),
    PerRow(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskMeta {
    pub seq_len: usize,
    pub batch: usize,
    pub pad: PadLens,
}

impl MaskMeta {
    pub fn uniform(seq_len: usize, pad_len: usize, batch: usize) -> Result<Self> {
        let meta = Self {
            seq_len,
            batch,
            pad: PadLens::Uniform(pad_len),
        };
        meta.validate()?;
        Ok(meta)
    }

    /// One pad length per batch row; collapses to the uniform form when all
    /// rows agree.
    pub fn per_row(seq_len: usize, pads: Vec<usize>) -> Result<Self> {
        let batch = pads.len();
        let pad = match pads.first() {
            Some(&first) if pads.iter().all(|&p| p == first) => PadLens::Uniform(first),
            _ => PadLens::PerRow(pads),
        };
        let meta = Self {
            seq_len,
            batch,
            pad,
        };
        meta.validate()?;
        Ok(meta)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seq_len == 0 || self.batch == 0 {
            return Err(Error::InvalidMask(format!(
                "seq_len {} and batch {} must be positive",
                self.seq_len, self.batch
            )));
        }
        match &self.pad {
            PadLens::Uniform(p) if *p >= self.seq_len => Err(Error::InvalidMask(format!(
                "pad_len {p} >= seq_len {}",
                self.seq_len
            ))),
            PadLens::PerRow(pads) if pads.len() != self.batch => Err(Error::InvalidMask(
                format!("{} pad lengths for batch {}", pads.len(), self.batch),
            )),
            PadLens::PerRow(pads) => match pads.iter().find(|&&p| p >= self.seq_len) {
                Some(p) => Err(Error::InvalidMask(format!(
                    "pad_len {p} >= seq_len {}",
                    self.seq_len
                ))),
                None => Ok(()),
            },
            PadLens::Uniform(_) => Ok(()),
        }
    }

    pub fn pad_len(&self, row: usize) -> usize {
        match &self.pad {
            PadLens::Uniform(p) => *p,
            PadLens::PerRow(pads) => pads[row],
        }
    }

    pub fn pad_lens(&self) -> Vec<usize> {
        (0..self.batch).map(|r| self.pad_len(r)).collect()
    }

    #[inline]
    pub fn allows(&self, row: usize, query_pos: usize, key: usize) -> bool {
        key <= query_pos && key >= self.pad_len(row)
    }

    /// Same padding, longer sequence (one decode step appends a position).
    pub fn extended(&self, seq_len: usize) -> Self {
        Self {
            seq_len,
            ..self.clone()
        }
    }

    /// Rows `start..start+len` of this batch.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Self> {
        let pads = self.pad_lens();
        if start + len > pads.len() {
            return Err(Error::InvalidMask("row slice out of range".into()));
        }
        Self::per_row(self.seq_len, pads[start..start + len].to_vec())
    }

    /// Stack several batches' metadata; all must share `seq_len`.
    pub fn concat(parts: &[&MaskMeta]) -> Result<Self> {
        let seq_len = parts
            .first()
            .ok_or_else(|| Error::InvalidMask("no masks to concatenate".into()))?
            .seq_len;
        let mut pads = Vec::new();
        for part in parts {
            if part.seq_len != seq_len {
                return Err(Error::BatchIncompatible(format!(
                    "seq_len {} vs {seq_len}",
                    part.seq_len
                )));
            }
            pads.extend(part.pad_lens());
        }
        Self::per_row(seq_len, pads)
    }

    /// Encoded size on the wire: three 8-byte integers, plus one per row in
    /// the per-row form.
    pub fn wire_bytes(&self) -> usize {
        match &self.pad {
            PadLens::Uniform(_) => 24,
            PadLens::PerRow(p) => 24 + 8 * p.len(),
        }
    }

    /// Size of the equivalent full mask at `scalar_width` bytes per entry.
    pub fn full_mask_bytes(&self, scalar_width: usize) -> usize {
        self.batch * self.seq_len * self.seq_len * scalar_width
    }
}

/// Expand metadata into the full additive `[batch, seq_len, seq_len]` mask.
pub fn reconstruct_mask(meta: &MaskMeta) -> Result<Tensor> {
    meta.validate()?;
    let s = meta.seq_len;
    let mut data = Vec::with_capacity(meta.batch * s * s);
    for b in 0..meta.batch {
        for r in 0..s {
            for c in 0..s {
                data.push(if meta.allows(b, r, c) {
                    0.0
                } else {
                    f64::NEG_INFINITY
                });
            }
        }
    }
    Tensor::new(vec![meta.batch, s, s], data)
}

/// Recover metadata from a full additive mask, rejecting anything outside
/// the causal-plus-left-padding family.
pub fn compress_mask(mask: &Tensor) -> Result<MaskMeta> {
    let (batch, s) = match mask.shape() {
        &[b, r, c] if r == c && b > 0 && r > 0 => (b, r),
        other => {
            return Err(Error::IncompressibleMask(format!(
                "expected [batch, s, s], got {other:?}"
            )))
        }
    };
    let mut pads = Vec::with_capacity(batch);
    for b in 0..batch {
        let block = &mask.data()[b * s * s..(b + 1) * s * s];
        let last = &block[(s - 1) * s..];
        let pad = last.iter().position(|&v| v == 0.0).ok_or_else(|| {
            Error::IncompressibleMask(format!("batch row {b} masks every key"))
        })?;
        for r in 0..s {
            for c in 0..s {
                let expect_open = c <= r && c >= pad;
                let v = block[r * s + c];
                let ok = if expect_open {
                    v == 0.0
                } else {
                    v == f64::NEG_INFINITY
                };
                if !ok {
                    return Err(Error::IncompressibleMask(format!(
                        "entry [{b},{r},{c}] = {v}"
                    )));
                }
            }
        }
        pads.push(pad);
    }
    MaskMeta::per_row(s, pads)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Brute-force builder written independently of `allows`.
    fn brute_mask(s: usize, pad: usize) -> Vec<Vec<f64>> {
        let mut m = vec![vec![f64::NEG_INFINITY; s]; s];
        for (r, row) in m.iter_mut().enumerate() {
            for c in 0..=r {
                row[c] = 0.0;
            }
            for cell in row.iter_mut().take(pad) {
                *cell = f64::NEG_INFINITY;
            }
        }
        m
    }

    #[test]
    fn no_padding_is_pure_causal() {
        let meta = MaskMeta::uniform(4, 0, 2).unwrap();
        let mask = reconstruct_mask(&meta).unwrap();
        for b in 0..2 {
            for r in 0..4 {
                for c in 0..4 {
                    let v = mask.data()[(b * 4 + r) * 4 + c];
                    assert_eq!(v == 0.0, c <= r);
                }
            }
        }
        assert_eq!(compress_mask(&mask).unwrap(), meta);
    }

    #[test]
    fn left_padding_blocks_leading_columns() {
        let meta = MaskMeta::uniform(4, 2, 1).unwrap();
        let mask = reconstruct_mask(&meta).unwrap();
        let brute = brute_mask(4, 2);
        for r in 0..4 {
            for c in 0..4 {
                assert_eq!(mask.data()[r * 4 + c], brute[r][c]);
            }
            assert_eq!(mask.data()[r * 4], f64::NEG_INFINITY);
            assert_eq!(mask.data()[r * 4 + 1], f64::NEG_INFINITY);
        }
    }

    #[test]
    fn single_position_mask_is_zero() {
        let meta = MaskMeta::uniform(1, 0, 1).unwrap();
        let mask = reconstruct_mask(&meta).unwrap();
        assert_eq!(mask.shape(), &[1, 1, 1]);
        assert_eq!(mask.data(), &[0.0]);
    }

    #[test]
    fn three_with_one_pad() {
        let meta = MaskMeta::uniform(3, 1, 1).unwrap();
        let mask = reconstruct_mask(&meta).unwrap();
        let brute = brute_mask(3, 1);
        for r in 0..3 {
            for c in 0..3 {
                assert_eq!(mask.data()[r * 3 + c], brute[r][c]);
                let open = c >= 1 && c <= r;
                assert_eq!(mask.data()[r * 3 + c] == 0.0, open);
            }
        }
    }

    #[test]
    fn pad_must_be_shorter_than_sequence() {
        assert!(matches!(
            MaskMeta::uniform(3, 3, 1),
            Err(Error::InvalidMask(_))
        ));
    }

    #[test]
    fn non_canonical_mask_is_rejected() {
        let meta = MaskMeta::uniform(3, 0, 1).unwrap();
        let mut mask = reconstruct_mask(&meta).unwrap();
        mask.data_mut()[1] = 0.0; // row 0 peeks at key 1
        assert!(matches!(
            compress_mask(&mask),
            Err(Error::IncompressibleMask(_))
        ));
    }

    #[test]
    fn compressed_size_arithmetic() {
        let meta = MaskMeta::uniform(512, 0, 2).unwrap();
        assert_eq!(meta.wire_bytes(), 24);
        assert_eq!(meta.full_mask_bytes(2), 1_048_576);
        let meta = MaskMeta::uniform(128, 3, 2).unwrap();
        assert_eq!(meta.full_mask_bytes(8), 262_144);
    }

    #[test]
    fn per_row_pads_roundtrip() {
        let meta = MaskMeta::per_row(5, vec![0, 3, 1]).unwrap();
        let mask = reconstruct_mask(&meta).unwrap();
        assert_eq!(compress_mask(&mask).unwrap(), meta);
        assert_eq!(meta.wire_bytes(), 24 + 24);
    }
}
