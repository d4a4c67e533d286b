use crate::error::{Error, Result};
use crate::wire::MaskMeta;

/// Target id excluded from the loss.
pub const IGNORE: u32 = u32::MAX;

/// One left-padded next-token batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[batch, seq_len]` row-major.
    pub tokens: Vec<u32>,
    /// Same layout; [`IGNORE`] at padding.
    pub targets: Vec<u32>,
    pub batch: usize,
    pub seq_len: usize,
    pub meta: MaskMeta,
}

impl Batch {
    pub fn new(tokens: Vec<u32>, targets: Vec<u32>, meta: MaskMeta) -> Result<Self> {
        let (batch, seq_len) = (meta.batch, meta.seq_len);
        if tokens.len() != batch * seq_len || targets.len() != tokens.len() {
            return Err(Error::shape(format!(
                "batch of {batch}×{seq_len} with {} tokens and {} targets",
                tokens.len(),
                targets.len()
            )));
        }
        Ok(Self {
            tokens,
            targets,
            batch,
            seq_len,
            meta,
        })
    }

    /// Next-token pairs from whole sequences: inputs `seq[..n-1]`, targets
    /// `seq[1..]`, left-padded with `pad_id` to `seq_len` (or the longest
    /// row when `None`).
    pub fn from_sequences(seqs: &[Vec<u32>], pad_id: u32, seq_len: Option<usize>) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::shape("empty batch"));
        }
        if seqs.iter().any(|s| s.len() < 2) {
            return Err(Error::shape("every sequence needs at least two tokens"));
        }
        let longest = seqs.iter().map(|s| s.len() - 1).max().expect("non-empty");
        let len = seq_len.unwrap_or(longest);
        if len < longest {
            return Err(Error::shape(format!(
                "sequence of {longest} inputs exceeds batch length {len}"
            )));
        }
        let mut tokens = Vec::with_capacity(seqs.len() * len);
        let mut targets = Vec::with_capacity(seqs.len() * len);
        let mut pads = Vec::with_capacity(seqs.len());
        for s in seqs {
            let pad = len - (s.len() - 1);
            pads.push(pad);
            tokens.extend(std::iter::repeat_n(pad_id, pad));
            targets.extend(std::iter::repeat_n(IGNORE, pad));
            tokens.extend_from_slice(&s[..s.len() - 1]);
            targets.extend_from_slice(&s[1..]);
        }
        Self::new(tokens, targets, MaskMeta::per_row(len, pads)?)
    }

    pub fn positions(&self) -> Vec<usize> {
        (0..self.seq_len).collect()
    }

    pub fn row_tokens(&self, row: usize) -> &[u32] {
        &self.tokens[row * self.seq_len..(row + 1) * self.seq_len]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn left_pads_shorter_rows() {
        let b = Batch::from_sequences(&[vec![1, 2, 3, 4], vec![5, 6]], 0, None).unwrap();
        assert_eq!(b.seq_len, 3);
        assert_eq!(b.tokens, vec![1, 2, 3, 0, 0, 5]);
        assert_eq!(b.targets, vec![2, 3, 4, IGNORE, IGNORE, 6]);
        assert_eq!(b.meta.pad_lens(), vec![0, 2]);
    }
}
