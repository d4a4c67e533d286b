use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::train::Batch;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const SEP: u32 = 2;
pub const EOS: u32 = 3;
/// First id of the content alphabet.
pub const FIRST_CONTENT: u32 = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    /// Full sequence, `BOS … EOS`.
    pub tokens: Vec<u32>,
    /// Tokens up to and including `SEP`; the rest is the answer.
    pub prompt_len: usize,
    /// Single-token options for cloze items, the answer among them; empty
    /// for copy items.
    pub candidates: Vec<u32>,
}

impl Sample {
    pub fn prompt(&self) -> &[u32] {
        &self.tokens[..self.prompt_len]
    }

    /// Answer tokens without the closing `EOS`.
    pub fn answer(&self) -> &[u32] {
        &self.tokens[self.prompt_len..self.tokens.len() - 1]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub samples: usize,
    /// Number of content ids, taken from `FIRST_CONTENT` upward.
    pub alphabet: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Fraction of cloze items; the rest are copy items.
    pub cloze_fraction: f64,
    pub candidates: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            samples: 32,
            alphabet: 32,
            min_len: 3,
            max_len: 6,
            cloze_fraction: 0.25,
            candidates: 4,
            seed: 7,
        }
    }
}

/// Deterministic synthetic tasks.
///
/// Copy: `BOS x₁…x_k SEP x₁…x_k EOS`. Cloze: `BOS x₁…x_k SEP y EOS` where
/// `y` is the token following `x_k` in a fixed random successor table, with
/// the true `y` among `candidates` options.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyCorpus {
    pub config: CorpusConfig,
    pub samples: Vec<Sample>,
}

impl ToyCorpus {
    pub fn generate(config: &CorpusConfig, vocab: usize) -> Result<Self> {
        let c = config;
        if c.alphabet < 2 || FIRST_CONTENT as usize + c.alphabet > vocab {
            return Err(Error::Config(format!(
                "alphabet of {} content ids does not fit a vocabulary of {vocab}",
                c.alphabet
            )));
        }
        if c.min_len == 0 || c.min_len > c.max_len {
            return Err(Error::Config(format!("bad length range {}..={}", c.min_len, c.max_len)));
        }
        if !(0.0..=1.0).contains(&c.cloze_fraction) || c.candidates < 2 || c.candidates > c.alphabet {
            return Err(Error::Config("cloze settings out of range".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        let content = |i: usize| FIRST_CONTENT + i as u32;
        let mut successor: Vec<u32> = (0..c.alphabet).map(content).collect();
        successor.shuffle(&mut rng);
        let samples = (0..c.samples)
            .map(|_| {
                let k = rng.random_range(c.min_len..=c.max_len);
                let xs: Vec<u32> = (0..k).map(|_| content(rng.random_range(0..c.alphabet))).collect();
                let mut tokens = vec![BOS];
                tokens.extend(&xs);
                tokens.push(SEP);
                let prompt_len = tokens.len();
                let mut candidates = Vec::new();
                if rng.random_bool(c.cloze_fraction) {
                    let answer = successor[(xs[k - 1] - FIRST_CONTENT) as usize];
                    let mut pool: Vec<u32> = (0..c.alphabet).map(content).filter(|t| *t != answer).collect();
                    pool.shuffle(&mut rng);
                    candidates = pool[..c.candidates - 1].to_vec();
                    candidates.insert(rng.random_range(0..c.candidates), answer);
                    tokens.push(answer);
                } else {
                    tokens.extend(&xs);
                }
                tokens.push(EOS);
                Sample {
                    tokens,
                    prompt_len,
                    candidates,
                }
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Longest sequence minus one: the input length of a full batch.
    pub fn seq_len(&self) -> usize {
        self.samples.iter().map(|s| s.tokens.len() - 1).max().unwrap_or(0)
    }

    /// Consecutive batches of `size` samples in corpus order, all padded to
    /// [`Self::seq_len`]; a short final batch is dropped unless it is the
    /// only one.
    pub fn batches(&self, size: usize) -> Result<Vec<Batch>> {
        if size == 0 || self.is_empty() {
            return Err(Error::Config("batches need a positive size and samples".into()));
        }
        let len = self.seq_len();
        let mut out = Vec::new();
        for chunk in self.samples.chunks(size) {
            if chunk.len() < size && !out.is_empty() {
                break;
            }
            let seqs: Vec<Vec<u32>> = chunk.iter().map(|s| s.tokens.clone()).collect();
            out.push(Batch::from_sequences(&seqs, PAD, Some(len))?);
        }
        Ok(out)
    }

    /// Samples `[start, start + n)` as a separate corpus.
    pub fn slice(&self, start: usize, n: usize) -> Self {
        Self {
            config: self.config.clone(),
            samples: self.samples[start.min(self.len())..(start + n).min(self.len())].to_vec(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_range() {
        let cfg = CorpusConfig::default();
        let a = ToyCorpus::generate(&cfg, 64).unwrap();
        assert_eq!(a, ToyCorpus::generate(&cfg, 64).unwrap());
        assert_eq!(a.len(), 32);
        for s in &a.samples {
            assert!(s.tokens.iter().all(|t| (*t as usize) < 64));
            assert_eq!(s.tokens[0], BOS);
            assert_eq!(s.tokens[s.prompt_len - 1], SEP);
            assert_eq!(*s.tokens.last().unwrap(), EOS);
            if s.candidates.is_empty() {
                assert_eq!(s.answer(), &s.prompt()[1..s.prompt_len - 1]);
            } else {
                assert_eq!(s.answer().len(), 1);
                assert!(s.candidates.contains(&s.answer()[0]));
            }
        }
        assert!(a.samples.iter().any(|s| !s.candidates.is_empty()));
    }

    #[test]
    fn rejects_alphabet_larger_than_vocab() {
        let cfg = CorpusConfig {
            alphabet: 100,
            ..CorpusConfig::default()
        };
        assert!(matches!(ToyCorpus::generate(&cfg, 64), Err(Error::Config(_))));
    }

    #[test]
    fn batches_share_length() {
        let c = ToyCorpus::generate(&CorpusConfig::default(), 64).unwrap();
        let b = c.batches(8).unwrap();
        assert_eq!(b.len(), 4);
        assert!(b.iter().all(|x| x.seq_len == c.seq_len() && x.batch == 8));
    }
}
