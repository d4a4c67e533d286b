use crate::error::{Error, Result};

/// Rotated keys and values of one block, one append-only buffer per
/// (batch row, head), each `len × head_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerCache {
    pub(crate) keys: Vec<Vec<f64>>,
    pub(crate) values: Vec<Vec<f64>>,
    pub(crate) len: usize,
}

impl LayerCache {
    fn new(groups: usize) -> Self {
        Self {
            keys: vec![Vec::new(); groups],
            values: vec![Vec::new(); groups],
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Per-block key/value cache of one generation session on one side of the
/// split.
#[derive(Clone, Debug, PartialEq)]
pub struct KvCache {
    layers: Vec<LayerCache>,
    batch: usize,
}

impl KvCache {
    pub fn new(num_layers: usize, batch: usize, heads: usize) -> Self {
        Self {
            layers: (0..num_layers).map(|_| LayerCache::new(batch * heads)).collect(),
            batch,
        }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Processed positions; `Protocol` error if blocks disagree.
    pub fn len(&self) -> Result<usize> {
        let first = self.layers.first().map_or(0, |l| l.len);
        if self.layers.iter().any(|l| l.len != first) {
            return Err(Error::Protocol("cache blocks disagree on length".into()));
        }
        Ok(first)
    }

    pub fn layer_lens(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.len).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.iter().all(|l| l.len == 0)
    }

    pub fn clear(&mut self) {
        for l in &mut self.layers {
            let groups = l.keys.len();
            *l = LayerCache::new(groups);
        }
    }

    pub(crate) fn layer_mut(&mut self, i: usize) -> &mut LayerCache {
        &mut self.layers[i]
    }
}
