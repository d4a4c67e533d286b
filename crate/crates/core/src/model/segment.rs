use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::block::{rows_tensor, Block, BlockSaved};
use super::cache::KvCache;
use super::grads::Grads;
use super::linear::Linear;
use super::{ModelConfig, PartitionSpec};
use crate::error::{Error, Result};
use crate::tensor::{rms_norm, rms_norm_backward, Rope, Tensor};
use crate::wire::MaskMeta;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Role {
    /// Embedding and the first `p` blocks (client).
    A,
    /// Middle `k` blocks (server).
    B,
    /// Last `q` blocks, final norm and output head (client).
    C,
    /// The unsplit model.
    Full,
}

impl Role {
    fn takes_tokens(self) -> bool {
        matches!(self, Role::A | Role::Full)
    }

    fn emits_logits(self) -> bool {
        matches!(self, Role::C | Role::Full)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradMode {
    /// Adapter gradients only; base weights are frozen.
    LoraOnly,
    /// Every parameter, including embedding, norms and head.
    Full,
}

pub enum SegmentInput<'a> {
    /// Row-major `[batch, s]` token ids.
    Tokens { ids: &'a [u32], batch: usize },
    /// `[batch, s, d]` hidden states.
    Hidden(&'a Tensor),
}

#[derive(Clone, Debug)]
pub enum TapeNode {
    Embed { ids: Vec<u32> },
    Block(Box<BlockSaved>),
    FinalNorm { x: Tensor },
    Head { x: Vec<f64> },
}

/// Forward record of one segment; consumed by exactly one backward pass.
#[derive(Clone, Debug)]
pub struct SegmentTape {
    owner: (Role, usize),
    batch: usize,
    seq: usize,
    out_shape: Vec<usize>,
    nodes: Vec<TapeNode>,
}

impl SegmentTape {
    pub fn nodes(&self) -> &[TapeNode] {
        &self.nodes
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn seq_len(&self) -> usize {
        self.seq
    }
}

#[derive(Clone, Debug)]
pub struct SegmentGrads {
    /// `∂L/∂input` for hidden-state inputs; `None` for token inputs.
    pub input: Option<Tensor>,
    pub params: Grads,
}

#[derive(Clone, Debug)]
pub struct SegmentModel {
    pub role: Role,
    pub config: ModelConfig,
    pub embed: Option<Tensor>,
    pub blocks: Vec<Block>,
    pub final_norm: Option<Tensor>,
    pub head: Option<Linear>,
    rope: Rope,
}

impl PartialEq for SegmentModel {
    fn eq(&self, other: &Self) -> bool {
        self.role == other.role
            && self.config == other.config
            && self.embed == other.embed
            && self.blocks == other.blocks
            && self.final_norm == other.final_norm
            && self.head == other.head
    }
}

fn lora_stream(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

/// Monolithic model. Base weights come from stream 0 of the seed, adapter
/// `A` matrices from stream 1, so the base draw never depends on LoRA rank.
pub fn build_monolithic(config: &ModelConfig, seed: u64) -> Result<SegmentModel> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (v, d) = (config.vocab_size, config.hidden_size);
    let embed = Tensor::randn(&[v, d], config.embed_std, &mut rng);
    let mut blocks: Vec<Block> = (0..config.num_blocks)
        .map(|i| Block::init(i, config, &mut rng))
        .collect();
    let head = Linear::init(d, v, &mut rng);
    let mut lrng = lora_stream(seed);
    for b in &mut blocks {
        b.attach_lora(config, &mut lrng);
    }
    Ok(SegmentModel {
        role: Role::Full,
        config: config.clone(),
        embed: Some(embed),
        blocks,
        final_norm: Some(Tensor::full(&[d], 1.0)),
        head: Some(head),
        rope: Rope::new(config.head_dim(), config.max_context, config.rope_base),
    })
}

/// Segments A, B, C of the monolithic model with the same seed.
pub fn build_partitioned(
    config: &ModelConfig,
    spec: PartitionSpec,
    seed: u64,
) -> Result<(SegmentModel, SegmentModel, SegmentModel)> {
    config.validate()?;
    spec.validate(config)?;
    build_monolithic(config, seed)?.split(spec, 1)
}

/// Split whose client input segment holds only the embedding table.
pub fn build_embedding_split(
    config: &ModelConfig,
    seed: u64,
) -> Result<(SegmentModel, SegmentModel, SegmentModel)> {
    config.validate()?;
    build_monolithic(config, seed)?.split(PartitionSpec::embedding_only(config.num_blocks), 0)
}

impl SegmentModel {
    fn split(self, spec: PartitionSpec, min_p: usize) -> Result<(Self, Self, Self)> {
        if self.role != Role::Full {
            return Err(Error::Partition("only a full model can be split".into()));
        }
        spec.check(&self.config, min_p)?;
        let mut blocks = self.blocks.into_iter();
        let a_blocks: Vec<Block> = blocks.by_ref().take(spec.p).collect();
        let b_blocks: Vec<Block> = blocks.by_ref().take(spec.k).collect();
        let c_blocks: Vec<Block> = blocks.collect();
        let seg = |role, embed, blocks, final_norm, head| SegmentModel {
            role,
            config: self.config.clone(),
            embed,
            blocks,
            final_norm,
            head,
            rope: self.rope.clone(),
        };
        Ok((
            seg(Role::A, self.embed, a_blocks, None, None),
            seg(Role::B, None, b_blocks, None, None),
            seg(Role::C, None, c_blocks, self.final_norm, self.head),
        ))
    }

    /// Concatenate A, B, C back into the full model.
    pub fn assemble(a: &SegmentModel, b: &SegmentModel, c: &SegmentModel) -> Result<SegmentModel> {
        if (a.role, b.role, c.role) != (Role::A, Role::B, Role::C) {
            return Err(Error::Partition("assemble needs roles A, B, C".into()));
        }
        let blocks: Vec<Block> = a
            .blocks
            .iter()
            .chain(&b.blocks)
            .chain(&c.blocks)
            .cloned()
            .collect();
        if blocks.iter().enumerate().any(|(i, blk)| blk.index != i) {
            return Err(Error::Partition("segments are not contiguous".into()));
        }
        Ok(SegmentModel {
            role: Role::Full,
            config: a.config.clone(),
            embed: a.embed.clone(),
            blocks,
            final_norm: c.final_norm.clone(),
            head: c.head.clone(),
            rope: a.rope.clone(),
        })
    }

    /// Decoder-only stack with fresh parameters: `num_blocks` blocks, final
    /// norm and head, no embedding and no adapters. Reads hidden states.
    pub fn fresh_decoder(config: &ModelConfig, num_blocks: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks = (0..num_blocks)
            .map(|i| Block::init(i, config, &mut rng))
            .collect();
        let head = Linear::init(config.hidden_size, config.vocab_size, &mut rng);
        Ok(SegmentModel {
            role: Role::C,
            config: config.clone(),
            embed: None,
            blocks,
            final_norm: Some(Tensor::full(&[config.hidden_size], 1.0)),
            head: Some(head),
            rope: Rope::new(config.head_dim(), config.max_context, config.rope_base),
        })
    }

    pub fn rope(&self) -> &Rope {
        &self.rope
    }

    pub fn hidden_size(&self) -> usize {
        self.config.hidden_size
    }

    /// Global index of the first block, or the block count before this
    /// segment when it has none.
    pub fn first_block(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.index)
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Copy with every adapter removed.
    pub fn without_lora(&self) -> SegmentModel {
        let mut out = self.clone();
        for b in &mut out.blocks {
            for (_, lin) in b.attn_linears_mut() {
                lin.lora = None;
            }
        }
        out
    }

    pub fn new_cache(&self, batch: usize) -> KvCache {
        KvCache::new(self.blocks.len(), batch, self.config.num_heads)
    }

    /// Visit every parameter in checkpoint order.
    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        if let Some(e) = &self.embed {
            f("embed.weight", e);
        }
        for b in &self.blocks {
            let p = b.prefix();
            f(&format!("{p}.attn_norm.weight"), &b.attn_norm);
            for (name, lin) in b.attn_linears() {
                f(&format!("{p}.attn.{name}.weight"), &lin.weight);
                if let Some(l) = &lin.lora {
                    f(&format!("{p}.attn.{name}.lora_a"), &l.a);
                    f(&format!("{p}.attn.{name}.lora_b"), &l.b);
                }
            }
            f(&format!("{p}.mlp_norm.weight"), &b.mlp_norm);
            for (name, lin) in b.mlp_linears() {
                f(&format!("{p}.mlp.{name}.weight"), &lin.weight);
            }
        }
        if let Some(n) = &self.final_norm {
            f("final_norm.weight", n);
        }
        if let Some(h) = &self.head {
            f("head.weight", &h.weight);
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        if let Some(e) = &mut self.embed {
            f("embed.weight", e);
        }
        for b in &mut self.blocks {
            let p = b.prefix();
            f(&format!("{p}.attn_norm.weight"), &mut b.attn_norm);
            for (name, lin) in b.attn_linears_mut() {
                f(&format!("{p}.attn.{name}.weight"), &mut lin.weight);
                if let Some(l) = &mut lin.lora {
                    f(&format!("{p}.attn.{name}.lora_a"), &mut l.a);
                    f(&format!("{p}.attn.{name}.lora_b"), &mut l.b);
                }
            }
            f(&format!("{p}.mlp_norm.weight"), &mut b.mlp_norm);
            for (name, lin) in b.mlp_linears_mut() {
                f(&format!("{p}.mlp.{name}.weight"), &mut lin.weight);
            }
        }
        if let Some(n) = &mut self.final_norm {
            f("final_norm.weight", n);
        }
        if let Some(h) = &mut self.head {
            f("head.weight", &mut h.weight);
        }
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit_params(&mut |n, t| out.push((n.to_string(), t.clone())));
        out
    }

    pub fn lora_params(&self) -> Vec<(String, Tensor)> {
        self.named_params()
            .into_iter()
            .filter(|(n, _)| is_trainable(n))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, t| n += t.numel());
        n
    }

    pub fn lora_param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |name, t| {
            if is_trainable(name) {
                n += t.numel()
            }
        });
        n
    }

    /// Overwrite parameters by name; every name must exist with the same shape.
    pub fn set_params<'a>(
        &mut self,
        params: impl IntoIterator<Item = (&'a String, &'a Tensor)>,
    ) -> Result<()> {
        let wanted: std::collections::BTreeMap<&String, &Tensor> = params.into_iter().collect();
        let mut seen = 0;
        let mut err = None;
        self.visit_params_mut(&mut |name, t| {
            if let Some(src) = wanted.get(&name.to_string()) {
                seen += 1;
                if src.shape() != t.shape() {
                    err.get_or_insert_with(|| {
                        Error::shape(format!("`{name}`: {:?} vs {:?}", src.shape(), t.shape()))
                    });
                } else {
                    t.data_mut().copy_from_slice(src.data());
                }
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if seen != wanted.len() {
            return Err(Error::shape("some parameter names do not belong to this segment"));
        }
        Ok(())
    }

    /// Plain gradient descent on the adapters: `θ ← θ − lr·∂θ` for every
    /// `lora_a`/`lora_b`. Base weights are not touched.
    pub fn apply_lora_step(&mut self, grads: &Grads, lr: f64) -> Result<()> {
        let mut err = None;
        self.visit_params_mut(&mut |name, t| {
            if !is_trainable(name) || err.is_some() {
                return;
            }
            match grads.get(name) {
                Some(g) => {
                    if let Err(e) = t.sgd_update(g, lr) {
                        err = Some(e);
                    }
                }
                None => err = Some(Error::shape(format!("no gradient for `{name}`"))),
            }
        });
        err.map_or(Ok(()), Err)
    }

    /// Gradient descent on whichever parameters `grads` names.
    pub fn apply_step(&mut self, grads: &Grads, lr: f64) -> Result<()> {
        let mut err = None;
        let mut used = 0;
        self.visit_params_mut(&mut |name, t| {
            if let Some(g) = grads.get(name) {
                used += 1;
                if let Err(e) = t.sgd_update(g, lr) {
                    err.get_or_insert(e);
                }
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if used != grads.len() {
            return Err(Error::shape("gradient names do not belong to this segment"));
        }
        Ok(())
    }

    pub fn forward(
        &self,
        input: SegmentInput<'_>,
        meta: &MaskMeta,
        positions: &[usize],
        cache: Option<&mut KvCache>,
    ) -> Result<Tensor> {
        Ok(self.run(input, meta, positions, cache, false)?.0)
    }

    pub fn forward_train(
        &self,
        input: SegmentInput<'_>,
        meta: &MaskMeta,
        positions: &[usize],
    ) -> Result<(Tensor, SegmentTape)> {
        let (out, tape) = self.run(input, meta, positions, None, true)?;
        Ok((out, tape.expect("recorded")))
    }

    fn run(
        &self,
        input: SegmentInput<'_>,
        meta: &MaskMeta,
        positions: &[usize],
        mut cache: Option<&mut KvCache>,
        record: bool,
    ) -> Result<(Tensor, Option<SegmentTape>)> {
        let d = self.hidden_size();
        self.rope.check_positions(positions)?;
        let mut nodes = Vec::new();
        let (b, s, mut x) = match input {
            SegmentInput::Tokens { ids, batch } => {
                let embed = self.embed.as_ref().filter(|_| self.role.takes_tokens());
                let Some(embed) = embed else {
                    return Err(Error::Protocol(format!(
                        "segment {:?} does not accept token input",
                        self.role
                    )));
                };
                if batch == 0 || ids.len() % batch != 0 {
                    return Err(Error::shape(format!(
                        "{} token ids do not form {batch} rows",
                        ids.len()
                    )));
                }
                let vocab = self.config.vocab_size;
                let mut x = Vec::with_capacity(ids.len() * d);
                for &id in ids {
                    if id as usize >= vocab {
                        return Err(Error::TokenId { id, vocab });
                    }
                    x.extend_from_slice(&embed.data()[id as usize * d..(id as usize + 1) * d]);
                }
                if record {
                    nodes.push(TapeNode::Embed { ids: ids.to_vec() });
                }
                (batch, ids.len() / batch, x)
            }
            SegmentInput::Hidden(h) => {
                if self.role.takes_tokens() {
                    return Err(Error::Protocol(format!(
                        "segment {:?} expects token ids",
                        self.role
                    )));
                }
                match h.shape() {
                    &[b, s, hd] if hd == d => (b, s, h.data().to_vec()),
                    other => {
                        return Err(Error::shape(format!(
                            "hidden input {other:?}, model width {d}"
                        )))
                    }
                }
            }
        };
        if positions.len() != s {
            return Err(Error::shape(format!(
                "{} positions for sequence length {s}",
                positions.len()
            )));
        }
        if meta.batch != b {
            return Err(Error::shape(format!(
                "mask batch {} vs input batch {b}",
                meta.batch
            )));
        }
        if let Some(c) = cache.as_deref() {
            if c.num_layers() != self.blocks.len() || c.batch() != b {
                return Err(Error::shape("cache does not match segment or batch"));
            }
        }
        for (i, blk) in self.blocks.iter().enumerate() {
            let layer = cache.as_deref_mut().map(|c| c.layer_mut(i));
            let (y, saved) = blk.forward(&x, b, s, meta, positions, &self.rope, layer, record)?;
            if let Some(saved) = saved {
                nodes.push(TapeNode::Block(Box::new(saved)));
            }
            x = y;
        }
        let out = if self.role.emits_logits() {
            let norm = self.final_norm.as_ref().expect("output segment has a norm");
            let head = self.head.as_ref().expect("output segment has a head");
            let xt = rows_tensor(x, d)?;
            let n = rms_norm(&xt, norm, self.config.rms_eps)?;
            let (logits, _) = head.forward(n.data())?;
            if record {
                nodes.push(TapeNode::FinalNorm { x: xt });
                nodes.push(TapeNode::Head {
                    x: n.into_data(),
                });
            }
            Tensor::new(vec![b, s, self.config.vocab_size], logits)?
        } else {
            Tensor::new(vec![b, s, d], x)?
        };
        let tape = record.then(|| SegmentTape {
            owner: (self.role, self.first_block()),
            batch: b,
            seq: s,
            out_shape: out.shape().to_vec(),
            nodes,
        });
        Ok((out, tape))
    }

    /// Backward through a tape produced by this segment's
    /// [`forward_train`](Self::forward_train).
    pub fn backward(
        &self,
        tape: SegmentTape,
        upstream: &Tensor,
        mode: GradMode,
    ) -> Result<SegmentGrads> {
        if tape.owner != (self.role, self.first_block()) {
            return Err(Error::ProtocolOrder(
                "tape was recorded by a different segment".into(),
            ));
        }
        if upstream.shape() != tape.out_shape.as_slice() {
            return Err(Error::shape(format!(
                "upstream gradient {:?}, segment output {:?}",
                upstream.shape(),
                tape.out_shape
            )));
        }
        let full = mode == GradMode::Full;
        let d = self.hidden_size();
        let mut grads = Grads::new();
        let mut g = upstream.data().to_vec();
        let mut block_iter = self.blocks.iter().rev();
        let mut from_tokens = false;
        for node in tape.nodes.iter().rev() {
            match node {
                TapeNode::Head { x } => {
                    let head = self.head.as_ref().expect("output segment has a head");
                    let (dx, hg) = head.backward(x, &[], &g, full)?;
                    if let Some(w) = hg.weight {
                        grads.insert("head.weight".into(), w);
                    }
                    g = dx;
                }
                TapeNode::FinalNorm { x } => {
                    let norm = self.final_norm.as_ref().expect("output segment has a norm");
                    let (dx, dw) = rms_norm_backward(
                        x,
                        norm,
                        self.config.rms_eps,
                        &rows_tensor(std::mem::take(&mut g), d)?,
                    )?;
                    if full {
                        grads.insert("final_norm.weight".into(), dw);
                    }
                    g = dx.into_data();
                }
                TapeNode::Block(saved) => {
                    let blk = block_iter
                        .next()
                        .ok_or_else(|| Error::ProtocolOrder("tape/segment block mismatch".into()))?;
                    g = blk.backward(saved, &g, &self.rope, full, &mut grads)?;
                }
                TapeNode::Embed { ids } => {
                    from_tokens = true;
                    if full {
                        let embed = self.embed.as_ref().expect("input segment has an embedding");
                        let mut de = vec![0.0; embed.numel()];
                        for (row, &id) in ids.iter().enumerate() {
                            let dst = &mut de[id as usize * d..(id as usize + 1) * d];
                            for (a, v) in dst.iter_mut().zip(&g[row * d..(row + 1) * d]) {
                                *a += v;
                            }
                        }
                        grads.insert("embed.weight".into(), Tensor::new(embed.shape().to_vec(), de)?);
                    }
                }
            }
        }
        let input = if from_tokens {
            None
        } else {
            Some(Tensor::new(vec![tape.batch, tape.seq, d], g)?)
        };
        Ok(SegmentGrads {
            input,
            params: grads,
        })
    }
}

pub fn is_trainable(name: &str) -> bool {
    name.ends_with(".lora_a") || name.ends_with(".lora_b")
}
