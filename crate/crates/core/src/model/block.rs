use rand::Rng;

use super::cache::LayerCache;
use super::grads::Grads;
use super::linear::{Linear, LinearGrads, Lora};
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{
    attention_backward, attention_forward, merge_heads, rms_norm, rms_norm_backward, sigmoid,
    split_heads, KvView, Rope, Tensor,
};
use crate::wire::MaskMeta;

/// Pre-norm transformer block:
/// `h2 = x + o(attn(norm1(x)))`, `out = h2 + down(silu(gate(n2)) ⊙ up(n2))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub index: usize,
    pub attn_norm: Tensor,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub mlp_norm: Tensor,
    pub gate: Linear,
    pub up: Linear,
    pub down: Linear,
    pub(crate) heads: usize,
    pub(crate) eps: f64,
}

/// Activations a block's backward pass needs.
#[derive(Clone, Debug)]
pub struct BlockSaved {
    b: usize,
    s: usize,
    x: Tensor,
    n1: Tensor,
    q_xa: Vec<f64>,
    k_xa: Vec<f64>,
    v_xa: Vec<f64>,
    qr: Tensor,
    kr: Tensor,
    v: Tensor,
    probs: Tensor,
    positions: Vec<usize>,
    attn: Vec<f64>,
    o_xa: Vec<f64>,
    h2: Tensor,
    n2: Tensor,
    g: Vec<f64>,
    u: Vec<f64>,
    act: Vec<f64>,
}

pub(crate) fn rows_tensor(data: Vec<f64>, d: usize) -> Result<Tensor> {
    let rows = if d == 0 { 0 } else { data.len() / d };
    Tensor::new(vec![rows, d], data)
}

impl Block {
    pub fn init<R: Rng + ?Sized>(index: usize, cfg: &ModelConfig, rng: &mut R) -> Self {
        let (d, m) = (cfg.hidden_size, cfg.mlp_hidden);
        Self {
            index,
            attn_norm: Tensor::full(&[d], 1.0),
            q: Linear::init(d, d, rng),
            k: Linear::init(d, d, rng),
            v: Linear::init(d, d, rng),
            o: Linear::init(d, d, rng),
            mlp_norm: Tensor::full(&[d], 1.0),
            gate: Linear::init(d, m, rng),
            up: Linear::init(d, m, rng),
            down: Linear::init(m, d, rng),
            heads: cfg.num_heads,
            eps: cfg.rms_eps,
        }
    }

    pub fn attach_lora<R: Rng + ?Sized>(&mut self, cfg: &ModelConfig, rng: &mut R) {
        let d = cfg.hidden_size;
        for lin in [&mut self.q, &mut self.k, &mut self.v, &mut self.o] {
            lin.lora = Some(Lora::init(d, d, cfg.lora_rank, cfg.lora_scaling(), rng));
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.attn_norm.numel()
    }

    pub(crate) fn prefix(&self) -> String {
        format!("blocks.{}", self.index)
    }

    pub(crate) fn attn_linears(&self) -> [(&'static str, &Linear); 4] {
        [("q", &self.q), ("k", &self.k), ("v", &self.v), ("o", &self.o)]
    }

    pub(crate) fn attn_linears_mut(&mut self) -> [(&'static str, &mut Linear); 4] {
        [
            ("q", &mut self.q),
            ("k", &mut self.k),
            ("v", &mut self.v),
            ("o", &mut self.o),
        ]
    }

    pub(crate) fn mlp_linears(&self) -> [(&'static str, &Linear); 3] {
        [("gate", &self.gate), ("up", &self.up), ("down", &self.down)]
    }

    pub(crate) fn mlp_linears_mut(&mut self) -> [(&'static str, &mut Linear); 3] {
        [
            ("gate", &mut self.gate),
            ("up", &mut self.up),
            ("down", &mut self.down),
        ]
    }

    /// `x` is `[b*s, d]` row-major. With a cache, `positions` must continue
    /// it exactly; the new keys/values are appended and attention runs over
    /// the whole cache. `record` keeps the activations for backward
    /// (uncached only).
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        x: &[f64],
        b: usize,
        s: usize,
        meta: &MaskMeta,
        positions: &[usize],
        rope: &Rope,
        cache: Option<&mut LayerCache>,
        record: bool,
    ) -> Result<(Vec<f64>, Option<BlockSaved>)> {
        let d = self.hidden_size();
        let h = self.heads;
        let dh = d / h;
        if x.len() != b * s * d {
            return Err(Error::shape(format!(
                "block {}: input has {} scalars, expected {b}×{s}×{d}",
                self.index,
                x.len()
            )));
        }
        let xt = rows_tensor(x.to_vec(), d)?;
        let n1 = rms_norm(&xt, &self.attn_norm, self.eps)?;
        let (q, q_xa) = self.q.forward(n1.data())?;
        let (k, k_xa) = self.k.forward(n1.data())?;
        let (v, v_xa) = self.v.forward(n1.data())?;
        let mut qr = split_heads(&q, b, s, h, dh);
        let mut kr = split_heads(&k, b, s, h, dh);
        let vh = split_heads(&v, b, s, h, dh);
        rope.apply(&mut qr, positions, false)?;
        rope.apply(&mut kr, positions, false)?;
        let qr = Tensor::new(vec![b, h, s, dh], qr)?;
        let kr = Tensor::new(vec![b, h, s, dh], kr)?;
        let vt = Tensor::new(vec![b, h, s, dh], vh)?;

        let (out, probs) = match cache {
            None => attention_forward(
                &qr,
                &KvView::contiguous(&kr)?,
                &KvView::contiguous(&vt)?,
                meta,
                positions,
            )?,
            Some(c) => {
                if record {
                    return Err(Error::Protocol(
                        "cannot record a training tape through a KV cache".into(),
                    ));
                }
                if c.keys.len() != b * h {
                    return Err(Error::shape(format!(
                        "cache holds {} head rows, batch needs {}",
                        c.keys.len(),
                        b * h
                    )));
                }
                if positions.iter().enumerate().any(|(i, &p)| p != c.len + i) {
                    return Err(Error::Protocol(format!(
                        "block {}: cache length {} but positions start at {:?}",
                        self.index,
                        c.len,
                        positions.first()
                    )));
                }
                for g in 0..b * h {
                    let span = g * s * dh..(g + 1) * s * dh;
                    c.keys[g].extend_from_slice(&kr.data()[span.clone()]);
                    c.values[g].extend_from_slice(&vt.data()[span]);
                }
                c.len += s;
                let len = c.len;
                let keys = KvView {
                    heads: c.keys.iter().map(|v| v.as_slice()).collect(),
                    len,
                };
                let values = KvView {
                    heads: c.values.iter().map(|v| v.as_slice()).collect(),
                    len,
                };
                attention_forward(&qr, &keys, &values, meta, positions)?
            }
        };
        let attn = merge_heads(out.data(), b, s, h, dh);
        let (o, o_xa) = self.o.forward(&attn)?;
        let mut h2 = x.to_vec();
        for (a, v) in h2.iter_mut().zip(&o) {
            *a += v;
        }
        let h2 = rows_tensor(h2, d)?;
        let n2 = rms_norm(&h2, &self.mlp_norm, self.eps)?;
        let (g, _) = self.gate.forward(n2.data())?;
        let (u, _) = self.up.forward(n2.data())?;
        let act: Vec<f64> = g
            .iter()
            .zip(&u)
            .map(|(&gv, &uv)| gv * sigmoid(gv) * uv)
            .collect();
        let (down, _) = self.down.forward(&act)?;
        let mut y = h2.data().to_vec();
        for (a, v) in y.iter_mut().zip(&down) {
            *a += v;
        }
        let saved = record.then(|| BlockSaved {
            b,
            s,
            x: xt,
            n1,
            q_xa,
            k_xa,
            v_xa,
            qr,
            kr,
            v: vt,
            probs,
            positions: positions.to_vec(),
            attn,
            o_xa,
            h2,
            n2,
            g,
            u,
            act,
        });
        Ok((y, saved))
    }

    /// Returns `∂L/∂x`. Adapter gradients always go into `grads`; base
    /// weights and norms only when `full`.
    pub fn backward(
        &self,
        saved: &BlockSaved,
        dout: &[f64],
        rope: &Rope,
        full: bool,
        grads: &mut Grads,
    ) -> Result<Vec<f64>> {
        let d = self.hidden_size();
        let (b, s, h) = (saved.b, saved.s, self.heads);
        let dh = d / h;
        if dout.len() != b * s * d {
            return Err(Error::shape("block backward: upstream gradient shape"));
        }
        let prefix = self.prefix();
        let put = |name: &str, lg: LinearGrads, grads: &mut Grads| {
            if let Some(w) = lg.weight {
                grads.insert(format!("{prefix}.{name}.weight"), w);
            }
            if let Some(a) = lg.lora_a {
                grads.insert(format!("{prefix}.{name}.lora_a"), a);
            }
            if let Some(bm) = lg.lora_b {
                grads.insert(format!("{prefix}.{name}.lora_b"), bm);
            }
        };

        // MLP branch.
        let (d_act, g_down) = self.down.backward(&saved.act, &[], dout, full)?;
        put("mlp.down", g_down, grads);
        let mut dg = vec![0.0; d_act.len()];
        let mut du = vec![0.0; d_act.len()];
        for i in 0..d_act.len() {
            let gv = saved.g[i];
            let sg = sigmoid(gv);
            du[i] = d_act[i] * gv * sg;
            dg[i] = d_act[i] * saved.u[i] * sg * (1.0 + gv * (1.0 - sg));
        }
        let (mut dn2, g_gate) = self.gate.backward(saved.n2.data(), &[], &dg, full)?;
        put("mlp.gate", g_gate, grads);
        let (dn2_up, g_up) = self.up.backward(saved.n2.data(), &[], &du, full)?;
        put("mlp.up", g_up, grads);
        for (a, v) in dn2.iter_mut().zip(&dn2_up) {
            *a += v;
        }
        let (dh2_norm, dw2) =
            rms_norm_backward(&saved.h2, &self.mlp_norm, self.eps, &rows_tensor(dn2, d)?)?;
        if full {
            grads.insert(format!("{prefix}.mlp_norm.weight"), dw2);
        }
        let mut dh2 = dout.to_vec();
        for (a, v) in dh2.iter_mut().zip(dh2_norm.data()) {
            *a += v;
        }

        // Attention branch.
        let (dattn, g_o) = self.o.backward(&saved.attn, &saved.o_xa, &dh2, full)?;
        put("attn.o", g_o, grads);
        let dout_heads = Tensor::new(vec![b, h, s, dh], split_heads(&dattn, b, s, h, dh))?;
        let (dqr, dkr, dv) =
            attention_backward(&saved.qr, &saved.kr, &saved.v, &saved.probs, &dout_heads)?;
        let mut dq = dqr.into_data();
        let mut dk = dkr.into_data();
        rope.apply(&mut dq, &saved.positions, true)?;
        rope.apply(&mut dk, &saved.positions, true)?;
        let dq = merge_heads(&dq, b, s, h, dh);
        let dk = merge_heads(&dk, b, s, h, dh);
        let dv = merge_heads(dv.data(), b, s, h, dh);
        let n1 = saved.n1.data();
        let (mut dn1, g_q) = self.q.backward(n1, &saved.q_xa, &dq, full)?;
        put("attn.q", g_q, grads);
        let (dn1_k, g_k) = self.k.backward(n1, &saved.k_xa, &dk, full)?;
        put("attn.k", g_k, grads);
        let (dn1_v, g_v) = self.v.backward(n1, &saved.v_xa, &dv, full)?;
        put("attn.v", g_v, grads);
        for i in 0..dn1.len() {
            dn1[i] += dn1_k[i] + dn1_v[i];
        }
        let (dx_norm, dw1) =
            rms_norm_backward(&saved.x, &self.attn_norm, self.eps, &rows_tensor(dn1, d)?)?;
        if full {
            grads.insert(format!("{prefix}.attn_norm.weight"), dw1);
        }
        for (a, v) in dh2.iter_mut().zip(dx_norm.data()) {
            *a += v;
        }
        Ok(dh2)
    }
}
