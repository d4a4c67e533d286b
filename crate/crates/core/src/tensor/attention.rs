use super::{loss::softmax_in_place, Rope, Tensor};
use crate::error::{Error, Result};
use crate::wire::MaskMeta;

/// Per-(batch, head) key or value rows, each `len × head_dim` row-major.
///
/// Lets the same attention kernel run over a freshly computed `[b,h,t,dh]`
/// tensor or over the append-only buffers of a KV cache.
pub struct KvView<'a> {
    pub heads: Vec<&'a [f64]>,
    pub len: usize,
}

impl<'a> KvView<'a> {
    pub fn contiguous(t: &'a Tensor) -> Result<Self> {
        let [b, h, len, dh] = four_dims(t)?;
        Ok(Self {
            heads: t.data().chunks(len * dh.max(1)).take(b * h).collect(),
            len,
        })
    }
}

fn four_dims(t: &Tensor) -> Result<[usize; 4]> {
    match t.shape() {
        &[b, h, s, d] => Ok([b, h, s, d]),
        other => Err(Error::shape(format!("expected [b,h,s,dh], got {other:?}"))),
    }
}

/// `[b*s, h*dh]` → `[b, h, s, dh]`.
pub fn split_heads(x: &[f64], b: usize, s: usize, h: usize, dh: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    let d = h * dh;
    for bi in 0..b {
        for si in 0..s {
            let src = &x[(bi * s + si) * d..(bi * s + si + 1) * d];
            for hi in 0..h {
                let dst = ((bi * h + hi) * s + si) * dh;
                out[dst..dst + dh].copy_from_slice(&src[hi * dh..(hi + 1) * dh]);
            }
        }
    }
    out
}

/// `[b, h, s, dh]` → `[b*s, h*dh]`.
pub fn merge_heads(x: &[f64], b: usize, s: usize, h: usize, dh: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    let d = h * dh;
    for bi in 0..b {
        for hi in 0..h {
            for si in 0..s {
                let src = ((bi * h + hi) * s + si) * dh;
                let dst = (bi * s + si) * d + hi * dh;
                out[dst..dst + dh].copy_from_slice(&x[src..src + dh]);
            }
        }
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Scaled dot-product attention of already-rotated queries over `keys`
/// and `values`, masked by the causal-plus-left-padding rule of `meta`
/// with queries sitting at absolute `positions`.
///
/// Returns `(out [b,h,s,dh], probs [b,h,s,t])`. A query row whose every
/// key is masked yields zero probabilities and a zero output.
pub fn attention_forward(
    q: &Tensor,
    keys: &KvView<'_>,
    values: &KvView<'_>,
    meta: &MaskMeta,
    positions: &[usize],
) -> Result<(Tensor, Tensor)> {
    let [b, h, s, dh] = four_dims(q)?;
    let t = keys.len;
    if keys.heads.len() != b * h || values.heads.len() != b * h || values.len != t {
        return Err(Error::shape("attention: key/value views do not match queries"));
    }
    if positions.len() != s {
        return Err(Error::shape(format!(
            "attention: {} positions for {s} queries",
            positions.len()
        )));
    }
    if meta.batch != b {
        return Err(Error::shape(format!(
            "attention: mask batch {} vs {b}",
            meta.batch
        )));
    }
    if let Some(&p) = positions.iter().find(|&&p| p >= t) {
        return Err(Error::shape(format!(
            "attention: query position {p} has no key among {t}"
        )));
    }
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; b * h * s * dh];
    let mut probs = vec![0.0; b * h * s * t];
    for bi in 0..b {
        for hi in 0..h {
            let g = bi * h + hi;
            let (kh, vh) = (keys.heads[g], values.heads[g]);
            for (qi, &pos) in positions.iter().enumerate() {
                let qrow = &q.data()[(g * s + qi) * dh..(g * s + qi + 1) * dh];
                let prow = &mut probs[(g * s + qi) * t..(g * s + qi + 1) * t];
                for (j, p) in prow.iter_mut().enumerate() {
                    *p = if meta.allows(bi, pos, j) {
                        dot(qrow, &kh[j * dh..(j + 1) * dh]) * scale
                    } else {
                        f64::NEG_INFINITY
                    };
                }
                softmax_in_place(prow);
                let orow = &mut out[(g * s + qi) * dh..(g * s + qi + 1) * dh];
                for (j, &p) in prow.iter().enumerate() {
                    if p != 0.0 {
                        for (o, v) in orow.iter_mut().zip(&vh[j * dh..(j + 1) * dh]) {
                            *o += p * v;
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(vec![b, h, s, dh], out)?,
        Tensor::new(vec![b, h, s, t], probs)?,
    ))
}

/// Backward of [`attention_forward`] for contiguous `[b,h,t,dh]` keys and
/// values. Returns `(dq, dk, dv)` w.r.t. the rotated queries and keys.
pub fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    probs: &Tensor,
    dout: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let [b, h, s, dh] = four_dims(q)?;
    let [_, _, t, _] = four_dims(k)?;
    if v.shape() != k.shape() || dout.shape() != q.shape() || probs.shape() != [b, h, s, t] {
        return Err(Error::shape("attention backward shapes"));
    }
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; q.numel()];
    let mut dk = vec![0.0; k.numel()];
    let mut dv = vec![0.0; v.numel()];
    let mut ds = vec![0.0; t];
    for g in 0..b * h {
        let kh = &k.data()[g * t * dh..(g + 1) * t * dh];
        let vh = &v.data()[g * t * dh..(g + 1) * t * dh];
        for i in 0..s {
            let prow = &probs.data()[(g * s + i) * t..(g * s + i + 1) * t];
            let grow = &dout.data()[(g * s + i) * dh..(g * s + i + 1) * dh];
            let qrow = &q.data()[(g * s + i) * dh..(g * s + i + 1) * dh];
            let mut weighted = 0.0;
            for j in 0..t {
                let p = prow[j];
                if p == 0.0 {
                    ds[j] = 0.0;
                    continue;
                }
                let dvj = &mut dv[(g * t + j) * dh..(g * t + j + 1) * dh];
                for (d, gv) in dvj.iter_mut().zip(grow) {
                    *d += p * gv;
                }
                let dp = dot(grow, &vh[j * dh..(j + 1) * dh]);
                ds[j] = dp;
                weighted += p * dp;
            }
            let dqrow = &mut dq[(g * s + i) * dh..(g * s + i + 1) * dh];
            for j in 0..t {
                let p = prow[j];
                if p == 0.0 {
                    continue;
                }
                let dsj = p * (ds[j] - weighted) * scale;
                let krow = &kh[j * dh..(j + 1) * dh];
                for (d, kv) in dqrow.iter_mut().zip(krow) {
                    *d += dsj * kv;
                }
                let dkj = &mut dk[(g * t + j) * dh..(g * t + j + 1) * dh];
                for (d, qv) in dkj.iter_mut().zip(qrow) {
                    *d += dsj * qv;
                }
            }
        }
    }
    Ok((
        Tensor::new(q.shape().to_vec(), dq)?,
        Tensor::new(k.shape().to_vec(), dk)?,
        Tensor::new(v.shape().to_vec(), dv)?,
    ))
}

fn rotated(x: &Tensor, rope: &Rope, positions: &[usize], inverse: bool) -> Result<Tensor> {
    let mut out = x.clone();
    rope.apply(out.data_mut(), positions, inverse)?;
    Ok(out)
}

/// Rotary-embedded causal self-attention over `q, k, v: [b,h,s,dh]`.
pub fn causal_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    meta: &MaskMeta,
    positions: &[usize],
    rope: &Rope,
) -> Result<Tensor> {
    if q.shape() != k.shape() || q.shape() != v.shape() {
        return Err(Error::shape("causal_attention: q, k, v shapes differ"));
    }
    let qr = rotated(q, rope, positions, false)?;
    let kr = rotated(k, rope, positions, false)?;
    let (out, _) = attention_forward(
        &qr,
        &KvView::contiguous(&kr)?,
        &KvView::contiguous(v)?,
        meta,
        positions,
    )?;
    Ok(out)
}

/// Gradients of [`causal_attention`] w.r.t. the unrotated `q, k, v`.
pub fn causal_attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    meta: &MaskMeta,
    positions: &[usize],
    rope: &Rope,
    dout: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let qr = rotated(q, rope, positions, false)?;
    let kr = rotated(k, rope, positions, false)?;
    let (_, probs) = attention_forward(
        &qr,
        &KvView::contiguous(&kr)?,
        &KvView::contiguous(v)?,
        meta,
        positions,
    )?;
    let (dqr, dkr, dv) = attention_backward(&qr, &kr, v, &probs, dout)?;
    Ok((
        rotated(&dqr, rope, positions, true)?,
        rotated(&dkr, rope, positions, true)?,
        dv,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand4(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::randn(&shape, 1.0, rng)
    }

    #[test]
    fn single_position_returns_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rope = Rope::new(4, 8, 10000.0);
        let (q, k, v) = (
            rand4([2, 2, 1, 4], &mut rng),
            rand4([2, 2, 1, 4], &mut rng),
            rand4([2, 2, 1, 4], &mut rng),
        );
        let meta = MaskMeta::uniform(1, 0, 2).unwrap();
        let out = causal_attention(&q, &k, &v, &meta, &[0], &rope).unwrap();
        assert!(out.max_abs_diff(&v) < 1e-15);
    }

    #[test]
    fn heads_roundtrip() {
        let x: Vec<f64> = (0..24).map(f64::from).collect();
        let split = split_heads(&x, 2, 3, 2, 2);
        assert_eq!(merge_heads(&split, 2, 3, 2, 2), x);
    }

    #[test]
    fn later_tokens_never_change_earlier_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let rope = Rope::new(4, 16, 10000.0);
        let shape = [1, 2, 5, 4];
        let (q, k, v) = (rand4(shape, &mut rng), rand4(shape, &mut rng), rand4(shape, &mut rng));
        let meta = MaskMeta::uniform(5, 1, 1).unwrap();
        let pos: Vec<usize> = (0..5).collect();
        let base = causal_attention(&q, &k, &v, &meta, &pos, &rope).unwrap();
        let (mut q2, mut k2, mut v2) = (q.clone(), k.clone(), v.clone());
        for g in 0..2 {
            for d in 0..4 {
                let idx = (g * 5 + 4) * 4 + d;
                q2.data_mut()[idx] += 3.0;
                k2.data_mut()[idx] -= 2.0;
                v2.data_mut()[idx] *= 5.0;
            }
        }
        let changed = causal_attention(&q2, &k2, &v2, &meta, &pos, &rope).unwrap();
        for g in 0..2 {
            for i in 0..4 {
                let r = (g * 5 + i) * 4..(g * 5 + i + 1) * 4;
                assert_eq!(&base.data()[r.clone()], &changed.data()[r]);
            }
        }
    }
}
