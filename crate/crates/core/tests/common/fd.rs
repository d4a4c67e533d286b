//! One random finite-difference instance per op; each returns the worst
//! relative error over that op's gradients.

use fedsplit::model::{build_monolithic, GradMode, SegmentInput};
use fedsplit::tensor::{
    causal_attention, causal_attention_backward, matmul, matmul_backward, rms_norm,
    rms_norm_backward, silu, silu_backward, softmax_cross_entropy, Rope, Tensor,
};
use fedsplit::wire::MaskMeta;
use rand::Rng;

use super::{central_diff, dot, randn_vec, rel_err, rng, tiny_config};

fn dim(r: &mut impl Rng) -> usize {
    r.random_range(1..=8)
}

pub fn matmul_case(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (m, k, n) = (dim(&mut r), dim(&mut r), dim(&mut r));
    let a = Tensor::new(vec![m, k], randn_vec(m * k, &mut r)).unwrap();
    let b = Tensor::new(vec![k, n], randn_vec(k * n, &mut r)).unwrap();
    let w = randn_vec(m * n, &mut r);
    let dc = Tensor::new(vec![m, n], w.clone()).unwrap();
    let (da, db) = matmul_backward(&a, &b, &dc).unwrap();
    let fa = central_diff(
        &mut |x| {
            let at = Tensor::new(vec![m, k], x.to_vec()).unwrap();
            dot(matmul(&at, &b).unwrap().data(), &w)
        },
        a.data(),
    );
    let fb = central_diff(
        &mut |x| {
            let bt = Tensor::new(vec![k, n], x.to_vec()).unwrap();
            dot(matmul(&a, &bt).unwrap().data(), &w)
        },
        b.data(),
    );
    rel_err(da.data(), &fa).max(rel_err(db.data(), &fb))
}

pub fn rms_norm_case(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (rows, d) = (dim(&mut r), dim(&mut r));
    let x = Tensor::new(vec![rows, d], randn_vec(rows * d, &mut r)).unwrap();
    let wt = Tensor::new(vec![d], randn_vec(d, &mut r)).unwrap();
    let proj = randn_vec(rows * d, &mut r);
    let eps = 1e-6;
    let dy = Tensor::new(vec![rows, d], proj.clone()).unwrap();
    let (dx, dw) = rms_norm_backward(&x, &wt, eps, &dy).unwrap();
    let fx = central_diff(
        &mut |v| {
            let xt = Tensor::new(vec![rows, d], v.to_vec()).unwrap();
            dot(rms_norm(&xt, &wt, eps).unwrap().data(), &proj)
        },
        x.data(),
    );
    let fw = central_diff(
        &mut |v| {
            let w2 = Tensor::new(vec![d], v.to_vec()).unwrap();
            dot(rms_norm(&x, &w2, eps).unwrap().data(), &proj)
        },
        wt.data(),
    );
    rel_err(dx.data(), &fx).max(rel_err(dw.data(), &fw))
}

pub fn silu_case(seed: u64) -> f64 {
    let mut r = rng(seed);
    let n = dim(&mut r) * dim(&mut r);
    let x = Tensor::new(vec![n], randn_vec(n, &mut r).iter().map(|v| 3.0 * v).collect()).unwrap();
    let proj = randn_vec(n, &mut r);
    let dx = silu_backward(&x, &Tensor::new(vec![n], proj.clone()).unwrap()).unwrap();
    let f = central_diff(
        &mut |v| dot(silu(&Tensor::new(vec![n], v.to_vec()).unwrap()).data(), &proj),
        x.data(),
    );
    rel_err(dx.data(), &f)
}

pub fn cross_entropy_case(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (rows, v) = (dim(&mut r), dim(&mut r) + 1);
    let logits = Tensor::new(vec![rows, v], randn_vec(rows * v, &mut r)).unwrap();
    let ignore = u32::MAX;
    let mut targets: Vec<u32> = (0..rows).map(|_| r.random_range(0..v as u32)).collect();
    if rows > 1 && r.random_bool(0.5) {
        targets[0] = ignore;
    }
    let (_, grad) = softmax_cross_entropy(&logits, &targets, ignore).unwrap();
    let f = central_diff(
        &mut |x| {
            let l = Tensor::new(vec![rows, v], x.to_vec()).unwrap();
            softmax_cross_entropy(&l, &targets, ignore).unwrap().0
        },
        logits.data(),
    );
    rel_err(grad.data(), &f)
}

pub fn attention_case(seed: u64) -> f64 {
    let mut r = rng(seed);
    let b = r.random_range(1..=3);
    let h = r.random_range(1..=3);
    let s = dim(&mut r);
    let dh = 2 * r.random_range(1..=4);
    let pads: Vec<usize> = (0..b).map(|_| r.random_range(0..s)).collect();
    let meta = MaskMeta::per_row(s, pads).unwrap();
    let rope = Rope::new(dh, 16, 10000.0);
    let positions: Vec<usize> = (0..s).collect();
    let shape = vec![b, h, s, dh];
    let n = b * h * s * dh;
    let q = Tensor::new(shape.clone(), randn_vec(n, &mut r)).unwrap();
    let k = Tensor::new(shape.clone(), randn_vec(n, &mut r)).unwrap();
    let v = Tensor::new(shape.clone(), randn_vec(n, &mut r)).unwrap();
    let proj = randn_vec(n, &mut r);
    let dout = Tensor::new(shape.clone(), proj.clone()).unwrap();
    let (dq, dk, dv) =
        causal_attention_backward(&q, &k, &v, &meta, &positions, &rope, &dout).unwrap();
    let f = |q: &Tensor, k: &Tensor, v: &Tensor| {
        dot(
            causal_attention(q, k, v, &meta, &positions, &rope)
                .unwrap()
                .data(),
            &proj,
        )
    };
    let fq = central_diff(
        &mut |x| f(&Tensor::new(shape.clone(), x.to_vec()).unwrap(), &k, &v),
        q.data(),
    );
    let fk = central_diff(
        &mut |x| f(&q, &Tensor::new(shape.clone(), x.to_vec()).unwrap(), &v),
        k.data(),
    );
    let fv = central_diff(
        &mut |x| f(&q, &k, &Tensor::new(shape.clone(), x.to_vec()).unwrap()),
        v.data(),
    );
    rel_err(dq.data(), &fq)
        .max(rel_err(dk.data(), &fk))
        .max(rel_err(dv.data(), &fv))
}

/// Whole-model check: every parameter gradient (full mode) of a tiny
/// monolithic model with nonzero adapters, against finite differences of
/// the cross-entropy loss.
pub fn model_case(seed: u64) -> f64 {
    // Unit-scale embeddings keep the central-difference step well inside the
    // RMSNorm's linear regime.
    let cfg = fedsplit::model::ModelConfig {
        embed_std: 1.0,
        ..tiny_config()
    };
    let mut model = build_monolithic(&cfg, seed).unwrap();
    let mut r = rng(seed ^ 0xabc);
    model.visit_params_mut(&mut |name, t| {
        if name.ends_with("lora_b") || name.ends_with("norm.weight") {
            for v in t.data_mut() {
                *v = 0.5 * r.random::<f64>() + if name.ends_with("norm.weight") { 0.75 } else { -0.25 };
            }
        }
    });
    let (b, s) = (2, 5);
    let ids: Vec<u32> = (0..b * s).map(|_| r.random_range(0..cfg.vocab_size as u32)).collect();
    let targets: Vec<u32> = (0..b * s).map(|_| r.random_range(0..cfg.vocab_size as u32)).collect();
    let meta = MaskMeta::per_row(s, vec![0, 2]).unwrap();
    let positions: Vec<usize> = (0..s).collect();
    let loss_of = |m: &fedsplit::model::SegmentModel| {
        let logits = m
            .forward(SegmentInput::Tokens { ids: &ids, batch: b }, &meta, &positions, None)
            .unwrap();
        let flat = logits.reshape(&[b * s, cfg.vocab_size]).unwrap();
        softmax_cross_entropy(&flat, &targets, u32::MAX).unwrap().0
    };
    let (logits, tape) = model
        .forward_train(SegmentInput::Tokens { ids: &ids, batch: b }, &meta, &positions)
        .unwrap();
    let flat = logits.reshape(&[b * s, cfg.vocab_size]).unwrap();
    let (_, dlogits) = softmax_cross_entropy(&flat, &targets, u32::MAX).unwrap();
    let dlogits = dlogits.reshape(&[b, s, cfg.vocab_size]).unwrap();
    let grads = model.backward(tape, &dlogits, GradMode::Full).unwrap().params;
    let mut worst: f64 = 0.0;
    for (name, param) in model.named_params() {
        let analytic = grads.get(&name).unwrap_or_else(|| panic!("no grad for {name}"));
        let numeric = central_diff(
            &mut |x| {
                let mut m = model.clone();
                let t = Tensor::new(param.shape().to_vec(), x.to_vec()).unwrap();
                m.set_params([(&name, &t)]).unwrap();
                loss_of(&m)
            },
            param.data(),
        );
        worst = worst.max(rel_err(analytic.data(), &numeric));
    }
    worst
}
