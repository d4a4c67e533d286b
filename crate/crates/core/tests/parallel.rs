mod common;

use std::sync::{Arc, Mutex};
use std::time::Duration;

use common::{client_msgs, random_batch, rng, tiny_config};
use fedsplit::model::{build_partitioned, Grads, PartitionSpec, SegmentModel};
use fedsplit::parallel::{
    client_batch_backward, client_batch_step, run_client_batch, Hierarchy, StrategyConfig, StrategyMode,
};
use fedsplit::tensor::Tensor;
use fedsplit::train::{run_sequential_round, Federation, FederationConfig, ServeMode, ServerNode};
use fedsplit::wire::{decode, GradMsg, Message, MessageClass};
use fedsplit::Error;

fn server_segment(seed: u64) -> SegmentModel {
    let cfg = tiny_config();
    build_partitioned(&cfg, PartitionSpec::new(1, 1, 1), seed).unwrap().1
}

fn grads_for(msgs: &[fedsplit::wire::HiddenStateMsg], r: &mut rand_chacha::ChaCha8Rng) -> Vec<GradMsg> {
    msgs.iter()
        .map(|m| GradMsg {
            client_id: m.client_id,
            step_id: 0,
            grad: Tensor::randn(m.hidden.shape(), 1.0, r),
        })
        .collect()
}

#[test]
fn client_batch_matches_solo_forwards_and_summed_grads() {
    let d = tiny_config().hidden_size;
    for m in [1, 2, 4, 8] {
        let mut r = rng(m as u64);
        let seg = server_segment(3);
        let msgs = client_msgs(m, 2, 5, d, &mut r);
        let grads = grads_for(&msgs, &mut r);
        let mut batched = ServerNode::new(seg.clone(), 0.0);
        let replies = client_batch_step(&mut batched, &msgs).unwrap();
        let back = client_batch_backward(&mut batched, &grads).unwrap();
        let mut sum: Option<Grads> = None;
        for i in 0..m {
            let mut solo = ServerNode::new(seg.clone(), 0.0);
            let h = solo.server_forward(&msgs[i]).unwrap();
            assert_eq!(replies[i].client_id, i as u64);
            assert!(replies[i].hidden.max_abs_diff(&h.hidden) < 1e-12);
            let g = solo.server_backward(&grads[i]).unwrap();
            assert!(back[i].grad.max_abs_diff(&g.grad) < 1e-12);
            let sg = solo.last_grads().unwrap().clone();
            sum = Some(match sum {
                None => sg,
                Some(acc) => acc.add(&sg).unwrap(),
            });
        }
        let err = batched.last_grads().unwrap().max_rel_err(&sum.unwrap());
        assert!(err < 1e-10, "M={m}: {err}");
    }
}

#[test]
fn arrival_order_does_not_matter() {
    let d = tiny_config().hidden_size;
    let mut r = rng(9);
    let msgs = client_msgs(4, 1, 4, d, &mut r);
    let grads = grads_for(&msgs, &mut r);
    let run = |perm: &[usize]| {
        let mut s = ServerNode::new(server_segment(1), 0.1);
        let ms: Vec<_> = perm.iter().map(|i| msgs[*i].clone()).collect();
        let gs: Vec<_> = perm.iter().rev().map(|i| grads[*i].clone()).collect();
        let h = client_batch_step(&mut s, &ms).unwrap();
        let g = client_batch_backward(&mut s, &gs).unwrap();
        (h, g, s.segment.lora_params())
    };
    let (h0, g0, p0) = run(&[0, 1, 2, 3]);
    let (h1, g1, p1) = run(&[2, 0, 3, 1]);
    assert_eq!(h0, h1);
    assert_eq!(g0, g1);
    assert_eq!(p0, p1);
}

#[test]
fn zero_gradient_client_contributes_nothing() {
    let d = tiny_config().hidden_size;
    let mut r = rng(4);
    let msgs = client_msgs(2, 1, 4, d, &mut r);
    let mut grads = grads_for(&msgs, &mut r);
    grads[1].grad = Tensor::zeros(msgs[1].hidden.shape());
    let mut both = ServerNode::new(server_segment(2), 0.0);
    client_batch_step(&mut both, &msgs).unwrap();
    let back = client_batch_backward(&mut both, &grads).unwrap();
    assert!(back[1].grad.data().iter().all(|v| *v == 0.0));
    let mut solo = ServerNode::new(server_segment(2), 0.0);
    solo.server_forward(&msgs[0]).unwrap();
    solo.server_backward(&grads[0]).unwrap();
    assert!(both.last_grads().unwrap().max_rel_err(solo.last_grads().unwrap()) < 1e-12);
}

#[test]
fn mismatched_sequence_lengths_are_rejected() {
    let d = tiny_config().hidden_size;
    let mut r = rng(5);
    let mut msgs = client_msgs(1, 1, 4, d, &mut r);
    let mut other = client_msgs(1, 1, 6, d, &mut r).remove(0);
    other.client_id = 1;
    msgs.push(other);
    let mut s = ServerNode::new(server_segment(2), 0.0);
    assert!(matches!(client_batch_step(&mut s, &msgs), Err(Error::BatchIncompatible(_))));
}

#[test]
fn missing_client_gradient_times_out() {
    let cfg = tiny_config();
    let mut fc = FederationConfig::new(cfg.clone(), PartitionSpec::new(1, 1, 1), 0, 2);
    fc.mode = ServeMode::ClientBatch {
        clients: 2,
        timeout: Duration::from_millis(200),
    };
    let mut fed = Federation::start(&fc).unwrap();
    let batch = random_batch(cfg.vocab_size, 1, 6, &mut rng(1));
    let err = fed.clients[0].train_step(&batch).unwrap_err();
    assert!(matches!(err, Error::BarrierTimeout { .. }), "{err}");
}

#[test]
fn client_batch_training_runs_end_to_end() {
    let cfg = tiny_config();
    let strategy = StrategyConfig {
        mode: StrategyMode::ClientBatch,
        clients: 3,
        ..StrategyConfig::default()
    };
    let mut fc = FederationConfig::new(cfg.clone(), PartitionSpec::new(1, 1, 1), 0, 3);
    fc.mode = strategy.serve_mode();
    let mut fed = Federation::start(&fc).unwrap();
    let batches: Vec<_> = {
        let mut r = rng(2);
        (0..12).map(|_| random_batch(cfg.vocab_size, 2, 7, &mut r)).collect()
    };
    let out = run_client_batch(&mut fed.clients, 4, &|c, s| batches[3 * s + c].clone(), None);
    assert!(out.error.is_none(), "{:?}", out.error.map(|e| e.to_string()));
    assert_eq!(out.records.len(), 12);
    let server = fed.server.lock().unwrap();
    assert_eq!(server.forwards(), 12);
    assert_eq!(server.backwards(), 12);
}

#[test]
fn hierarchical_single_branch_matches_sequential() {
    let cfg = tiny_config();
    let fc = FederationConfig::new(cfg.clone(), PartitionSpec::new(1, 1, 1), 6, 1);
    let batches: Vec<_> = {
        let mut r = rng(6);
        (0..8).map(|_| random_batch(cfg.vocab_size, 2, 7, &mut r)).collect()
    };
    let mut seq = Federation::start(&fc).unwrap();
    let a = run_sequential_round(&mut seq.clients, 8, &mut |_, s| batches[s].clone(), None, &mut |_| {});
    let strategy = StrategyConfig {
        mode: StrategyMode::ServerHierarchical,
        clients: 1,
        sync_interval: 3,
        ..StrategyConfig::default()
    };
    let mut h = Hierarchy::start(&fc, strategy).unwrap();
    let b = h.run(8, &|_, s| batches[s].clone(), None, &mut |_| {});
    assert_eq!(common::loss_bits(&a.records), common::loss_bits(&b.records));
    assert_eq!(b.merges.len(), 3);
}

#[test]
fn identical_branches_merge_to_themselves() {
    let cfg = tiny_config();
    let fc = FederationConfig::new(cfg.clone(), PartitionSpec::new(1, 1, 1), 2, 1);
    let batch = random_batch(cfg.vocab_size, 2, 7, &mut rng(0));
    let strategy = StrategyConfig {
        mode: StrategyMode::ServerHierarchical,
        clients: 2,
        sync_interval: 4,
        ..StrategyConfig::default()
    };
    let mut h = Hierarchy::start(&fc, strategy).unwrap();
    h.capture_snapshots = true;
    let out = h.run(4, &|_, _| batch.clone(), None, &mut |_| {});
    let ev = &out.merges[0];
    let before = ev.before.as_ref().unwrap();
    assert_eq!(before[0], before[1]);
    assert_eq!(before[0], ev.merged);
}

#[test]
fn merge_is_elementwise_mean_of_snapshots() {
    let cfg = tiny_config();
    let fc = FederationConfig::new(cfg.clone(), PartitionSpec::new(1, 1, 1), 2, 1);
    let shards: Vec<Vec<_>> = (0..2)
        .map(|i| {
            let mut r = rng(100 + i);
            (0..20).map(|_| random_batch(cfg.vocab_size, 2, 7, &mut r)).collect()
        })
        .collect();
    let strategy = StrategyConfig {
        mode: StrategyMode::ServerHierarchical,
        clients: 2,
        sync_interval: 10,
        ..StrategyConfig::default()
    };
    let mut h = Hierarchy::start(&fc, strategy).unwrap();
    h.capture_snapshots = true;
    let out = h.run(20, &|c, s| shards[c][s].clone(), None, &mut |_| {});
    assert!(out.failures.is_empty());
    assert_eq!(out.merges.len(), 2);
    for ev in &out.merges {
        let before = ev.before.as_ref().unwrap();
        assert_ne!(before[0], before[1]);
        for (k, (name, merged)) in ev.merged.iter().enumerate() {
            let (x, y) = (&before[0][k].1, &before[1][k].1);
            assert_eq!(&before[0][k].0, name);
            let mean: Vec<f64> = x.data().iter().zip(y.data()).map(|(a, b)| (a + b) / 2.0).collect();
            assert_eq!(merged.data(), &mean[..], "{name}");
        }
    }
    let branches = h.shutdown().unwrap();
    assert_eq!(branches[0].1.lora_params(), out.merges[1].merged);
    assert_eq!(branches[1].1.lora_params(), out.merges[1].merged);
}

#[test]
fn failed_branch_is_excluded_from_later_merges() {
    let cfg = tiny_config();
    let fc = FederationConfig::new(cfg.clone(), PartitionSpec::new(1, 1, 1), 2, 1);
    let good = random_batch(cfg.vocab_size, 1, 6, &mut rng(1));
    let mut bad = good.clone();
    bad.tokens[0] = 10_000;
    let strategy = StrategyConfig {
        mode: StrategyMode::ServerHierarchical,
        clients: 3,
        sync_interval: 2,
        ..StrategyConfig::default()
    };
    let mut h = Hierarchy::start(&fc, strategy).unwrap();
    let out = h.run(4, &|c, s| if c == 1 && s == 1 { bad.clone() } else { good.clone() }, None, &mut |_| {});
    assert_eq!(out.failures.len(), 1);
    assert_eq!(out.failures[0].0, 1);
    assert_eq!(out.merges[0].participants, vec![0, 2]);
    assert_eq!(out.records.len(), 2 + 1 + 2 + 2 + 2);
}

#[test]
fn frames_never_carry_tokens() {
    let cfg = tiny_config();
    let fc = FederationConfig::new(cfg.clone(), PartitionSpec::new(1, 1, 1), 0, 1);
    let (a, b, c) = build_partitioned(&cfg, fc.spec, 0).unwrap();
    let log = Arc::new(Mutex::new(Vec::new()));
    let mut fed = Federation::start_with(&fc, a, b, c, vec![Some(log.clone())]).unwrap();
    let batch = random_batch(cfg.vocab_size, 2, 7, &mut rng(3));
    fed.clients[0].train_step(&batch).unwrap();
    let frames = log.lock().unwrap();
    assert_eq!(frames.len(), 4);
    for (dir, f) in frames.iter() {
        let msg = decode(f).unwrap();
        assert!(matches!(msg.class(), MessageClass::HiddenState | MessageClass::Grad), "{dir:?}");
        if let Message::HiddenState(h) = msg {
            assert_eq!(h.hidden.last_dim(), cfg.hidden_size);
        }
    }
}
