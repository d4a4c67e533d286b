mod common;

use fedsplit::model::{build_monolithic, build_partitioned, ModelConfig, PartitionSpec};
use fedsplit::tensor::Tensor;
use fedsplit::wire::{
    compress_mask, decode, encode, reconstruct_mask, CacheStepMsg, ControlCode, ControlMsg, GradMsg,
    HiddenStateMsg, MaskField, MaskMeta, Message, FRAME_OVERHEAD,
};
use proptest::prelude::*;

fn finite() -> impl Strategy<Value = f64> {
    prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO | prop::num::f64::INFINITE
}

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(finite(), n).prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
}

fn mask_meta() -> impl Strategy<Value = MaskMeta> {
    (1usize..40, 1usize..6).prop_flat_map(|(s, b)| {
        prop::collection::vec(0..s, b).prop_map(move |pads| MaskMeta::per_row(s, pads).unwrap())
    })
}

fn hidden_msg() -> impl Strategy<Value = HiddenStateMsg> {
    (1usize..4, 1usize..6, 1usize..5, any::<bool>()).prop_flat_map(|(b, s, d, full)| {
        let pads = prop::collection::vec(0..s, b);
        (any::<u64>(), any::<u64>(), any::<u64>(), pads, tensor(vec![b, s, d]), 0usize..1000).prop_map(
            move |(client_id, step_id, session_id, pads, hidden, offset)| {
                let meta = MaskMeta::per_row(s, pads).unwrap();
                let mask = if full {
                    MaskField::Full(reconstruct_mask(&meta).unwrap())
                } else {
                    MaskField::Meta(meta)
                };
                HiddenStateMsg {
                    client_id,
                    step_id,
                    session_id,
                    positions: (offset..offset + s).collect(),
                    mask,
                    hidden,
                }
            },
        )
    })
}

fn message() -> impl Strategy<Value = Message> {
    let grad = (any::<u64>(), any::<u64>(), 1usize..4, 1usize..6, 1usize..5).prop_flat_map(|(c, st, b, s, d)| {
        tensor(vec![b, s, d]).prop_map(move |grad| {
            Message::Grad(GradMsg {
                client_id: c,
                step_id: st,
                grad,
            })
        })
    });
    let cache = (any::<u64>(), any::<u64>(), 0usize..4096, 1usize..4, 1usize..5).prop_flat_map(|(se, st, pos, b, d)| {
        tensor(vec![b, 1, d]).prop_map(move |h| Message::CacheStep(CacheStepMsg::new(se, st, pos, h).unwrap()))
    });
    let codes = prop::sample::select(vec![
        ControlCode::Ack,
        ControlCode::Error,
        ControlCode::BarrierTimeout,
        ControlCode::CloseSession,
        ControlCode::Shutdown,
    ]);
    let control =
        (codes, any::<u64>(), ".{0,40}").prop_map(|(code, arg, detail)| Message::Control(ControlMsg { code, arg, detail }));
    prop_oneof![
        hidden_msg().prop_map(Message::HiddenState),
        hidden_msg().prop_map(Message::Prefill),
        hidden_msg().prop_map(Message::Infer),
        grad,
        cache,
        control,
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn mask_metadata_roundtrips_through_full_mask(meta in mask_meta()) {
        let full = reconstruct_mask(&meta).unwrap();
        let back = compress_mask(&full).unwrap();
        prop_assert_eq!(&back, &meta);
        let s = meta.seq_len;
        for b in 0..meta.batch {
            let pad = meta.pad_len(b);
            for i in 0..s {
                for j in 0..s {
                    let open = full.data()[(b * s + i) * s + j] == 0.0;
                    prop_assert_eq!(open, pad <= j && j <= i);
                }
            }
        }
    }

    #[test]
    fn codec_roundtrips_every_message(msg in message()) {
        let bytes = encode(&msg);
        prop_assert!(bytes.len() >= FRAME_OVERHEAD);
        prop_assert_eq!(decode(&bytes).unwrap(), msg);
    }

    #[test]
    fn any_flipped_bit_is_rejected(msg in message(), at in any::<prop::sample::Index>(), bit in 0u8..8) {
        let mut bytes = encode(&msg);
        let i = at.index(bytes.len());
        bytes[i] ^= 1 << bit;
        prop_assert!(decode(&bytes).is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn partition_preserves_parameters(n in 3usize..9, seed in any::<u64>(), pick in any::<prop::sample::Index>()) {
        let cfg = ModelConfig {
            num_blocks: n,
            ..common::tiny_config()
        };
        let specs = PartitionSpec::all(n);
        let spec = specs[pick.index(specs.len())];
        let whole = build_monolithic(&cfg, seed).unwrap();
        let (a, b, c) = build_partitioned(&cfg, spec, seed).unwrap();
        prop_assert_eq!(a.param_count() + b.param_count() + c.param_count(), whole.param_count());
        prop_assert_eq!(
            a.lora_param_count() + b.lora_param_count() + c.lora_param_count(),
            whole.lora_param_count()
        );
        let mut parts: Vec<(String, Tensor)> = [&a, &b, &c].iter().flat_map(|m| m.named_params()).collect();
        let mut full = whole.named_params();
        parts.sort_by(|x, y| x.0.cmp(&y.0));
        full.sort_by(|x, y| x.0.cmp(&y.0));
        prop_assert_eq!(parts, full);
    }
}
