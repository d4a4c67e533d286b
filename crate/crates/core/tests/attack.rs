mod common;

use std::sync::{Arc, Mutex};

use fedsplit::attack::{run_attack, AttackConfig, AttackRunConfig};
use fedsplit::bench::{CorpusConfig, ToyCorpus};
use fedsplit::model::{ModelConfig, PartitionSpec};
use fedsplit::train::{Batch, NoiseConfig};
use fedsplit::wire::FrameLog;
use fedsplit::Error;

fn small_model() -> ModelConfig {
    ModelConfig {
        vocab_size: 40,
        hidden_size: 16,
        num_heads: 2,
        num_blocks: 3,
        mlp_hidden: 24,
        max_context: 24,
        ..ModelConfig::default()
    }
}

fn corpora(vocab: usize) -> (Vec<Batch>, Vec<Batch>) {
    let cfg = CorpusConfig {
        samples: 16,
        alphabet: 16,
        ..CorpusConfig::default()
    };
    let mal = ToyCorpus::generate(&cfg, vocab).unwrap().batches(4).unwrap();
    let honest = ToyCorpus::generate(&CorpusConfig { seed: 99, ..cfg }, vocab)
        .unwrap()
        .batches(4)
        .unwrap();
    (mal, honest)
}

fn run_config(spec: PartitionSpec, delta: f64, steps: usize) -> AttackRunConfig {
    AttackRunConfig {
        model: small_model(),
        spec,
        seed: 3,
        lr: 0.3,
        noise: NoiseConfig::forward(delta, 5),
        steps,
        attack: AttackConfig::default(),
    }
}

#[test]
fn a_single_client_cannot_be_attacked() {
    let (mal, honest) = corpora(40);
    let r = run_attack(&run_config(PartitionSpec::new(1, 1, 1), 0.0, 4), 1, &mal, &honest, true, None);
    assert!(matches!(r, Err(Error::ThreatModel(_))));
}

#[test]
fn the_attack_is_invisible_to_the_honest_client() {
    let (mal, honest) = corpora(40);
    let cfg = run_config(PartitionSpec::new(1, 1, 1), 0.02, 12);
    let run = |with_attack| {
        let log: FrameLog = Arc::new(Mutex::new(Vec::new()));
        let r = run_attack(&cfg, 2, &mal, &honest, with_attack, Some(log.clone())).unwrap();
        let frames = log.lock().unwrap().clone();
        (r.honest_losses, frames)
    };
    let (loss_on, frames_on) = run(true);
    let (loss_off, frames_off) = run(false);
    // 12 steps, two round trips each, both directions.
    assert_eq!(frames_on.len(), 48);
    assert!(frames_on == frames_off, "honest client's frames changed under attack");
    assert_eq!(common::loss_bits_of(&loss_on), common::loss_bits_of(&loss_off));
}

#[test]
fn report_fields_are_consistent() {
    let (mal, honest) = corpora(40);
    let r = run_attack(&run_config(PartitionSpec::new(1, 1, 1), 0.0, 16), 2, &mal, &honest, true, None).unwrap();
    assert_eq!(r.p, 1);
    assert_eq!(r.chance, 1.0 / 40.0);
    assert!(r.evaluated_tokens > 0);
    assert_eq!(r.honest_losses.len(), 16);
    assert!((0.0..=1.0).contains(&r.token_accuracy));
    assert_eq!(r.token_accuracy_x100, 100.0 * r.token_accuracy);
    assert!(r.attack_loss_last < r.attack_loss_first);
}

#[test]
fn embedding_only_split_leaks_tokens() {
    let (mal, honest) = corpora(40);
    let mut cfg = run_config(PartitionSpec::embedding_only(3), 0.0, 120);
    cfg.attack.lr = 1e-2;
    let r = run_attack(&cfg, 2, &mal, &honest, true, None).unwrap();
    assert!(r.token_accuracy > 0.9, "accuracy {}", r.token_accuracy);
}
