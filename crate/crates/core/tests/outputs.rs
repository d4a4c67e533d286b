use std::path::Path;

use fedsplit::bench::{self, ExperimentConfig};
use fedsplit::model::{ModelConfig, PartitionSpec};
use fedsplit::parallel::StrategyMode;
use serde_json::Value;

fn tiny_experiment(dir: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.output_dir = dir.to_path_buf();
    cfg.model = ModelConfig {
        vocab_size: 48,
        hidden_size: 16,
        num_heads: 2,
        num_blocks: 3,
        mlp_hidden: 24,
        max_context: 32,
        ..ModelConfig::default()
    };
    cfg.partition = PartitionSpec::new(1, 1, 1);
    cfg.corpus.samples = 16;
    cfg.corpus.alphabet = 16;
    cfg.train.steps = 6;
    cfg.train.batch_size = 4;
    cfg.generation.max_new_tokens = 4;
    cfg.checks.cache_identity = true;
    cfg
}

fn schema(name: &str) -> jsonschema::Validator {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join(format!("schemas/{name}.schema.json"));
    let text = std::fs::read_to_string(&path).unwrap();
    jsonschema::validator_for(&serde_json::from_str(&text).unwrap()).unwrap()
}

fn check(name: &str, value: &Value) {
    let v = schema(name);
    let errors: Vec<String> = v.iter_errors(value).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{name}: {errors:?}");
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn read_lines(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn every_output_matches_its_schema() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_experiment(dir.path());
    bench::train(&cfg, None).unwrap();
    bench::evaluate(&cfg).unwrap();
    bench::generate(&cfg, 3).unwrap();
    bench::comm(&cfg, &[16, 48]).unwrap();
    bench::attack(&cfg).unwrap();
    let d = dir.path();
    let records = read_lines(&d.join(bench::RECORDS_FILE));
    assert_eq!(records.len(), 6);
    records.iter().for_each(|r| check("train_record", r));
    read_lines(&d.join(bench::TIMINGS_FILE))
        .iter()
        .for_each(|r| check("timing", r));
    let gens = read_lines(&d.join(bench::GENERATIONS_FILE));
    assert_eq!(gens.len(), 3);
    gens.iter().for_each(|r| check("generation", r));
    check("train_summary", &read_json(&d.join(bench::SUMMARY_FILE)));
    check("comm_stats", &read_json(&d.join(bench::COMM_FILE)));
    check("eval_report", &read_json(&d.join(bench::EVAL_FILE)));
    check("attack_report", &read_json(&d.join(bench::ATTACK_FILE)));
    check("comm_report", &read_json(&d.join(bench::COMM_REPORT_FILE)));
}

#[test]
fn schemas_reject_missing_fields() {
    let v = schema("train_record");
    assert!(!v.is_valid(&serde_json::json!({"step": 0, "client_id": 0})));
}

#[test]
fn saved_config_reloads_to_the_same_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_experiment(dir.path());
    bench::train(&cfg, None).unwrap();
    let reloaded = ExperimentConfig::load(&dir.path().join("config.toml")).unwrap();
    assert_eq!(reloaded.to_toml(), cfg.to_toml());
}

fn records_of(cfg: &ExperimentConfig) -> Vec<u8> {
    bench::train(cfg, None).unwrap();
    std::fs::read(cfg.output_dir.join(bench::RECORDS_FILE)).unwrap()
}

#[test]
fn same_config_gives_byte_identical_records() {
    for mode in [StrategyMode::Sequential, StrategyMode::ClientBatch, StrategyMode::ServerHierarchical] {
        let (x, y) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let mut a = tiny_experiment(x.path());
        a.strategy.mode = mode;
        a.strategy.clients = 2;
        a.strategy.sync_interval = 2;
        let mut b = a.clone();
        b.output_dir = y.path().to_path_buf();
        let (ra, rb) = (records_of(&a), records_of(&b));
        assert!(!ra.is_empty());
        assert!(ra == rb, "{mode:?} records differ between identical runs");
        let ca = std::fs::read(x.path().join(bench::CHECKPOINT_FILE)).unwrap();
        let cb = std::fs::read(y.path().join(bench::CHECKPOINT_FILE)).unwrap();
        assert!(ca == cb, "{mode:?} checkpoints differ");
    }
}

#[test]
fn eval_reads_back_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_experiment(dir.path());
    let before = bench::evaluate(&cfg).unwrap();
    assert!(!before.from_checkpoint);
    bench::train(&cfg, None).unwrap();
    let after = bench::evaluate(&cfg).unwrap();
    assert!(after.from_checkpoint);
    assert_eq!(after.cache_score_max_diff, 0.0);
}

#[test]
fn dataset_with_out_of_range_ids_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_experiment(dir.path());
    let path = dir.path().join("data.json");
    let mut corpus = bench::ToyCorpus::generate(&cfg.corpus, cfg.model.vocab_size).unwrap();
    std::fs::write(&path, serde_json::to_string(&corpus).unwrap()).unwrap();
    cfg.dataset = Some(path.clone());
    assert_eq!(bench::training_corpus(&cfg).unwrap().len(), corpus.len());
    corpus.samples[0].tokens[1] = 48;
    std::fs::write(&path, serde_json::to_string(&corpus).unwrap()).unwrap();
    assert!(matches!(
        bench::training_corpus(&cfg),
        Err(fedsplit::Error::TokenId { id: 48, vocab: 48 })
    ));
}

#[test]
fn partition_grid_needs_seven_blocks() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_experiment(dir.path());
    assert!(matches!(bench::grid_partition(&cfg), Err(fedsplit::Error::Config(_))));
}
