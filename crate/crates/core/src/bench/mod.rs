//! Experiment plumbing: toy data, scoring, configuration, orchestration and
//! reports.

mod config;
mod corpus;
mod report;
mod run;
mod scoring;

pub use config::{Checks, ExperimentConfig, TrainConfig, ENV_ADDR, ENV_OUTPUT_DIR, SCHEMA_VERSION};
pub use corpus::{CorpusConfig, Sample, ToyCorpus, BOS, EOS, FIRST_CONTENT, PAD, SEP};
pub use report::{comm_report, memory_proxy, CommReport, DecodePoint, MaskSummary, MemoryProxy};
pub use run::{
    attack, attack_run_config, comm, evaluate, evaluate_corpus, generate, grid_attack, grid_partition,
    heldout_corpus, load_segments, train, training_corpus, write_json, EvalReport, GenerationRecord,
    GridCell, GridReport, JsonLines, TimingRecord, TrainSummary, Trained, ATTACK_FILE, CHECKPOINT_FILE,
    COMM_FILE, COMM_REPORT_FILE, EVAL_FILE, GENERATIONS_FILE, RECORDS_FILE, SUMMARY_FILE, TIMINGS_FILE,
};
pub use scoring::score_single_token;
