use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;
use std::time::Instant;

use serde::Serialize;

use super::config::ExperimentConfig;
use super::corpus::{Sample, ToyCorpus, FIRST_CONTENT};
use super::report::{comm_report, memory_proxy, CommReport, MemoryProxy};
use super::scoring::score_single_token;
use crate::attack::{run_attack, AttackReport, AttackRunConfig};
use crate::error::{Error, Result};
use crate::model::{checkpoint, PartitionSpec, SegmentModel};
use crate::parallel::{run_client_batch, Hierarchy, StrategyMode};
use crate::train::{
    run_sequential_round, split_segments, Batch, Federation, FederationConfig, RoundOutcome, TrainStepRecord,
};
use crate::wire::CommSnapshot;

pub const RECORDS_FILE: &str = "records.jsonl";
pub const TIMINGS_FILE: &str = "timings.jsonl";
pub const COMM_FILE: &str = "comm_stats.json";
pub const SUMMARY_FILE: &str = "train_summary.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const EVAL_FILE: &str = "eval_report.json";
pub const GENERATIONS_FILE: &str = "generations.jsonl";
pub const ATTACK_FILE: &str = "attack_report.json";
pub const COMM_REPORT_FILE: &str = "comm_report.json";

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::Io(e.into()))?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Line-per-value JSON writer that flushes after every line.
pub struct JsonLines {
    w: BufWriter<File>,
}

impl JsonLines {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self {
            w: BufWriter::new(File::create(path)?),
        })
    }

    pub fn push<T: Serialize>(&mut self, value: &T) -> Result<()> {
        serde_json::to_writer(&mut self.w, value).map_err(|e| Error::Io(e.into()))?;
        self.w.write_all(b"\n")?;
        self.w.flush()?;
        Ok(())
    }
}

fn prepare_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    std::fs::create_dir_all(&cfg.output_dir)?;
    Ok(cfg.output_dir.clone())
}

/// Training corpus: the dataset file when given, else generated.
pub fn training_corpus(cfg: &ExperimentConfig) -> Result<ToyCorpus> {
    let corpus = match &cfg.dataset {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read dataset {}: {e}", path.display())))?;
            serde_json::from_str::<ToyCorpus>(&text)
                .map_err(|e| Error::Config(format!("dataset {}: {e}", path.display())))?
        }
        None => ToyCorpus::generate(&cfg.corpus, cfg.model.vocab_size)?,
    };
    let vocab = cfg.model.vocab_size;
    for s in &corpus.samples {
        if let Some(&id) = s.tokens.iter().find(|t| **t as usize >= vocab) {
            return Err(Error::TokenId { id, vocab });
        }
        if s.tokens.len() < 2 || s.prompt_len == 0 || s.prompt_len >= s.tokens.len() {
            return Err(Error::Config("dataset sample has no prompt/answer split".into()));
        }
    }
    if corpus.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    Ok(corpus)
}

/// Disjoint corpus from the same generator with `heldout_seed`.
pub fn heldout_corpus(cfg: &ExperimentConfig) -> Result<ToyCorpus> {
    let mut c = cfg.corpus.clone();
    c.seed = cfg.heldout_seed;
    ToyCorpus::generate(&c, cfg.model.vocab_size)
}

fn federation_config(cfg: &ExperimentConfig, clients: usize) -> FederationConfig {
    let mut fc = FederationConfig::new(cfg.model.clone(), cfg.partition, cfg.seed, clients);
    fc.lr = cfg.train.lr;
    fc.noise = cfg.noise.clone();
    fc.transport = cfg.transport;
    fc.addr = cfg.addr.clone();
    fc.width = cfg.train.width;
    fc.compress_mask = cfg.train.compress_mask;
    fc
}

#[derive(Clone, Debug, Serialize)]
pub struct TimingRecord {
    pub step: u64,
    pub client_id: u64,
    /// Wall-clock seconds since training started when the record arrived.
    pub elapsed_s: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub mode: StrategyMode,
    pub clients: usize,
    pub steps_requested: usize,
    pub records: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub loss_ratio: f64,
    pub merges: usize,
    pub failures: Vec<(usize, String)>,
    pub interrupted: bool,
    pub error: Option<String>,
    pub memory: MemoryProxy,
    pub comm: CommSnapshot,
}

/// Trained segments of client 0 and its server.
pub struct Trained {
    pub a: SegmentModel,
    pub b: SegmentModel,
    pub c: SegmentModel,
    pub summary: TrainSummary,
}

/// Mean first-step loss across clients and mean loss over the last pass
/// through the data.
fn loss_summary(records: &[TrainStepRecord], clients: usize, batches: usize) -> (f64, f64) {
    if records.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = |r: &[TrainStepRecord]| r.iter().map(|x| x.loss).sum::<f64>() / r.len() as f64;
    let first = &records[..clients.min(records.len())];
    let tail = (clients * batches).clamp(1, records.len());
    (mean(first), mean(&records[records.len() - tail..]))
}

pub fn train(cfg: &ExperimentConfig, stop: Option<&AtomicBool>) -> Result<Trained> {
    cfg.validate()?;
    let dir = prepare_dir(cfg)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml())?;
    let corpus = training_corpus(cfg)?;
    let batches = corpus.batches(cfg.train.batch_size)?;
    let m = cfg.strategy.clients;
    let n = batches.len();
    let data = |client: usize, step: usize| -> Batch { batches[(step * m + client) % n].clone() };
    let mut records_out = JsonLines::create(&dir.join(RECORDS_FILE))?;
    let mut timings_out = JsonLines::create(&dir.join(TIMINGS_FILE))?;
    let start = Instant::now();
    let mut write_err: Option<Error> = None;
    let mut sink = |r: &TrainStepRecord| {
        let t = TimingRecord {
            step: r.step,
            client_id: r.client_id,
            elapsed_s: start.elapsed().as_secs_f64(),
        };
        if let Err(e) = records_out.push(r).and_then(|_| timings_out.push(&t)) {
            write_err.get_or_insert(e);
        }
    };
    let fc = federation_config(cfg, m);
    let (outcome, merges, failures, comm, (a, b, c)) = match cfg.strategy.mode {
        StrategyMode::Sequential => {
            let mut fed = Federation::start(&fc)?;
            let out = run_sequential_round(&mut fed.clients, cfg.train.steps, &mut |i, s| data(i, s), stop, &mut sink);
            let comm = fed.comm();
            let (b, mut clients) = fed.shutdown()?;
            let (a, c) = clients.remove(0);
            (out, 0, Vec::new(), comm, (a, b, c))
        }
        StrategyMode::ClientBatch => {
            let mut fc = fc;
            fc.mode = cfg.strategy.serve_mode();
            let mut fed = Federation::start(&fc)?;
            let out = run_client_batch(&mut fed.clients, cfg.train.steps, &data, stop);
            out.records.iter().for_each(&mut sink);
            let comm = fed.comm();
            let (b, mut clients) = fed.shutdown()?;
            let (a, c) = clients.remove(0);
            (out, 0, Vec::new(), comm, (a, b, c))
        }
        StrategyMode::ServerHierarchical => {
            let mut h = Hierarchy::start(&fc, cfg.strategy.clone())?;
            let out = h.run(cfg.train.steps, &data, stop, &mut sink);
            let comm = h.comm();
            let mut branches = h.shutdown()?;
            let first = branches.remove(0);
            (
                RoundOutcome {
                    records: out.records,
                    error: None,
                },
                out.merges.len(),
                out.failures,
                comm,
                first,
            )
        }
    };
    if let Some(e) = write_err {
        return Err(e);
    }
    let (initial_loss, final_loss) = loss_summary(&outcome.records, m, n);
    let interrupted = stop.is_some_and(|s| s.load(std::sync::atomic::Ordering::Relaxed));
    let summary = TrainSummary {
        mode: cfg.strategy.mode,
        clients: m,
        steps_requested: cfg.train.steps,
        records: outcome.records.len(),
        initial_loss,
        final_loss,
        loss_ratio: final_loss / initial_loss,
        merges,
        failures,
        interrupted,
        error: outcome.error.as_ref().map(|e| e.to_string()),
        memory: memory_proxy(&cfg.model, cfg.partition)?,
        comm: comm.clone(),
    };
    write_json(&dir.join(COMM_FILE), &comm)?;
    write_json(&dir.join(SUMMARY_FILE), &summary)?;
    checkpoint::save(&dir.join(CHECKPOINT_FILE), &[&a, &b, &c])?;
    if let Some(e) = outcome.error {
        return Err(e);
    }
    Ok(Trained { a, b, c, summary })
}

/// Segments from the run's checkpoint when present, else freshly built.
pub fn load_segments(cfg: &ExperimentConfig) -> Result<(SegmentModel, SegmentModel, SegmentModel, bool)> {
    let (mut a, mut b, mut c) = split_segments(&cfg.model, cfg.partition, cfg.seed)?;
    let path = cfg.output_dir.join(CHECKPOINT_FILE);
    if !path.exists() {
        return Ok((a, b, c, false));
    }
    let params = checkpoint::load(&path)?;
    for seg in [&mut a, &mut b, &mut c] {
        seg.load_from(&params)?;
    }
    Ok((a, b, c, true))
}

fn start_inference(cfg: &ExperimentConfig) -> Result<(Federation, bool)> {
    let (a, b, c, trained) = load_segments(cfg)?;
    let fed = Federation::start_with(&federation_config(cfg, 1), a, b, c, vec![None])?;
    Ok((fed, trained))
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub from_checkpoint: bool,
    pub cloze_items: usize,
    /// Fraction of cloze items whose answer gets the highest restricted
    /// probability.
    pub cloze_accuracy: f64,
    pub cloze_accuracy_x100: f64,
    pub copy_items: usize,
    pub mean_copy_score: f64,
    pub mean_random_score: f64,
    /// Fraction of copy items where the true answer outscores a random one.
    pub copy_win_rate: f64,
    pub copy_win_rate_x100: f64,
    /// Largest cached-vs-uncached score difference seen.
    pub cache_score_max_diff: f64,
}

fn random_answer(sample: &Sample, alphabet: usize, salt: usize) -> Vec<u32> {
    sample
        .answer()
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let shift = 1 + (salt * 7 + i * 3) % (alphabet - 1);
            FIRST_CONTENT + ((t - FIRST_CONTENT) as usize + shift) as u32 % alphabet as u32
        })
        .collect()
}

pub fn evaluate_corpus(fed: &mut Federation, corpus: &ToyCorpus, alphabet: usize) -> Result<EvalReport> {
    let client = &mut fed.clients[0];
    let (mut cloze, mut cloze_hits, mut copies, mut wins) = (0usize, 0usize, 0usize, 0usize);
    let (mut copy_sum, mut rand_sum, mut max_diff) = (0.0, 0.0, 0.0f64);
    for (i, s) in corpus.samples.iter().enumerate() {
        if s.candidates.is_empty() {
            let truth = client.score_multi_token(s.prompt(), s.answer())?;
            let check = client.score_multi_token_uncached(s.prompt(), s.answer())?;
            let wrong = client.score_multi_token(s.prompt(), &random_answer(s, alphabet, i))?;
            max_diff = max_diff.max((truth - check).abs());
            copies += 1;
            copy_sum += truth;
            rand_sum += wrong;
            wins += usize::from(truth > wrong);
        } else {
            let (session, logits) = client.prefill(&[s.prompt().to_vec()])?;
            client.close_session(session)?;
            let probs = score_single_token(logits.data(), &s.candidates)?;
            let best = (0..probs.len()).fold(0, |b, j| if probs[j] > probs[b] { j } else { b });
            cloze += 1;
            cloze_hits += usize::from(s.candidates[best] == s.answer()[0]);
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(EvalReport {
        from_checkpoint: false,
        cloze_items: cloze,
        cloze_accuracy: ratio(cloze_hits, cloze),
        cloze_accuracy_x100: 100.0 * ratio(cloze_hits, cloze),
        copy_items: copies,
        mean_copy_score: if copies == 0 { 0.0 } else { copy_sum / copies as f64 },
        mean_random_score: if copies == 0 { 0.0 } else { rand_sum / copies as f64 },
        copy_win_rate: ratio(wins, copies),
        copy_win_rate_x100: 100.0 * ratio(wins, copies),
        cache_score_max_diff: max_diff,
    })
}

pub fn evaluate(cfg: &ExperimentConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let dir = prepare_dir(cfg)?;
    let corpus = training_corpus(cfg)?;
    let (mut fed, trained) = start_inference(cfg)?;
    let mut report = evaluate_corpus(&mut fed, &corpus, cfg.corpus.alphabet)?;
    report.from_checkpoint = trained;
    write_json(&dir.join(EVAL_FILE), &report)?;
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct GenerationRecord {
    pub index: usize,
    pub prompt: Vec<u32>,
    pub expected: Vec<u32>,
    pub tokens: Vec<u32>,
    pub decode_steps: usize,
    pub bytes: u64,
    pub error: Option<String>,
    /// Uncached decoding agreed token for token, when checked.
    pub matches_uncached: Option<bool>,
}

pub fn generate(cfg: &ExperimentConfig, limit: usize) -> Result<Vec<GenerationRecord>> {
    cfg.validate()?;
    let dir = prepare_dir(cfg)?;
    let corpus = training_corpus(cfg)?;
    let (mut fed, _) = start_inference(cfg)?;
    let client = &mut fed.clients[0];
    let mut out = JsonLines::create(&dir.join(GENERATIONS_FILE))?;
    let mut all = Vec::new();
    for (index, s) in corpus.samples.iter().take(limit).enumerate() {
        let g = client.generate(s.prompt(), &cfg.generation);
        let matches_uncached = if cfg.checks.cache_identity {
            Some(client.generate_uncached(s.prompt(), &cfg.generation).tokens == g.tokens)
        } else {
            None
        };
        let rec = GenerationRecord {
            index,
            prompt: s.prompt().to_vec(),
            expected: s.answer().to_vec(),
            tokens: g.tokens,
            decode_steps: g.decode_steps,
            bytes: g.comm.total_bytes(),
            error: g.error.map(|e| e.to_string()),
            matches_uncached,
        };
        out.push(&rec)?;
        all.push(rec);
    }
    Ok(all)
}

pub fn attack_run_config(cfg: &ExperimentConfig, spec: PartitionSpec, delta: f64) -> AttackRunConfig {
    let mut noise = cfg.noise.clone();
    noise.scale = delta;
    if delta > 0.0 {
        noise.target = crate::train::NoiseTarget::ForwardHA;
    }
    AttackRunConfig {
        model: cfg.model.clone(),
        spec,
        seed: cfg.seed,
        lr: cfg.train.lr,
        noise,
        steps: cfg.train.steps,
        attack: cfg.attack.clone(),
    }
}

pub fn attack(cfg: &ExperimentConfig) -> Result<AttackReport> {
    cfg.validate()?;
    let dir = prepare_dir(cfg)?;
    let malicious = training_corpus(cfg)?.batches(cfg.train.batch_size)?;
    let honest = heldout_corpus(cfg)?.batches(cfg.train.batch_size)?;
    let rc = attack_run_config(cfg, cfg.partition, cfg.noise.scale);
    let report = run_attack(&rc, cfg.strategy.clients.max(2), &malicious, &honest, true, None)?;
    write_json(&dir.join(ATTACK_FILE), &report)?;
    Ok(report)
}

pub fn comm(cfg: &ExperimentConfig, contexts: &[usize]) -> Result<CommReport> {
    cfg.validate()?;
    let dir = prepare_dir(cfg)?;
    let run = match std::fs::read_to_string(dir.join(COMM_FILE)) {
        Ok(text) => Some(
            serde_json::from_str::<CommSnapshot>(&text)
                .map_err(|e| Error::Config(format!("{COMM_FILE}: {e}")))?,
        ),
        Err(_) => None,
    };
    let report = comm_report(&cfg.model, cfg.partition, cfg.train.width, contexts, run)?;
    write_json(&dir.join(COMM_REPORT_FILE), &report)?;
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct GridCell {
    pub p: usize,
    pub q: usize,
    pub delta: f64,
    pub value: f64,
    pub value_x100: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GridReport {
    pub kind: String,
    pub metric: String,
    pub rows: Vec<usize>,
    pub cols: Vec<String>,
    pub cells: Vec<GridCell>,
}

impl GridReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("row,{}\n", self.cols.join(","));
        for (r, row) in self.rows.iter().enumerate() {
            let vals: Vec<String> = (0..self.cols.len())
                .map(|c| format!("{:.6}", self.cells[r * self.cols.len() + c].value))
                .collect();
            s.push_str(&format!("{row},{}\n", vals.join(",")));
        }
        s
    }
}

/// Train and evaluate every `(p, q) ∈ {1,2,3}²`; the cell is the copy win
/// rate on the training corpus.
pub fn grid_partition(cfg: &ExperimentConfig) -> Result<GridReport> {
    cfg.validate()?;
    let n = cfg.model.num_blocks;
    if n < 7 {
        return Err(Error::Config(format!(
            "the partition grid needs at least 7 blocks so every cell keeps a server block, model has {n}"
        )));
    }
    let dir = prepare_dir(cfg)?;
    let mut cells = Vec::new();
    for p in 1..=3 {
        for q in 1..=3 {
            let mut sub = cfg.clone();
            sub.partition = PartitionSpec::new(p, n - p - q, q);
            sub.strategy.mode = StrategyMode::Sequential;
            sub.strategy.clients = 1;
            sub.output_dir = dir.join(format!("grid_p{p}_q{q}"));
            let trained = train(&sub, None)?;
            let mut fed = Federation::start_with(
                &federation_config(&sub, 1),
                trained.a,
                trained.b,
                trained.c,
                vec![None],
            )?;
            let report = evaluate_corpus(&mut fed, &training_corpus(&sub)?, sub.corpus.alphabet)?;
            cells.push(GridCell {
                p,
                q,
                delta: cfg.noise.scale,
                value: report.copy_win_rate,
                value_x100: report.copy_win_rate_x100,
            });
        }
    }
    let report = GridReport {
        kind: "partition".into(),
        metric: "copy_win_rate".into(),
        rows: vec![1, 2, 3],
        cols: vec!["q1".into(), "q2".into(), "q3".into()],
        cells,
    };
    write_json(&dir.join("grid_partition.json"), &report)?;
    std::fs::write(dir.join("grid_partition.csv"), report.to_csv())?;
    Ok(report)
}

/// Attack token accuracy over `p ∈ {1,2,3}` and `δ ∈ {0, 0.02, 0.05}`.
pub fn grid_attack(cfg: &ExperimentConfig) -> Result<GridReport> {
    cfg.validate()?;
    let n = cfg.model.num_blocks;
    if n < 5 {
        return Err(Error::Config(format!("the attack grid needs at least 5 blocks, model has {n}")));
    }
    let dir = prepare_dir(cfg)?;
    let malicious = training_corpus(cfg)?.batches(cfg.train.batch_size)?;
    let honest = heldout_corpus(cfg)?.batches(cfg.train.batch_size)?;
    let deltas = [0.0, 0.02, 0.05];
    let mut cells = Vec::new();
    for p in 1..=3 {
        for delta in deltas {
            let rc = attack_run_config(cfg, PartitionSpec::new(p, n - p - 1, 1), delta);
            let r = run_attack(&rc, 2, &malicious, &honest, true, None)?;
            cells.push(GridCell {
                p,
                q: 1,
                delta,
                value: r.token_accuracy,
                value_x100: r.token_accuracy_x100,
            });
        }
    }
    let report = GridReport {
        kind: "attack".into(),
        metric: "token_accuracy".into(),
        rows: vec![1, 2, 3],
        cols: deltas.iter().map(|d| format!("delta_{d}")).collect(),
        cells,
    };
    write_json(&dir.join("grid_attack.json"), &report)?;
    std::fs::write(dir.join("grid_attack.csv"), report.to_csv())?;
    Ok(report)
}
