//! Iterative retrieve-verify-retrieve execution and run traces.
//!
//! A run issues `turns` retrieval calls in total. The first uses the initial
//! retriever on the raw question. Each later call verifies the previous
//! ranking (top `verifier_budget` only), adds accepted documents to the output
//! accumulator, and re-queries the subsequent retriever with the question
//! followed by the first `context_budget` accepted documents. The last ranking
//! then fills the accumulator up to `output_k` without verification.

use std::collections::HashSet;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering as AtomicOrdering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::{Corpus, Document, Query};
use crate::embedder::{augment_query, EmbedderModel};
use crate::error::{Error, Result};
use crate::index::{RankedList, VectorIndex};
use crate::verifier::{verified_subset, VerifierKind};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMode {
    /// Verified documents across turns, then the final ranking.
    #[default]
    Accumulate,
    /// Unverified baseline: top half of turn one, then new documents of turn two.
    SplitHalf,
}

/// How `turns` maps onto loop iterations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TurnSemantics {
    /// `turns` is the total number of retrieval calls.
    #[default]
    TotalCalls,
    /// The verify/re-retrieve loop body runs `turns` times (`turns + 1` calls).
    LiteralLoop,
}

/// How many documents each subsequent retrieval returns.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubsequentDepth {
    #[default]
    OutputK,
    VerifierBudget,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimingMode {
    #[default]
    Wall,
    /// Timings are recorded as zero, which keeps traces byte-reproducible.
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunConfig {
    pub turns: usize,
    pub verifier_budget: usize,
    pub context_budget: usize,
    pub output_k: usize,
    #[serde(default)]
    pub merge_mode: MergeMode,
    #[serde(default)]
    pub turn_semantics: TurnSemantics,
    #[serde(default)]
    pub subsequent_depth: SubsequentDepth,
    #[serde(default)]
    pub timing: TimingMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::reference()
    }
}

impl RunConfig {
    /// Two retrieval calls, B = 100, M = 3, K = 100.
    pub fn reference() -> Self {
        Self {
            turns: 2,
            verifier_budget: 100,
            context_budget: 3,
            output_k: 100,
            merge_mode: MergeMode::Accumulate,
            turn_semantics: TurnSemantics::TotalCalls,
            subsequent_depth: SubsequentDepth::OutputK,
            timing: TimingMode::Wall,
        }
    }

    pub fn single_round(output_k: usize) -> Self {
        Self {
            turns: 1,
            output_k,
            ..Self::reference()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.turns == 0 {
            return Err(Error::Config("run.turns must be at least 1".into()));
        }
        if self.output_k == 0 {
            return Err(Error::Config("run.output_k must be at least 1".into()));
        }
        if self.merge_mode == MergeMode::SplitHalf && self.turns != 2 {
            return Err(Error::Config(format!(
                "run.merge_mode = split_half requires run.turns = 2, got {}",
                self.turns
            )));
        }
        Ok(())
    }

    fn loop_iterations(&self) -> usize {
        match self.turn_semantics {
            TurnSemantics::TotalCalls => self.turns - 1,
            TurnSemantics::LiteralLoop => self.turns,
        }
    }

    fn subsequent_k(&self) -> usize {
        match self.subsequent_depth {
            SubsequentDepth::OutputK => self.output_k,
            SubsequentDepth::VerifierBudget => self.verifier_budget,
        }
    }
}

/// An index paired with the model that built it.
#[derive(Debug, Clone, Copy)]
pub struct Retriever<'a> {
    pub index: &'a VectorIndex,
    pub model: &'a EmbedderModel,
}

impl<'a> Retriever<'a> {
    pub fn new(index: &'a VectorIndex, model: &'a EmbedderModel) -> Result<Self> {
        index.check_model(model)?;
        Ok(Self { index, model })
    }

    pub fn search(&self, text: &str, k: usize) -> Result<RankedList> {
        self.index.search(self.model, text, k)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    /// 1-based.
    pub turn: usize,
    pub query_text: String,
    pub retrieved: RankedList,
    /// Verifier-approved ids from this turn's ranking, in rank order.
    pub verified_ids: Vec<String>,
    /// Prefix of `verified_ids` used to build the next query.
    pub context_ids: Vec<String>,
    pub retrieval_seconds: f64,
    pub verification_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub query_id: String,
    pub config: RunConfig,
    pub turns: Vec<TurnRecord>,
    pub final_output: Vec<String>,
    pub retrieval_calls: usize,
}

impl RunTrace {
    pub fn retrieval_seconds(&self) -> f64 {
        self.turns.iter().map(|t| t.retrieval_seconds).sum()
    }

    pub fn verification_seconds(&self) -> f64 {
        self.turns.iter().map(|t| t.verification_seconds).sum()
    }
}

struct Stopwatch(Option<Instant>);

impl Stopwatch {
    fn start(mode: TimingMode) -> Self {
        Self(match mode {
            TimingMode::Wall => Some(Instant::now()),
            TimingMode::Off => None,
        })
    }

    fn seconds(&self) -> f64 {
        self.0.map_or(0.0, |t| t.elapsed().as_secs_f64())
    }
}

/// Insertion-ordered set of document ids.
#[derive(Default)]
struct OrderedIds {
    ids: Vec<String>,
    seen: HashSet<String>,
}

impl OrderedIds {
    fn push(&mut self, id: &str) {
        if self.seen.insert(id.to_string()) {
            self.ids.push(id.to_string());
        }
    }

    fn len(&self) -> usize {
        self.ids.len()
    }
}

fn timed_search(
    retriever: &Retriever<'_>,
    text: &str,
    k: usize,
    turn: usize,
    timing: TimingMode,
) -> Result<TurnRecord> {
    let clock = Stopwatch::start(timing);
    let retrieved = retriever.search(text, k)?;
    Ok(TurnRecord {
        turn,
        query_text: text.to_string(),
        retrieved,
        verified_ids: Vec::new(),
        context_ids: Vec::new(),
        retrieval_seconds: clock.seconds(),
        verification_seconds: 0.0,
    })
}

fn ids_of(docs: &[&Document]) -> Vec<String> {
    docs.iter().map(|d| d.id.clone()).collect()
}

/// Runs the configured procedure; dispatches on `config.merge_mode`.
pub fn run(
    query: &Query,
    corpus: &Corpus,
    f_i: Retriever<'_>,
    f_r: Retriever<'_>,
    verifier: &VerifierKind,
    config: &RunConfig,
) -> Result<RunTrace> {
    match config.merge_mode {
        MergeMode::Accumulate => run_rvr(query, corpus, f_i, f_r, verifier, config),
        MergeMode::SplitHalf => run_split_half(query, corpus, f_i, f_r, config),
    }
}

pub fn run_rvr(
    query: &Query,
    corpus: &Corpus,
    f_i: Retriever<'_>,
    f_r: Retriever<'_>,
    verifier: &VerifierKind,
    config: &RunConfig,
) -> Result<RunTrace> {
    config.validate()?;
    if config.merge_mode != MergeMode::Accumulate {
        return Err(Error::Config(
            "run_rvr requires merge_mode = accumulate".into(),
        ));
    }
    let k = config.output_k;
    let mut turns = vec![timed_search(&f_i, &query.question, k, 1, config.timing)?];
    let mut out = OrderedIds::default();

    for _ in 0..config.loop_iterations() {
        if out.len() >= k {
            break;
        }
        let current = turns.last_mut().expect("at least one turn");
        let clock = Stopwatch::start(config.timing);
        let verified = verified_subset(
            verifier,
            query,
            &current.retrieved,
            corpus,
            config.verifier_budget,
        )?;
        current.verification_seconds = clock.seconds();
        for d in &verified {
            out.push(&d.id);
        }
        let context = &verified[..config.context_budget.min(verified.len())];
        current.verified_ids = ids_of(&verified);
        current.context_ids = ids_of(context);

        let q_r = augment_query(
            &query.question,
            context.iter().copied(),
            config.context_budget,
        );
        let next = turns.len() + 1;
        turns.push(timed_search(
            &f_r,
            &q_r,
            config.subsequent_k(),
            next,
            config.timing,
        )?);
    }

    let last = &turns.last().expect("at least one turn").retrieved;
    for id in last.ids() {
        out.push(id);
    }
    let mut final_output = out.ids;
    final_output.truncate(k);
    Ok(RunTrace {
        query_id: query.id.clone(),
        config: *config,
        retrieval_calls: turns.len(),
        turns,
        final_output,
    })
}

/// Verified ids in (turn, rank) order, then the last ranking, first
/// occurrence kept, truncated to `k`.
pub fn finalize_output(accumulated: &[Vec<String>], last: &RankedList, k: usize) -> Vec<String> {
    let mut out = OrderedIds::default();
    for id in accumulated.iter().flatten() {
        out.push(id);
    }
    for id in last.ids() {
        out.push(id);
    }
    let mut ids = out.ids;
    ids.truncate(k);
    ids
}

/// Unverified two-turn baseline: the top `M` of turn one form the context, and
/// the output is the top `ceil(K/2)` of turn one followed by the highest-ranked
/// turn-two documents not already present.
pub fn run_split_half(
    query: &Query,
    corpus: &Corpus,
    f_i: Retriever<'_>,
    f_r: Retriever<'_>,
    config: &RunConfig,
) -> Result<RunTrace> {
    config.validate()?;
    if config.merge_mode != MergeMode::SplitHalf {
        return Err(Error::Config(
            "run_split_half requires merge_mode = split_half".into(),
        ));
    }
    let k = config.output_k;
    let mut first = timed_search(&f_i, &query.question, k, 1, config.timing)?;

    let clock = Stopwatch::start(config.timing);
    let context = verified_subset(
        &VerifierKind::TopM,
        query,
        &first.retrieved,
        corpus,
        config.context_budget,
    )?;
    first.verification_seconds = clock.seconds();
    first.verified_ids = ids_of(&context);
    first.context_ids = ids_of(&context);

    let q_r = augment_query(
        &query.question,
        context.iter().copied(),
        config.context_budget,
    );
    let second = timed_search(&f_r, &q_r, k, 2, config.timing)?;

    let mut out = OrderedIds::default();
    let head = k.div_ceil(2);
    for id in first.retrieved.ids().take(head) {
        out.push(id);
    }
    for id in second.retrieved.ids() {
        if out.len() >= k {
            break;
        }
        out.push(id);
    }
    // Only reached when turn two ran out of new documents.
    for id in first.retrieved.ids().skip(head) {
        if out.len() >= k {
            break;
        }
        out.push(id);
    }

    Ok(RunTrace {
        query_id: query.id.clone(),
        config: *config,
        retrieval_calls: 2,
        turns: vec![first, second],
        final_output: out.ids,
    })
}

/// Runs every query with up to `workers` threads. Traces come back in
/// query order whatever the completion order.
pub fn run_batch(
    queries: &[Query],
    corpus: &Corpus,
    f_i: Retriever<'_>,
    f_r: Retriever<'_>,
    verifier: &VerifierKind,
    config: &RunConfig,
    workers: usize,
) -> Result<Vec<RunTrace>> {
    config.validate()?;
    let workers = workers.clamp(1, queries.len().max(1));
    if workers == 1 {
        return queries
            .iter()
            .map(|q| run(q, corpus, f_i, f_r, verifier, config))
            .collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<RunTrace>>>> =
        queries.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, AtomicOrdering::Relaxed);
                if i >= queries.len() {
                    break;
                }
                let trace = run(&queries[i], corpus, f_i, f_r, verifier, config);
                *slots[i].lock().unwrap() = Some(trace);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().unwrap().expect("every slot is filled"))
        .collect()
}

/// One JSON trace per line.
pub fn traces_to_jsonl(traces: &[RunTrace]) -> Result<String> {
    let mut out = String::new();
    for t in traces {
        out.push_str(&serde_json::to_string(t).map_err(|e| Error::InvalidInput(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_traces(traces: &[RunTrace], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, traces_to_jsonl(traces)?).map_err(|e| Error::io(path, e))
}

pub fn read_traces(path: impl AsRef<Path>) -> Result<Vec<RunTrace>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}
