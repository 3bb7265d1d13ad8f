//! Command implementations. Each takes an already-resolved config so the
//! pipeline command can chain them.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use rvr_core::dataset::{load_corpus, load_queries, Corpus, Query, QuerySetStats};
use rvr_core::embedder::EmbedderModel;
use rvr_core::engine::{read_traces, run_batch, traces_to_jsonl, Retriever, RunConfig};
use rvr_core::eval::{
    bootstrap_compare, evaluate_dataset, paired_scores, DatasetReport, QueryScore,
    SignificanceResult,
};
use rvr_core::index::VectorIndex;
use rvr_core::synth::generate;
use rvr_core::trainer::{
    build_initial_examples, build_subsequent_examples, loss_curve_csv, read_examples,
    train_embedder, TrainingExample,
};

use crate::artifact::{InputRecord, Provenance, Staging};
use crate::config::{require_path, ExperimentConfig};

fn jsonl<T: Serialize>(items: &[T]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for it in items {
        serde_json::to_writer(&mut out, it)?;
        out.push(b'\n');
    }
    Ok(out)
}

fn pretty<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    Ok(text.into_bytes())
}

fn model_bytes(model: &EmbedderModel) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    model.write_to(&mut buf)?;
    Ok(buf)
}

fn load_model(path: &Path) -> Result<EmbedderModel> {
    EmbedderModel::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn corpus_of(cfg: &ExperimentConfig) -> Result<(Corpus, PathBuf)> {
    let p = require_path(&cfg.data.corpus, "data.corpus")?;
    Ok((load_corpus(p)?, p.clone()))
}

fn queries_at(value: &Option<PathBuf>, key: &str) -> Result<(Vec<Query>, PathBuf)> {
    let p = require_path(value, key)?;
    Ok((load_queries(p)?, p.clone()))
}

pub fn synth(cfg: &ExperimentConfig, out_dir: &Path) -> Result<()> {
    let ds = generate(&cfg.synth)?;
    let prov = Provenance::new("synth", cfg.synth.seed, vec![], &cfg.synth)?;
    let mut stage = Staging::new();
    stage.add_artifact(
        &out_dir.join("corpus.jsonl"),
        &jsonl(ds.corpus.docs())?,
        &prov,
    )?;
    stage.add_artifact(
        &out_dir.join("train.jsonl"),
        &jsonl(&ds.train_queries)?,
        &prov,
    )?;
    stage.add_artifact(
        &out_dir.join("test.jsonl"),
        &jsonl(&ds.test_queries)?,
        &prov,
    )?;
    stage.commit()?;
    println!(
        "wrote {} documents, {} train and {} test queries to {}",
        ds.corpus.len(),
        ds.train_queries.len(),
        ds.test_queries.len(),
        out_dir.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct IngestReport {
    documents: usize,
    queries: usize,
    mean_answers: f64,
    mean_gold_docs: f64,
    queries_without_gold: usize,
}

/// Validates a corpus and query file against each other.
pub fn ingest(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let (corpus, corpus_path) = corpus_of(cfg)?;
    let (queries, queries_path) = queries_at(&cfg.data.queries, "data.queries")?;
    for q in &queries {
        q.check_gold(&corpus)?;
    }
    let stats = QuerySetStats::of(&queries);
    let report = IngestReport {
        documents: corpus.len(),
        queries: queries.len(),
        mean_answers: stats.mean_answers,
        mean_gold_docs: stats.mean_gold_docs,
        queries_without_gold: queries.iter().filter(|q| q.gold_doc_ids.is_empty()).count(),
    };
    let inputs = vec![
        InputRecord::of(&corpus_path)?,
        InputRecord::of(&queries_path)?,
    ];
    let prov = Provenance::new("ingest", cfg.seed, inputs, &cfg.data)?;
    let mut stage = Staging::new();
    stage.add_artifact(out, &pretty(&report)?, &prov)?;
    stage.commit()?;
    println!(
        "{} documents, {} queries, {:.2} answers per query",
        report.documents, report.queries, report.mean_answers
    );
    Ok(())
}

pub fn init_model(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<EmbedderModel> {
    let model = EmbedderModel::random(cfg.embedder, seed)?;
    let prov = Provenance::new("init-model", seed, vec![], &cfg.embedder)?;
    let mut stage = Staging::new();
    stage.add_artifact(out, &model_bytes(&model)?, &prov)?;
    stage.commit()?;
    Ok(model)
}

pub fn build_index(cfg: &ExperimentConfig, model_path: &Path, out: &Path) -> Result<()> {
    let (corpus, corpus_path) = corpus_of(cfg)?;
    let model = load_model(model_path)?;
    let index = VectorIndex::build(&corpus, &model)?;
    let mut buf = Vec::new();
    index.write_to(&mut buf)?;
    let inputs = vec![InputRecord::of(&corpus_path)?, InputRecord::of(model_path)?];
    let prov = Provenance::new("build-index", cfg.seed, inputs, &model.config())?;
    let mut stage = Staging::new();
    stage.add_artifact(out, &buf, &prov)?;
    stage.commit()?;
    println!("indexed {} documents into {}", index.len(), out.display());
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ExampleMode {
    Initial,
    Subsequent,
}

#[derive(Serialize)]
struct GenTrainSettings {
    mode: ExampleMode,
    context_budget: usize,
    context_bound: rvr_core::trainer::ContextBound,
}

pub fn gen_train(
    cfg: &ExperimentConfig,
    mode: ExampleMode,
    m_budget: usize,
    seed: u64,
    out: &Path,
) -> Result<Vec<TrainingExample>> {
    let (corpus, corpus_path) = corpus_of(cfg)?;
    let (queries, queries_path) = queries_at(&cfg.data.train_queries, "data.train_queries")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let generated = match mode {
        ExampleMode::Initial => build_initial_examples(&queries, &corpus, &mut rng)?,
        ExampleMode::Subsequent => build_subsequent_examples(
            &queries,
            &corpus,
            m_budget,
            cfg.gen_train.context_bound,
            &mut rng,
        )?,
    };
    if generated.skipped > 0 {
        eprintln!("warning: {} queries produced no example", generated.skipped);
    }
    let settings = GenTrainSettings {
        mode,
        context_budget: m_budget,
        context_bound: cfg.gen_train.context_bound,
    };
    let inputs = vec![
        InputRecord::of(&corpus_path)?,
        InputRecord::of(&queries_path)?,
    ];
    let prov = Provenance::new("gen-train", seed, inputs, &settings)?;
    let mut stage = Staging::new();
    stage.add_artifact(out, &jsonl(&generated.examples)?, &prov)?;
    stage.commit()?;
    println!(
        "wrote {} examples to {}",
        generated.examples.len(),
        out.display()
    );
    Ok(generated.examples)
}

/// Trains from `init` (or a fresh random model) and writes the model and its
/// loss curve.
pub fn train(
    cfg: &ExperimentConfig,
    init: Option<&Path>,
    examples_path: &Path,
    out: &Path,
    curve_out: &Path,
) -> Result<()> {
    let (corpus, corpus_path) = corpus_of(cfg)?;
    let examples = read_examples(examples_path)?;
    let mut inputs = vec![
        InputRecord::of(&corpus_path)?,
        InputRecord::of(examples_path)?,
    ];
    let start = match init {
        Some(p) => {
            inputs.push(InputRecord::of(p)?);
            load_model(p)?
        }
        None => EmbedderModel::random(cfg.embedder, cfg.seed)?,
    };
    let outcome = train_embedder(&start, &corpus, &examples, &cfg.train)?;
    let curve = loss_curve_csv(&outcome.curve);
    let prov = Provenance::new("train", cfg.train.seed, inputs, &cfg.train)?;
    let mut stage = Staging::new();
    stage.add_artifact(out, &model_bytes(&outcome.model)?, &prov)?;
    stage.add_artifact(curve_out, curve.as_bytes(), &prov)?;
    stage.commit()?;
    if let (Some(first), Some(last)) = (outcome.curve.first(), outcome.curve.last()) {
        println!(
            "trained {} steps: loss {:.4} -> {:.4}",
            outcome.steps, first.loss, last.loss
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct RunSettings<'a> {
    run: RunConfig,
    verifier: &'a crate::config::VerifierSection,
    shared_retriever: bool,
}

pub fn run(cfg: &ExperimentConfig, trace_out: &Path) -> Result<()> {
    let (corpus, corpus_path) = corpus_of(cfg)?;
    let (queries, queries_path) = queries_at(&cfg.data.queries, "data.queries")?;
    let mi_path = require_path(&cfg.models.initial, "models.initial")?;
    let ii_path = require_path(&cfg.models.initial_index, "models.initial_index")?;
    let mi = load_model(mi_path)?;
    let ii = VectorIndex::load(ii_path)?;
    let mut inputs = vec![
        InputRecord::of(&corpus_path)?,
        InputRecord::of(&queries_path)?,
        InputRecord::of(mi_path)?,
        InputRecord::of(ii_path)?,
    ];
    let distinct = match (&cfg.models.subsequent, &cfg.models.subsequent_index) {
        (Some(_), Some(_)) => {
            let mr_path = require_path(&cfg.models.subsequent, "models.subsequent")?;
            let ir_path = require_path(&cfg.models.subsequent_index, "models.subsequent_index")?;
            inputs.push(InputRecord::of(mr_path)?);
            inputs.push(InputRecord::of(ir_path)?);
            Some((load_model(mr_path)?, VectorIndex::load(ir_path)?))
        }
        (None, None) => None,
        _ => bail!("models.subsequent and models.subsequent_index must be set together"),
    };
    let f_i = Retriever::new(&ii, &mi).context("initial retriever")?;
    let f_r = match &distinct {
        Some((m, i)) => Retriever::new(i, m).context("subsequent retriever")?,
        None => f_i,
    };
    let verifier = cfg.verifier.build()?;
    let config = cfg.run.run_config();
    let traces = run_batch(
        &queries,
        &corpus,
        f_i,
        f_r,
        &verifier,
        &config,
        cfg.run.workers,
    )?;

    let settings = RunSettings {
        run: config,
        verifier: &cfg.verifier,
        shared_retriever: distinct.is_none(),
    };
    let prov = Provenance::new("run", cfg.seed, inputs, &settings)?;
    let mut stage = Staging::new();
    stage.add_artifact(trace_out, traces_to_jsonl(&traces)?.as_bytes(), &prov)?;
    stage.commit()?;
    let calls: usize = traces.iter().map(|t| t.retrieval_calls).sum();
    println!(
        "ran {} queries ({} retrieval calls) into {}",
        traces.len(),
        calls,
        trace_out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalSettings {
    k: usize,
    match_mode: rvr_core::dataset::MatchMode,
}

pub fn eval(
    cfg: &ExperimentConfig,
    trace: &Path,
    k: usize,
    out: &Path,
    csv_out: Option<&Path>,
) -> Result<DatasetReport> {
    let (corpus, corpus_path) = corpus_of(cfg)?;
    let (queries, queries_path) = queries_at(&cfg.data.queries, "data.queries")?;
    let traces = read_traces(trace)?;
    let report = evaluate_dataset(&queries, &corpus, &traces, k, cfg.data.match_mode)?;
    let inputs = vec![
        InputRecord::of(&corpus_path)?,
        InputRecord::of(&queries_path)?,
        InputRecord::of(trace)?,
    ];
    let settings = EvalSettings {
        k,
        match_mode: cfg.data.match_mode,
    };
    let prov = Provenance::new("eval", cfg.seed, inputs, &settings)?;
    let mut stage = Staging::new();
    stage.add_artifact(out, &pretty(&report)?, &prov)?;
    if let Some(csv) = csv_out {
        stage.add_artifact(csv, report.to_csv().as_bytes(), &prov)?;
    }
    stage.commit()?;
    println!("{}", report.summary());
    for c in &report.contribution {
        println!(
            "  turn {}: {:.2} new gold docs, {:.2} new answers",
            c.turn, c.new_gold_docs_mean, c.new_answers_mean
        );
    }
    Ok(report)
}

#[derive(Serialize)]
struct CompareSettings {
    trials: usize,
    alpha: f64,
}

fn system_name(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| p.display().to_string())
}

/// Paired bootstrap on MRecall and Recall. Each metric gets a fresh generator
/// seeded with `seed`.
pub fn compare_reports(
    a: &DatasetReport,
    b: &DatasetReport,
    names: (&str, &str),
    trials: usize,
    alpha: f64,
    seed: u64,
) -> Result<Vec<SignificanceResult>> {
    if a.k != b.k {
        eprintln!(
            "warning: comparing reports at different cutoffs ({} vs {})",
            a.k, b.k
        );
    }
    type Metric = fn(&QueryScore) -> f64;
    let metrics: [(String, Metric); 2] = [
        (format!("mrecall@{}", a.k), |s| f64::from(s.mrecall_at_k)),
        (format!("recall@{}", a.k), |s| s.recall_at_k),
    ];
    let mut out = Vec::new();
    for (name, metric) in metrics {
        let (sa, sb) = paired_scores(a, b, metric)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut r = bootstrap_compare(&sa, &sb, trials, alpha, &mut rng)?;
        r.system_a = names.0.to_string();
        r.system_b = names.1.to_string();
        r.metric = name;
        out.push(r);
    }
    Ok(out)
}

pub fn compare(
    a_path: &Path,
    b_path: &Path,
    trials: usize,
    alpha: f64,
    seed: u64,
    out: Option<&Path>,
) -> Result<Vec<SignificanceResult>> {
    let a = DatasetReport::read_json(a_path)?;
    let b = DatasetReport::read_json(b_path)?;
    let results = compare_reports(
        &a,
        &b,
        (&system_name(a_path), &system_name(b_path)),
        trials,
        alpha,
        seed,
    )?;
    println!(
        "{:<14} {:>10} {:>10} {:>9} {:>12}",
        "metric", "a", "b", "p", "significant"
    );
    for r in &results {
        println!(
            "{:<14} {:>10.2} {:>10.2} {:>9.4} {:>12}",
            r.metric,
            100.0 * r.mean_a,
            100.0 * r.mean_b,
            r.p_value,
            if r.significant { "yes" } else { "no" }
        );
    }
    if let Some(out) = out {
        let inputs = vec![InputRecord::of(a_path)?, InputRecord::of(b_path)?];
        let prov = Provenance::new("compare", seed, inputs, &CompareSettings { trials, alpha })?;
        let mut stage = Staging::new();
        stage.add_artifact(out, &pretty(&results)?, &prov)?;
        stage.commit()?;
    }
    Ok(results)
}

/// Init, example generation, training, indexing, run and eval in one go,
/// everything written under `output_dir`.
pub fn pipeline(cfg: &ExperimentConfig, shared_retriever: bool) -> Result<DatasetReport> {
    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let init = cfg.output_path("init.rvrm");
    init_model(cfg, cfg.seed, &init)?;

    let ex_i = cfg.output_path("examples_initial.jsonl");
    gen_train(cfg, ExampleMode::Initial, 0, cfg.seed, &ex_i)?;
    let f_i = cfg.output_path("f_i.rvrm");
    train(
        cfg,
        Some(&init),
        &ex_i,
        &f_i,
        &cfg.output_path("f_i.loss.csv"),
    )?;
    let idx_i = cfg.output_path("f_i.rvri");
    build_index(cfg, &f_i, &idx_i)?;

    let mut run_cfg = cfg.clone();
    run_cfg.models.initial = Some(f_i);
    run_cfg.models.initial_index = Some(idx_i);
    if !shared_retriever {
        let ex_r = cfg.output_path("examples_subsequent.jsonl");
        gen_train(
            cfg,
            ExampleMode::Subsequent,
            cfg.gen_train.context_budget,
            cfg.seed.wrapping_add(1),
            &ex_r,
        )?;
        let f_r = cfg.output_path("f_r.rvrm");
        train(
            cfg,
            Some(&init),
            &ex_r,
            &f_r,
            &cfg.output_path("f_r.loss.csv"),
        )?;
        let idx_r = cfg.output_path("f_r.rvri");
        build_index(cfg, &f_r, &idx_r)?;
        run_cfg.models.subsequent = Some(f_r);
        run_cfg.models.subsequent_index = Some(idx_r);
    } else {
        run_cfg.models.subsequent = None;
        run_cfg.models.subsequent_index = None;
    }

    let traces = cfg.output_path("traces.jsonl");
    run(&run_cfg, &traces)?;
    eval(
        &run_cfg,
        &traces,
        cfg.run.output_k,
        &cfg.output_path("report.json"),
        Some(&cfg.output_path("report.csv")),
    )
}
