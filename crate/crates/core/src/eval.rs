//! Recall metrics, per-turn contribution, efficiency accounting and paired
//! bootstrap significance.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Corpus, Document, MatchMode, Query};
use crate::engine::RunTrace;
use crate::error::{Error, Result};

fn check_answers(answers: &[String]) -> Result<()> {
    if answers.is_empty() {
        return Err(Error::InvalidInput("answer set is empty".into()));
    }
    Ok(())
}

/// Indices of the answers covered by at least one of `docs`.
pub fn covered_answer_set(
    answers: &[String],
    docs: &[&Document],
    mode: MatchMode,
) -> Result<BTreeSet<usize>> {
    check_answers(answers)?;
    let needles = answers
        .iter()
        .map(|a| mode.needle(a))
        .collect::<Result<Vec<_>>>()?;
    let mut covered = BTreeSet::new();
    for doc in docs {
        if covered.len() == answers.len() {
            break;
        }
        let hay = mode.haystack(doc);
        for (i, n) in needles.iter().enumerate() {
            if !covered.contains(&i) && hay.contains(n.as_str()) {
                covered.insert(i);
            }
        }
    }
    Ok(covered)
}

pub fn recall_at_k(answers: &[String], docs: &[&Document], mode: MatchMode) -> Result<f64> {
    let covered = covered_answer_set(answers, docs, mode)?;
    Ok(covered.len() as f64 / answers.len() as f64)
}

/// 1 when every answer, or at least `k` answers, are covered.
pub fn mrecall_at_k(
    answers: &[String],
    docs: &[&Document],
    k: usize,
    mode: MatchMode,
) -> Result<u8> {
    if docs.len() > k {
        return Err(Error::InvalidInput(format!(
            "{} documents exceed the cutoff k = {k}",
            docs.len()
        )));
    }
    let covered = covered_answer_set(answers, docs, mode)?;
    Ok(u8::from(
        covered.len() == answers.len() || covered.len() >= k,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryScore {
    pub query_id: String,
    pub recall_at_k: f64,
    pub mrecall_at_k: u8,
    pub covered_answers: Vec<String>,
    pub k_used: usize,
    pub retrieval_calls: usize,
    pub retrieval_seconds: f64,
    pub verification_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnContribution {
    /// 1-based.
    pub turn: usize,
    pub new_gold_docs_mean: f64,
    pub new_answers_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencySummary {
    pub mean_retrieval_calls: f64,
    pub mean_retrieval_seconds: f64,
    pub mean_verification_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    pub k: usize,
    pub query_count: usize,
    /// Percentages in `[0, 100]`.
    pub mean_recall: f64,
    pub mean_mrecall: f64,
    pub per_query: Vec<QueryScore>,
    pub contribution: Vec<TurnContribution>,
    pub efficiency: EfficiencySummary,
}

impl DatasetReport {
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }

    /// `query_id,recall,mrecall,calls,seconds`, seconds being retrieval plus
    /// verification time.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("query_id,recall,mrecall,calls,seconds\n");
        for s in &self.per_query {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                csv_field(&s.query_id),
                s.recall_at_k,
                s.mrecall_at_k,
                s.retrieval_calls,
                s.retrieval_seconds + s.verification_seconds
            ));
        }
        out
    }

    pub fn summary(&self) -> String {
        format!(
            "queries {}  MRecall@{k} {:.2}  Recall@{k} {:.2}  calls {:.2}",
            self.query_count,
            self.mean_mrecall,
            self.mean_recall,
            self.efficiency.mean_retrieval_calls,
            k = self.k
        )
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Pairs each query with its trace; errors on missing, unknown or duplicate ids.
fn pair_traces<'a>(
    queries: &'a [Query],
    traces: &'a [RunTrace],
) -> Result<Vec<(&'a Query, &'a RunTrace)>> {
    let mut by_id: HashMap<&str, &RunTrace> = HashMap::new();
    for t in traces {
        if by_id.insert(t.query_id.as_str(), t).is_some() {
            return Err(Error::InvalidInput(format!(
                "duplicate trace for query {:?}",
                t.query_id
            )));
        }
    }
    let known: HashSet<&str> = queries.iter().map(|q| q.id.as_str()).collect();
    let mut unknown: Vec<String> = by_id
        .keys()
        .filter(|id| !known.contains(*id))
        .map(|s| s.to_string())
        .collect();
    if !unknown.is_empty() {
        unknown.sort();
        return Err(Error::UnknownTraces(unknown));
    }
    let missing: Vec<String> = queries
        .iter()
        .filter(|q| !by_id.contains_key(q.id.as_str()))
        .map(|q| q.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingTraces(missing));
    }
    let mut pairs: Vec<_> = queries.iter().map(|q| (q, by_id[q.id.as_str()])).collect();
    pairs.sort_by(|a, b| a.0.id.cmp(&b.0.id));
    Ok(pairs)
}

fn resolve<'c>(corpus: &'c Corpus, ids: &[String]) -> Result<Vec<&'c Document>> {
    ids.iter().map(|id| corpus.require(id)).collect()
}

/// Scores every query's final output. Per-query rows are sorted by query id,
/// so the report does not depend on input order.
pub fn evaluate_dataset(
    queries: &[Query],
    corpus: &Corpus,
    traces: &[RunTrace],
    k: usize,
    mode: MatchMode,
) -> Result<DatasetReport> {
    if queries.is_empty() {
        return Err(Error::InvalidInput("no queries to evaluate".into()));
    }
    let pairs = pair_traces(queries, traces)?;
    let mut per_query = Vec::with_capacity(pairs.len());
    for (q, t) in &pairs {
        if t.final_output.len() > k {
            return Err(Error::InvalidInput(format!(
                "trace for {:?} has {} documents, more than k = {k}",
                q.id,
                t.final_output.len()
            )));
        }
        let docs = resolve(corpus, &t.final_output)?;
        let covered = covered_answer_set(&q.answers, &docs, mode)?;
        let recall = covered.len() as f64 / q.answers.len() as f64;
        let mrecall = u8::from(covered.len() == q.answers.len() || covered.len() >= k);
        per_query.push(QueryScore {
            query_id: q.id.clone(),
            recall_at_k: recall,
            mrecall_at_k: mrecall,
            covered_answers: covered.iter().map(|&i| q.answers[i].clone()).collect(),
            k_used: k,
            retrieval_calls: t.retrieval_calls,
            retrieval_seconds: t.retrieval_seconds(),
            verification_seconds: t.verification_seconds(),
        });
    }
    let n = per_query.len() as f64;
    let mean = |f: &dyn Fn(&QueryScore) -> f64| per_query.iter().map(f).sum::<f64>() / n;
    let report = DatasetReport {
        k,
        query_count: per_query.len(),
        mean_recall: 100.0 * mean(&|s| s.recall_at_k),
        mean_mrecall: 100.0 * mean(&|s| f64::from(s.mrecall_at_k)),
        efficiency: EfficiencySummary {
            mean_retrieval_calls: mean(&|s| s.retrieval_calls as f64),
            mean_retrieval_seconds: mean(&|s| s.retrieval_seconds),
            mean_verification_seconds: mean(&|s| s.verification_seconds),
        },
        contribution: stage_contribution(queries, corpus, traces, mode)?,
        per_query,
    };
    Ok(report)
}

/// Mean number of gold documents and answers first surfaced by each turn's
/// full retrieved list. Without gold ids, answer-bearing documents count as gold.
pub fn stage_contribution(
    queries: &[Query],
    corpus: &Corpus,
    traces: &[RunTrace],
    mode: MatchMode,
) -> Result<Vec<TurnContribution>> {
    let pairs = pair_traces(queries, traces)?;
    let max_turns = pairs.iter().map(|(_, t)| t.turns.len()).max().unwrap_or(0);
    let mut new_docs = vec![0usize; max_turns];
    let mut new_answers = vec![0usize; max_turns];
    for (q, t) in &pairs {
        let gold: HashSet<&str> = q.gold_doc_ids.iter().map(String::as_str).collect();
        let mut seen_docs: HashSet<&str> = HashSet::new();
        let mut seen_answers: BTreeSet<usize> = BTreeSet::new();
        for (ti, turn) in t.turns.iter().enumerate() {
            let docs = resolve(
                corpus,
                &turn
                    .retrieved
                    .entries
                    .iter()
                    .map(|e| e.doc_id.clone())
                    .collect::<Vec<_>>(),
            )?;
            for d in &docs {
                if !seen_docs.insert(d.id.as_str()) {
                    continue;
                }
                let is_gold = if gold.is_empty() {
                    !covered_answer_set(&q.answers, &[d], mode)?.is_empty()
                } else {
                    gold.contains(d.id.as_str())
                };
                if is_gold {
                    new_docs[ti] += 1;
                }
            }
            let covered = covered_answer_set(&q.answers, &docs, mode)?;
            for a in covered {
                if seen_answers.insert(a) {
                    new_answers[ti] += 1;
                }
            }
        }
    }
    let n = pairs.len().max(1) as f64;
    Ok((0..max_turns)
        .map(|t| TurnContribution {
            turn: t + 1,
            new_gold_docs_mean: new_docs[t] as f64 / n,
            new_answers_mean: new_answers[t] as f64 / n,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceResult {
    pub system_a: String,
    pub system_b: String,
    pub metric: String,
    pub trials: usize,
    pub alpha: f64,
    pub mean_a: f64,
    pub mean_b: f64,
    pub p_value: f64,
    pub significant: bool,
}

/// Paired bootstrap over query indices.
///
/// With `mean(a) > mean(b)` the p-value is the fraction of resamples where
/// `mean(b) >= mean(a)`, and symmetrically. When the observed means tie, the
/// two one-sided fractions are doubled and the smaller is reported.
pub fn bootstrap_p_value<R: Rng>(a: &[f64], b: &[f64], trials: usize, rng: &mut R) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(Error::InvalidInput(
            "bootstrap needs at least 2 paired scores".into(),
        ));
    }
    if trials == 0 {
        return Err(Error::Config("bootstrap trials must be at least 1".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len();
    let observed = d.iter().sum::<f64>();
    let (mut le, mut ge) = (0usize, 0usize);
    for _ in 0..trials {
        let s: f64 = (0..n).map(|_| d[rng.random_range(0..n)]).sum();
        if s <= 0.0 {
            le += 1;
        }
        if s >= 0.0 {
            ge += 1;
        }
    }
    let t = trials as f64;
    Ok(if observed > 0.0 {
        le as f64 / t
    } else if observed < 0.0 {
        ge as f64 / t
    } else {
        (2.0 * (le.min(ge) as f64) / t).min(1.0)
    })
}

pub fn bootstrap_compare<R: Rng>(
    scores_a: &[f64],
    scores_b: &[f64],
    trials: usize,
    alpha: f64,
    rng: &mut R,
) -> Result<SignificanceResult> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!(
            "alpha must lie in (0, 1), got {alpha}"
        )));
    }
    let p = bootstrap_p_value(scores_a, scores_b, trials, rng)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(SignificanceResult {
        system_a: "a".into(),
        system_b: "b".into(),
        metric: "score".into(),
        trials,
        alpha,
        mean_a: mean(scores_a),
        mean_b: mean(scores_b),
        p_value: p,
        significant: p < alpha,
    })
}

/// Per-query score vectors of two reports, aligned by query id.
pub fn paired_scores(
    a: &DatasetReport,
    b: &DatasetReport,
    metric: fn(&QueryScore) -> f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let ma: BTreeMap<&str, f64> = a
        .per_query
        .iter()
        .map(|s| (s.query_id.as_str(), metric(s)))
        .collect();
    let mb: BTreeMap<&str, f64> = b
        .per_query
        .iter()
        .map(|s| (s.query_id.as_str(), metric(s)))
        .collect();
    let ka: BTreeSet<&str> = ma.keys().copied().collect();
    let kb: BTreeSet<&str> = mb.keys().copied().collect();
    if ka != kb {
        let diff: Vec<String> = ka
            .symmetric_difference(&kb)
            .map(|s| s.to_string())
            .collect();
        return Err(Error::InvalidInput(format!(
            "reports cover different queries; symmetric difference: {diff:?}"
        )));
    }
    Ok((
        ma.values().copied().collect(),
        ka.iter().map(|k| mb[k]).collect(),
    ))
}
