//! Training-example construction for the initial and subsequent retrievers.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Corpus, Document, Query};
use crate::embedder::augment_query;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub input_text: String,
    pub positive_doc_id: String,
    pub negative_doc_id: String,
    /// Number of gold documents appended to the query; 0 for initial examples.
    pub m_used: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GeneratedExamples {
    pub examples: Vec<TrainingExample>,
    /// Queries (or draws) that could not produce an example.
    pub skipped: usize,
}

/// Upper bound for the number of context documents `m`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextBound {
    /// `m <= min(M, |D*| - 1)`, so a positive always remains.
    #[default]
    LeaveOnePositive,
    /// `m <= min(M, |D*|)`; draws that consume every gold document are skipped.
    Literal,
}

fn gold_positions(query: &Query, corpus: &Corpus) -> Result<Vec<usize>> {
    query
        .gold_doc_ids
        .iter()
        .map(|id| {
            corpus.position(id).ok_or_else(|| {
                Error::InvalidInput(format!(
                    "query {:?} references unknown gold document {id:?}",
                    query.id
                ))
            })
        })
        .collect()
}

/// Uniform draw from the corpus outside `gold`; `None` if nothing is left.
fn sample_negative<R: Rng>(corpus: &Corpus, gold: &HashSet<usize>, rng: &mut R) -> Option<usize> {
    if gold.len() >= corpus.len() {
        return None;
    }
    loop {
        let pos = rng.random_range(0..corpus.len());
        if !gold.contains(&pos) {
            return Some(pos);
        }
    }
}

/// One example per query: `x = q`, positive uniform over the gold set,
/// negative uniform over the rest of the corpus.
pub fn build_initial_examples<R: Rng>(
    queries: &[Query],
    corpus: &Corpus,
    rng: &mut R,
) -> Result<GeneratedExamples> {
    let mut out = GeneratedExamples::default();
    for query in queries {
        let gold = gold_positions(query, corpus)?;
        if gold.is_empty() {
            out.skipped += 1;
            continue;
        }
        let gold_set: HashSet<usize> = gold.iter().copied().collect();
        let positive = gold[rng.random_range(0..gold.len())];
        let Some(negative) = sample_negative(corpus, &gold_set, rng) else {
            out.skipped += 1;
            continue;
        };
        out.examples.push(TrainingExample {
            input_text: query.question.clone(),
            positive_doc_id: corpus.docs()[positive].id.clone(),
            negative_doc_id: corpus.docs()[negative].id.clone(),
            m_used: 0,
        });
    }
    if out.skipped > 0 {
        log::warn!(
            "skipped {} queries without usable gold documents",
            out.skipped
        );
    }
    Ok(out)
}

/// One example per query: `m` uniform in `0..=min(M, bound)`, `m` gold
/// documents drawn without replacement as context, positive uniform over the
/// remaining gold documents.
pub fn build_subsequent_examples<R: Rng>(
    queries: &[Query],
    corpus: &Corpus,
    m_budget: usize,
    bound: ContextBound,
    rng: &mut R,
) -> Result<GeneratedExamples> {
    let mut out = GeneratedExamples::default();
    for query in queries {
        let gold = gold_positions(query, corpus)?;
        if gold.is_empty() {
            out.skipped += 1;
            continue;
        }
        let max_m = match bound {
            ContextBound::LeaveOnePositive => m_budget.min(gold.len() - 1),
            ContextBound::Literal => m_budget.min(gold.len()),
        };
        let m = rng.random_range(0..=max_m);
        let picked = sample(rng, gold.len(), m).into_vec();
        let ctx: Vec<usize> = picked.iter().map(|&i| gold[i]).collect();
        let remaining: Vec<usize> = gold.iter().copied().filter(|g| !ctx.contains(g)).collect();
        if remaining.is_empty() {
            out.skipped += 1;
            continue;
        }
        let positive = remaining[rng.random_range(0..remaining.len())];
        let gold_set: HashSet<usize> = gold.iter().copied().collect();
        let Some(negative) = sample_negative(corpus, &gold_set, rng) else {
            out.skipped += 1;
            continue;
        };
        let ctx_docs: Vec<&Document> = ctx.iter().map(|&p| &corpus.docs()[p]).collect();
        out.examples.push(TrainingExample {
            input_text: augment_query(&query.question, ctx_docs, m),
            positive_doc_id: corpus.docs()[positive].id.clone(),
            negative_doc_id: corpus.docs()[negative].id.clone(),
            m_used: m,
        });
    }
    if out.skipped > 0 {
        log::warn!("skipped {} subsequent-retriever draws", out.skipped);
    }
    Ok(out)
}

pub fn write_examples(examples: &[TrainingExample], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for ex in examples {
        serde_json::to_writer(&mut w, ex).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_examples(path: impl AsRef<Path>) -> Result<Vec<TrainingExample>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedder::DOC_SEPARATOR;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn corpus() -> Corpus {
        Corpus::new(
            (0..20)
                .map(|i| Document::new(format!("d{i}"), format!("T{i}"), format!("text {i}")))
                .collect(),
        )
        .unwrap()
    }

    fn query(gold: &[&str]) -> Query {
        Query::new(
            "q",
            "which?",
            vec!["x".into()],
            gold.iter().map(|s| s.to_string()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn singleton_gold_is_forced() {
        let c = corpus();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let ex = build_initial_examples(&[query(&["d4"])], &c, &mut rng).unwrap();
            assert_eq!(ex.examples[0].positive_doc_id, "d4");
            assert_ne!(ex.examples[0].negative_doc_id, "d4");
            let ex = build_subsequent_examples(
                &[query(&["d4"])],
                &c,
                6,
                ContextBound::default(),
                &mut rng,
            )
            .unwrap();
            let e = &ex.examples[0];
            assert_eq!(
                (e.m_used, e.input_text.as_str(), e.positive_doc_id.as_str()),
                (0, "which?", "d4")
            );
        }
    }

    #[test]
    fn seeded_generation_is_reproducible() {
        let c = corpus();
        let qs = vec![query(&["d1", "d2", "d3"]), query(&["d5", "d6"])];
        let a = build_subsequent_examples(
            &qs,
            &c,
            3,
            ContextBound::default(),
            &mut ChaCha8Rng::seed_from_u64(9),
        )
        .unwrap();
        let b = build_subsequent_examples(
            &qs,
            &c,
            3,
            ContextBound::default(),
            &mut ChaCha8Rng::seed_from_u64(9),
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_gold_is_skipped() {
        let c = corpus();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ex = build_initial_examples(&[query(&[]), query(&["d1"])], &c, &mut rng).unwrap();
        assert_eq!((ex.examples.len(), ex.skipped), (1, 1));
    }

    #[test]
    fn literal_bound_skips_exhausted_draws() {
        let c = corpus();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let qs: Vec<Query> = (0..400).map(|_| query(&["d1", "d2"])).collect();
        let ex = build_subsequent_examples(&qs, &c, 6, ContextBound::Literal, &mut rng).unwrap();
        assert!(ex.skipped > 0);
        assert_eq!(ex.examples.len() + ex.skipped, 400);
        assert!(ex.examples.iter().all(|e| e.m_used <= 1));
    }

    #[test]
    fn context_never_contains_positive() {
        let c = corpus();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let qs: Vec<Query> = (0..300).map(|_| query(&["d1", "d2", "d3", "d4"])).collect();
        let ex = build_subsequent_examples(&qs, &c, 3, ContextBound::default(), &mut rng).unwrap();
        for e in &ex.examples {
            assert_eq!(e.input_text.matches(DOC_SEPARATOR).count(), e.m_used);
            let pos = c.get(&e.positive_doc_id).unwrap();
            assert!(!e.input_text.contains(&pos.render()));
        }
    }

    #[test]
    fn examples_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ex.jsonl");
        let ex = vec![TrainingExample {
            input_text: "q [DOC] T. x".into(),
            positive_doc_id: "d1".into(),
            negative_doc_id: "d2".into(),
            m_used: 1,
        }];
        write_examples(&ex, &p).unwrap();
        assert_eq!(read_examples(&p).unwrap(), ex);
    }
}
