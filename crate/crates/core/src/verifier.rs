//! Per-document relevance judgments and the rank-limited verified subset.

mod llm;

pub use llm::{parse_reply, LlmConfig, LlmVerifier, DEFAULT_PROMPT_TEMPLATE};

use serde::{Deserialize, Serialize};

use crate::dataset::{Corpus, Document, MatchMode, Query};
use crate::error::Result;
use crate::index::RankedList;

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum VerifierKind {
    /// Relevant iff the document covers any of the query's answers.
    Oracle {
        mode: MatchMode,
    },
    /// Accepts everything; rank limiting alone decides the subset.
    TopM,
    Llm(LlmVerifier),
}

impl VerifierKind {
    pub fn oracle() -> Self {
        VerifierKind::Oracle {
            mode: MatchMode::Normalized,
        }
    }

    pub fn source(&self) -> VerdictSource {
        match self {
            VerifierKind::Oracle { .. } => VerdictSource::Oracle,
            VerifierKind::TopM => VerdictSource::TopM,
            VerifierKind::Llm(_) => VerdictSource::Llm,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictSource {
    Oracle,
    TopM,
    Llm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub doc_id: String,
    pub relevant: bool,
    pub source: VerdictSource,
    /// Model reply text; present only for LLM verdicts.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub raw_response: Option<String>,
}

pub fn oracle_relevant(query: &Query, doc: &Document, mode: MatchMode) -> Result<bool> {
    let hay = mode.haystack(doc);
    for answer in &query.answers {
        if hay.contains(&mode.needle(answer)?) {
            return Ok(true);
        }
    }
    Ok(false)
}

pub fn verify(kind: &VerifierKind, query: &Query, doc: &Document) -> Result<Verdict> {
    match kind {
        VerifierKind::Oracle { mode } => Ok(Verdict {
            doc_id: doc.id.clone(),
            relevant: oracle_relevant(query, doc, *mode)?,
            source: VerdictSource::Oracle,
            raw_response: None,
        }),
        VerifierKind::TopM => Ok(Verdict {
            doc_id: doc.id.clone(),
            relevant: true,
            source: VerdictSource::TopM,
            raw_response: None,
        }),
        VerifierKind::Llm(v) => v.verify(query, doc),
    }
}

/// Verdicts for `docs`, in input order.
pub fn verify_all(kind: &VerifierKind, query: &Query, docs: &[&Document]) -> Result<Vec<Verdict>> {
    match kind {
        VerifierKind::Llm(v) => v.verify_many(query, docs),
        _ => docs.iter().map(|d| verify(kind, query, d)).collect(),
    }
}

/// Documents ranked within the first `budget_b` positions that the verifier
/// accepts, in ranking order.
pub fn verified_subset<'c>(
    kind: &VerifierKind,
    query: &Query,
    ranked: &RankedList,
    corpus: &'c Corpus,
    budget_b: usize,
) -> Result<Vec<&'c Document>> {
    let candidates: Vec<&Document> = ranked
        .top(budget_b)
        .iter()
        .map(|e| corpus.require(&e.doc_id))
        .collect::<Result<_>>()?;
    let verdicts = verify_all(kind, query, &candidates)?;
    Ok(candidates
        .into_iter()
        .zip(verdicts)
        .filter(|(_, v)| v.relevant)
        .map(|(d, _)| d)
        .collect())
}
