//! Corpus and query-set loading, text normalization and answer coverage.
//!
//! Both files are JSONL, one record per line:
//!
//! ```text
//! corpus.jsonl   {"id": "d1", "title": "...", "text": "..."}
//! queries.jsonl  {"id": "q1", "question": "...", "answers": ["..."], "gold_doc_ids": ["d1"]}
//! ```
//!
//! An answer is *covered* by a document when its normalized form occurs as a
//! contiguous substring of the document's normalized `title + " " + text`.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub title: String,
    pub text: String,
}

impl Document {
    pub fn new(id: impl Into<String>, title: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            title: title.into(),
            text: text.into(),
        }
    }

    /// `title + " " + text`; the string that gets embedded and matched against.
    pub fn full_text(&self) -> String {
        format!("{} {}", self.title, self.text)
    }

    /// `"title. text"`, used when a document is shown to a retriever or verifier.
    pub fn render(&self) -> String {
        if self.title.is_empty() {
            self.text.clone()
        } else {
            format!("{}. {}", self.title, self.text)
        }
    }
}

/// An ordered document collection with id lookup.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    docs: Vec<Document>,
    by_id: HashMap<String, usize>,
}

impl Corpus {
    pub fn new(docs: Vec<Document>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(docs.len());
        for (pos, doc) in docs.iter().enumerate() {
            validate_document(doc)?;
            if by_id.insert(doc.id.clone(), pos).is_some() {
                return Err(Error::DuplicateId(doc.id.clone()));
            }
        }
        Ok(Self { docs, by_id })
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn docs(&self) -> &[Document] {
        &self.docs
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Document> {
        self.docs.iter()
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Option<&Document> {
        self.position(id).map(|p| &self.docs[p])
    }

    pub fn require(&self, id: &str) -> Result<&Document> {
        self.get(id)
            .ok_or_else(|| Error::UnknownDocument(id.to_string()))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.by_id.contains_key(id)
    }
}

fn validate_document(doc: &Document) -> Result<()> {
    if doc.id.is_empty() {
        return Err(Error::InvalidInput("document id must be non-empty".into()));
    }
    if doc.text.is_empty() {
        return Err(Error::InvalidInput(format!(
            "document {:?} has empty text",
            doc.id
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub question: String,
    /// Distinct gold answer strings, in file order.
    pub answers: Vec<String>,
    /// Gold document ids; empty for evaluation-only sets.
    #[serde(default)]
    pub gold_doc_ids: Vec<String>,
}

impl Query {
    pub fn new(
        id: impl Into<String>,
        question: impl Into<String>,
        answers: Vec<String>,
        gold_doc_ids: Vec<String>,
    ) -> Result<Self> {
        let id = id.into();
        if answers.is_empty() {
            return Err(Error::InvalidInput(format!("query {id:?} has no answers")));
        }
        if let Some(a) = answers.iter().find(|a| normalize(a).is_empty()) {
            return Err(Error::InvalidInput(format!(
                "query {id:?} has a blank answer {a:?}"
            )));
        }
        Ok(Self {
            id,
            question: question.into(),
            answers: dedup_preserving_order(answers),
            gold_doc_ids: dedup_preserving_order(gold_doc_ids),
        })
    }

    /// Checks that every gold document id resolves in `corpus`.
    pub fn check_gold(&self, corpus: &Corpus) -> Result<()> {
        match self.gold_doc_ids.iter().find(|id| !corpus.contains(id)) {
            Some(id) => Err(Error::InvalidInput(format!(
                "query {:?} references unknown gold document {id:?}",
                self.id
            ))),
            None => Ok(()),
        }
    }
}

fn dedup_preserving_order(items: Vec<String>) -> Vec<String> {
    let mut seen = HashSet::with_capacity(items.len());
    items
        .into_iter()
        .filter(|s| seen.insert(s.clone()))
        .collect()
}

/// Summary statistics over a query set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuerySetStats {
    pub queries: usize,
    pub mean_answers: f64,
    pub mean_gold_docs: f64,
}

impl QuerySetStats {
    pub fn of(queries: &[Query]) -> Self {
        let n = queries.len();
        if n == 0 {
            return Self {
                queries: 0,
                mean_answers: 0.0,
                mean_gold_docs: 0.0,
            };
        }
        let answers: usize = queries.iter().map(|q| q.answers.len()).sum();
        let gold: usize = queries.iter().map(|q| q.gold_doc_ids.len()).sum();
        Self {
            queries: n,
            mean_answers: answers as f64 / n as f64,
            mean_gold_docs: gold as f64 / n as f64,
        }
    }
}

/// Case folding plus whitespace collapsing.
pub fn normalize(text: &str) -> String {
    let folded = caseless::default_case_fold_str(text);
    let mut out = String::with_capacity(folded.len());
    for word in folded.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}

/// How answer strings are matched against documents.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    /// Case-folded, whitespace-collapsed substring match.
    #[default]
    Normalized,
    /// Byte-exact substring match.
    Strict,
}

impl MatchMode {
    pub fn prepare(self, text: &str) -> String {
        match self {
            MatchMode::Normalized => normalize(text),
            MatchMode::Strict => text.to_string(),
        }
    }

    /// The haystack an answer is searched in.
    pub fn haystack(self, doc: &Document) -> String {
        self.prepare(&doc.full_text())
    }

    /// Prepares an answer for matching; blank answers are rejected.
    pub fn needle(self, answer: &str) -> Result<String> {
        let needle = self.prepare(answer);
        if needle.is_empty() || normalize(answer).is_empty() {
            return Err(Error::InvalidInput("answer must be non-empty".into()));
        }
        Ok(needle)
    }
}

pub fn answer_covered(doc: &Document, answer: &str) -> Result<bool> {
    answer_covered_with(doc, answer, MatchMode::Normalized)
}

pub fn answer_covered_with(doc: &Document, answer: &str, mode: MatchMode) -> Result<bool> {
    let needle = mode.needle(answer)?;
    Ok(mode.haystack(doc).contains(&needle))
}

/// Indices into `answers` of the answers covered by `doc`.
pub fn covered_answers(doc: &Document, answers: &[String], mode: MatchMode) -> Result<Vec<usize>> {
    let hay = mode.haystack(doc);
    let mut out = Vec::new();
    for (i, a) in answers.iter().enumerate() {
        if hay.contains(&mode.needle(a)?) {
            out.push(i);
        }
    }
    Ok(out)
}

#[derive(Deserialize)]
struct RawDocument {
    id: String,
    title: String,
    text: String,
}

#[derive(Deserialize)]
struct RawQuery {
    id: String,
    question: String,
    answers: Option<Vec<String>>,
    #[serde(default)]
    gold_doc_ids: Option<Vec<String>>,
}

fn read_jsonl<T, F>(path: &Path, mut f: F) -> Result<()>
where
    T: for<'de> Deserialize<'de>,
    F: FnMut(usize, T) -> Result<()>,
{
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: T = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        f(line_no, record)?;
    }
    Ok(())
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let mut docs = Vec::new();
    let mut seen = HashSet::new();
    read_jsonl(path, |line, raw: RawDocument| {
        let doc = Document::new(raw.id, raw.title, raw.text);
        validate_document(&doc).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line,
            message: e.to_string(),
        })?;
        if !seen.insert(doc.id.clone()) {
            return Err(Error::DuplicateId(doc.id));
        }
        docs.push(doc);
        Ok(())
    })?;
    Corpus::new(docs)
}

pub fn load_queries(path: impl AsRef<Path>) -> Result<Vec<Query>> {
    let path = path.as_ref();
    let mut queries = Vec::new();
    read_jsonl(path, |line, raw: RawQuery| {
        let q = Query::new(
            raw.id,
            raw.question,
            raw.answers.unwrap_or_default(),
            raw.gold_doc_ids.unwrap_or_default(),
        )
        .map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line,
            message: e.to_string(),
        })?;
        queries.push(q);
        Ok(())
    })?;
    Ok(queries)
}

fn write_jsonl<'a, T: Serialize + 'a>(
    path: &Path,
    items: impl IntoIterator<Item = &'a T>,
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)
            .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    write_jsonl(path.as_ref(), corpus.docs())
}

pub fn write_queries(queries: &[Query], path: impl AsRef<Path>) -> Result<()> {
    write_jsonl(path.as_ref(), queries)
}
