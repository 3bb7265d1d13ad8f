#![allow(dead_code)]

use rand::seq::IndexedRandom;
use rand::Rng;
use rvr_core::dataset::{Corpus, Document, Query};

pub const VOCAB: &[&str] = &[
    "alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel", "india", "juliet",
    "kilo", "lima", "mike", "november", "oscar", "papa", "quebec", "romeo", "sierra", "tango",
];

pub fn random_words<R: Rng>(rng: &mut R, n: usize) -> String {
    (0..n)
        .map(|_| *VOCAB.choose(rng).unwrap())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Short random documents over a small vocabulary, so that multi-word
/// answers occasionally occur by chance.
pub fn random_corpus<R: Rng>(rng: &mut R, n: usize) -> Corpus {
    let docs = (0..n)
        .map(|i| {
            let n_title = rng.random_range(0..3);
            let title = random_words(rng, n_title);
            let len = rng.random_range(1..12);
            Document::new(format!("d{i:05}"), title, random_words(rng, len))
        })
        .collect();
    Corpus::new(docs).unwrap()
}

/// A query whose answers are random 1-2 word phrases; gold ids are the
/// documents that happen to contain an answer.
pub fn random_query<R: Rng>(rng: &mut R, id: usize, corpus: &Corpus) -> Query {
    let n_answers = rng.random_range(1..6);
    let answers = (0..n_answers)
        .map(|_| {
            let n = rng.random_range(1..3);
            random_words(rng, n)
        })
        .collect::<Vec<_>>();
    let gold = corpus
        .iter()
        .filter(|d| {
            let hay = naive_normalize(&d.full_text());
            answers.iter().any(|a| hay.contains(&naive_normalize(a)))
        })
        .map(|d| d.id.clone())
        .collect();
    Query::new(format!("q{id:04}"), random_words(rng, 4), answers, gold).unwrap()
}

/// Lowercase and collapse whitespace; equivalent to the library's
/// normalization on ASCII input.
pub fn naive_normalize(s: &str) -> String {
    s.to_lowercase()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}
