//! Synthetic multi-answer retrieval tasks.
//!
//! Every query has a few topic words and a few bridge words, all unique to
//! it. Each answer lives in exactly one gold document. "Direct" gold
//! documents mention the topic words, so a plain lexical match on the
//! question finds them. "Hidden" gold documents only share the bridge words
//! with the other gold documents, so they surface once a direct gold
//! document is appended to the query. Distractors mention the topic words
//! but carry no answer.

use std::collections::HashSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Corpus, Document, Query};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_docs: usize,
    pub n_train_queries: usize,
    pub n_test_queries: usize,
    pub answers_min: usize,
    pub answers_max: usize,
    /// Probability that a gold document other than the first is hidden.
    pub hidden_fraction: f64,
    pub distractors_per_query: usize,
    pub topic_words: usize,
    pub bridge_words: usize,
    pub filler_vocab: usize,
    pub filler_per_doc: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_docs: 2000,
            n_train_queries: 100,
            n_test_queries: 200,
            answers_min: 3,
            answers_max: 6,
            hidden_fraction: 0.4,
            distractors_per_query: 2,
            topic_words: 3,
            bridge_words: 3,
            filler_vocab: 1500,
            filler_per_doc: 12,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.answers_min == 0 || self.answers_min > self.answers_max {
            return Err(Error::Config(format!(
                "synth.answers_min/answers_max: need 1 <= min <= max, got {}..{}",
                self.answers_min, self.answers_max
            )));
        }
        if !(0.0..=1.0).contains(&self.hidden_fraction) {
            return Err(Error::Config(
                "synth.hidden_fraction must lie in [0, 1]".into(),
            ));
        }
        if self.topic_words == 0 || self.filler_vocab == 0 {
            return Err(Error::Config(
                "synth.topic_words and synth.filler_vocab must be positive".into(),
            ));
        }
        if self.n_train_queries + self.n_test_queries == 0 {
            return Err(Error::Config("synth: no queries requested".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub corpus: Corpus,
    pub train_queries: Vec<Query>,
    pub test_queries: Vec<Query>,
}

const ONSETS: &[&str] = &[
    "b", "c", "d", "f", "g", "h", "j", "k", "l", "m", "n", "p", "r", "s", "t", "v", "w", "z", "br",
    "dr", "gl", "kr", "pl", "st", "th", "tr", "sk", "vr",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "eo", "ou", "ia"];
const CODAS: &[&str] = &["", "", "n", "r", "l", "s", "k", "m", "x", "th"];

struct Words {
    used: HashSet<String>,
}

impl Words {
    fn fresh<R: Rng>(&mut self, rng: &mut R) -> String {
        loop {
            let syllables = rng.random_range(2..=4);
            let mut w = String::new();
            for _ in 0..syllables {
                w.push_str(ONSETS.choose(rng).unwrap());
                w.push_str(VOWELS.choose(rng).unwrap());
                w.push_str(CODAS.choose(rng).unwrap());
            }
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }

    fn many<R: Rng>(&mut self, n: usize, rng: &mut R) -> Vec<String> {
        (0..n).map(|_| self.fresh(rng)).collect()
    }
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn sentence<R: Rng>(mut words: Vec<String>, rng: &mut R) -> String {
    words.shuffle(rng);
    let mut s = words.join(" ");
    s.push('.');
    s
}

struct Draft {
    title: String,
    text: String,
}

/// Generates a corpus with train and test queries sharing it. Deterministic
/// in `config.seed`.
pub fn generate(config: &SynthConfig) -> Result<SynthDataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut words = Words {
        used: HashSet::new(),
    };
    let filler = words.many(config.filler_vocab, &mut rng);
    let pick_filler = |rng: &mut ChaCha8Rng, n: usize| -> Vec<String> {
        (0..n)
            .map(|_| filler.choose(rng).unwrap().clone())
            .collect()
    };

    let n_queries = config.n_train_queries + config.n_test_queries;
    let mut drafts: Vec<Draft> = Vec::new();
    // (question, answers, gold draft indices)
    let mut specs: Vec<(String, Vec<String>, Vec<usize>)> = Vec::with_capacity(n_queries);

    for _ in 0..n_queries {
        let topic = words.many(config.topic_words, &mut rng);
        let bridge = words.many(config.bridge_words, &mut rng);
        let n_answers = rng.random_range(config.answers_min..=config.answers_max);
        let answers: Vec<String> = (0..n_answers)
            .map(|_| {
                format!(
                    "{} {}",
                    capitalize(&words.fresh(&mut rng)),
                    capitalize(&words.fresh(&mut rng))
                )
            })
            .collect();
        let question = format!("Which {} works are known?", topic.join(" "));
        let mut gold = Vec::with_capacity(n_answers);
        for (i, answer) in answers.iter().enumerate() {
            let hidden = i > 0 && rng.random_bool(config.hidden_fraction);
            let mut body = pick_filler(&mut rng, config.filler_per_doc);
            body.extend(bridge.iter().cloned());
            if !hidden {
                body.extend(topic.iter().cloned());
            }
            let text = format!("{answer} is one of them. {}", sentence(body, &mut rng));
            gold.push(drafts.len());
            drafts.push(Draft {
                title: answer.clone(),
                text,
            });
        }
        for _ in 0..config.distractors_per_query {
            let mut body = pick_filler(&mut rng, config.filler_per_doc + config.bridge_words);
            body.extend(topic.iter().cloned());
            let title = capitalize(&words.fresh(&mut rng));
            drafts.push(Draft {
                title,
                text: sentence(body, &mut rng),
            });
        }
        specs.push((question, answers, gold));
    }

    if drafts.len() > config.n_docs {
        return Err(Error::Config(format!(
            "synth.n_docs = {} is too small; the queries need {} documents",
            config.n_docs,
            drafts.len()
        )));
    }
    while drafts.len() < config.n_docs {
        let body = pick_filler(
            &mut rng,
            config.filler_per_doc + config.topic_words + config.bridge_words,
        );
        let title = capitalize(&words.fresh(&mut rng));
        drafts.push(Draft {
            title,
            text: sentence(body, &mut rng),
        });
    }

    // Shuffle so that ids carry no information about roles.
    let mut order: Vec<usize> = (0..drafts.len()).collect();
    order.shuffle(&mut rng);
    let mut id_of = vec![String::new(); drafts.len()];
    for (new_pos, &old) in order.iter().enumerate() {
        id_of[old] = format!("doc-{new_pos:05}");
    }
    let mut docs: Vec<Option<Document>> = (0..drafts.len()).map(|_| None).collect();
    for (old, d) in drafts.into_iter().enumerate() {
        let pos: usize = id_of[old][4..].parse().expect("generated id");
        docs[pos] = Some(Document::new(id_of[old].clone(), d.title, d.text));
    }
    let corpus = Corpus::new(
        docs.into_iter()
            .map(|d| d.expect("every slot filled"))
            .collect(),
    )?;

    let mut train_queries = Vec::with_capacity(config.n_train_queries);
    let mut test_queries = Vec::with_capacity(config.n_test_queries);
    for (i, (question, answers, gold)) in specs.into_iter().enumerate() {
        let gold_ids = gold.iter().map(|&g| id_of[g].clone()).collect();
        if i < config.n_train_queries {
            train_queries.push(Query::new(
                format!("train-{i:04}"),
                question,
                answers,
                gold_ids,
            )?);
        } else {
            let j = i - config.n_train_queries;
            test_queries.push(Query::new(
                format!("test-{j:04}"),
                question,
                answers,
                gold_ids,
            )?);
        }
    }
    Ok(SynthDataset {
        corpus,
        train_queries,
        test_queries,
    })
}
