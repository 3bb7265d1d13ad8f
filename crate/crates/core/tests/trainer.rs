mod common;

use std::collections::HashMap;

use approx::assert_abs_diff_eq;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rvr_core::dataset::{Corpus, Document, Query};
use rvr_core::embedder::{EmbedderConfig, EmbedderModel};
use rvr_core::synth::{generate, SynthConfig};
use rvr_core::trainer::{
    batch_loss, batch_loss_and_gradient, build_initial_examples, build_subsequent_examples,
    finite_difference, infonce_from_scores, infonce_loss, read_examples, relative_error,
    train_embedder, write_examples, ContextBound, EncodedBatch, TrainConfig, TrainingExample,
};
use rvr_core::Error;

use common::random_words;

fn small_cfg() -> EmbedderConfig {
    EmbedderConfig {
        d_out: 8,
        n_features: 256,
        hash_seed: 3,
        ngram_min: 3,
        ngram_max: 5,
    }
}

fn random_batch(rng: &mut ChaCha8Rng, n: usize) -> (Corpus, Vec<TrainingExample>) {
    let docs: Vec<Document> = (0..2 * n)
        .map(|i| {
            let len = rng.random_range(2..8);
            Document::new(format!("d{i}"), "", random_words(rng, len))
        })
        .collect();
    let corpus = Corpus::new(docs).unwrap();
    let batch = (0..n)
        .map(|i| TrainingExample {
            input_text: random_words(rng, 4),
            positive_doc_id: format!("d{i}"),
            negative_doc_id: format!("d{}", n + i),
            m_used: 0,
        })
        .collect();
    (corpus, batch)
}

/// Textbook InfoNCE on embeddings from the public embedding API.
fn naive_loss(model: &EmbedderModel, corpus: &Corpus, batch: &[TrainingExample], tau: f64) -> f64 {
    let cands: Vec<Vec<f64>> = batch
        .iter()
        .map(|ex| &ex.positive_doc_id)
        .chain(batch.iter().map(|ex| &ex.negative_doc_id))
        .map(|id| {
            model
                .embed_document(corpus.get(id).unwrap())
                .unwrap()
                .into_inner()
        })
        .collect();
    let mut total = 0.0;
    for (i, ex) in batch.iter().enumerate() {
        let q = model.embed(&ex.input_text).unwrap().into_inner();
        let s: Vec<f64> = cands
            .iter()
            .map(|c| q.iter().zip(c).map(|(a, b)| a * b).sum::<f64>() / tau)
            .collect();
        let denom: f64 = s.iter().map(|v| v.exp()).sum();
        total += -(s[i].exp() / denom).ln();
    }
    total / batch.len() as f64
}

#[test]
fn loss_matches_naive_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let n = rng.random_range(1..6);
        let (corpus, batch) = random_batch(&mut rng, n);
        let model = EmbedderModel::random(small_cfg(), rng.random()).unwrap();
        for tau in [0.05, 0.5, 1.0] {
            let got = infonce_loss(&model, &corpus, &batch, tau).unwrap().loss;
            assert_abs_diff_eq!(
                got,
                naive_loss(&model, &corpus, &batch, tau),
                epsilon = 1e-9
            );
        }
    }
}

#[test]
fn gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for tau in [0.05, 1.0] {
        for _ in 0..10 {
            let (corpus, batch) = random_batch(&mut rng, 4);
            let mut model = EmbedderModel::random(small_cfg(), rng.random()).unwrap();
            let enc = EncodedBatch::new(&model, &corpus, &batch).unwrap();
            let (_, grad) = batch_loss_and_gradient(&model, &enc, tau).unwrap();
            let cols: Vec<usize> = grad.columns().map(|(c, _)| c).collect();
            for _ in 0..20 {
                let col = cols[rng.random_range(0..cols.len())];
                let row = rng.random_range(0..8);
                let fd = finite_difference(&mut model, &enc, tau, row, col, 1e-5).unwrap();
                let rel = relative_error(grad.get(row, col), fd, 1e-8);
                assert!(
                    rel <= 1e-4,
                    "tau {tau}: ({row},{col}) analytic {} fd {fd}",
                    grad.get(row, col)
                );
            }
            // Coordinates of features absent from the batch have zero gradient.
            let absent = (0..256).find(|c| !cols.contains(c));
            if let Some(c) = absent {
                assert_eq!(
                    finite_difference(&mut model, &enc, tau, 0, c, 1e-5).unwrap(),
                    0.0
                );
            }
        }
    }
}

#[test]
fn symmetric_batch_has_zero_gradient() {
    // Query, positive and negative share one text: every score is 1.
    let corpus = Corpus::new(vec![
        Document::new("p", "", "same words"),
        Document::new("n", "", "same words"),
    ])
    .unwrap();
    let batch = vec![TrainingExample {
        input_text: "same words".into(),
        positive_doc_id: "p".into(),
        negative_doc_id: "n".into(),
        m_used: 0,
    }];
    let model = EmbedderModel::random(small_cfg(), 9).unwrap();
    let enc = EncodedBatch::new(&model, &corpus, &batch).unwrap();
    let (loss, grad) = batch_loss_and_gradient(&model, &enc, 0.05).unwrap();
    assert_abs_diff_eq!(loss, 2f64.ln(), epsilon = 1e-12);
    assert!(grad.norm() < 1e-12);
}

#[test]
fn closed_forms() {
    // Zero weights give zero embeddings, so every similarity is equal.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for n in 1..6 {
        let (corpus, batch) = random_batch(&mut rng, n);
        let model = EmbedderModel::from_weights(small_cfg(), vec![0.0; 8 * 256]).unwrap();
        let enc = EncodedBatch::new(&model, &corpus, &batch).unwrap();
        assert_abs_diff_eq!(
            batch_loss(&model, &enc, 0.05).unwrap(),
            (2.0 * n as f64).ln(),
            epsilon = 1e-9
        );
    }
    let n = 4;
    let scores: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..2 * n)
                .map(|j| if i == j { 1.0 } else { -1.0 })
                .collect()
        })
        .collect();
    let sl = infonce_from_scores(&scores, &(0..n).collect::<Vec<_>>(), 0.05).unwrap();
    assert!(sl.loss <= 1e-12);
}

#[test]
fn divergence_is_reported() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (corpus, batch) = random_batch(&mut rng, 6);
    let model = EmbedderModel::random(small_cfg(), 1).unwrap();
    let cfg = TrainConfig {
        divergence_threshold: 1e-6,
        total_steps: 3,
        batch_size: 4,
        ..Default::default()
    };
    match train_embedder(&model, &corpus, &batch, &cfg) {
        Err(Error::Diverged { step: 0, .. }) => {}
        other => panic!("expected divergence at step 0, got {other:?}"),
    }
}

fn gold_fixture(n_gold: usize) -> (Corpus, Query) {
    let docs: Vec<Document> = (0..50)
        .map(|i| {
            Document::new(
                format!("d{i:02}"),
                format!("T{i}"),
                format!("body of document {i}"),
            )
        })
        .collect();
    let corpus = Corpus::new(docs).unwrap();
    let gold: Vec<String> = (0..n_gold).map(|i| format!("d{:02}", 10 + i)).collect();
    let answers = (0..n_gold).map(|i| format!("a{i}")).collect();
    (
        corpus,
        Query::new("q", "which ones?", answers, gold).unwrap(),
    )
}

#[test]
fn subsequent_positives_are_uniform_and_outside_context() {
    let (corpus, q) = gold_fixture(5);
    let queries = vec![q.clone(); 20_000];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let out = build_subsequent_examples(
        &queries,
        &corpus,
        2,
        ContextBound::LeaveOnePositive,
        &mut rng,
    )
    .unwrap();
    assert_eq!(out.skipped, 0);
    let mut pos_counts: HashMap<&str, usize> = HashMap::new();
    for ex in &out.examples {
        assert!(q.gold_doc_ids.contains(&ex.positive_doc_id));
        assert!(!q.gold_doc_ids.contains(&ex.negative_doc_id));
        let rendered = corpus.get(&ex.positive_doc_id).unwrap().render();
        assert!(
            !ex.input_text.contains(&rendered),
            "positive inside its own context"
        );
        assert_eq!(ex.input_text.matches(" [DOC] ").count(), ex.m_used);
        *pos_counts.entry(&ex.positive_doc_id).or_default() += 1;
    }
    // Chi-square with 4 degrees of freedom; 18.47 is the 0.999 quantile.
    let expected = out.examples.len() as f64 / 5.0;
    let chi2: f64 = q
        .gold_doc_ids
        .iter()
        .map(|g| {
            let o = pos_counts.get(g.as_str()).copied().unwrap_or(0) as f64;
            (o - expected).powi(2) / expected
        })
        .sum();
    assert!(chi2 < 18.47, "chi2 = {chi2}");
}

#[test]
fn literal_bound_can_exhaust_gold_and_skips() {
    let (corpus, q) = gold_fixture(2);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let out =
        build_subsequent_examples(&vec![q; 3000], &corpus, 6, ContextBound::Literal, &mut rng)
            .unwrap();
    // m is uniform over {0, 1, 2}; m = 2 leaves no positive.
    let frac = out.skipped as f64 / 3000.0;
    assert!((frac - 1.0 / 3.0).abs() < 0.05, "{frac}");
    assert!(out.examples.iter().all(|e| e.m_used < 2));
}

#[test]
fn initial_examples_and_jsonl_round_trip() {
    let (corpus, q) = gold_fixture(3);
    let empty = Query::new("e", "none", vec!["x".into()], vec![]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let out = build_initial_examples(&[q.clone(), empty], &corpus, &mut rng).unwrap();
    assert_eq!(out.examples.len(), 1);
    assert_eq!(out.skipped, 1);
    assert_eq!(out.examples[0].input_text, q.question);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("ex.jsonl");
    write_examples(&out.examples, &p).unwrap();
    assert_eq!(read_examples(&p).unwrap(), out.examples);
}

#[test]
fn training_halves_the_loss() {
    let ds = generate(&SynthConfig {
        n_docs: 4000,
        n_train_queries: 500,
        n_test_queries: 0,
        ..Default::default()
    })
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let examples = build_initial_examples(&ds.train_queries, &ds.corpus, &mut rng)
        .unwrap()
        .examples;
    let cfg = EmbedderConfig {
        d_out: 32,
        n_features: 1 << 13,
        ..Default::default()
    };
    let init = EmbedderModel::random(cfg, 1).unwrap();
    let train = TrainConfig {
        learning_rate: 1e-3,
        warmup_steps: 100,
        total_steps: 2000,
        log_every: 100,
        grad_check_every: 500,
        ..Default::default()
    };
    let out = train_embedder(&init, &ds.corpus, &examples, &train).unwrap();
    let first = out.curve.first().unwrap().loss;
    let last = out.curve.last().unwrap().loss;
    assert!(last <= 0.5 * first, "loss {first} -> {last}");
    let again = train_embedder(&init, &ds.corpus, &examples, &train).unwrap();
    assert_eq!(
        again.model, out.model,
        "training is deterministic in the seed"
    );
}
