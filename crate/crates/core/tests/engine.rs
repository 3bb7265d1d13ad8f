mod common;

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rvr_core::dataset::{Corpus, MatchMode};
use rvr_core::embedder::{EmbedderConfig, EmbedderModel};
use rvr_core::engine::{
    finalize_output, read_traces, run, run_batch, write_traces, MergeMode, Retriever, RunConfig,
    SubsequentDepth, TimingMode, TurnSemantics,
};
use rvr_core::index::VectorIndex;
use rvr_core::verifier::{oracle_relevant, VerifierKind};

use common::{random_corpus, random_query};

struct World {
    corpus: Corpus,
    model_i: EmbedderModel,
    index_i: VectorIndex,
    model_r: EmbedderModel,
    index_r: VectorIndex,
}

fn world(rng: &mut ChaCha8Rng, n_docs: usize) -> World {
    let corpus = random_corpus(rng, n_docs);
    let cfg = EmbedderConfig {
        d_out: 8,
        n_features: 1 << 10,
        ..Default::default()
    };
    let model_i = EmbedderModel::random(cfg, rng.random()).unwrap();
    let model_r = EmbedderModel::random(cfg, rng.random()).unwrap();
    let index_i = VectorIndex::build(&corpus, &model_i).unwrap();
    let index_r = VectorIndex::build(&corpus, &model_r).unwrap();
    World {
        corpus,
        model_i,
        index_i,
        model_r,
        index_r,
    }
}

fn random_config(rng: &mut ChaCha8Rng) -> RunConfig {
    RunConfig {
        turns: rng.random_range(1..=5),
        verifier_budget: rng.random_range(0..60),
        context_budget: rng.random_range(0..6),
        output_k: rng.random_range(1..80),
        merge_mode: MergeMode::Accumulate,
        turn_semantics: if rng.random_bool(0.8) {
            TurnSemantics::TotalCalls
        } else {
            TurnSemantics::LiteralLoop
        },
        subsequent_depth: if rng.random_bool(0.7) {
            SubsequentDepth::OutputK
        } else {
            SubsequentDepth::VerifierBudget
        },
        timing: TimingMode::Wall,
    }
}

#[test]
fn accumulate_invariants_under_fuzzing() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..300 {
        let n_docs = rng.random_range(5..150);
        let w = world(&mut rng, n_docs);
        let f_i = Retriever::new(&w.index_i, &w.model_i).unwrap();
        let f_r = Retriever::new(&w.index_r, &w.model_r).unwrap();
        let cfg = random_config(&mut rng);
        let q = random_query(&mut rng, case, &w.corpus);
        let verifier = if rng.random_bool(0.5) {
            VerifierKind::oracle()
        } else {
            VerifierKind::TopM
        };
        let t = run(&q, &w.corpus, f_i, f_r, &verifier, &cfg).unwrap();

        let out = &t.final_output;
        let unique: HashSet<&String> = out.iter().collect();
        assert_eq!(unique.len(), out.len(), "case {case}: duplicates");

        let verified: Vec<&String> = t.turns.iter().flat_map(|r| &r.verified_ids).collect();
        let mut pool: HashSet<&str> = verified.iter().map(|s| s.as_str()).collect();
        pool.extend(t.turns.last().unwrap().retrieved.ids());
        assert_eq!(
            out.len(),
            cfg.output_k.min(pool.len()),
            "case {case}: length"
        );

        let verified_set: HashSet<&str> = verified.iter().map(|s| s.as_str()).collect();
        let first_unverified = out
            .iter()
            .position(|id| !verified_set.contains(id.as_str()));
        if let Some(p) = first_unverified {
            assert!(
                out[p..]
                    .iter()
                    .all(|id| !verified_set.contains(id.as_str())),
                "case {case}: verified after unverified"
            );
        }

        let max_calls = match cfg.turn_semantics {
            TurnSemantics::TotalCalls => cfg.turns,
            TurnSemantics::LiteralLoop => cfg.turns + 1,
        };
        assert!(t.retrieval_calls <= max_calls, "case {case}: calls");
        assert_eq!(t.retrieval_calls, t.turns.len());

        for r in &t.turns {
            assert!(r.context_ids.len() <= cfg.context_budget);
            assert!(r
                .context_ids
                .iter()
                .zip(&r.verified_ids)
                .all(|(a, b)| a == b));
            let in_budget: Vec<&str> = r.retrieved.ids().take(cfg.verifier_budget).collect();
            for id in &r.verified_ids {
                assert!(
                    in_budget.contains(&id.as_str()),
                    "case {case}: verified outside budget"
                );
                if matches!(verifier, VerifierKind::Oracle { .. }) {
                    let doc = w.corpus.get(id).unwrap();
                    assert!(oracle_relevant(&q, doc, MatchMode::Normalized).unwrap());
                }
            }
        }
        assert_eq!(
            finalize_output(
                &t.turns
                    .iter()
                    .map(|r| r.verified_ids.clone())
                    .collect::<Vec<_>>(),
                &t.turns.last().unwrap().retrieved,
                cfg.output_k
            ),
            *out
        );
    }
}

#[test]
fn single_turn_is_plain_top_k() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..100 {
        let n_docs = rng.random_range(1..120);
        let w = world(&mut rng, n_docs);
        let f_i = Retriever::new(&w.index_i, &w.model_i).unwrap();
        let f_r = Retriever::new(&w.index_r, &w.model_r).unwrap();
        let k = rng.random_range(1..60);
        let q = random_query(&mut rng, case, &w.corpus);
        let t = run(
            &q,
            &w.corpus,
            f_i,
            f_r,
            &VerifierKind::oracle(),
            &RunConfig::single_round(k),
        )
        .unwrap();
        let want: Vec<String> = w
            .index_i
            .search(&w.model_i, &q.question, k)
            .unwrap()
            .ids()
            .map(String::from)
            .collect();
        assert_eq!(t.final_output, want);
        assert_eq!(t.retrieval_calls, 1);
    }
}

#[test]
fn split_half_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for case in 0..200 {
        let n_docs = rng.random_range(1..120);
        let w = world(&mut rng, n_docs);
        let f_i = Retriever::new(&w.index_i, &w.model_i).unwrap();
        let f_r = Retriever::new(&w.index_r, &w.model_r).unwrap();
        let cfg = RunConfig {
            merge_mode: MergeMode::SplitHalf,
            output_k: rng.random_range(1..60),
            context_budget: rng.random_range(0..5),
            ..RunConfig::reference()
        };
        let q = random_query(&mut rng, case, &w.corpus);
        let t = run(&q, &w.corpus, f_i, f_r, &VerifierKind::oracle(), &cfg).unwrap();
        let out = &t.final_output;
        assert_eq!(out.iter().collect::<HashSet<_>>().len(), out.len());
        let first: Vec<&str> = t.turns[0].retrieved.ids().collect();
        let mut pool: HashSet<&str> = first.iter().copied().collect();
        pool.extend(t.turns[1].retrieved.ids());
        assert_eq!(out.len(), cfg.output_k.min(pool.len()));
        let head = cfg.output_k.div_ceil(2).min(first.len());
        assert_eq!(
            out[..head].iter().map(String::as_str).collect::<Vec<_>>(),
            first[..head]
        );
        assert_eq!(
            t.turns[0].context_ids.len(),
            cfg.context_budget.min(first.len())
        );
    }
}

#[test]
fn early_exit_when_enough_verified() {
    // Every document covers the answer, so turn one already fills K.
    let docs = (0..30)
        .map(|i| {
            rvr_core::dataset::Document::new(format!("d{i:02}"), "", format!("answer text {i}"))
        })
        .collect();
    let corpus = Corpus::new(docs).unwrap();
    let cfg = EmbedderConfig {
        d_out: 4,
        n_features: 256,
        ..Default::default()
    };
    let model = EmbedderModel::random(cfg, 0).unwrap();
    let index = VectorIndex::build(&corpus, &model).unwrap();
    let r = Retriever::new(&index, &model).unwrap();
    let q = rvr_core::dataset::Query::new("q", "which?", vec!["answer".into()], vec![]).unwrap();
    let config = RunConfig {
        turns: 4,
        verifier_budget: 30,
        output_k: 10,
        ..RunConfig::reference()
    };
    let t = run(&q, &corpus, r, r, &VerifierKind::oracle(), &config).unwrap();
    assert_eq!(t.retrieval_calls, 2);
    assert_eq!(t.final_output.len(), 10);
}

#[test]
fn batch_is_ordered_and_matches_sequential_and_round_trips() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = world(&mut rng, 200);
    let f_i = Retriever::new(&w.index_i, &w.model_i).unwrap();
    let f_r = Retriever::new(&w.index_r, &w.model_r).unwrap();
    let queries: Vec<_> = (0..40)
        .map(|i| random_query(&mut rng, i, &w.corpus))
        .collect();
    let cfg = RunConfig {
        output_k: 20,
        timing: TimingMode::Off,
        ..RunConfig::reference()
    };
    let seq = run_batch(
        &queries,
        &w.corpus,
        f_i,
        f_r,
        &VerifierKind::oracle(),
        &cfg,
        1,
    )
    .unwrap();
    let par = run_batch(
        &queries,
        &w.corpus,
        f_i,
        f_r,
        &VerifierKind::oracle(),
        &cfg,
        4,
    )
    .unwrap();
    assert_eq!(seq, par);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.jsonl");
    write_traces(&par, &p).unwrap();
    assert_eq!(read_traces(&p).unwrap(), par);
}
