use std::collections::BTreeSet;
use std::time::Instant;

use kbq_bench::metrics::{random_hits_at_k, score, Metric};
use kbq_bench::pipeline::{report, run, BenchConfig};
use kbq_bench::protocol::{make_splits, BenchMode, GenOptions, QueryGenerator};
use kbq_bench::synth::{generate, SynthConfig};
use kbq_core::eval::EvalConfig;
use kbq_core::kbstore::{Embeddings, KbIndex, Triple};
use kbq_core::query::{symbolic_evaluate, Template};
use kbq_core::trainer::TrainConfig;
use proptest::prelude::*;

#[test]
fn split_sizes_follow_the_fraction() {
    // 289,641 training and 20,438 held-out triples of 310,079.
    let total = 310_079;
    let triples: Vec<Triple> = (0..total).map(|i| Triple::new(i % 237, i / 237, i % 14_505)).collect();
    let s = make_splits(&triples, 14_505, 20_438.0 / total as f64, 0).unwrap();
    assert_eq!(s.training.len(), 289_641);
    assert_eq!(s.held_out().len(), 20_438);
}

#[test]
fn localist_runs_score_perfectly() {
    let (vocab, triples) = generate(&SynthConfig::tiny(1)).unwrap();
    let (n, nr) = (vocab.num_entities(), vocab.num_relations());
    let cfg = BenchConfig {
        queries_per_template: 20,
        eval: EvalConfig::entailment().with_k(n).with_k_triples(triples.len()),
        ..Default::default()
    };
    let r = kbq_bench::pipeline::run_with(&cfg, kbq_core::kbstore::KbSplit::entailment(triples), n, nr, Some(Embeddings::localist(n, nr).unwrap()), None).unwrap();
    assert_eq!(r.report.metric(Template::P1, Metric::Hits3), Some(1.0));
    assert_eq!(r.report.average(Metric::Hits1), 1.0);
}

#[test]
fn reports_are_reproducible() {
    let (vocab, triples) = generate(&SynthConfig {
        num_entities: 80,
        num_relations: 5,
        num_types: 3,
        ..Default::default()
    })
    .unwrap();
    let (n, nr) = (vocab.num_entities(), vocab.num_relations());
    let cfg = BenchConfig {
        mode: BenchMode::Generalization,
        queries_per_template: 10,
        seed: 7,
        train: TrainConfig {
            dim: 8,
            steps: 30,
            batch_size: 8,
            ..Default::default()
        },
        ..Default::default()
    };
    let a = run(&cfg, &triples, n, nr).unwrap();
    let b = run(&cfg, &triples, n, nr).unwrap();
    assert_eq!(a.report.to_tsv(), b.report.to_tsv());
    assert_eq!(a.queries, b.queries);
    let other = run(&BenchConfig { seed: 8, ..cfg.clone() }, &triples, n, nr).unwrap();
    assert_ne!(a.queries, other.queries);
}

fn arb_kb() -> impl Strategy<Value = (usize, usize, Vec<Triple>)> {
    (20usize..60, 2usize..5, any::<u64>()).prop_map(|(n, nr, seed)| {
        let (v, t) = generate(&SynthConfig {
            num_entities: n,
            num_relations: nr,
            num_types: 2,
            community_size: 5,
            pool_size: 4,
            participation: 0.8,
            max_fanout: 3,
            zipf_exponent: 1.2,
            seed,
        })
        .unwrap();
        (v.num_entities(), v.num_relations(), t)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn generalization_constraint_holds(kb in arb_kb(), seed in any::<u64>(), disjoint in any::<bool>(), t in 0usize..9) {
        let (n, nr, triples) = kb;
        let split = make_splits(&triples, n, 0.2, seed).unwrap();
        prop_assert!(split.is_sound());
        let full = KbIndex::new(&split.full, n, nr);
        let train = KbIndex::new(&split.training, n, nr);
        let gen = QueryGenerator::new(&split.full, &full, &train);
        let opts = GenOptions { mode: BenchMode::Generalization, disjoint, attempts_per_query: 50 };
        for q in gen.generate(Template::ALL[t], 5, seed, &opts) {
            let gold = symbolic_evaluate(&q.query, &full);
            let known = symbolic_evaluate(&q.query, &train);
            prop_assert_eq!(&gold, &q.gold);
            prop_assert!(known.is_subset(&gold) && gold.len() > known.len());
            if disjoint {
                prop_assert!(known.is_empty());
            }
        }
    }

    #[test]
    fn metrics_are_bounded_and_averaged(ranks in prop::collection::vec((prop::collection::vec(0usize..30, 0..30), prop::collection::btree_set(0usize..30, 1..4)), 1..20)) {
        let queries: Vec<_> = ranks.iter().map(|(_, g)| g.clone()).collect();
        let scores: Vec<_> = ranks.iter().map(|(r, g)| score(r, g)).collect();
        for s in &scores {
            for v in [s.hits1, s.hits3, s.hits10, s.rr] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            prop_assert!(s.hits1 <= s.hits3 && s.hits3 <= s.hits10);
        }
        let stats = kbq_bench::metrics::TemplateStats::from_scores(Template::P1, &scores);
        let mean = scores.iter().map(|s| s.hits3).sum::<f64>() / scores.len() as f64;
        prop_assert!((stats.hits3 - mean).abs() < 1e-12);
        prop_assert_eq!(stats.count, queries.len());
    }

    #[test]
    fn random_baseline_matches_enumeration(n in 1usize..9, g in 0usize..9, k in 1usize..6) {
        let g = g.min(n);
        // Count k-subsets of 0..n that avoid the gold ids 0..g.
        let k2 = k.min(n);
        let mut hit = 0u64;
        let mut all = 0u64;
        for mask in 0u32..(1 << n) {
            if mask.count_ones() as usize != k2 {
                continue;
            }
            all += 1;
            if (0..g).any(|i| mask & (1 << i) != 0) {
                hit += 1;
            }
        }
        prop_assert!((random_hits_at_k(n, g, k) - hit as f64 / all as f64).abs() < 1e-12);
    }
}

#[test]
fn filtered_report_scores_only_new_answers() {
    use kbq_bench::protocol::GoldQuery;
    use kbq_core::query::Query;
    let q = GoldQuery {
        template: Template::P1,
        query: Query::basic(0).follow(0),
        gold: BTreeSet::from([1, 2]),
        known: BTreeSet::from([1]),
    };
    let easy = GoldQuery {
        known: BTreeSet::from([1, 2]),
        ..q.clone()
    };
    let ranked = vec![vec![1, 5, 6, 2], vec![1, 2]];
    let r = report(&[Template::P1], &[q.clone(), easy.clone()], &ranked, false, vec![], Instant::now());
    assert_eq!(r.metric(Template::P1, Metric::Hits1), Some(1.0));
    let r = report(&[Template::P1], &[q, easy], &ranked, true, vec![], Instant::now());
    // Known answer 1 is removed, leaving 2 at rank 3; the second query has no
    // new answers and is skipped.
    assert_eq!(r.get(Template::P1).unwrap().count, 1);
    assert_eq!(r.metric(Template::P1, Metric::Hits1), Some(0.0));
    assert_eq!(r.metric(Template::P1, Metric::Hits3), Some(1.0));
}
