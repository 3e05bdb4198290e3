mod common;

use std::collections::BTreeSet;

use common::oracles::{self, OracleScheme, OracleUnit};
use findoc::datagen::{parse_program, round_half_away};
use findoc::metrics::{normalize_answer, tolerance_correct, MetricConstants, PercentMode};
use findoc::retrieval::{build_sparse_index, recall_at_k, Bm25Params, RetrievalUnit, Retriever, SparseScheme};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn units(corpus: &[OracleUnit]) -> Vec<RetrievalUnit> {
    corpus
        .iter()
        .map(|u| RetrievalUnit {
            unit_id: u.id.clone(),
            page_number: u.page,
            text: u.text.clone(),
            token_count: u.text.split_whitespace().count(),
        })
        .collect()
}

/// A decorated numeric answer such as `$(1,234.50)`.
fn decorated_number() -> impl Strategy<Value = String> {
    (0u64..10_000_000, 0u32..3, any::<bool>(), any::<bool>(), any::<bool>()).prop_map(
        |(cents, decimals, paren, dollar, pct)| {
            let int = cents / 100;
            let grouped = int
                .to_string()
                .as_bytes()
                .rchunks(3)
                .rev()
                .map(|c| std::str::from_utf8(c).unwrap())
                .collect::<Vec<_>>()
                .join(",");
            let mut s = match decimals {
                0 => grouped,
                1 => format!("{grouped}.{}", (cents % 100) / 10),
                _ => format!("{grouped}.{:02}", cents % 100),
            };
            if pct {
                s.push('%');
            }
            if paren {
                s = format!("({s})");
            }
            if dollar {
                s = format!("$ {s}");
            }
            s
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn tolerance_is_reflexive(x in -1e12f64..1e12) {
        prop_assert!(tolerance_correct(x, x, &MetricConstants::default()));
    }

    #[test]
    fn normalization_is_idempotent(raw in decorated_number(), mode_ix in 0usize..3) {
        let mode = [PercentMode::AsGiven, PercentMode::Fraction, PercentMode::Percent][mode_ix];
        let once = normalize_answer(&raw, mode);
        prop_assert!(once.is_numeric(), "{raw:?}");
        // re-normalizing the canonical form changes nothing (fraction mode
        // already consumed the percent sign, so compare in as-given mode)
        let again_mode = if mode == PercentMode::Fraction { PercentMode::AsGiven } else { mode };
        let twice = normalize_answer(&once.canonical, again_mode);
        prop_assert_eq!(&twice.canonical, &once.canonical);
        prop_assert_eq!(twice.value, once.value);
    }

    #[test]
    fn rounding_moves_at_most_half_a_cent(x in -1e6f64..1e6) {
        let r = round_half_away(x, 2);
        prop_assert!((r - x).abs() <= 0.005 + 1e-9 * x.abs().max(1.0));
        prop_assert!(((r * 100.0).round() - r * 100.0).abs() < 1e-6);
    }

    #[test]
    fn recall_is_monotone_in_k(
        retrieved in prop::collection::vec(1u32..60, 1..40),
        gold in prop::collection::btree_set(1u32..60, 1..6),
    ) {
        let mut last = 0.0;
        for k in 1..=retrieved.len() + 2 {
            let v = recall_at_k(&retrieved, &gold, k).unwrap();
            prop_assert!(v >= last);
            prop_assert!((0.0..=1.0).contains(&v));
            last = v;
        }
    }

    #[test]
    fn full_corpus_recall_is_one(n in 1u32..80, seed in any::<u64>()) {
        let mut pages: Vec<u32> = (1..=n).collect();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        use rand::seq::SliceRandom;
        pages.shuffle(&mut r);
        let gold: BTreeSet<u32> = pages.iter().copied().step_by(3).collect();
        prop_assert_eq!(recall_at_k(&pages, &gold, n as usize).unwrap(), 1.0);
    }

    #[test]
    fn program_matches_tree_oracle(seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let generated = oracles::gen_program(&mut r);
        let src = oracles::render_program(&generated);
        let program = parse_program(&src).map_err(|e| TestCaseError::fail(format!("{src}\n{e}")))?;
        match (oracles::eval_generated(&generated), program.evaluate_raw()) {
            (Ok(want), Ok(got)) => prop_assert!((want - got).abs() <= 1e-9 * want.abs().max(1.0), "{}", src),
            (Err(_), Err(_)) => {}
            (want, got) => prop_assert!(false, "{}\noracle {:?}, interpreter {:?}", src, want, got),
        }
    }

    #[test]
    fn sparse_search_matches_brute_force(seed in any::<u64>(), bm25 in any::<bool>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let corpus = oracles::random_corpus(&mut r, 50);
        let params = Bm25Params::default();
        let (scheme, oracle) = if bm25 {
            (SparseScheme::Bm25, OracleScheme::Bm25 { k1: params.k1, b: params.b })
        } else {
            (SparseScheme::Tfidf, OracleScheme::Tfidf)
        };
        let index = build_sparse_index(units(&corpus), scheme, params).unwrap();
        let query = oracles::random_query(&mut r);
        let want = oracles::oracle_rank(&corpus, &query, oracle, corpus.len());
        let got = index.search(&query, corpus.len()).unwrap();
        prop_assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(&want) {
            prop_assert_eq!(&g.unit_id, &w.0);
            prop_assert!((g.score - w.2).abs() <= 1e-9);
            prop_assert!(g.score > 0.0);
        }
    }
}
