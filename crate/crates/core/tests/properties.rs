use citetree::corpus::{tokenize, Corpus, Index, Retriever};
use citetree::mcts::{uct, NodeId, NodeState, SearchTree};
use citetree::protocol::{extract_citations, parse_action, Action, OutputAction, MAX_CITATIONS};
use citetree::reward::f1;
use proptest::prelude::*;

fn word() -> impl Strategy<Value = String> {
    prop::sample::select(vec![
        "kick", "yard", "goal", "field", "record", "pasta", "salt", "denver", "mile", "the",
    ])
    .prop_map(str::to_string)
}

fn corpus() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(
        prop::collection::vec(word(), 1..10).prop_map(|w| w.join(" ")),
        1..30,
    )
}

proptest! {
    #[test]
    fn retrieval_is_sorted_bounded_and_matching(bodies in corpus(), q in prop::collection::vec(word(), 1..4), k in 1usize..8) {
        let pairs: Vec<(String, String)> = bodies.iter().enumerate().map(|(i, b)| (format!("t{i}"), b.clone())).collect();
        let index = Index::build(Corpus::from_pairs(pairs, "p")).unwrap();
        let query = q.join(" ");
        let hits = index.retrieve(&query, k).unwrap();
        prop_assert!(hits.len() <= k);
        for pair in hits.windows(2) {
            prop_assert!(pair[0].score > pair[1].score
                || (pair[0].score == pair[1].score && pair[0].passage_id < pair[1].passage_id));
        }
        let qterms = tokenize(&query);
        for h in &hits {
            let body = tokenize(&bodies[h.passage_id as usize]);
            prop_assert!(qterms.iter().any(|t| body.contains(t)));
            prop_assert!(h.score > 0.0);
        }
        // repeating a query term does not change the ranking
        let doubled = index.retrieve(&format!("{query} {query}"), k).unwrap();
        prop_assert_eq!(hits, doubled);
    }

    #[test]
    fn index_survives_save_and_load(bodies in corpus()) {
        let pairs: Vec<(String, String)> = bodies.iter().enumerate().map(|(i, b)| (format!("t{i}"), b.clone())).collect();
        let index = Index::build(Corpus::from_pairs(pairs, "p")).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("index.json");
        index.save(&path).unwrap();
        let loaded = Index::load(&path).unwrap();
        prop_assert_eq!(index.retrieve("kick yard", 5).ok(), loaded.retrieve("kick yard", 5).ok());
    }

    #[test]
    fn actions_round_trip(kind in 0u8..4, text in "[A-Za-z][A-Za-z0-9 ,']{0,40}[A-Za-z0-9]", cites in prop::collection::vec(1u32..12, 0..3)) {
        let action = match kind {
            0 => Action::Search { query: text.clone() },
            1 => Action::Reflexion { thought: text.clone() },
            2 => {
                let markers: String = cites.iter().map(|c| format!("[{c}]")).collect();
                Action::Output(OutputAction::new(format!("{text} {markers}.")))
            }
            _ => Action::End,
        };
        let rendered = action.to_string();
        prop_assert_eq!(parse_action(&rendered).unwrap(), action);
    }

    #[test]
    fn citations_are_capped_and_distinct(cites in prop::collection::vec(1u32..9, 0..8)) {
        let markers: String = cites.iter().map(|c| format!("[{c}]")).collect();
        let x = extract_citations(&format!("A claim {markers}."));
        prop_assert!(x.citations.len() <= MAX_CITATIONS);
        let mut seen = x.citations.clone();
        seen.extend(&x.overflow);
        let mut dedup = seen.clone();
        dedup.sort();
        dedup.dedup();
        prop_assert_eq!(dedup.len(), seen.len());
        prop_assert_eq!(x.clean, "A claim.");
    }

    #[test]
    fn running_mean_matches_chain(rewards in prop::collection::vec(-4.0f64..4.0, 1..40)) {
        // a chain: each reward lands on a fresh child of the previous node
        let mut tree = SearchTree::new("q");
        let mut last = tree.root();
        for &r in &rewards {
            last = tree.add_child(last, NodeState::default());
            tree.backpropagate(last, r);
        }
        let root = tree.node(tree.root());
        prop_assert_eq!(root.visit_count as usize, rewards.len());
        let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
        prop_assert!((root.value - mean).abs() < 1e-9);
        let first = tree.node(NodeId(1));
        prop_assert_eq!(first.visit_count as usize, rewards.len());
    }

    #[test]
    fn uct_monotonicity(v in -3.0f64..3.0, n in 1u64..1000, extra in 1u64..1000, w in 0.01f64..2.0) {
        let np = n + extra;
        // more parent visits raise the bonus, more child visits lower it
        prop_assert!(uct(v, n, np + 1, w) >= uct(v, n, np, w));
        prop_assert!(uct(v, n + 1, np, w) <= uct(v, n, np, w));
        prop_assert!(uct(v + 0.5, n, np, w) > uct(v, n, np, w));
        prop_assert!(uct(v, n, np, w) >= v);
    }

    #[test]
    fn f1_is_bounded_and_symmetric(r in 0.0f64..=1.0, p in 0.0f64..=1.0) {
        let x = f1(r, p);
        prop_assert!((0.0..=1.0).contains(&x));
        prop_assert_eq!(x, f1(p, r));
        prop_assert!(x <= r.max(p) + 1e-12 && x >= r.min(p) - 1e-12 || x == 0.0);
    }
}
