use guda::corpus::{Corpus, CorpusRole};
use guda::select::{ced_score, random_select, select_topk, train_lm, train_lm_with_vocab, Method, Polarity, SelectionResult};
use proptest::prelude::*;

fn words() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d"]).prop_map(String::from), 1..6)
}

proptest! {
    #[test]
    fn topk_equals_full_sort(scores in prop::collection::vec(prop::sample::select(vec![0.1, 0.2, 0.5, 0.7, 0.9]), 1..40), k in 1usize..50, high in any::<bool>()) {
        let pol = if high { Polarity::HighestFirst } else { Polarity::LowestFirst };
        let sel = select_topk(Method::Ours, &scores, k, pol).unwrap();
        let mut ids: Vec<usize> = (0..scores.len()).collect();
        ids.sort_by(|&a, &b| {
            let o = scores[a].total_cmp(&scores[b]);
            (if high { o.reverse() } else { o }).then(a.cmp(&b))
        });
        ids.truncate(k.min(scores.len()));
        prop_assert_eq!(sel.line_ids(), ids);
    }

    #[test]
    fn ced_swaps_sign_with_lms(a in prop::collection::vec(words(), 1..8), b in prop::collection::vec(words(), 1..8), probe in words()) {
        let base = train_lm(a.iter().chain(&b).map(Vec::as_slice), 2, 0.1);
        let la = train_lm_with_vocab(a.iter().map(Vec::as_slice), &base, 2, 0.1);
        let lb = train_lm_with_vocab(b.iter().map(Vec::as_slice), &base, 2, 0.1);
        prop_assert!((ced_score(&probe, &la, &lb) + ced_score(&probe, &lb, &la)).abs() < 1e-12);
    }

    #[test]
    fn tsv_round_trips(pool in prop::collection::vec(words(), 1..20), k in 1usize..25, seed in any::<u64>()) {
        let c = Corpus::new("b", CorpusRole::GenericPool, pool).unwrap();
        let mut sel = random_select(c.len(), k, seed).unwrap();
        for (i, r) in sel.rows.iter_mut().enumerate() {
            r.score = 1.0 / (i as f64 + 3.0);
        }
        sel.pool = "pool.b.txt".into();
        sel.fingerprint = "abc123".into();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.tsv");
        sel.save(&c, &p).unwrap();
        let (back, text) = SelectionResult::load(&p).unwrap();
        prop_assert_eq!(&back, &sel);
        prop_assert_eq!(text, sel.apply(&c).token_lists().map(|t| t.join(" ")).collect::<Vec<_>>());
    }
}
