use guda::cluster::{adjusted_rand_index, kmeans};
use guda::embed::{cosine, read_embeddings, write_embeddings};
use guda::numerics::Matrix;
use guda::synth::{gen_scenario, ScenarioConfig, SynthConfig, ToyEmbedder, ToyEmbedderConfig, LANG_A, LANG_B};
use proptest::prelude::*;

#[test]
fn noise_free_domains_separate_exactly() {
    let sc = gen_scenario(&SynthConfig::default(), &ScenarioConfig::default()).unwrap();
    let cfg = ToyEmbedderConfig { noise_sigma: 0.0, ..ToyEmbedderConfig::default() };
    let mut emb = ToyEmbedder::new(&cfg).unwrap();
    let m = emb.embed(&sc.pool_b).unwrap().to_matrix();
    let truth = sc.pool_b.domain_labels().unwrap();
    let k = SynthConfig::default().num_domains;
    let labels = kmeans(&m, k, 1, 100).unwrap().labels;
    assert_eq!(adjusted_rand_index(&labels, &truth).unwrap(), 1.0);
}

#[test]
fn tag_coordinates_alone_classify_language() {
    let sc = gen_scenario(&SynthConfig::default(), &ScenarioConfig::default()).unwrap();
    let cfg = ToyEmbedderConfig::default();
    let mut emb = ToyEmbedder::new(&cfg).unwrap();
    let (ta, tb) = (emb.language_tag(LANG_A), emb.language_tag(LANG_B));
    let tags = cfg.lang_tag_dims;
    let content = cfg.dim - tags;
    for (corpus, lang) in [(&sc.old_train.src, LANG_A), (&sc.old_train.tgt, LANG_B)] {
        let e = emb.embed(corpus).unwrap();
        for i in 0..e.rows() {
            let t = &e.row_f64(i)[content..];
            let d = |v: &[f64]| t.iter().zip(v).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
            let predicted = if d(&ta) < d(&tb) { LANG_A } else { LANG_B };
            assert_eq!(predicted, lang);
        }
    }
}

#[test]
fn rotations_are_orthogonal() {
    let mut emb = ToyEmbedder::new(&ToyEmbedderConfig::default()).unwrap();
    for lang in [LANG_A, LANG_B] {
        let q: Matrix = emb.rotation(lang).clone();
        let qtq = q.matmul_tn(&q);
        for i in 0..q.rows() {
            for j in 0..q.cols() {
                assert!((qtq.get(i, j) - f64::from(u8::from(i == j))).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn embedding_file_round_trip_is_bitwise() {
    let sc = gen_scenario(&SynthConfig::default(), &ScenarioConfig::default()).unwrap();
    let e = ToyEmbedder::new(&ToyEmbedderConfig::default()).unwrap().embed(&sc.new_test.src).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.emb");
    write_embeddings(&e, &p).unwrap();
    let back = read_embeddings(&p).unwrap();
    assert_eq!(back.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>(), e.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>());
}

proptest! {
    #[test]
    fn cosine_properties(u in prop::collection::vec(-10.0f64..10.0, 1..12), seed in any::<u64>()) {
        prop_assume!(u.iter().any(|x| x.abs() > 1e-3));
        let v: Vec<f64> = u.iter().enumerate().map(|(i, x)| x * ((seed >> (i % 60)) & 3) as f64 - 1.0).collect();
        prop_assert!((cosine(&u, &u).unwrap() - 1.0).abs() < 1e-12);
        if v.iter().any(|x| x.abs() > 1e-3) {
            let (a, b) = (cosine(&u, &v).unwrap(), cosine(&v, &u).unwrap());
            prop_assert_eq!(a, b);
            prop_assert!(a.abs() <= 1.0 + 1e-9);
        }
    }
}
