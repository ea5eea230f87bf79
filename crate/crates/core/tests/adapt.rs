use guda::adapt::{
    back_translate, continue_nmt, forward_translate, forward_vocabs, mixed_loss, train_guda, train_nmt, Ablation, GudaConfig, GudaData,
    GudaModel, MixBatch, MixWeights, NmtConfig, Pair, ToySeq2Seq, Vocab,
};
use guda::corpus::{Corpus, CorpusRole, ParallelCorpus};
use guda::numerics::{grad_check, Module};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Sentences over a 12-word vocabulary, copied verbatim to the target side.
fn copy_bitext(n: usize, seed: u64) -> ParallelCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lines: Vec<Vec<String>> = (0..n)
        .map(|_| (0..rng.random_range(3..7)).map(|_| format!("w{}", rng.random_range(0..12))).collect())
        .collect();
    ParallelCorpus::new(
        Corpus::new("a", CorpusRole::OldBitextSide, lines.clone()).unwrap(),
        Corpus::new("b", CorpusRole::OldBitextSide, lines).unwrap(),
    )
    .unwrap()
}

fn copy_cfg() -> NmtConfig {
    NmtConfig { lr: 1e-2, max_epochs: 40, patience: 5, min_count: 1, ..NmtConfig::default() }
}

fn exact_match(model: &ToySeq2Seq, bitext: &ParallelCorpus) -> f64 {
    let hits = bitext.pairs().filter(|(s, t)| model.greedy_decode(s) == *t).count();
    hits as f64 / bitext.pair_count() as f64
}

#[test]
fn copy_task_is_learned() {
    let train = copy_bitext(200, 1);
    let out = train_nmt(&train, &copy_bitext(40, 2), None, &copy_cfg()).unwrap();
    let em = exact_match(&out.model, &train);
    assert!(em >= 0.95, "exact match {em}");
    assert!(out.best_dev_loss <= out.initial_dev_loss);
    let t = |s: &str| s.split_whitespace().map(String::from).collect::<Vec<_>>();
    assert_eq!(out.model.greedy_decode(&t("w1 w2 w3")), t("w1 w2 w3"));
}

#[test]
fn back_translation_recovers_sources() {
    let train = copy_bitext(200, 3);
    let reverse = train_nmt(&train.reversed(), &copy_bitext(40, 4).reversed(), None, &copy_cfg()).unwrap().model;
    let held = copy_bitext(100, 5);
    let pseudo = back_translate(&reverse, &held.tgt, "a").unwrap();
    assert_eq!(pseudo.pair_count(), held.pair_count());
    let (mut right, mut total) = (0, 0);
    for (guess, truth) in pseudo.src.token_lists().zip(held.src.token_lists()) {
        total += truth.len();
        right += guess.iter().zip(truth).filter(|(a, b)| a == b).count();
    }
    let acc = right as f64 / total as f64;
    assert!(acc >= 0.90, "token accuracy {acc}");
    assert_eq!(back_translate(&reverse, &held.tgt, "a").unwrap(), pseudo);
    let fwd = forward_translate(&reverse, &held.tgt, "a").unwrap();
    assert_eq!(fwd.pair_count(), held.pair_count());
}

#[test]
fn same_seed_same_checkpoint() {
    let train = copy_bitext(60, 6);
    let dev = copy_bitext(10, 7);
    let cfg = NmtConfig { max_epochs: 3, ..copy_cfg() };
    let a = train_nmt(&train, &dev, None, &cfg).unwrap().model;
    let b = train_nmt(&train, &dev, None, &cfg).unwrap().model;
    assert_eq!(a.to_checkpoint(), b.to_checkpoint());
}

fn plain_finetune_cfg(warm: bool) -> GudaConfig {
    GudaConfig {
        nmt: NmtConfig { max_epochs: 4, ..copy_cfg() },
        ablation: Ablation::Bi,
        use_old_bitext: false,
        warm_start: warm,
        ..GudaConfig::default()
    }
}

#[test]
fn bare_adaptation_is_plain_finetuning() {
    let old = copy_bitext(80, 8);
    let dev = copy_bitext(10, 9);
    let y_new = copy_bitext(30, 10).tgt;
    let reverse = train_nmt(&old.reversed(), &dev.reversed(), None, &NmtConfig { max_epochs: 3, ..copy_cfg() }).unwrap().model;
    let base = train_nmt(&old, &dev, Some(forward_vocabs(&old, &y_new, 1)), &NmtConfig { max_epochs: 3, ..copy_cfg() }).unwrap().model;
    let data = GudaData { old_bitext: &old, x_new: None, y_new: &y_new, reverse: &reverse };

    let cfg = plain_finetune_cfg(true);
    let g = train_guda(&data, Some(&base), &cfg).unwrap();
    let direct = continue_nmt(base.clone(), &g.pseudo_train, &g.pseudo_dev, &cfg.nmt).unwrap();
    assert_eq!(g.log, direct.log);
    assert_eq!(g.model.nmt.to_checkpoint(), direct.model.to_checkpoint());

    let cfg = plain_finetune_cfg(false);
    let g = train_guda(&data, None, &cfg).unwrap();
    let direct = train_nmt(&g.pseudo_train, &g.pseudo_dev, Some(forward_vocabs(&old, &y_new, 1)), &cfg.nmt).unwrap();
    assert_eq!(g.log, direct.log);
}

fn random_batches(seed: u64) -> (GudaModel, Vec<Pair>, Vec<Pair>, Vec<Pair>, Vec<Vec<usize>>, Vec<Vec<usize>>) {
    let words = |p: &str| (0..6).map(|i| format!("{p}{i}")).collect::<Vec<_>>();
    let nmt = ToySeq2Seq::init(Vocab::build([words("s").as_slice()]), Vocab::build([words("t").as_slice()]), 5, seed);
    let model = GudaModel::new(nmt, 4, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seq = |min: usize| (0..rng.random_range(min..5)).map(|_| rng.random_range(3..9)).collect::<Vec<usize>>();
    let mut pairs = |n: usize| (0..n).map(|_| (seq(1), seq(1))).collect::<Vec<Pair>>();
    let (new, old, old2) = (pairs(3), pairs(3), pairs(4));
    let sm = (0..3).map(|_| seq(1)).collect();
    let tm = (0..3).map(|_| seq(1)).collect();
    (model, new, old, old2, sm, tm)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn breakdown_adds_up(seed in any::<u64>(), l1 in 0.0f64..3.0, l2 in 0.0f64..3.0, l3 in 0.0f64..3.0) {
        let (model, new, old, _, sm, tm) = random_batches(seed);
        let w = MixWeights { lambda1: l1, lambda2: l2, lambda3: l3 };
        let (b, _) = mixed_loss(&model, &MixBatch { new_bitext: &new, old_bitext: &old, src_mono: &sm, tgt_mono: &tm }, &w).unwrap();
        prop_assert!((b.total - (b.nmt_new + l1 * b.nmt_old + b.disc_src + b.disc_tgt)).abs() < 1e-9);
        prop_assert!((b.disc_src - (b.disc_src_pos + l2 * b.disc_src_neg)).abs() < 1e-9);
        prop_assert!((b.disc_tgt - (b.disc_tgt_pos + l3 * b.disc_tgt_neg)).abs() < 1e-9);
    }

    #[test]
    fn old_batch_irrelevant_without_its_weights(seed in any::<u64>()) {
        let (model, new, old, old2, _, _) = random_batches(seed);
        let w = MixWeights { lambda1: 0.0, ..MixWeights::default() };
        let none: Vec<Vec<usize>> = Vec::new();
        let total = |ob: &[Pair]| mixed_loss(&model, &MixBatch { new_bitext: &new, old_bitext: ob, src_mono: &none, tgt_mono: &none }, &w).unwrap().0.total;
        prop_assert_eq!(total(&old), total(&old2));
    }

    #[test]
    fn only_bitext_terms_when_discriminators_off(seed in any::<u64>()) {
        let (model, new, old, _, _, _) = random_batches(seed);
        let w = MixWeights { lambda2: 0.0, lambda3: 0.0, ..MixWeights::default() };
        let none: Vec<Vec<usize>> = Vec::new();
        let (b, _) = mixed_loss(&model, &MixBatch { new_bitext: &new, old_bitext: &old, src_mono: &none, tgt_mono: &none }, &w).unwrap();
        prop_assert_eq!(b.total, b.nmt_new + b.nmt_old);
        prop_assert_eq!(b.disc_src, 0.0);
    }
}

#[test]
fn every_mixed_term_has_exact_gradients() {
    for seed in 1..=5 {
        let (model, new, old, _, sm, tm) = random_batches(seed);
        let w = MixWeights { lambda1: 0.5, lambda2: 2.0, lambda3: 1.5 };
        let err = grad_check(
            &model,
            |m| {
                let (b, g) = mixed_loss(m, &MixBatch { new_bitext: &new, old_bitext: &old, src_mono: &sm, tgt_mono: &tm }, &w)?;
                Ok((b.total, g))
            },
            60,
            1e-5,
            seed,
        )
        .unwrap();
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}
