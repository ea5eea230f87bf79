use guda::align::FeedForward;
use guda::classify::{build_negative_pool, disc_loss, score, DomainClassifier};
use guda::embed::cosine;
use guda::numerics::{Adam, Matrix};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
}

#[test]
fn negative_pool_matches_full_sort() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (old, new) = (random(&mut rng, 20, 3), random(&mut rng, 8, 3));
    let centroid: Vec<f64> = (0..3).map(|j| (0..8).map(|i| new.get(i, j)).sum::<f64>() / 8.0).collect();
    let mut order: Vec<usize> = (0..20).collect();
    order.sort_by(|&a, &b| cosine(old.row(a), &centroid).unwrap().total_cmp(&cosine(old.row(b), &centroid).unwrap()).then(a.cmp(&b)));
    let mut expect = order[..5].to_vec();
    expect.sort_unstable();
    let mut got = build_negative_pool(&old, &new, 5).unwrap();
    got.sort_unstable();
    assert_eq!(got, expect);
}

#[test]
fn tiny_step_lowers_loss() {
    for seed in 1..=10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut clf = DomainClassifier { net: FeedForward::init(4, 6, 1, &mut rng) };
        let (pos, neg) = (random(&mut rng, 8, 4), random(&mut rng, 8, 4));
        let (before, grads) = disc_loss(&clf, &pos, &neg).unwrap();
        Adam::new(1e-6).step(&mut clf, &grads).unwrap();
        let (after, _) = disc_loss(&clf, &pos, &neg).unwrap();
        assert!(after < before, "seed {seed}: {after} >= {before}");
    }
}

proptest! {
    #[test]
    fn scores_follow_row_permutation(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layer = FeedForward::init(5, 6, 4, &mut rng);
        let clf = DomainClassifier { net: FeedForward::init(4, 6, 1, &mut rng) };
        let e = random(&mut rng, 7, 5);
        let perm = [6, 2, 0, 5, 1, 3, 4];
        let pe = Matrix::from_rows(&perm.iter().map(|&i| e.row(i).to_vec()).collect::<Vec<_>>());
        let (a, b) = (score(&clf, &layer, &e).unwrap(), score(&clf, &layer, &pe).unwrap());
        for (k, &i) in perm.iter().enumerate() {
            prop_assert_eq!(b[k], a[i]);
        }
        prop_assert!(a.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn negative_pool_is_balanced(n_new in 1usize..30, n_old in 1usize..30, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (old, new) = (random(&mut rng, n_old, 3), random(&mut rng, n_new, 3));
        prop_assert_eq!(build_negative_pool(&old, &new, n_new).unwrap().len(), n_new.min(n_old));
    }
}
