use std::collections::HashMap;

use guda::cluster::{adjusted_rand_index, gmm_fit, kmeans, purity};
use guda::numerics::Matrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn blobs(centers: &[[f64; 2]], per: usize, sigma: f64, seed: u64) -> (Matrix, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sigma).unwrap();
    let mut rows = Vec::new();
    let mut truth = Vec::new();
    for (c, ctr) in centers.iter().enumerate() {
        for _ in 0..per {
            rows.push(vec![ctr[0] + noise.sample(&mut rng), ctr[1] + noise.sample(&mut rng)]);
            truth.push(c);
        }
    }
    (Matrix::from_rows(&rows), truth)
}

/// ARI straight from the contingency table.
fn ari_oracle(a: &[usize], b: &[usize]) -> f64 {
    let c2 = |x: usize| (x * x.saturating_sub(1)) as f64 / 2.0;
    let mut table: HashMap<(usize, usize), usize> = HashMap::new();
    let mut ra: HashMap<usize, usize> = HashMap::new();
    let mut rb: HashMap<usize, usize> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *ra.entry(x).or_default() += 1;
        *rb.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|&v| c2(v)).sum();
    let sa: f64 = ra.values().map(|&v| c2(v)).sum();
    let sb: f64 = rb.values().map(|&v| c2(v)).sum();
    let expected = sa * sb / c2(a.len());
    let max = (sa + sb) / 2.0;
    if max == expected {
        1.0
    } else {
        (index - expected) / (max - expected)
    }
}

#[test]
fn three_blobs_recovered() {
    let (m, truth) = blobs(&[[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]], 50, 0.1, 1);
    let a = kmeans(&m, 3, 1, 100).unwrap();
    assert_eq!(adjusted_rand_index(&a.labels, &truth).unwrap(), 1.0);
    assert_eq!(ari_oracle(&a.labels, &truth), 1.0);
}

#[test]
fn two_blob_gmm_is_confident() {
    let (m, _) = blobs(&[[0.0, 0.0], [10.0, 0.0]], 60, 1.0, 2);
    let g = gmm_fit(&m, 2, 2, 100, 1e-6).unwrap();
    let r = g.responsibilities(&m);
    for i in 0..m.rows() {
        assert!(r.row(i).iter().cloned().fold(0.0, f64::max) >= 0.99);
    }
    assert!((g.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
}

#[test]
fn purity_hand_case() {
    assert!((purity(&[0, 0, 0, 1, 1, 1], &["a", "a", "b", "b", "b", "b"]).unwrap() - 5.0 / 6.0).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn ari_matches_contingency_oracle(a in prop::collection::vec(0usize..4, 2..40), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b: Vec<usize> = a.iter().map(|_| rng.random_range(0..3)).collect();
        let got = adjusted_rand_index(&a, &b).unwrap();
        prop_assert!((got - ari_oracle(&a, &b)).abs() < 1e-9, "{} vs {}", got, ari_oracle(&a, &b));
    }

    #[test]
    fn kmeans_inertia_never_rises(seed in any::<u64>(), k in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = Matrix::from_vec(60, 3, (0..180).map(|_| rng.random_range(-5.0..5.0)).collect());
        let a = kmeans(&m, k, seed, 100).unwrap();
        prop_assert!(a.inertia_history.windows(2).all(|w| w[1] <= w[0] + 1e-9));
        prop_assert!(a.labels.iter().all(|&l| l < k));
        prop_assert_eq!(kmeans(&m, k, seed, 100).unwrap(), a);
    }

    #[test]
    fn gmm_log_likelihood_never_falls(seed in any::<u64>(), k in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = Matrix::from_vec(50, 2, (0..100).map(|_| rng.random_range(-3.0..3.0)).collect());
        let g = gmm_fit(&m, k, seed, 100, 1e-6).unwrap();
        prop_assert!(g.history.windows(2).all(|w| w[1] >= w[0] - 1e-9));
        prop_assert!(g.variances.data().iter().all(|&v| v >= guda::cluster::VARIANCE_FLOOR));
        prop_assert!((g.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}
