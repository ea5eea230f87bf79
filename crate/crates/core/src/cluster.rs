//! k-means (k-means++ seeding, Lloyd iterations) and diagonal-covariance
//! Gaussian mixtures fitted by EM.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure, Result};
use crate::numerics::{log_sum_exp, Checkpoint, Matrix};

pub const VARIANCE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
    pub centroids: Matrix,
    pub inertia: f64,
    /// Inertia after every assignment step.
    pub inertia_history: Vec<f64>,
}

impl ClusterAssignment {
    pub fn k(&self) -> usize {
        self.centroids.rows()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(centroids: &Matrix, x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centroids.rows() {
        let d = sq_dist(centroids.row(c), x);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_init(m: &Matrix, k: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let n = m.rows();
    let mut centroids = Matrix::zeros(k, m.cols());
    centroids.row_mut(0).copy_from_slice(m.row(rng.random_range(0..n)));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(m.row(i), centroids.row(0))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).copy_from_slice(m.row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(m.row(i), centroids.row(c)));
        }
    }
    centroids
}

/// Cluster the rows of `m` into `k` groups.
pub fn kmeans(m: &Matrix, k: usize, seed: u64, max_iter: usize) -> Result<ClusterAssignment> {
    let (n, d) = m.shape();
    ensure!(k >= 1, "k must be at least 1");
    ensure!(n >= k, "cannot form {k} clusters from {n} points");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(m, k, &mut rng);
    let mut labels = vec![usize::MAX; n];
    let mut history = Vec::new();
    for _ in 0..max_iter.max(1) {
        let mut changed = false;
        let mut dists = vec![0.0; n];
        for i in 0..n {
            let (c, dist) = nearest(&centroids, m.row(i));
            changed |= labels[i] != c;
            labels[i] = c;
            dists[i] = dist;
        }
        history.push(dists.iter().sum());
        if !changed {
            break;
        }
        let mut sums = Matrix::zeros(k, d);
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[labels[i]] += 1;
            for (s, x) in sums.row_mut(labels[i]).iter_mut().zip(m.row(i)) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // re-seed from the point farthest from its own centroid
                let far = (0..n)
                    .filter(|&i| counts[labels[i]] > 1)
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)));
                if let Some(i) = far {
                    log::warn!("k-means: empty cluster {c} re-seeded from point {i}");
                    counts[labels[i]] -= 1;
                    for (s, x) in sums.row_mut(labels[i]).iter_mut().zip(m.row(i)) {
                        *s -= x;
                    }
                    labels[i] = c;
                    dists[i] = 0.0;
                    counts[c] = 1;
                    sums.row_mut(c).copy_from_slice(m.row(i));
                }
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (dst, s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s * inv;
                }
            }
        }
    }
    let inertia = (0..n).map(|i| sq_dist(m.row(i), centroids.row(labels[i]))).sum();
    Ok(ClusterAssignment { labels, centroids, inertia, inertia_history: history })
}

/// One cluster label per bitext pair, from the mean of the two sides.
pub fn pair_clusters(src: &Matrix, tgt: &Matrix, k: usize, seed: u64) -> Result<ClusterAssignment> {
    ensure!(src.shape() == tgt.shape(), "source and target embeddings differ in shape");
    let mut mean = src.clone();
    mean.add_assign(tgt);
    kmeans(&mean.scale(0.5), k, seed, 100)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GmmModel {
    pub means: Matrix,
    pub variances: Matrix,
    pub weights: Vec<f64>,
    pub log_likelihood: f64,
    /// Mean log-likelihood per point before every M-step.
    pub history: Vec<f64>,
}

impl GmmModel {
    pub fn k(&self) -> usize {
        self.weights.len()
    }

    fn component_log_density(&self, c: usize, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for ((xi, mu), var) in x.iter().zip(self.means.row(c)).zip(self.variances.row(c)) {
            acc += (2.0 * std::f64::consts::PI * var).ln() + (xi - mu) * (xi - mu) / var;
        }
        self.weights[c].ln() - 0.5 * acc
    }

    /// Posterior component probabilities for every row.
    pub fn responsibilities(&self, m: &Matrix) -> Matrix {
        let k = self.k();
        let mut r = Matrix::zeros(m.rows(), k);
        for i in 0..m.rows() {
            let logs: Vec<f64> = (0..k).map(|c| self.component_log_density(c, m.row(i))).collect();
            let z = log_sum_exp(&logs);
            for c in 0..k {
                r.set(i, c, (logs[c] - z).exp());
            }
        }
        r
    }

    /// Total log-likelihood of the rows of `m`.
    pub fn log_likelihood(&self, m: &Matrix) -> f64 {
        (0..m.rows())
            .map(|i| {
                let logs: Vec<f64> = (0..self.k()).map(|c| self.component_log_density(c, m.row(i))).collect();
                log_sum_exp(&logs)
            })
            .sum()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        ck.push("means", self.means.clone());
        ck.push("variances", self.variances.clone());
        ck.push("weights", Matrix::row_vector(&self.weights));
        ck
    }
}

fn m_step(m: &Matrix, resp: &Matrix, model: &mut GmmModel) {
    let (n, d) = m.shape();
    let k = resp.cols();
    let mut floored = false;
    for c in 0..k {
        let nk: f64 = (0..n).map(|i| resp.get(i, c)).sum();
        let max_r = (0..n).map(|i| resp.get(i, c)).fold(0.0, f64::max);
        if nk > 0.0 && max_r / nk > 1.0 - 1e-9 && n > 1 {
            log::warn!("GMM: component {c} collapsed onto a single point");
        }
        let nk_safe = nk.max(f64::MIN_POSITIVE);
        let mut mu = vec![0.0; d];
        for i in 0..n {
            let r = resp.get(i, c);
            for (a, x) in mu.iter_mut().zip(m.row(i)) {
                *a += r * x;
            }
        }
        mu.iter_mut().for_each(|a| *a /= nk_safe);
        let mut var = vec![0.0; d];
        for i in 0..n {
            let r = resp.get(i, c);
            for ((v, x), u) in var.iter_mut().zip(m.row(i)).zip(&mu) {
                *v += r * (x - u) * (x - u);
            }
        }
        for v in var.iter_mut() {
            *v /= nk_safe;
            if *v < VARIANCE_FLOOR {
                *v = VARIANCE_FLOOR;
                floored = true;
            }
        }
        model.means.row_mut(c).copy_from_slice(&mu);
        model.variances.row_mut(c).copy_from_slice(&var);
        model.weights[c] = (nk / n as f64).max(1e-300);
    }
    let total: f64 = model.weights.iter().sum();
    model.weights.iter_mut().for_each(|w| *w /= total);
    if floored {
        log::debug!("GMM: variance floor applied");
    }
}

/// Fit a `k`-component diagonal Gaussian mixture, initialized from k-means.
pub fn gmm_fit(m: &Matrix, k: usize, seed: u64, max_iter: usize, tol: f64) -> Result<GmmModel> {
    let (n, d) = m.shape();
    ensure!(k >= 1, "k must be at least 1");
    ensure!(n >= 2 * k, "GMM with {k} components needs at least {} points, got {n}", 2 * k);
    let init = kmeans(m, k, seed, 100)?;
    let mut resp = Matrix::zeros(n, k);
    for (i, &l) in init.labels.iter().enumerate() {
        resp.set(i, l, 1.0);
    }
    let mut model = GmmModel {
        means: Matrix::zeros(k, d),
        variances: Matrix::filled(k, d, 1.0),
        weights: vec![1.0 / k as f64; k],
        log_likelihood: f64::NEG_INFINITY,
        history: Vec::new(),
    };
    m_step(m, &resp, &mut model);
    let mut prev = model.log_likelihood(m);
    model.history.push(prev);
    for _ in 0..max_iter {
        resp = model.responsibilities(m);
        m_step(m, &resp, &mut model);
        let ll = model.log_likelihood(m);
        model.history.push(ll);
        let rel = (ll - prev).abs() / prev.abs().max(1e-300);
        prev = ll;
        if rel < tol {
            break;
        }
    }
    model.log_likelihood = prev;
    Ok(model)
}

/// Fraction of points whose cluster's majority class matches their own.
pub fn purity<T: Eq + std::hash::Hash>(labels: &[usize], truth: &[T]) -> Result<f64> {
    ensure!(labels.len() == truth.len(), "label vectors differ in length");
    ensure!(!labels.is_empty(), "purity of an empty labelling");
    let mut table: std::collections::BTreeMap<usize, std::collections::HashMap<&T, usize>> = Default::default();
    for (l, t) in labels.iter().zip(truth) {
        *table.entry(*l).or_default().entry(t).or_default() += 1;
    }
    let hits: usize = table.values().map(|row| row.values().copied().max().unwrap_or(0)).sum();
    Ok(hits as f64 / labels.len() as f64)
}

/// Adjusted Rand index between two labellings.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    ensure!(a.len() == b.len(), "label vectors differ in length");
    let n = a.len();
    let choose2 = |x: usize| (x * x.saturating_sub(1)) as f64 / 2.0;
    let mut cells: std::collections::HashMap<(usize, usize), usize> = Default::default();
    let mut rows: std::collections::HashMap<usize, usize> = Default::default();
    let mut cols: std::collections::HashMap<usize, usize> = Default::default();
    for (&x, &y) in a.iter().zip(b) {
        *cells.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let index: f64 = cells.values().map(|&c| choose2(c)).sum();
    let sa: f64 = rows.values().map(|&c| choose2(c)).sum();
    let sb: f64 = cols.values().map(|&c| choose2(c)).sum();
    let expected = sa * sb / choose2(n).max(1.0);
    let max = 0.5 * (sa + sb);
    if (max - expected).abs() < 1e-12 {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

pub fn write_assignments(labels: &[usize], path: &Path) -> Result<()> {
    crate::corpus::write_tsv_column(path, labels)
}
