//! Corpus BLEU, the new n-gram contribution metric, score CDFs and cluster
//! reports.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::Serialize;

use crate::cluster::{adjusted_rand_index, gmm_fit, purity};
use crate::error::{ensure, Error, Result};
use crate::numerics::{pca_project, Matrix};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BleuReport {
    pub bleu: f64,
    /// Clipped precision per order `1..=max_n`; orders with no possible
    /// n-gram are `None`.
    pub precisions: Vec<Option<f64>>,
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
    /// Highest order that entered the geometric mean.
    pub max_order_used: usize,
}

fn ngram_counts<T: AsRef<str>>(tokens: &[T], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w.iter().map(|t| t.as_ref()).collect()).or_insert(0) += 1;
        }
    }
    m
}

/// Unsmoothed corpus BLEU with one reference per hypothesis.
pub fn corpus_bleu<H: AsRef<[String]>, R: AsRef<[String]>>(hyps: &[H], refs: &[R], max_n: usize) -> Result<BleuReport> {
    ensure!(max_n >= 1, "max n-gram order must be at least 1");
    if hyps.len() != refs.len() {
        return Err(Error::Alignment { src: hyps.len(), tgt: refs.len() });
    }
    let mut matches = vec![0usize; max_n];
    let mut possible = vec![0usize; max_n];
    let (mut c, mut r) = (0, 0);
    for (h, rf) in hyps.iter().zip(refs) {
        let (h, rf) = (h.as_ref(), rf.as_ref());
        c += h.len();
        r += rf.len();
        for n in 1..=max_n {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(rf, n);
            possible[n - 1] += h.len().saturating_sub(n - 1);
            matches[n - 1] += hc.iter().map(|(g, &k)| k.min(rc.get(g).copied().unwrap_or(0))).sum::<usize>();
        }
    }
    let precisions: Vec<Option<f64>> =
        (0..max_n).map(|i| (possible[i] > 0).then(|| matches[i] as f64 / possible[i] as f64)).collect();
    let brevity_penalty = if c == 0 { 0.0 } else { (1.0 - r as f64 / c as f64).exp().min(1.0) };
    let included: Vec<f64> = precisions.iter().flatten().copied().collect();
    let max_order_used = precisions.iter().rposition(Option::is_some).map_or(0, |i| i + 1);
    let bleu = if included.is_empty() || included.iter().any(|&p| p == 0.0) {
        0.0
    } else {
        let mean_log = included.iter().map(|p| p.ln()).sum::<f64>() / included.len() as f64;
        100.0 * brevity_penalty * mean_log.exp()
    };
    Ok(BleuReport { bleu, precisions, brevity_penalty, hyp_len: c, ref_len: r, max_order_used })
}

/// Share of the reference n-grams missed by the zero-shot output that the
/// adapted output recovers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct NgramContribution {
    /// `None` when no sentence has a reference n-gram missing from the
    /// zero-shot output.
    pub value: Option<f64>,
    /// Sentences left out because their denominator was empty.
    pub excluded: usize,
}

fn ngram_set<T: AsRef<str>>(tokens: &[T], n: usize) -> HashSet<Vec<&str>> {
    ngram_counts(tokens, n).into_keys().collect()
}

pub fn ngram_contribution<A, B, C>(hyp_guda: &[A], hyp_zero: &[B], refs: &[C], n: usize) -> Result<NgramContribution>
where
    A: AsRef<[String]>,
    B: AsRef<[String]>,
    C: AsRef<[String]>,
{
    ensure!(n >= 1, "n-gram order must be at least 1");
    ensure!(
        hyp_guda.len() == hyp_zero.len() && hyp_zero.len() == refs.len(),
        "corpora differ in length: {}, {}, {}",
        hyp_guda.len(),
        hyp_zero.len(),
        refs.len()
    );
    let (mut num, mut den, mut excluded) = (0usize, 0usize, 0usize);
    for ((g, z), r) in hyp_guda.iter().zip(hyp_zero).zip(refs) {
        let zero = ngram_set(z.as_ref(), n);
        let missed: HashSet<Vec<&str>> = ngram_set(r.as_ref(), n).into_iter().filter(|x| !zero.contains(x)).collect();
        if missed.is_empty() {
            excluded += 1;
            continue;
        }
        let guda = ngram_set(g.as_ref(), n);
        num += missed.iter().filter(|x| guda.contains(*x)).count();
        den += missed.len();
    }
    Ok(NgramContribution { value: (den > 0).then(|| num as f64 / den as f64), excluded })
}

/// Fraction of scores at or below each threshold `0.1, 0.2, ..., 1.0`.
pub fn score_cdf(scores: &[f64]) -> Result<Vec<(f64, f64)>> {
    let thresholds: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
    score_cdf_at(scores, &thresholds)
}

pub fn score_cdf_at(scores: &[f64], thresholds: &[f64]) -> Result<Vec<(f64, f64)>> {
    ensure!(!scores.is_empty(), "no scores");
    if let Some(bad) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::Precondition(format!("score {bad} outside [0, 1]")));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(thresholds
        .iter()
        .map(|&t| {
            // small slack so that 0.3 counts scores stored as 0.30000000000000004
            let k = sorted.partition_point(|&s| s <= t + 1e-12);
            (t, k as f64 / sorted.len() as f64)
        })
        .collect())
}

pub fn write_cdf(cdf: &[(f64, f64)], path: &Path) -> Result<()> {
    let mut out = String::from("threshold,fraction\n");
    for (t, f) in cdf {
        out.push_str(&format!("{t:.1},{f:.6}\n"));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Cluster quality of one embedding space.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpaceReport {
    pub purity: f64,
    pub ari: f64,
    #[serde(skip)]
    pub labels: Vec<usize>,
    /// `n x 2` PCA coordinates.
    #[serde(skip)]
    pub coords: Matrix,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClusterReport {
    pub k: usize,
    pub raw: SpaceReport,
    pub adapted: SpaceReport,
}

fn space_report(m: &Matrix, truth: &[usize], k: usize, seed: u64) -> Result<SpaceReport> {
    let gmm = gmm_fit(m, k, seed, 200, 1e-6)?;
    let resp = gmm.responsibilities(m);
    let labels: Vec<usize> = (0..resp.rows())
        .map(|i| {
            let row = resp.row(i);
            (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b })
        })
        .collect();
    Ok(SpaceReport {
        purity: purity(&labels, truth)?,
        ari: adjusted_rand_index(&labels, truth)?,
        labels,
        coords: pca_project(m, 2)?.coords,
    })
}

/// Fit a GMM with one component per ground-truth domain in both spaces and
/// score the hard assignments against the truth.
pub fn cluster_report(raw: &Matrix, adapted: &Matrix, truth: &[usize], seed: u64) -> Result<ClusterReport> {
    ensure!(raw.rows() == adapted.rows() && raw.rows() == truth.len(), "inputs differ in row count");
    let k = truth.iter().collect::<HashSet<_>>().len();
    ensure!(k >= 1, "no ground-truth labels");
    Ok(ClusterReport { k, raw: space_report(raw, truth, k, seed)?, adapted: space_report(adapted, truth, k, seed)? })
}

/// `line_id,domain,x,y` rows.
pub fn write_pca_csv(coords: &Matrix, domains: &[String], path: &Path) -> Result<()> {
    ensure!(coords.rows() == domains.len(), "coordinate and domain counts differ");
    let mut out = String::from("line_id,domain,x,y\n");
    for (i, d) in domains.iter().enumerate() {
        out.push_str(&format!("{i},{d},{:.6},{:.6}\n", coords.get(i, 0), coords.get(i, 1)));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn bleu_hand_case() {
        let r = corpus_bleu(&[t("the cat sat")], &[t("the cat sat down")], 4).unwrap();
        assert_eq!(r.max_order_used, 3);
        assert!((r.bleu - 71.653).abs() < 0.01, "{}", r.bleu);
    }

    #[test]
    fn bleu_identity_and_disjoint() {
        let s = t("a b c d e");
        assert!((corpus_bleu(&[s.clone()], &[s.clone()], 4).unwrap().bleu - 100.0).abs() < 1e-9);
        assert_eq!(corpus_bleu(&[t("x y z w v")], &[s], 4).unwrap().bleu, 0.0);
    }

    #[test]
    fn contribution_hand_case() {
        let c = ngram_contribution(&[t("b d")], &[t("a")], &[t("a b c")], 1).unwrap();
        assert_eq!(c.value, Some(0.5));
    }

    #[test]
    fn cdf_grid() {
        let s: Vec<f64> = (0..10).map(|i| 0.05 + 0.1 * i as f64).collect();
        let c = score_cdf(&s).unwrap();
        assert!((c[0].1 - 0.1).abs() < 1e-12);
        assert_eq!(c[9].1, 1.0);
    }
}
