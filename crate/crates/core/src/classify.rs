//! The binary domain classifier `c_psi` trained on adaptive-layer
//! representations, its old-domain negative pool, and scoring.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::{AdaptiveLayer, FeedForward, FeedForwardVars};
use crate::embed::cosine;
use crate::error::{ensure, Error, Result};
use crate::numerics::{sigmoid, Adam, Axis, Matrix, Module, Tape, Var};

pub const PROB_CLAMP: f64 = 1e-7;

/// Feed-forward net with a single logit output.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainClassifier {
    pub net: FeedForward,
}

impl Module for DomainClassifier {
    fn visit(&self, f: &mut dyn FnMut(&str, &Matrix)) {
        self.net.visit(f)
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        self.net.visit_mut(f)
    }
}

impl DomainClassifier {
    pub fn zeros(d_in: usize, hidden: usize) -> Self {
        DomainClassifier { net: FeedForward::zeros(d_in, hidden, 1) }
    }

    pub fn init(d_in: usize, hidden: usize, seed: u64) -> Self {
        DomainClassifier { net: FeedForward::init(d_in, hidden, 1, &mut ChaCha8Rng::seed_from_u64(seed)) }
    }

    /// P(new domain) for every row of already-encoded representations.
    pub fn probabilities(&self, reps: &Matrix) -> Result<Vec<f64>> {
        Ok(self.net.forward(reps)?.data().iter().map(|&l| sigmoid(l)).collect())
    }
}

/// Binary cross-entropy of classifier outputs on the tape: `pos` rows are the
/// new domain, `neg` rows the old. Returns the mean over all rows.
pub fn bce_on_tape(tape: &mut Tape, net: &FeedForwardVars, pos: Var, neg: Var) -> Var {
    let (np, nn) = (tape.value(pos).rows(), tape.value(neg).rows());
    let x = tape.concat(&[pos, neg], Axis::Rows);
    let logits = net.forward(tape, x);
    let p = tape.sigmoid(logits);
    // y log p + (1 - y) log (1 - p), with 1 - p = p * (-1) + 1
    let sign = Matrix::column_vector(&(0..np + nn).map(|i| if i < np { 1.0 } else { -1.0 }).collect::<Vec<_>>());
    let offset = Matrix::column_vector(&(0..np + nn).map(|i| if i < np { 0.0 } else { 1.0 }).collect::<Vec<_>>());
    let sign = tape.constant(sign);
    let offset = tape.constant(offset);
    let q = tape.mul(p, sign);
    let q = tape.add(q, offset);
    let logq = tape.log_clamped(q, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let m = tape.mean(logq);
    tape.scale(m, -1.0)
}

/// Mean discriminator loss and gradients for the classifier parameters.
pub fn disc_loss(clf: &DomainClassifier, positives: &Matrix, negatives: &Matrix) -> Result<(f64, Vec<Matrix>)> {
    ensure!(positives.rows() > 0 && negatives.rows() > 0, "both classes need at least one example");
    let mut tape = Tape::new();
    let net = clf.net.bind(&mut tape);
    let p = tape.constant(positives.clone());
    let n = tape.constant(negatives.clone());
    let loss = bce_on_tape(&mut tape, &net, p, n);
    let mut g = tape.backward(loss);
    Ok((tape.scalar(loss), net.grads(&tape, &mut g)))
}

/// The `count` old-domain rows least similar to the new-domain centroid.
pub fn build_negative_pool(old_reps: &Matrix, new_reps: &Matrix, count: usize) -> Result<Vec<usize>> {
    ensure!(count >= 1, "negative pool count must be at least 1");
    ensure!(old_reps.rows() > 0 && new_reps.rows() > 0, "negative pool needs non-empty inputs");
    let centroid = crate::embed::matrix_centroid(new_reps)?;
    let mut sims = Vec::with_capacity(old_reps.rows());
    for i in 0..old_reps.rows() {
        let s = match cosine(old_reps.row(i), &centroid) {
            Ok(s) => s,
            Err(Error::DegenerateVector { .. }) => 0.0,
            Err(e) => return Err(e),
        };
        sims.push((s, i));
    }
    sims.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    if count > sims.len() {
        log::warn!("negative pool of {count} requested from {} old-domain rows; using all", sims.len());
    }
    Ok(sims.into_iter().take(count).map(|(_, i)| i).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub hidden: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub holdout: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig { hidden: 128, lr: 1e-5, batch_size: 64, max_epochs: 20, patience: 5, holdout: 0.1, seed: 1 }
    }
}

impl ClassifierConfig {
    pub fn desk() -> Self {
        ClassifierConfig { lr: 1e-3, ..Self::default() }
    }
}

pub struct ClassifierOutcome {
    pub classifier: DomainClassifier,
    pub negatives: Vec<usize>,
    pub initial_holdout_loss: f64,
    pub best_holdout_loss: f64,
    pub holdout_accuracy: f64,
    pub epochs: usize,
}

fn rows_of(m: &Matrix, ids: &[usize]) -> Matrix {
    Matrix::from_rows(&ids.iter().map(|&i| m.row(i)).collect::<Vec<_>>())
}

/// Train the classifier on representations: `new_reps` are positives and a
/// balanced pool of `old_reps` the negatives.
pub fn train_classifier_on_reps(new_reps: &Matrix, old_reps: &Matrix, cfg: &ClassifierConfig) -> Result<ClassifierOutcome> {
    ensure!(new_reps.cols() == old_reps.cols(), "representation widths differ");
    ensure!((0.0..1.0).contains(&cfg.holdout), "holdout fraction must lie in [0, 1)");
    ensure!(cfg.batch_size >= 2 && cfg.lr > 0.0, "invalid optimizer settings");
    let neg_ids = build_negative_pool(old_reps, new_reps, new_reps.rows())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let split = |n: usize, rng: &mut ChaCha8Rng| {
        let mut ids: Vec<usize> = (0..n).collect();
        ids.shuffle(rng);
        let h = ((n as f64 * cfg.holdout).round() as usize).clamp(usize::from(n > 1), n.saturating_sub(1));
        let train = ids.split_off(h);
        (train, ids)
    };
    let (pos_train, pos_hold) = split(new_reps.rows(), &mut rng);
    let (neg_train_idx, neg_hold_idx) = split(neg_ids.len(), &mut rng);
    let neg_train: Vec<usize> = neg_train_idx.iter().map(|&i| neg_ids[i]).collect();
    let neg_hold: Vec<usize> = neg_hold_idx.iter().map(|&i| neg_ids[i]).collect();
    ensure!(!pos_train.is_empty() && !neg_train.is_empty(), "not enough examples to train a classifier");
    let hold = if pos_hold.is_empty() || neg_hold.is_empty() {
        (rows_of(new_reps, &pos_train), rows_of(old_reps, &neg_train))
    } else {
        (rows_of(new_reps, &pos_hold), rows_of(old_reps, &neg_hold))
    };

    let mut clf = DomainClassifier::init(new_reps.cols(), cfg.hidden, cfg.seed ^ 0x5eed);
    let mut adam = Adam::new(cfg.lr);
    let initial = disc_loss(&clf, &hold.0, &hold.1)?.0;
    let mut best = (initial, clf.clone());
    let mut since_best = 0;
    // each batch takes half its rows from either class
    let half = (cfg.batch_size / 2).max(1);
    let mut epochs = 0;
    let mut step = 0u64;
    let (mut pos_order, mut neg_order) = (pos_train.clone(), neg_train.clone());
    for _ in 0..cfg.max_epochs {
        epochs += 1;
        pos_order.shuffle(&mut rng);
        neg_order.shuffle(&mut rng);
        let batches = pos_order.len().max(neg_order.len()).div_ceil(half);
        for b in 0..batches {
            let pick = |order: &[usize], b: usize| -> Vec<usize> {
                (0..half).map(|j| order[(b * half + j) % order.len()]).collect()
            };
            let p = rows_of(new_reps, &pick(&pos_order, b));
            let n = rows_of(old_reps, &pick(&neg_order, b));
            let (loss, grads) = disc_loss(&clf, &p, &n)?;
            step += 1;
            if !loss.is_finite() {
                return Err(Error::Divergence { what: "classifier loss".into(), step });
            }
            adam.step(&mut clf, &grads)?;
        }
        let held = disc_loss(&clf, &hold.0, &hold.1)?.0;
        log::info!("classifier epoch {epochs}: holdout {held:.5}");
        if held < best.0 {
            best = (held, clf.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    let clf = best.1;
    let pp = clf.probabilities(&hold.0)?;
    let pn = clf.probabilities(&hold.1)?;
    let correct = pp.iter().filter(|&&p| p >= 0.5).count() + pn.iter().filter(|&&p| p < 0.5).count();
    Ok(ClassifierOutcome {
        classifier: clf,
        negatives: neg_ids,
        initial_holdout_loss: initial,
        best_holdout_loss: best.0,
        holdout_accuracy: correct as f64 / (pp.len() + pn.len()) as f64,
        epochs,
    })
}

/// Train on raw embeddings passed through a frozen adaptive layer.
pub fn train_classifier(
    layer: &AdaptiveLayer,
    new_mono: &Matrix,
    old_side: &Matrix,
    cfg: &ClassifierConfig,
) -> Result<ClassifierOutcome> {
    train_classifier_on_reps(&layer.forward(new_mono)?, &layer.forward(old_side)?, cfg)
}

/// `P(new domain)` for every embedding row.
pub fn score(clf: &DomainClassifier, layer: &AdaptiveLayer, embeddings: &Matrix) -> Result<Vec<f64>> {
    let reps = layer.forward(embeddings)?;
    if reps.cols() != clf.net.d_in() {
        return Err(Error::DimensionMismatch { expected: clf.net.d_in(), found: reps.cols() });
    }
    clf.probabilities(&reps)
}

pub fn write_scores(scores: &[f64], path: &Path) -> Result<()> {
    let formatted: Vec<String> = scores.iter().map(|s| format!("{s:.17e}")).collect();
    crate::corpus::write_tsv_column(path, &formatted)
}
