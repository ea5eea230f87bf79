//! The adaptive layer `g_phi`, its contrastive training with cluster-filtered
//! in-batch negatives, and cross-lingual retrieval evaluation.

use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::{self, ClusterAssignment};
use crate::error::{ensure, Error, Result};
use crate::numerics::{dot, Adam, Gradients, Matrix, Module, Tape, Var};

/// Two-layer perceptron `x -> relu(x W1 + b1) W2 + b2` over row batches.
///
/// Weights are stored input-major (`w1` is `d_in x hidden`), so a single
/// input row `e` maps to `W2^T relu(W1^T e + b1) + b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

/// Tape handles for one binding of a [`FeedForward`].
#[derive(Clone, Copy, Debug)]
pub struct FeedForwardVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl FeedForwardVars {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let h = tape.matmul(x, self.w1);
        let h = tape.add(h, self.b1);
        let h = tape.relu(h);
        let o = tape.matmul(h, self.w2);
        tape.add(o, self.b2)
    }

    /// Gradients in [`Module`] visit order.
    pub fn grads(&self, tape: &Tape, g: &mut Gradients) -> Vec<Matrix> {
        vec![g.take(tape, self.w1), g.take(tape, self.b1), g.take(tape, self.w2), g.take(tape, self.b2)]
    }
}

impl FeedForward {
    pub fn zeros(d_in: usize, hidden: usize, d_out: usize) -> Self {
        FeedForward {
            w1: Matrix::zeros(d_in, hidden),
            b1: Matrix::zeros(1, hidden),
            w2: Matrix::zeros(hidden, d_out),
            b2: Matrix::zeros(1, d_out),
        }
    }

    /// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` initialization.
    pub fn init(d_in: usize, hidden: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let mut ff = Self::zeros(d_in, hidden, d_out);
        let mut fill = |m: &mut Matrix, fan_in: usize| {
            let a = 1.0 / (fan_in as f64).sqrt();
            m.data_mut().iter_mut().for_each(|x| *x = rng.random_range(-a..a));
        };
        fill(&mut ff.w1, d_in);
        fill(&mut ff.b1, d_in);
        fill(&mut ff.w2, hidden);
        fill(&mut ff.b2, hidden);
        ff
    }

    pub fn d_in(&self) -> usize {
        self.w1.rows()
    }

    pub fn hidden(&self) -> usize {
        self.w1.cols()
    }

    pub fn d_out(&self) -> usize {
        self.w2.cols()
    }

    pub fn bind(&self, tape: &mut Tape) -> FeedForwardVars {
        FeedForwardVars {
            w1: tape.param(self.w1.clone()),
            b1: tape.param(self.b1.clone()),
            w2: tape.param(self.w2.clone()),
            b2: tape.param(self.b2.clone()),
        }
    }

    /// Bind as constants, for a frozen module.
    pub fn bind_frozen(&self, tape: &mut Tape) -> FeedForwardVars {
        FeedForwardVars {
            w1: tape.constant(self.w1.clone()),
            b1: tape.constant(self.b1.clone()),
            w2: tape.constant(self.w2.clone()),
            b2: tape.constant(self.b2.clone()),
        }
    }

    /// Forward pass over the rows of `x` without recording a tape.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.d_in() {
            return Err(Error::DimensionMismatch { expected: self.d_in(), found: x.cols() });
        }
        let mut h = x.matmul(&self.w1);
        for r in 0..h.rows() {
            for (v, b) in h.row_mut(r).iter_mut().zip(self.b1.data()) {
                *v = (*v + b).max(0.0);
            }
        }
        let mut o = h.matmul(&self.w2);
        for r in 0..o.rows() {
            for (v, b) in o.row_mut(r).iter_mut().zip(self.b2.data()) {
                *v += b;
            }
        }
        Ok(o)
    }
}

impl Module for FeedForward {
    fn visit(&self, f: &mut dyn FnMut(&str, &Matrix)) {
        f("w1", &self.w1);
        f("b1", &self.b1);
        f("w2", &self.w2);
        f("b2", &self.b2);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        f("w1", &mut self.w1);
        f("b1", &mut self.b1);
        f("w2", &mut self.w2);
        f("b2", &mut self.b2);
    }
}

/// The adaptive layer: ReLU hidden layer, linear output.
pub type AdaptiveLayer = FeedForward;

/// `z = g(e)` for a single embedding vector.
pub fn encode(layer: &AdaptiveLayer, e: &[f64]) -> Result<Vec<f64>> {
    Ok(layer.forward(&Matrix::row_vector(e))?.into_vec())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastiveConfig {
    pub tau: f64,
    pub batch_size: usize,
    pub k_clusters: usize,
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub symmetric: bool,
    /// Sum only the negatives in the denominator, leaving the positive out.
    pub literal_denominator: bool,
    pub hidden: usize,
    pub d_out: usize,
    pub seed: u64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            tau: 0.2,
            batch_size: 64,
            k_clusters: 5,
            lr: 1e-5,
            max_epochs: 20,
            patience: 5,
            symmetric: false,
            literal_denominator: false,
            hidden: 128,
            d_out: 128,
            seed: 1,
        }
    }
}

impl ContrastiveConfig {
    /// Settings for small synthetic corpora. A 1e-5 learning rate barely
    /// moves a fresh layer at this size, and with a handful of domains five
    /// clusters leave nearly every same-domain pair out of the negative set.
    pub fn desk() -> Self {
        ContrastiveConfig { lr: 1e-3, k_clusters: 20, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.tau > 0.0, "tau must be positive");
        ensure!(self.batch_size >= 2, "batch_size must be at least 2");
        ensure!(self.patience <= self.max_epochs, "patience exceeds max_epochs");
        ensure!(self.lr > 0.0, "lr must be positive");
        ensure!(self.k_clusters >= 1, "k_clusters must be at least 1");
        Ok(())
    }
}

/// Build the contrastive loss on the tape. Returns the loss and the number
/// of anchors that contributed.
pub fn contrastive_on_tape(
    tape: &mut Tape,
    z_src: Var,
    z_tgt: Var,
    clusters: &[usize],
    tau: f64,
    symmetric: bool,
    literal: bool,
) -> Result<(Var, usize)> {
    let n = clusters.len();
    ensure!(tape.value(z_src).rows() == n && tape.value(z_tgt).rows() == n, "batch arrays are not aligned");
    ensure!(tau > 0.0, "tau must be positive");
    let (loss, used) = anchored(tape, z_src, z_tgt, clusters, tau, literal)?;
    if !symmetric {
        return Ok((loss, used));
    }
    let (back, _) = anchored(tape, z_tgt, z_src, clusters, tau, literal)?;
    let both = tape.add(loss, back);
    Ok((tape.scale(both, 0.5), used))
}

fn anchored(tape: &mut Tape, anchors: Var, others: Var, clusters: &[usize], tau: f64, literal: bool) -> Result<(Var, usize)> {
    let n = clusters.len();
    let sim = tape.cosine(anchors, others)?;
    let logits = tape.scale(sim, 1.0 / tau);
    let negatives = |i: usize| (0..n).filter(move |&j| clusters[j] != clusters[i]);
    let used: Vec<bool> = (0..n).map(|i| negatives(i).next().is_some()).collect();
    let count = used.iter().filter(|&&u| u).count();
    if count == 0 {
        log::warn!("contrastive batch of {n} has no negatives; loss is zero");
        return Ok((tape.constant(Matrix::scalar(0.0)), 0));
    }
    let w = 1.0 / count as f64;
    let weights = Matrix::column_vector(&used.iter().map(|&u| if u { w } else { 0.0 }).collect::<Vec<_>>());
    let weights = tape.constant(weights);
    let mut mask = Matrix::zeros(n, n);
    let mut targets: Vec<usize> = (0..n).collect();
    let mut correction = Matrix::zeros(n, n);
    for i in 0..n {
        if literal {
            // log sum_N exp(l_ij) - l_ii, written as a cross-entropy against
            // the first negative plus a linear correction
            match negatives(i).next() {
                Some(j0) => {
                    for j in negatives(i) {
                        mask.set(i, j, 1.0);
                    }
                    targets[i] = j0;
                    correction.set(i, j0, w);
                    correction.set(i, i, -w);
                }
                None => mask.set(i, i, 1.0),
            }
        } else {
            mask.set(i, i, 1.0);
            for j in negatives(i) {
                mask.set(i, j, 1.0);
            }
        }
    }
    let ce = tape.cross_entropy(logits, &targets, Some(mask));
    let weighted = tape.mul(ce, weights);
    let mut loss = tape.sum(weighted);
    if literal {
        let corr = tape.constant(correction);
        let picked = tape.mul(logits, corr);
        let picked = tape.sum(picked);
        loss = tape.add(loss, picked);
    }
    Ok((loss, count))
}

/// Contrastive loss on already-encoded batches, with gradients for both.
pub fn contrastive_loss(
    z_src: &Matrix,
    z_tgt: &Matrix,
    clusters: &[usize],
    tau: f64,
    symmetric: bool,
) -> Result<(f64, Matrix, Matrix)> {
    let mut tape = Tape::new();
    let s = tape.param(z_src.clone());
    let t = tape.param(z_tgt.clone());
    let (loss, _) = contrastive_on_tape(&mut tape, s, t, clusters, tau, symmetric, false)?;
    let mut g = tape.backward(loss);
    Ok((tape.scalar(loss), g.take(&tape, s), g.take(&tape, t)))
}

/// Loss of `layer` on one batch of raw embedding pairs, with parameter
/// gradients in visit order.
pub fn layer_contrastive_loss(
    layer: &AdaptiveLayer,
    e_src: &Matrix,
    e_tgt: &Matrix,
    clusters: &[usize],
    cfg: &ContrastiveConfig,
) -> Result<(f64, Vec<Matrix>)> {
    let mut tape = Tape::new();
    let p = layer.bind(&mut tape);
    let xs = tape.constant(e_src.clone());
    let xt = tape.constant(e_tgt.clone());
    let zs = p.forward(&mut tape, xs);
    let zt = p.forward(&mut tape, xt);
    let (loss, _) = contrastive_on_tape(&mut tape, zs, zt, clusters, cfg.tau, cfg.symmetric, cfg.literal_denominator)?;
    let mut g = tape.backward(loss);
    Ok((tape.scalar(loss), p.grads(&tape, &mut g)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
    pub lr: f64,
}

pub fn write_training_log(log: &[EpochLog], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "epoch,train_loss,dev_loss,lr").unwrap();
    for e in log {
        writeln!(out, "{},{:.9},{:.9},{}", e.epoch, e.train_loss, e.dev_loss, e.lr).unwrap();
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Embeddings of a bitext, one row per pair on each side.
#[derive(Clone, Copy)]
pub struct PairEmbeddings<'a> {
    pub src: &'a Matrix,
    pub tgt: &'a Matrix,
}

impl PairEmbeddings<'_> {
    fn rows(&self, ids: &[usize]) -> (Matrix, Matrix) {
        let pick = |m: &Matrix| Matrix::from_rows(&ids.iter().map(|&i| m.row(i)).collect::<Vec<_>>());
        (pick(self.src), pick(self.tgt))
    }

    fn pair_means(&self) -> Matrix {
        let mut m = self.src.clone();
        m.add_assign(self.tgt);
        m.scale(0.5)
    }
}

/// Result of [`train_adaptive`].
pub struct AlignOutcome {
    pub layer: AdaptiveLayer,
    pub log: Vec<EpochLog>,
    pub clusters: ClusterAssignment,
    pub initial_dev_loss: f64,
    pub best_dev_loss: f64,
}

/// Mean contrastive loss over consecutive fixed batches.
pub fn batched_loss(layer: &AdaptiveLayer, data: PairEmbeddings, clusters: &[usize], cfg: &ContrastiveConfig) -> Result<f64> {
    let n = data.src.rows();
    let ids: Vec<usize> = (0..n).collect();
    let mut total = 0.0;
    let mut batches = 0;
    for chunk in ids.chunks(cfg.batch_size) {
        if chunk.len() < 2 {
            continue;
        }
        let (s, t) = data.rows(chunk);
        let labels: Vec<usize> = chunk.iter().map(|&i| clusters[i]).collect();
        let zs = layer.forward(&s)?;
        let zt = layer.forward(&t)?;
        let mut tape = Tape::new();
        let (a, b) = (tape.constant(zs), tape.constant(zt));
        let (loss, _) = contrastive_on_tape(&mut tape, a, b, &labels, cfg.tau, cfg.symmetric, cfg.literal_denominator)?;
        total += tape.scalar(loss);
        batches += 1;
    }
    Ok(if batches == 0 { 0.0 } else { total / batches as f64 })
}

/// Train the adaptive layer on bitext embeddings with early stopping on the
/// dev contrastive loss.
pub fn train_adaptive(train: PairEmbeddings, dev: PairEmbeddings, cfg: &ContrastiveConfig) -> Result<AlignOutcome> {
    cfg.validate()?;
    let n = train.src.rows();
    ensure!(train.src.shape() == train.tgt.shape(), "training sides differ in shape");
    ensure!(dev.src.shape() == dev.tgt.shape() && dev.src.cols() == train.src.cols(), "dev embeddings are inconsistent");
    ensure!(n >= cfg.batch_size, "{n} training pairs is fewer than one batch of {}", cfg.batch_size);

    let clusters = cluster::pair_clusters(train.src, train.tgt, cfg.k_clusters.min(n), cfg.seed)?;
    train_adaptive_with(train, dev, clusters, cfg)
}

/// [`train_adaptive`] with a precomputed clustering of the training pairs.
pub fn train_adaptive_with(train: PairEmbeddings, dev: PairEmbeddings, clusters: ClusterAssignment, cfg: &ContrastiveConfig) -> Result<AlignOutcome> {
    cfg.validate()?;
    let n = train.src.rows();
    ensure!(train.src.shape() == train.tgt.shape(), "training sides differ in shape");
    ensure!(clusters.labels.len() == n, "{} cluster labels for {n} training pairs", clusters.labels.len());
    ensure!(dev.src.shape() == dev.tgt.shape() && dev.src.cols() == train.src.cols(), "dev embeddings are inconsistent");
    let dev_means = dev.pair_means();
    let dev_labels: Vec<usize> = (0..dev_means.rows())
        .map(|i| {
            (0..clusters.k())
                .map(|c| {
                    let d: f64 = dev_means.row(i).iter().zip(clusters.centroids.row(c)).map(|(a, b)| (a - b) * (a - b)).sum();
                    (c, d)
                })
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(c, _)| c)
                .unwrap_or(0)
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut layer = AdaptiveLayer::init(train.src.cols(), cfg.hidden, cfg.d_out, &mut rng);
    let mut adam = Adam::new(cfg.lr);
    let initial = batched_loss(&layer, dev, &dev_labels, cfg)?;
    let mut best = (initial, layer.clone());
    let mut since_best = 0;
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0u64;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let (s, t) = train.rows(chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| clusters.labels[i]).collect();
            let (loss, grads) = layer_contrastive_loss(&layer, &s, &t, &labels, cfg)?;
            step += 1;
            if !loss.is_finite() {
                return Err(Error::Divergence { what: "contrastive loss".into(), step });
            }
            adam.step(&mut layer, &grads)?;
            total += loss;
            batches += 1;
        }
        let dev_loss = batched_loss(&layer, dev, &dev_labels, cfg)?;
        let train_loss = total / batches.max(1) as f64;
        log::info!("align epoch {epoch}: train {train_loss:.5} dev {dev_loss:.5}");
        log.push(EpochLog { epoch, train_loss, dev_loss, lr: cfg.lr });
        if dev_loss < best.0 {
            best = (dev_loss, layer.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    Ok(AlignOutcome { layer: best.1, log, clusters, initial_dev_loss: initial, best_dev_loss: best.0 })
}

fn safe_cosine(a: &[f64], b: &[f64]) -> f64 {
    let d = dot(a, a).sqrt() * dot(b, b).sqrt();
    if d > 0.0 {
        dot(a, b) / d
    } else {
        0.0
    }
}

/// Precision@1 of retrieving row `i` of `tgt` for row `i` of `src` by cosine;
/// ties go to the lower row.
pub fn precision_at_1(src: &Matrix, tgt: &Matrix) -> Result<f64> {
    ensure!(src.rows() == tgt.rows() && src.rows() >= 2, "need at least 2 aligned pairs");
    let mut hits = 0;
    for i in 0..src.rows() {
        let mut best = (0, f64::NEG_INFINITY);
        for j in 0..tgt.rows() {
            let s = safe_cosine(src.row(i), tgt.row(j));
            if s > best.1 {
                best = (j, s);
            }
        }
        hits += usize::from(best.0 == i);
    }
    Ok(hits as f64 / src.rows() as f64)
}

/// Retrieval P@1 of the encoded dev pairs.
pub fn retrieval_eval(layer: &AdaptiveLayer, dev: PairEmbeddings) -> Result<f64> {
    precision_at_1(&layer.forward(dev.src)?, &layer.forward(dev.tgt)?)
}
