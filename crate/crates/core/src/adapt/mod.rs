//! Translation model adaptation: back-translation, the mixed bitext and
//! domain-discriminator objective, and warm or cold start training.

mod model;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use model::{positions, teacher_inputs, Seq2SeqVars, ToySeq2Seq, Vocab, BOS, EOS, UNK};

use crate::align::{EpochLog, FeedForward, FeedForwardVars};
use crate::classify::PROB_CLAMP;
use crate::corpus::{Corpus, ParallelCorpus};
use crate::error::{ensure, Error, Result};
use crate::numerics::{Adam, Axis, Matrix, Module, Tape, Var};

/// Source ids and target ids of one training pair.
pub type Pair = (Vec<usize>, Vec<usize>);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for MixWeights {
    fn default() -> Self {
        MixWeights { lambda1: 1.0, lambda2: 1.0, lambda3: 1.0 }
    }
}

impl MixWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            ensure!(v.is_finite() && v >= 0.0, "{name} must be a non-negative number, got {v}");
        }
        Ok(())
    }
}

/// Which loss terms are active besides the bitext loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Ablation {
    #[serde(rename = "BI")]
    Bi,
    #[serde(rename = "BI+S")]
    BiS,
    #[serde(rename = "BI+T")]
    BiT,
    #[serde(rename = "BI+S+T")]
    BiST,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Bi, Ablation::BiS, Ablation::BiT, Ablation::BiST];

    pub fn source(self) -> bool {
        matches!(self, Ablation::BiS | Ablation::BiST)
    }

    pub fn target(self) -> bool {
        matches!(self, Ablation::BiT | Ablation::BiST)
    }

    pub fn tag(self) -> &'static str {
        match self {
            Ablation::Bi => "BI",
            Ablation::BiS => "BI+S",
            Ablation::BiT => "BI+T",
            Ablation::BiST => "BI+S+T",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.tag().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown loss subset {s:?}; expected BI, BI+S, BI+T or BI+S+T")))
    }
}

/// Loss terms of one step, before weighting. The discriminator terms are
/// split into the positive (new domain) and negative (old domain) halves.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub nmt_new: f64,
    pub nmt_old: f64,
    pub disc_src_pos: f64,
    pub disc_src_neg: f64,
    pub disc_tgt_pos: f64,
    pub disc_tgt_neg: f64,
    /// `disc_src_pos + λ2·disc_src_neg`
    pub disc_src: f64,
    /// `disc_tgt_pos + λ3·disc_tgt_neg`
    pub disc_tgt: f64,
    pub total: f64,
}

/// The translation model with its encoder and decoder domain classifiers.
#[derive(Clone, Debug, PartialEq)]
pub struct GudaModel {
    pub nmt: ToySeq2Seq,
    pub enc_clf: FeedForward,
    pub dec_clf: FeedForward,
}

impl Module for GudaModel {
    fn visit(&self, f: &mut dyn FnMut(&str, &Matrix)) {
        self.nmt.visit(&mut |n, m| f(&format!("nmt.{n}"), m));
        self.enc_clf.visit(&mut |n, m| f(&format!("enc_clf.{n}"), m));
        self.dec_clf.visit(&mut |n, m| f(&format!("dec_clf.{n}"), m));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        self.nmt.visit_mut(&mut |n, m| f(&format!("nmt.{n}"), m));
        self.enc_clf.visit_mut(&mut |n, m| f(&format!("enc_clf.{n}"), m));
        self.dec_clf.visit_mut(&mut |n, m| f(&format!("dec_clf.{n}"), m));
    }
}

impl GudaModel {
    /// Attach freshly initialized classifiers to `nmt`.
    pub fn new(nmt: ToySeq2Seq, disc_hidden: usize, seed: u64) -> Self {
        let d = nmt.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd15c);
        let enc_clf = FeedForward::init(d, disc_hidden, 1, &mut rng);
        let dec_clf = FeedForward::init(d, disc_hidden, 1, &mut rng);
        GudaModel { nmt, enc_clf, dec_clf }
    }
}

/// One sub-batch per loss term. Sources carry their trailing EOS.
#[derive(Clone, Copy, Debug, Default)]
pub struct MixBatch<'a> {
    pub new_bitext: &'a [Pair],
    pub old_bitext: &'a [Pair],
    pub src_mono: &'a [Vec<usize>],
    pub tgt_mono: &'a [Vec<usize>],
}

fn mean_rows(tape: &mut Tape, x: Var) -> Var {
    let n = tape.value(x).rows();
    let w = tape.constant(Matrix::filled(1, n, 1.0 / n as f64));
    tape.matmul(w, x)
}

/// Mean token cross-entropy over `pairs`, plus the encoder states of each.
fn bitext_term(tape: &mut Tape, nmt: &ToySeq2Seq, v: &Seq2SeqVars, pairs: &[Pair]) -> (Option<Var>, Vec<Var>) {
    let mut sum: Option<Var> = None;
    let mut tokens = 0;
    let mut encs = Vec::with_capacity(pairs.len());
    for (s, t) in pairs {
        let enc = nmt.encode_on_tape(tape, v, s);
        encs.push(enc);
        let (ce, n) = nmt.target_ce_on_tape(tape, v, enc, t);
        tokens += n;
        sum = Some(match sum {
            Some(acc) => tape.add(acc, ce),
            None => ce,
        });
    }
    (sum.map(|s| tape.scale(s, 1.0 / tokens as f64)), encs)
}

/// Mean-pooled decoder states of `y` decoded against the null source.
fn null_source_rep(tape: &mut Tape, nmt: &ToySeq2Seq, v: &Seq2SeqVars, y: &[usize]) -> Var {
    let enc = nmt.encode_on_tape(tape, v, &[]);
    let s = nmt.decode_on_tape(tape, v, enc, &teacher_inputs(y));
    mean_rows(tape, s)
}

/// `−mean log c(r)` over positive reps, or `−mean log (1 − c(r))` over
/// negative ones.
fn disc_term(tape: &mut Tape, net: &FeedForwardVars, reps: &[Var], positive: bool) -> Option<Var> {
    if reps.is_empty() {
        return None;
    }
    let x = if reps.len() == 1 { reps[0] } else { tape.concat(reps, Axis::Rows) };
    let logits = net.forward(tape, x);
    let mut p = tape.sigmoid(logits);
    if !positive {
        let flipped = tape.scale(p, -1.0);
        let one = tape.constant(Matrix::scalar(1.0));
        p = tape.add(flipped, one);
    }
    let lp = tape.log_clamped(p, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let m = tape.mean(lp);
    Some(tape.scale(m, -1.0))
}

/// The mixed objective and its gradients for every parameter of `model`, in
/// visit order. Terms with an empty batch contribute 0; the discriminator
/// terms are active only when their monolingual batch is non-empty, and then
/// take their negatives from the old bitext batch.
pub fn mixed_loss(model: &GudaModel, batch: &MixBatch, w: &MixWeights) -> Result<(LossBreakdown, Vec<Matrix>)> {
    w.validate()?;
    let nmt = &model.nmt;
    let mut tape = Tape::new();
    let v = nmt.bind(&mut tape);
    let enc_net = model.enc_clf.bind(&mut tape);
    let dec_net = model.dec_clf.bind(&mut tape);

    let (nmt_new, _) = bitext_term(&mut tape, nmt, &v, batch.new_bitext);
    let (nmt_old, old_encs) = bitext_term(&mut tape, nmt, &v, batch.old_bitext);

    let (mut src_pos, mut src_neg) = (None, None);
    if !batch.src_mono.is_empty() {
        let pos: Vec<Var> = batch
            .src_mono
            .iter()
            .map(|x| {
                let enc = nmt.encode_on_tape(&mut tape, &v, x);
                mean_rows(&mut tape, enc)
            })
            .collect();
        src_pos = disc_term(&mut tape, &enc_net, &pos, true);
        let neg: Vec<Var> = old_encs.iter().map(|&e| mean_rows(&mut tape, e)).collect();
        src_neg = disc_term(&mut tape, &enc_net, &neg, false);
    }
    let (mut tgt_pos, mut tgt_neg) = (None, None);
    if !batch.tgt_mono.is_empty() {
        let pos: Vec<Var> = batch.tgt_mono.iter().map(|y| null_source_rep(&mut tape, nmt, &v, y)).collect();
        tgt_pos = disc_term(&mut tape, &dec_net, &pos, true);
        let neg: Vec<Var> = batch.old_bitext.iter().map(|(_, y)| null_source_rep(&mut tape, nmt, &v, y)).collect();
        tgt_neg = disc_term(&mut tape, &dec_net, &neg, false);
    }

    let terms = [
        ("nmt_new", nmt_new, 1.0),
        ("nmt_old", nmt_old, w.lambda1),
        ("disc_src_pos", src_pos, 1.0),
        ("disc_src_neg", src_neg, w.lambda2),
        ("disc_tgt_pos", tgt_pos, 1.0),
        ("disc_tgt_neg", tgt_neg, w.lambda3),
    ];
    let mut values = [0.0; 6];
    let mut total: Option<Var> = None;
    for (i, &(name, var, weight)) in terms.iter().enumerate() {
        let Some(var) = var else { continue };
        let value = tape.scalar(var);
        if !value.is_finite() {
            return Err(Error::Divergence { what: format!("mixed loss term {name}"), step: 0 });
        }
        values[i] = value;
        let weighted = if weight == 1.0 { var } else { tape.scale(var, weight) };
        total = Some(match total {
            Some(acc) => tape.add(acc, weighted),
            None => weighted,
        });
    }
    let [nmt_new, nmt_old, sp, sn, tp, tn] = values;
    let breakdown = LossBreakdown {
        nmt_new,
        nmt_old,
        disc_src_pos: sp,
        disc_src_neg: sn,
        disc_tgt_pos: tp,
        disc_tgt_neg: tn,
        disc_src: sp + w.lambda2 * sn,
        disc_tgt: tp + w.lambda3 * tn,
        total: total.map_or(0.0, |t| tape.scalar(t)),
    };
    let grads = match total {
        Some(t) => {
            let mut g = tape.backward(t);
            let mut out = ToySeq2Seq::grads(&v, &tape, &mut g);
            out.extend(enc_net.grads(&tape, &mut g));
            out.extend(dec_net.grads(&tape, &mut g));
            out
        }
        None => {
            let mut out = Vec::new();
            model.visit(&mut |_, m| out.push(Matrix::zeros(m.rows(), m.cols())));
            out
        }
    };
    Ok((breakdown, grads))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NmtConfig {
    pub dim: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Tokens rarer than this in the training text map to `<unk>`.
    pub min_count: usize,
    pub seed: u64,
}

impl Default for NmtConfig {
    fn default() -> Self {
        NmtConfig { dim: 32, lr: 1e-3, batch_size: 32, max_epochs: 30, patience: 5, min_count: 1, seed: 1 }
    }
}

impl NmtConfig {
    /// Settings used by the pipeline. At 1e-3 the base model is still far
    /// from converged after 30 epochs. The count threshold puts `<unk>` on
    /// both sides of the old bitext often enough for the model to learn to
    /// carry it across, so unseen new-domain words come back from
    /// back-translation as `<unk>`, which is also what the forward model
    /// sees for them at test time.
    pub fn desk() -> Self {
        NmtConfig { lr: 1e-2, min_count: 30, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.dim >= 2, "model dim must be at least 2");
        ensure!(self.lr > 0.0 && self.lr.is_finite(), "learning rate must be positive");
        ensure!(self.batch_size >= 1, "batch size must be at least 1");
        ensure!(self.max_epochs >= 1 && self.patience >= 1, "epochs and patience must be at least 1");
        Ok(())
    }
}

pub struct NmtOutcome {
    pub model: ToySeq2Seq,
    pub log: Vec<EpochLog>,
    pub initial_dev_loss: f64,
    pub best_dev_loss: f64,
}

/// Encode a bitext for `model`.
pub fn encode_pairs(model: &ToySeq2Seq, bitext: &ParallelCorpus) -> Vec<Pair> {
    bitext.pairs().map(|(s, t)| (model.source_ids(s), model.target_ids(t))).collect()
}

#[derive(Default)]
struct Streams {
    new: Vec<Pair>,
    old: Vec<Pair>,
    src_mono: Vec<Vec<usize>>,
    tgt_mono: Vec<Vec<usize>>,
}

/// Endless reshuffled pass over `0..n`.
struct Cycler {
    order: Vec<usize>,
    pos: usize,
}

impl Cycler {
    fn new(n: usize) -> Self {
        Cycler { order: (0..n).collect(), pos: n }
    }

    fn draw(&mut self, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        if self.order.is_empty() {
            return Vec::new();
        }
        (0..k)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order.shuffle(rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

struct Fit {
    model: GudaModel,
    log: Vec<EpochLog>,
    initial: f64,
    best: f64,
}

/// Epochs over the new bitext; every other stream is sampled alongside each
/// batch from its own generator so that the new-bitext order depends only on
/// the seed.
fn fit(mut model: GudaModel, s: &Streams, dev: &[Pair], cfg: &NmtConfig, w: &MixWeights) -> Result<Fit> {
    cfg.validate()?;
    w.validate()?;
    ensure!(!s.new.is_empty(), "no training pairs");
    ensure!(!dev.is_empty(), "no dev pairs");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut aux = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xa11c_e5);
    let (mut c_old, mut c_src, mut c_tgt) = (Cycler::new(s.old.len()), Cycler::new(s.src_mono.len()), Cycler::new(s.tgt_mono.len()));
    let mut adam = Adam::new(cfg.lr);
    let initial = model.nmt.mean_ce(dev);
    let mut best = (initial, model.clone());
    let mut since_best = 0;
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..s.new.len()).collect();
    let mut step = 0u64;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let (mut total, mut batches) = (0.0, 0);
        for chunk in order.chunks(cfg.batch_size) {
            let new: Vec<Pair> = chunk.iter().map(|&i| s.new[i].clone()).collect();
            let old: Vec<Pair> = c_old.draw(chunk.len(), &mut aux).into_iter().map(|i| s.old[i].clone()).collect();
            let src: Vec<Vec<usize>> = c_src.draw(chunk.len(), &mut aux).into_iter().map(|i| s.src_mono[i].clone()).collect();
            let tgt: Vec<Vec<usize>> = c_tgt.draw(chunk.len(), &mut aux).into_iter().map(|i| s.tgt_mono[i].clone()).collect();
            let batch = MixBatch { new_bitext: &new, old_bitext: &old, src_mono: &src, tgt_mono: &tgt };
            step += 1;
            let (loss, grads) = mixed_loss(&model, &batch, w).map_err(|e| match e {
                Error::Divergence { what, .. } => Error::Divergence { what, step },
                e => e,
            })?;
            adam.step(&mut model, &grads)?;
            total += loss.total;
            batches += 1;
        }
        let dev_loss = model.nmt.mean_ce(dev);
        if !dev_loss.is_finite() {
            return Err(Error::Divergence { what: "dev translation loss".into(), step });
        }
        let train_loss = total / batches as f64;
        log::info!("nmt epoch {epoch}: train {train_loss:.5} dev {dev_loss:.5}");
        log.push(EpochLog { epoch, train_loss, dev_loss, lr: cfg.lr });
        if dev_loss < best.0 {
            best = (dev_loss, model.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    Ok(Fit { model: best.1, log, initial, best: best.0 })
}

/// Vocabularies over the given source-side and target-side corpora.
pub fn build_vocabs(src: &[&Corpus], tgt: &[&Corpus], min_count: usize) -> (Vocab, Vocab) {
    (
        Vocab::build_min_count(src.iter().flat_map(|c| c.token_lists()), min_count),
        Vocab::build_min_count(tgt.iter().flat_map(|c| c.token_lists()), min_count),
    )
}

/// Vocabularies of the forward model: sources from the old bitext only, so
/// that unseen new-domain words stay `<unk>`; targets also cover `y_new` so
/// that the adapted model can emit new-domain words.
pub fn forward_vocabs(old_bitext: &ParallelCorpus, y_new: &Corpus, min_count: usize) -> (Vocab, Vocab) {
    build_vocabs(&[&old_bitext.src], &[&old_bitext.tgt, y_new], min_count)
}

/// Vocabularies of the target-to-source model used for back-translation.
pub fn reverse_vocabs(old_bitext: &ParallelCorpus, min_count: usize) -> (Vocab, Vocab) {
    build_vocabs(&[&old_bitext.tgt], &[&old_bitext.src], min_count)
}

/// Train a model from random initialization. Without `vocabs`, the
/// vocabularies come from `train`.
pub fn train_nmt(train: &ParallelCorpus, dev: &ParallelCorpus, vocabs: Option<(Vocab, Vocab)>, cfg: &NmtConfig) -> Result<NmtOutcome> {
    cfg.validate()?;
    ensure!(train.pair_count() > 0, "training bitext is empty");
    let (sv, tv) = vocabs.unwrap_or_else(|| build_vocabs(&[&train.src], &[&train.tgt], cfg.min_count));
    continue_nmt(ToySeq2Seq::init(sv, tv, cfg.dim, cfg.seed), train, dev, cfg)
}

/// Continue training an existing model on a bitext.
pub fn continue_nmt(model: ToySeq2Seq, train: &ParallelCorpus, dev: &ParallelCorpus, cfg: &NmtConfig) -> Result<NmtOutcome> {
    let streams = Streams { new: encode_pairs(&model, train), ..Default::default() };
    let dev = encode_pairs(&model, dev);
    let fit = fit(GudaModel::new(model, 1, cfg.seed), &streams, &dev, cfg, &MixWeights::default())?;
    Ok(NmtOutcome { model: fit.model.nmt, log: fit.log, initial_dev_loss: fit.initial, best_dev_loss: fit.best })
}

fn translate_all(model: &ToySeq2Seq, input: &Corpus, language: &str) -> Result<Corpus> {
    let mut empty = 0;
    let out: Vec<Vec<String>> = input
        .token_lists()
        .map(|s| {
            let mut t = model.greedy_decode(s);
            if t.is_empty() {
                empty += 1;
                t.push(model.tgt_vocab.token(UNK).to_string());
            }
            t
        })
        .collect();
    if empty > 0 {
        log::warn!("{empty} of {} translations were empty and became a single unknown token", input.len());
    }
    let mut c = Corpus::new(language, input.role, out)?;
    c.domain = input.domain.clone();
    Ok(c)
}

/// Pseudo-bitext `(decode(y), y)` for target sentences `y_new`, using a model
/// trained in the reverse direction. The pseudo-source gets `source_language`.
pub fn back_translate(reverse: &ToySeq2Seq, y_new: &Corpus, source_language: &str) -> Result<ParallelCorpus> {
    let src = translate_all(reverse, y_new, source_language)?;
    ParallelCorpus::new(src, y_new.clone())
}

/// `(x, decode(x))` for source sentences `x_new`.
pub fn forward_translate(model: &ToySeq2Seq, x_new: &Corpus, target_language: &str) -> Result<ParallelCorpus> {
    let tgt = translate_all(model, x_new, target_language)?;
    ParallelCorpus::new(x_new.clone(), tgt)
}

/// Greedy translations of every sentence of `input`.
pub fn translate(model: &ToySeq2Seq, input: &Corpus) -> Vec<Vec<String>> {
    input.token_lists().map(|s| model.greedy_decode(s)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GudaConfig {
    pub nmt: NmtConfig,
    pub weights: MixWeights,
    pub ablation: Ablation,
    /// Draw old-domain bitext batches alongside the pseudo-bitext.
    pub use_old_bitext: bool,
    pub warm_start: bool,
    pub dev_fraction: f64,
    pub disc_hidden: usize,
}

impl Default for GudaConfig {
    fn default() -> Self {
        GudaConfig {
            nmt: NmtConfig::desk(),
            weights: MixWeights::default(),
            ablation: Ablation::BiST,
            use_old_bitext: true,
            warm_start: true,
            dev_fraction: 0.1,
            disc_hidden: 32,
        }
    }
}

/// Data for [`train_guda`].
pub struct GudaData<'a> {
    pub old_bitext: &'a ParallelCorpus,
    /// New-domain source monotext, if any.
    pub x_new: Option<&'a Corpus>,
    /// Target sentences of the pseudo-bitext.
    pub y_new: &'a Corpus,
    /// Target-to-source model used for back-translation.
    pub reverse: &'a ToySeq2Seq,
}

pub struct GudaOutcome {
    pub model: GudaModel,
    pub log: Vec<EpochLog>,
    pub initial_dev_loss: f64,
    pub best_dev_loss: f64,
    pub pseudo_train: ParallelCorpus,
    pub pseudo_dev: ParallelCorpus,
}

/// Adapt a translation model to the new domain. Warm start continues from
/// `base`; cold start initializes a fresh model over [`forward_vocabs`].
pub fn train_guda(data: &GudaData, base: Option<&ToySeq2Seq>, cfg: &GudaConfig) -> Result<GudaOutcome> {
    cfg.nmt.validate()?;
    cfg.weights.validate()?;
    ensure!((0.0..1.0).contains(&cfg.dev_fraction) && cfg.dev_fraction > 0.0, "dev fraction must lie in (0, 1)");
    ensure!(data.y_new.len() >= 2, "need at least 2 new-domain target sentences");
    if cfg.warm_start {
        ensure!(base.is_some(), "warm start needs a base model");
    }
    let pseudo = back_translate(data.reverse, data.y_new, &data.old_bitext.src.language)?;
    let mut ids: Vec<usize> = (0..pseudo.pair_count()).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.nmt.seed ^ 0xde5));
    let n_dev = ((ids.len() as f64 * cfg.dev_fraction).round() as usize).clamp(1, ids.len() - 1);
    let (mut dev_ids, mut train_ids) = (ids[..n_dev].to_vec(), ids[n_dev..].to_vec());
    dev_ids.sort_unstable();
    train_ids.sort_unstable();
    let pseudo_train = pseudo.subset(&train_ids);
    let pseudo_dev = pseudo.subset(&dev_ids);

    let nmt = match base {
        Some(b) if cfg.warm_start => b.clone(),
        _ => {
            let (sv, tv) = forward_vocabs(data.old_bitext, data.y_new, cfg.nmt.min_count);
            ToySeq2Seq::init(sv, tv, cfg.nmt.dim, cfg.nmt.seed)
        }
    };
    let mut streams = Streams { new: encode_pairs(&nmt, &pseudo_train), ..Default::default() };
    if cfg.use_old_bitext {
        streams.old = encode_pairs(&nmt, data.old_bitext);
    }
    if cfg.ablation.source() {
        let x = data.x_new.ok_or_else(|| Error::Precondition("source discriminator needs new-domain source monotext".into()))?;
        streams.src_mono = x.token_lists().map(|s| nmt.source_ids(s)).collect();
    }
    if cfg.ablation.target() {
        streams.tgt_mono = data.y_new.token_lists().map(|s| nmt.target_ids(s)).collect();
    }
    let dev = encode_pairs(&nmt, &pseudo_dev);
    let model = GudaModel::new(nmt, cfg.disc_hidden, cfg.nmt.seed);
    let fit = fit(model, &streams, &dev, &cfg.nmt, &cfg.weights)?;
    Ok(GudaOutcome {
        model: fit.model,
        log: fit.log,
        initial_dev_loss: fit.initial,
        best_dev_loss: fit.best,
        pseudo_train,
        pseudo_dev,
    })
}
