//! Stage runner. Every stage reads and writes named files under one output
//! directory, so any stage can be re-run on its own once its inputs exist.

mod config;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use config::{AblationSettings, AdaptSettings, Direction, PipelineConfig};

use crate::adapt::{self, Ablation, GudaData, GudaModel, ToySeq2Seq};
use crate::align::{self, AdaptiveLayer, FeedForward, PairEmbeddings};
use crate::classify::{self, DomainClassifier};
use crate::cluster::{self, ClusterAssignment};
use crate::corpus::{load_corpus, read_tsv_column, write_tsv_column, Corpus, ParallelCorpus};
use crate::embed::{read_embeddings, write_embeddings, write_sidecar};
use crate::error::{ensure, Error, Result};
use crate::eval;
use crate::numerics::{read_checkpoint, write_checkpoint, Checkpoint, Matrix, Module};
use crate::select::{self, Method, SelectionResult};
use crate::synth::{self, Scenario, ToyEmbedder, LANG_A, LANG_B};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    Synth,
    Embed,
    Cluster,
    Align,
    Classify,
    Select,
    Adapt,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 8] =
        [Stage::Synth, Stage::Embed, Stage::Cluster, Stage::Align, Stage::Classify, Stage::Select, Stage::Adapt, Stage::Eval];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Embed => "embed",
            Stage::Cluster => "cluster",
            Stage::Align => "align",
            Stage::Classify => "classify",
            Stage::Select => "select",
            Stage::Adapt => "adapt",
            Stage::Eval => "eval",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL.into_iter().find(|st| st.name() == s).ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

/// Corpus files written by the synth stage, as `(set, language)`.
const CORPORA: [(&str, &str); 10] = [
    ("old_train", LANG_A),
    ("old_train", LANG_B),
    ("old_dev", LANG_A),
    ("old_dev", LANG_B),
    ("new_mono", LANG_A),
    ("new_mono", LANG_B),
    ("pool", LANG_A),
    ("pool", LANG_B),
    ("new_test", LANG_A),
    ("new_test", LANG_B),
];

fn corpus_file(set: &str, lang: &str) -> String {
    format!("corpora/{set}.{lang}.txt")
}

fn embedding_file(set: &str, lang: &str) -> String {
    format!("embeddings/{set}.{lang}.emb")
}

fn labels_file(set: &str, lang: &str) -> String {
    format!("corpora/{set}.{lang}.labels.tsv")
}

fn selection_file(m: Method) -> String {
    format!("select/{}.tsv", m.tag())
}

fn other(lang: &str) -> &'static str {
    if lang == LANG_A {
        LANG_B
    } else {
        LANG_A
    }
}

/// Files a stage needs before it can run.
pub fn stage_inputs(stage: Stage, cfg: &PipelineConfig) -> Vec<String> {
    let mono = mono_side(cfg);
    let pool = other(mono);
    match stage {
        Stage::Synth => Vec::new(),
        Stage::Embed => CORPORA.iter().map(|(s, l)| corpus_file(s, l)).collect(),
        Stage::Cluster => vec![embedding_file("old_train", LANG_A), embedding_file("old_train", LANG_B)],
        Stage::Align => vec![
            embedding_file("old_train", LANG_A),
            embedding_file("old_train", LANG_B),
            embedding_file("old_dev", LANG_A),
            embedding_file("old_dev", LANG_B),
            "clusters/assignments.tsv".into(),
            "clusters/centroids.xpr".into(),
        ],
        Stage::Classify => {
            vec!["align/adaptive.xpr".into(), embedding_file("new_mono", mono), embedding_file("old_train", mono)]
        }
        Stage::Select => {
            let mut v = vec![
                "align/adaptive.xpr".into(),
                "classify/classifier.xpr".into(),
                embedding_file("new_mono", mono),
                embedding_file("old_train", mono),
                embedding_file("pool", pool),
                labels_file("pool", pool),
            ];
            if cfg.methods.contains(&Method::Ced) {
                v.extend([corpus_file("old_train", LANG_A), corpus_file("old_train", LANG_B), corpus_file("new_mono", mono), corpus_file("pool", pool)]);
            }
            v
        }
        Stage::Adapt => vec![
            corpus_file("old_train", LANG_A),
            corpus_file("old_train", LANG_B),
            corpus_file("old_dev", LANG_A),
            corpus_file("old_dev", LANG_B),
            corpus_file("new_mono", mono),
            corpus_file("pool", pool),
            selection_file(cfg.adapt_selection),
        ],
        Stage::Eval => vec![
            "adapt/base.xpr".into(),
            "adapt/adapted.xpr".into(),
            corpus_file("new_test", LANG_A),
            corpus_file("new_test", LANG_B),
            "align/adaptive.xpr".into(),
            embedding_file("pool", LANG_B),
            labels_file("pool", LANG_B),
            "select/pool_scores.tsv".into(),
        ],
    }
}

/// Side of the given new-domain monotext.
fn mono_side(cfg: &PipelineConfig) -> &'static str {
    match cfg.direction {
        Direction::GivenSourceMonotext => LANG_A,
        Direction::GivenTargetMonotext => LANG_B,
    }
}

/// Paths of one run.
#[derive(Clone, Debug)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Error listing every missing file of `rels`.
    pub fn require(&self, rels: &[String]) -> Result<()> {
        let missing: Vec<String> = rels.iter().filter(|r| !self.path(r).is_file()).cloned().collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::MissingArtifacts(missing))
        }
    }

    fn create(&self, rel: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        Ok(p)
    }

    fn write(&self, rel: &str, text: &str) -> Result<()> {
        let p = self.create(rel)?;
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }

    fn write_json<T: Serialize>(&self, rel: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value).expect("metrics serialize");
        text.push('\n');
        self.write(rel, &text)
    }

    fn read_json<T: for<'de> Deserialize<'de>>(&self, rel: &str) -> Result<T> {
        let p = self.path(rel);
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(&p, 0, e.to_string()))
    }

    fn corpus(&self, set: &str, lang: &str) -> Result<Corpus> {
        Ok(load_corpus(&self.path(&corpus_file(set, lang)), lang, None)?.0)
    }

    fn bitext(&self, set: &str) -> Result<ParallelCorpus> {
        ParallelCorpus::new(self.corpus(set, LANG_A)?, self.corpus(set, LANG_B)?)
    }

    fn embeddings(&self, set: &str, lang: &str) -> Result<Matrix> {
        Ok(read_embeddings(&self.path(&embedding_file(set, lang)))?.to_matrix())
    }

    fn labels(&self, set: &str, lang: &str) -> Result<Vec<usize>> {
        let p = self.path(&labels_file(set, lang));
        read_tsv_column(&p)?
            .iter()
            .enumerate()
            .map(|(i, v)| v.parse().map_err(|_| Error::format(&p, i as u64, format!("bad domain label {v:?}"))))
            .collect()
    }

    fn save_module(&self, rel: &str, m: &dyn Module) -> Result<()> {
        let p = self.create(rel)?;
        write_checkpoint(&m.to_checkpoint(), &p)
    }

    fn save_seq2seq(&self, rel: &str, m: &ToySeq2Seq) -> Result<()> {
        let p = self.create(rel)?;
        m.save(&p)
    }

    fn adaptive_layer(&self) -> Result<AdaptiveLayer> {
        load_feedforward(&self.path("align/adaptive.xpr"))
    }

    fn classifier(&self) -> Result<DomainClassifier> {
        Ok(DomainClassifier { net: load_feedforward(&self.path("classify/classifier.xpr"))? })
    }
}

/// Rebuild a feed-forward net from its checkpoint, taking sizes from the
/// stored shapes.
pub fn load_feedforward(path: &Path) -> Result<FeedForward> {
    let ck = read_checkpoint(path)?;
    let shape = |n: &str| ck.get(n).map(|m| m.shape()).ok_or_else(|| Error::format(path, 0, format!("checkpoint lacks {n}")));
    let (d_in, hidden) = shape("w1")?;
    let (_, d_out) = shape("w2")?;
    let mut ff = FeedForward::zeros(d_in, hidden, d_out);
    ff.load_checkpoint(&ck)?;
    Ok(ff)
}

fn write_csv(run: &RunDir, rel: &str, header: &str, rows: &[String]) -> Result<()> {
    let mut text = format!("{header}\n");
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    run.write(rel, &text)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterMetrics {
    pub k: usize,
    pub inertia: f64,
    pub iterations: usize,
    /// Purity of the pair clusters against the true domains.
    pub domain_purity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignMetrics {
    pub retrieval_p1_before: f64,
    pub retrieval_p1_after: f64,
    pub initial_dev_loss: f64,
    pub best_dev_loss: f64,
    pub epochs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifyMetrics {
    pub holdout_accuracy: f64,
    pub initial_holdout_loss: f64,
    pub best_holdout_loss: f64,
    pub epochs: usize,
    pub positives: usize,
    pub negatives: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodScore {
    pub method: Method,
    pub precision_at_k: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectMetrics {
    pub k: usize,
    pub in_domain: usize,
    pub methods: Vec<MethodScore>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptMetrics {
    pub ablation: Ablation,
    pub warm_start: bool,
    pub base_best_dev_loss: f64,
    pub reverse_best_dev_loss: f64,
    pub adapted_initial_dev_loss: f64,
    pub adapted_best_dev_loss: f64,
    pub adapted_epochs: usize,
    pub pseudo_pairs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub bleu_base: f64,
    pub bleu_adapted: f64,
    pub precisions_base: Vec<Option<f64>>,
    pub precisions_adapted: Vec<Option<f64>>,
    /// New n-gram contribution for `n = 1..=4`; `None` when undefined.
    pub ngram_contribution: Vec<Option<f64>>,
    pub cluster_purity_raw: f64,
    pub cluster_purity_adapted: f64,
    pub cluster_ari_raw: f64,
    pub cluster_ari_adapted: f64,
}

fn scenario(cfg: &PipelineConfig) -> Result<Scenario> {
    synth::gen_scenario(&cfg.synth, &cfg.scenario)
}

fn stage_synth(run: &RunDir, cfg: &PipelineConfig) -> Result<()> {
    let sc = scenario(cfg)?;
    for (set, lang) in CORPORA {
        let c = scenario_corpus(&sc, set, lang);
        c.save(&run.create(&corpus_file(set, lang))?)?;
        if let Some(labels) = c.domain_labels() {
            write_tsv_column(&run.create(&labels_file(set, lang))?, &labels)?;
        }
    }
    synth::write_dictionary(&sc.dictionary, &run.create("corpora/dictionary.tsv")?)
}

fn scenario_corpus<'a>(sc: &'a Scenario, set: &str, lang: &str) -> &'a Corpus {
    let a = lang == LANG_A;
    match set {
        "old_train" => if a { &sc.old_train.src } else { &sc.old_train.tgt },
        "old_dev" => if a { &sc.old_dev.src } else { &sc.old_dev.tgt },
        "new_mono" => if a { &sc.new_mono_a } else { &sc.new_mono_b },
        "pool" => if a { &sc.pool_a } else { &sc.pool_b },
        "new_test" => if a { &sc.new_test.src } else { &sc.new_test.tgt },
        _ => unreachable!("unknown corpus set {set}"),
    }
}

/// The toy embedder needs the hidden concept ids, which plain text files
/// lack, so the corpora are regenerated and checked against the files.
fn stage_embed(run: &RunDir, cfg: &PipelineConfig) -> Result<()> {
    let sc = scenario(cfg)?;
    let mut embedder = ToyEmbedder::new(&cfg.embedder)?;
    for (set, lang) in CORPORA {
        let c = scenario_corpus(&sc, set, lang);
        let on_disk = run.corpus(set, lang)?;
        if on_disk.sentences != c.sentences {
            return Err(Error::UnsupportedCorpus(format!(
                "{} does not match the synthetic scenario of this configuration",
                corpus_file(set, lang)
            )));
        }
        let e = embedder.embed(c)?;
        let p = run.create(&embedding_file(set, lang))?;
        write_embeddings(&e, &p)?;
        write_sidecar(&p, &run.path(&corpus_file(set, lang)))?;
    }
    Ok(())
}

fn stage_cluster(run: &RunDir, cfg: &PipelineConfig) -> Result<()> {
    let (src, tgt) = (run.embeddings("old_train", LANG_A)?, run.embeddings("old_train", LANG_B)?);
    let k = cfg.contrastive.k_clusters.min(src.rows());
    let a = cluster::pair_clusters(&src, &tgt, k, cfg.seed)?;
    cluster::write_assignments(&a.labels, &run.create("clusters/assignments.tsv")?)?;
    let mut ck = Checkpoint::default();
    ck.push("centroids", a.centroids.clone());
    write_checkpoint(&ck, &run.create("clusters/centroids.xpr")?)?;
    let purity = match run.labels("old_train", LANG_A) {
        Ok(truth) => cluster::purity(&a.labels, &truth)?,
        Err(_) => f64::NAN,
    };
    run.write_json(
        "clusters/metrics.json",
        &ClusterMetrics { k, inertia: a.inertia, iterations: a.inertia_history.len(), domain_purity: purity },
    )
}

fn read_clusters(run: &RunDir) -> Result<ClusterAssignment> {
    let p = run.path("clusters/assignments.tsv");
    let labels = read_tsv_column(&p)?
        .iter()
        .enumerate()
        .map(|(i, v)| v.parse().map_err(|_| Error::format(&p, i as u64, format!("bad cluster label {v:?}"))))
        .collect::<Result<Vec<usize>>>()?;
    let cp = run.path("clusters/centroids.xpr");
    let centroids = read_checkpoint(&cp)?.get("centroids").cloned().ok_or_else(|| Error::format(&cp, 0, "no centroids tensor"))?;
    Ok(ClusterAssignment { labels, centroids, inertia: f64::NAN, inertia_history: Vec::new() })
}

fn stage_align(run: &RunDir, cfg: &PipelineConfig) -> Result<()> {
    let (ts, tt) = (run.embeddings("old_train", LANG_A)?, run.embeddings("old_train", LANG_B)?);
    let (ds, dt) = (run.embeddings("old_dev", LANG_A)?, run.embeddings("old_dev", LANG_B)?);
    let clusters = read_clusters(run)?;
    let before = align::precision_at_1(&ds, &dt)?;
    let out = align::train_adaptive_with(PairEmbeddings { src: &ts, tgt: &tt }, PairEmbeddings { src: &ds, tgt: &dt }, clusters, &cfg.contrastive)?;
    let after = align::retrieval_eval(&out.layer, PairEmbeddings { src: &ds, tgt: &dt })?;
    run.save_module("align/adaptive.xpr", &out.layer)?;
    align::write_training_log(&out.log, &run.create("align/log.csv")?)?;
    run.write_json(
        "align/metrics.json",
        &AlignMetrics {
            retrieval_p1_before: before,
            retrieval_p1_after: after,
            initial_dev_loss: out.initial_dev_loss,
            best_dev_loss: out.best_dev_loss,
            epochs: out.log.len(),
        },
    )
}

fn stage_classify(run: &RunDir, cfg: &PipelineConfig) -> Result<()> {
    let side = mono_side(cfg);
    let layer = run.adaptive_layer()?;
    let (new, old) = (run.embeddings("new_mono", side)?, run.embeddings("old_train", side)?);
    let out = classify::train_classifier(&layer, &new, &old, &cfg.classifier)?;
    run.save_module("classify/classifier.xpr", &out.classifier)?;
    write_tsv_column(&run.create("classify/negatives.tsv")?, &out.negatives)?;
    run.write_json(
        "classify/metrics.json",
        &ClassifyMetrics {
            holdout_accuracy: out.holdout_accuracy,
            initial_holdout_loss: out.initial_holdout_loss,
            best_holdout_loss: out.best_holdout_loss,
            epochs: out.epochs,
            positives: new.rows(),
            negatives: out.negatives.len(),
        },
    )
}

/// Number of sentences to select: the configured count, or the number of
/// in-domain pool sentences.
fn selection_k(cfg: &PipelineConfig, labels: &[usize]) -> usize {
    if cfg.select_k > 0 {
        cfg.select_k
    } else {
        labels.iter().filter(|&&d| d == cfg.scenario.new_domain).count()
    }
}

/// One selection method on already-loaded inputs.
struct SelectInputs<'a> {
    layer: &'a AdaptiveLayer,
    clf: &'a DomainClassifier,
    new: &'a Matrix,
    old: &'a Matrix,
    pool: &'a Matrix,
}

fn run_method(run: &RunDir, cfg: &PipelineConfig, m: Method, inp: &SelectInputs, k: usize) -> Result<SelectionResult> {
    let side = mono_side(cfg);
    match m {
        Method::Ours => select::classifier_select(inp.clf, inp.layer, inp.pool, k),
        Method::Random => select::random_select(inp.pool.rows(), k, cfg.seed),
        Method::Ced => {
            let old = [run.corpus("old_train", LANG_A)?, run.corpus("old_train", LANG_B)?];
            let new = run.corpus("new_mono", side)?;
            let pool = run.corpus("pool", other(side))?;
            select::ced_select(&[&old[0], &old[1]], &new, &pool, k, &cfg.ced)
        }
        Method::DomainFinetune => Ok(select::domain_finetune_select(inp.new, inp.old, inp.pool, k, &cfg.classifier)?.0),
    }
}

fn stage_select(run: &RunDir, cfg: &PipelineConfig) -> Result<()> {
    let side = mono_side(cfg);
    let pool_side = other(side);
    let layer = run.adaptive_layer()?;
    let clf = run.classifier()?;
    let (new, old, pool) = (run.embeddings("new_mono", side)?, run.embeddings("old_train", side)?, run.embeddings("pool", pool_side)?);
    let labels = run.labels("pool", pool_side)?;
    let k = selection_k(cfg, &labels);
    let pool_text = run.corpus("pool", pool_side)?;
    let inputs = SelectInputs { layer: &layer, clf: &clf, new: &new, old: &old, pool: &pool };
    let mut methods = Vec::new();
    for &m in &cfg.methods {
        let mut sel = run_method(run, cfg, m, &inputs, k)?;
        sel.fingerprint = cfg.fingerprint();
        sel.pool = corpus_file("pool", pool_side);
        sel.save(&pool_text, &run.create(&selection_file(m))?)?;
        let p = select::precision_at_k(&sel, &labels, cfg.scenario.new_domain);
        log::info!("selection {m}: precision@{k} {p:.4}");
        methods.push(MethodScore { method: m, precision_at_k: p });
    }
    let scores = classify::score(&clf, &layer, &pool)?;
    let formatted: Vec<String> = scores.iter().map(|s| format!("{s:.9}")).collect();
    write_tsv_column(&run.create("select/pool_scores.tsv")?, &formatted)?;
    let in_domain = labels.iter().filter(|&&d| d == cfg.scenario.new_domain).count();
    run.write_json("select/metrics.json", &SelectMetrics { k, in_domain, methods })
}

/// `X_new` and `Y_new` for adaptation given a selection from the pool.
fn new_domain_text(run: &RunDir, cfg: &PipelineConfig, sel: &SelectionResult) -> Result<(Corpus, Corpus)> {
    let side = mono_side(cfg);
    let given = run.corpus("new_mono", side)?;
    let selected = sel.apply(&run.corpus("pool", other(side))?);
    Ok(if side == LANG_A { (given, selected) } else { (selected, given) })
}

fn load_selection(run: &RunDir, m: Method) -> Result<SelectionResult> {
    Ok(SelectionResult::load(&run.path(&selection_file(m)))?.0)
}

fn stage_adapt(run: &RunDir, cfg: &PipelineConfig) -> Result<()> {
    let old = run.bitext("old_train")?;
    let dev = run.bitext("old_dev")?;
    let sel = load_selection(run, cfg.adapt_selection)?;
    let (x_new, y_new) = new_domain_text(run, cfg, &sel)?;
    let mc = cfg.nmt.min_count;
    let base = adapt::train_nmt(&old, &dev, Some(adapt::forward_vocabs(&old, &y_new, mc)), &cfg.nmt)?;
    let reverse = adapt::train_nmt(&old.reversed(), &dev.reversed(), Some(adapt::reverse_vocabs(&old, mc)), &cfg.nmt)?;
    run.save_seq2seq("adapt/base.xpr", &base.model)?;
    run.save_seq2seq("adapt/reverse.xpr", &reverse.model)?;
    align::write_training_log(&base.log, &run.create("adapt/base_log.csv")?)?;
    align::write_training_log(&reverse.log, &run.create("adapt/reverse_log.csv")?)?;

    let data = GudaData { old_bitext: &old, x_new: Some(&x_new), y_new: &y_new, reverse: &reverse.model };
    let out = adapt::train_guda(&data, Some(&base.model), &cfg.guda())?;
    run.save_seq2seq("adapt/adapted.xpr", &out.model.nmt)?;
    let mut disc = Checkpoint::default();
    disc.extend_prefixed("enc_clf.", &out.model.enc_clf.to_checkpoint());
    disc.extend_prefixed("dec_clf.", &out.model.dec_clf.to_checkpoint());
    write_checkpoint(&disc, &run.create("adapt/discriminators.xpr")?)?;
    align::write_training_log(&out.log, &run.create("adapt/adapt_log.csv")?)?;
    out.pseudo_train.src.save(&run.create("adapt/pseudo_train.a.txt")?)?;
    out.pseudo_train.tgt.save(&run.create("adapt/pseudo_train.b.txt")?)?;
    run.write_json(
        "adapt/metrics.json",
        &AdaptMetrics {
            ablation: cfg.adapt.ablation,
            warm_start: cfg.adapt.warm_start,
            base_best_dev_loss: base.best_dev_loss,
            reverse_best_dev_loss: reverse.best_dev_loss,
            adapted_initial_dev_loss: out.initial_dev_loss,
            adapted_best_dev_loss: out.best_dev_loss,
            adapted_epochs: out.log.len(),
            pseudo_pairs: out.pseudo_train.pair_count() + out.pseudo_dev.pair_count(),
        },
    )
}

fn token_lists(c: &Corpus) -> Vec<Vec<String>> {
    c.token_lists().map(<[String]>::to_vec).collect()
}

fn save_translations(run: &RunDir, rel: &str, lines: &[Vec<String>]) -> Result<()> {
    let mut text = String::new();
    for l in lines {
        text.push_str(&l.join(" "));
        text.push('\n');
    }
    run.write(rel, &text)
}

fn stage_eval(run: &RunDir, cfg: &PipelineConfig) -> Result<()> {
    let base = ToySeq2Seq::load(&run.path("adapt/base.xpr"))?;
    let adapted = ToySeq2Seq::load(&run.path("adapt/adapted.xpr"))?;
    let test = run.bitext("new_test")?;
    let refs = token_lists(&test.tgt);
    let zero = adapt::translate(&base, &test.src);
    let hyp = adapt::translate(&adapted, &test.src);
    save_translations(run, "eval/zero_shot.txt", &zero)?;
    save_translations(run, "eval/adapted.txt", &hyp)?;
    let bz = eval::corpus_bleu(&zero, &refs, 4)?;
    let ba = eval::corpus_bleu(&hyp, &refs, 4)?;
    let contribution = (1..=4)
        .map(|n| eval::ngram_contribution(&hyp, &zero, &refs, n).map(|c| c.value))
        .collect::<Result<Vec<_>>>()?;

    let scores_path = run.path("select/pool_scores.tsv");
    let scores = read_tsv_column(&scores_path)?
        .iter()
        .enumerate()
        .map(|(i, v)| v.parse::<f64>().map_err(|_| Error::format(&scores_path, i as u64, format!("bad score {v:?}"))))
        .collect::<Result<Vec<_>>>()?;
    let cdf = eval::score_cdf(&scores)?;
    eval::write_cdf(&cdf, &run.create("eval/score_cdf.csv")?)?;

    let layer = run.adaptive_layer()?;
    let raw = run.embeddings("pool", LANG_B)?;
    let adapted_space = layer.forward(&raw)?;
    let truth = run.labels("pool", LANG_B)?;
    let report = eval::cluster_report(&raw, &adapted_space, &truth, cfg.seed)?;
    let names: Vec<String> = truth.iter().map(|&d| synth::domain_name(d)).collect();
    eval::write_pca_csv(&report.raw.coords, &names, &run.create("eval/pca_raw.csv")?)?;
    eval::write_pca_csv(&report.adapted.coords, &names, &run.create("eval/pca_adapted.csv")?)?;

    run.write_json(
        "eval/metrics.json",
        &EvalMetrics {
            bleu_base: bz.bleu,
            bleu_adapted: ba.bleu,
            precisions_base: bz.precisions,
            precisions_adapted: ba.precisions,
            ngram_contribution: contribution,
            cluster_purity_raw: report.raw.purity,
            cluster_purity_adapted: report.adapted.purity,
            cluster_ari_raw: report.raw.ari,
            cluster_ari_adapted: report.adapted.ari,
        },
    )
}

/// Run one stage after checking that its inputs exist.
pub fn run_stage(stage: Stage, cfg: &PipelineConfig, run: &RunDir) -> Result<()> {
    run.require(&stage_inputs(stage, cfg))?;
    log::info!("stage {stage}");
    match stage {
        Stage::Synth => stage_synth(run, cfg),
        Stage::Embed => stage_embed(run, cfg),
        Stage::Cluster => stage_cluster(run, cfg),
        Stage::Align => stage_align(run, cfg),
        Stage::Classify => stage_classify(run, cfg),
        Stage::Select => stage_select(run, cfg),
        Stage::Adapt => stage_adapt(run, cfg),
        Stage::Eval => stage_eval(run, cfg),
    }
}

/// Run `f` over `items` on up to `jobs` threads, keeping input order.
fn parallel_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().map(&f).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut slots: Vec<Option<Result<R>>> = (0..items.len()).map(|_| None).collect();
    let results = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                results.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    slots.into_iter().map(|r| r.expect("every cell ran")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KAblationRow {
    pub k: usize,
    pub retrieval_p1: f64,
    pub precision_at_k: f64,
    pub bleu: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossAblationRow {
    pub subset: Ablation,
    pub bleu: f64,
    pub best_dev_loss: f64,
    pub epochs: usize,
}

fn bleu_on_test(model: &ToySeq2Seq, test: &ParallelCorpus) -> Result<f64> {
    Ok(eval::corpus_bleu(&adapt::translate(model, &test.src), &token_lists(&test.tgt), 4)?.bleu)
}

/// Retrain alignment, classifier, selection and adaptation for every `k`.
/// Needs the base and reverse models of the adapt stage.
pub fn ablate_k(cfg: &PipelineConfig, run: &RunDir, values: &[usize], jobs: usize) -> Result<Vec<KAblationRow>> {
    ensure!(!values.is_empty(), "no k values to sweep");
    let side = mono_side(cfg);
    let pool_side = other(side);
    let mut inputs = vec![
        embedding_file("old_train", LANG_A),
        embedding_file("old_train", LANG_B),
        embedding_file("old_dev", LANG_A),
        embedding_file("old_dev", LANG_B),
        embedding_file("new_mono", side),
        embedding_file("pool", pool_side),
        labels_file("pool", pool_side),
        "adapt/base.xpr".into(),
        "adapt/reverse.xpr".into(),
        corpus_file("new_test", LANG_A),
        corpus_file("new_test", LANG_B),
    ];
    inputs.extend(stage_inputs(Stage::Adapt, cfg).into_iter().filter(|f| f.starts_with("corpora/")));
    run.require(&inputs)?;
    let (ts, tt) = (run.embeddings("old_train", LANG_A)?, run.embeddings("old_train", LANG_B)?);
    let (ds, dt) = (run.embeddings("old_dev", LANG_A)?, run.embeddings("old_dev", LANG_B)?);
    let new = run.embeddings("new_mono", side)?;
    let old_side = if side == LANG_A { &ts } else { &tt };
    let pool = run.embeddings("pool", pool_side)?;
    let labels = run.labels("pool", pool_side)?;
    let k_sel = selection_k(cfg, &labels);
    let base = ToySeq2Seq::load(&run.path("adapt/base.xpr"))?;
    let reverse = ToySeq2Seq::load(&run.path("adapt/reverse.xpr"))?;
    let old = run.bitext("old_train")?;
    let test = run.bitext("new_test")?;
    let given = run.corpus("new_mono", side)?;
    let pool_text = run.corpus("pool", pool_side)?;

    let rows = parallel_map(values, jobs, |&k| {
        let mut c = cfg.contrastive.clone();
        c.k_clusters = k;
        let train = PairEmbeddings { src: &ts, tgt: &tt };
        let dev = PairEmbeddings { src: &ds, tgt: &dt };
        let layer = align::train_adaptive(train, dev, &c)?.layer;
        let retrieval = align::retrieval_eval(&layer, dev)?;
        let clf = classify::train_classifier(&layer, &new, old_side, &cfg.classifier)?.classifier;
        let sel = select::classifier_select(&clf, &layer, &pool, k_sel)?;
        let p = select::precision_at_k(&sel, &labels, cfg.scenario.new_domain);
        let selected = sel.apply(&pool_text);
        let (x_new, y_new) = if side == LANG_A { (&given, &selected) } else { (&selected, &given) };
        let data = GudaData { old_bitext: &old, x_new: Some(x_new), y_new, reverse: &reverse };
        let adapted = adapt::train_guda(&data, Some(&base), &cfg.guda())?;
        let bleu = bleu_on_test(&adapted.model.nmt, &test)?;
        log::info!("ablate k={k}: retrieval {retrieval:.4} precision {p:.4} bleu {bleu:.2}");
        Ok(KAblationRow { k, retrieval_p1: retrieval, precision_at_k: p, bleu })
    })?;
    let lines: Vec<String> =
        rows.iter().map(|r| format!("{},{:.6},{:.6},{:.4}", r.k, r.retrieval_p1, r.precision_at_k, r.bleu)).collect();
    write_csv(run, "ablate/k.csv", "k,retrieval_p1,precision_at_k,bleu", &lines)?;
    Ok(rows)
}

fn loss_inputs(cfg: &PipelineConfig) -> Vec<String> {
    let mut inputs = stage_inputs(Stage::Adapt, cfg);
    inputs.extend(["adapt/base.xpr".into(), "adapt/reverse.xpr".into(), corpus_file("new_test", LANG_A), corpus_file("new_test", LANG_B)]);
    inputs
}

/// Shared inputs of the loss-subset cells.
struct LossCell {
    old: ParallelCorpus,
    test: ParallelCorpus,
    x_new: Corpus,
    y_new: Corpus,
    base: ToySeq2Seq,
    reverse: ToySeq2Seq,
}

impl LossCell {
    fn load(cfg: &PipelineConfig, run: &RunDir) -> Result<Self> {
        run.require(&loss_inputs(cfg))?;
        let sel = load_selection(run, cfg.adapt_selection)?;
        let (x_new, y_new) = new_domain_text(run, cfg, &sel)?;
        Ok(LossCell {
            old: run.bitext("old_train")?,
            test: run.bitext("new_test")?,
            x_new,
            y_new,
            base: ToySeq2Seq::load(&run.path("adapt/base.xpr"))?,
            reverse: ToySeq2Seq::load(&run.path("adapt/reverse.xpr"))?,
        })
    }

    fn run(&self, cfg: &PipelineConfig, subset: Ablation) -> Result<LossAblationRow> {
        let mut g = cfg.guda();
        g.ablation = subset;
        let data = GudaData { old_bitext: &self.old, x_new: Some(&self.x_new), y_new: &self.y_new, reverse: &self.reverse };
        let out = adapt::train_guda(&data, Some(&self.base), &g)?;
        let bleu = bleu_on_test(&out.model.nmt, &self.test)?;
        log::info!("ablate losses {subset}: bleu {bleu:.2}");
        Ok(LossAblationRow { subset, bleu, best_dev_loss: out.best_dev_loss, epochs: out.log.len() })
    }
}

/// Adapt with one loss subset from the saved base and reverse models, and
/// score it on the new-domain test set. Writes nothing.
pub fn adapt_subset(cfg: &PipelineConfig, run: &RunDir, subset: Ablation) -> Result<LossAblationRow> {
    LossCell::load(cfg, run)?.run(cfg, subset)
}

/// Adapt with each loss subset, from the same base model and data.
pub fn ablate_losses(cfg: &PipelineConfig, run: &RunDir, jobs: usize) -> Result<Vec<LossAblationRow>> {
    let cell = LossCell::load(cfg, run)?;
    let rows = parallel_map(&Ablation::ALL, jobs, |&subset| cell.run(cfg, subset))?;
    let lines: Vec<String> =
        rows.iter().map(|r| format!("{},{:.4},{:.6},{}", r.subset, r.bleu, r.best_dev_loss, r.epochs)).collect();
    write_csv(run, "ablate/losses.csv", "subset,bleu,best_dev_loss,epochs", &lines)?;
    Ok(rows)
}

/// Everything the summary report draws on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config_fingerprint: String,
    pub seed: u64,
    pub direction: Direction,
    pub clusters: ClusterMetrics,
    pub align: AlignMetrics,
    pub classify: ClassifyMetrics,
    pub select: SelectMetrics,
    pub adapt: AdaptMetrics,
    pub eval: EvalMetrics,
    pub ablation_k: Option<Vec<KAblationRow>>,
    pub ablation_losses: Option<Vec<LossAblationRow>>,
}

const STAGE_METRICS: [&str; 6] =
    ["clusters/metrics.json", "align/metrics.json", "classify/metrics.json", "select/metrics.json", "adapt/metrics.json", "eval/metrics.json"];

fn read_csv_rows(run: &RunDir, rel: &str) -> Result<Option<Vec<Vec<String>>>> {
    let p = run.path(rel);
    if !p.is_file() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    Ok(Some(text.lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect()))
}

fn parse_field<T: FromStr>(rel: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::format(Path::new(rel), 0, format!("bad value {v:?}")))
}

/// Collect stage metrics into `report/summary.json` and
/// `report/summary.csv`. The output depends only on the stage files and
/// the configuration, so re-running it reproduces the same bytes.
pub fn report(cfg: &PipelineConfig, run: &RunDir) -> Result<Summary> {
    run.require(&STAGE_METRICS.iter().map(|s| s.to_string()).collect::<Vec<_>>())?;
    let ablation_k = read_csv_rows(run, "ablate/k.csv")?
        .map(|rows| {
            rows.iter()
                .map(|r| {
                    ensure!(r.len() == 4, "ablate/k.csv rows need 4 fields");
                    Ok(KAblationRow {
                        k: parse_field("ablate/k.csv", &r[0])?,
                        retrieval_p1: parse_field("ablate/k.csv", &r[1])?,
                        precision_at_k: parse_field("ablate/k.csv", &r[2])?,
                        bleu: parse_field("ablate/k.csv", &r[3])?,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .transpose()?;
    let ablation_losses = read_csv_rows(run, "ablate/losses.csv")?
        .map(|rows| {
            rows.iter()
                .map(|r| {
                    ensure!(r.len() == 4, "ablate/losses.csv rows need 4 fields");
                    Ok(LossAblationRow {
                        subset: r[0].parse()?,
                        bleu: parse_field("ablate/losses.csv", &r[1])?,
                        best_dev_loss: parse_field("ablate/losses.csv", &r[2])?,
                        epochs: parse_field("ablate/losses.csv", &r[3])?,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .transpose()?;
    let summary = Summary {
        config_fingerprint: cfg.fingerprint(),
        seed: cfg.seed,
        direction: cfg.direction,
        clusters: run.read_json(STAGE_METRICS[0])?,
        align: run.read_json(STAGE_METRICS[1])?,
        classify: run.read_json(STAGE_METRICS[2])?,
        select: run.read_json(STAGE_METRICS[3])?,
        adapt: run.read_json(STAGE_METRICS[4])?,
        eval: run.read_json(STAGE_METRICS[5])?,
        ablation_k,
        ablation_losses,
    };
    run.write_json("report/summary.json", &summary)?;
    run.write("report/summary.csv", &summary_csv(&summary))?;
    Ok(summary)
}

fn summary_csv(s: &Summary) -> String {
    let mut rows = vec!["section,metric,value".to_string()];
    let mut push = |section: &str, metric: String, value: String| rows.push(format!("{section},{metric},{value}"));
    push("run", "config_fingerprint".into(), s.config_fingerprint.clone());
    push("run", "seed".into(), s.seed.to_string());
    push("align", "retrieval_p1_before".into(), format!("{:.6}", s.align.retrieval_p1_before));
    push("align", "retrieval_p1_after".into(), format!("{:.6}", s.align.retrieval_p1_after));
    push("select", "k".into(), s.select.k.to_string());
    for m in &s.select.methods {
        push("select", format!("precision_at_k.{}", m.method), format!("{:.6}", m.precision_at_k));
    }
    push("adapt", "bleu_base".into(), format!("{:.4}", s.eval.bleu_base));
    push("adapt", "bleu_adapted".into(), format!("{:.4}", s.eval.bleu_adapted));
    for (n, c) in s.eval.ngram_contribution.iter().enumerate() {
        push("eval", format!("ngram_contribution.{}", n + 1), c.map_or("undefined".into(), |v| format!("{v:.6}")));
    }
    push("eval", "cluster_purity_raw".into(), format!("{:.6}", s.eval.cluster_purity_raw));
    push("eval", "cluster_purity_adapted".into(), format!("{:.6}", s.eval.cluster_purity_adapted));
    for r in s.ablation_k.iter().flatten() {
        push("ablate_k", format!("precision_at_k.k{}", r.k), format!("{:.6}", r.precision_at_k));
        push("ablate_k", format!("bleu.k{}", r.k), format!("{:.4}", r.bleu));
    }
    for r in s.ablation_losses.iter().flatten() {
        push("ablate_losses", format!("bleu.{}", r.subset), format!("{:.4}", r.bleu));
    }
    let mut out = rows.join("\n");
    out.push('\n');
    out
}

/// Every stage, the configured ablations and the report. Wall-clock times
/// go to `report/timings.csv`, apart from the deterministic summary.
pub fn run_pipeline(cfg: &PipelineConfig, run: &RunDir, jobs: usize) -> Result<Summary> {
    std::fs::create_dir_all(run.root()).map_err(|e| Error::io(run.root(), e))?;
    run.write("config.toml", &cfg.to_toml())?;
    let mut timings = Vec::new();
    for stage in Stage::ALL {
        let t = Instant::now();
        run_stage(stage, cfg, run)?;
        timings.push(format!("{stage},{:.3}", t.elapsed().as_secs_f64()));
    }
    if cfg.ablation.losses {
        let t = Instant::now();
        ablate_losses(cfg, run, jobs)?;
        timings.push(format!("ablate_losses,{:.3}", t.elapsed().as_secs_f64()));
    }
    if !cfg.ablation.k_values.is_empty() {
        let t = Instant::now();
        ablate_k(cfg, run, &cfg.ablation.k_values, jobs)?;
        timings.push(format!("ablate_k,{:.3}", t.elapsed().as_secs_f64()));
    }
    let summary = report(cfg, run)?;
    write_csv(run, "report/timings.csv", "stage,seconds", &timings)?;
    Ok(summary)
}

/// Build a [`GudaModel`] view of saved adaptation outputs, for inspection.
pub fn load_adapted(run: &RunDir) -> Result<GudaModel> {
    let nmt = ToySeq2Seq::load(&run.path("adapt/adapted.xpr"))?;
    let p = run.path("adapt/discriminators.xpr");
    let ck = read_checkpoint(&p)?;
    let ff = |prefix: &str| -> Result<FeedForward> {
        let sub = ck.sub(prefix);
        let (d_in, hidden) = sub.get("w1").map(|m| m.shape()).ok_or_else(|| Error::format(&p, 0, format!("no {prefix}w1")))?;
        let mut f = FeedForward::zeros(d_in, hidden, 1);
        f.load_checkpoint(&sub)?;
        Ok(f)
    };
    Ok(GudaModel { enc_clf: ff("enc_clf.")?, dec_clf: ff("dec_clf.")?, nmt })
}
