//! Synthetic bilingual multi-domain corpora with known ground truth, and a
//! deterministic toy sentence encoder.
//!
//! Two languages, `a` and `b`, share a concept inventory. The first
//! `shared_vocab` concepts are common to every domain (the first
//! `copied_fraction` of them are spelled identically in both languages, like
//! numerals); each
//! domain then owns a block of `vocab_per_domain` concepts. A sentence is a
//! concept sequence drawn Zipfian from the shared block (with a
//! domain-specific frequency order) and from its domain's block. Language `a`
//! spells the concepts in order; language `b` applies the dictionary and the
//! reorder rule.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Zipf};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{Corpus, CorpusRole, ParallelCorpus, Sentence, SynthTag};
use crate::embed::EmbeddingMatrix;
use crate::error::{ensure, Error, Result};
use crate::numerics::Matrix;

pub const LANG_A: &str = "a";
pub const LANG_B: &str = "b";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReorderRule {
    None,
    SwapAdjacent,
    Reverse,
}

impl ReorderRule {
    pub fn apply<T: Clone>(self, items: &[T]) -> Vec<T> {
        let mut out = items.to_vec();
        match self {
            ReorderRule::None => {}
            ReorderRule::SwapAdjacent => {
                for pair in out.chunks_mut(2) {
                    pair.reverse();
                }
            }
            ReorderRule::Reverse => out.reverse(),
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_domains: usize,
    pub vocab_per_domain: usize,
    pub shared_vocab: usize,
    pub sentences_per_domain: usize,
    pub sentence_len_range: (usize, usize),
    pub reorder_rule: ReorderRule,
    /// Probability that a token comes from the shared block.
    pub shared_prob: f64,
    /// Fraction of the shared block spelled identically in both languages.
    pub copied_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_domains: 4,
            vocab_per_domain: 40,
            shared_vocab: 20,
            sentences_per_domain: 1000,
            sentence_len_range: (5, 12),
            reorder_rule: ReorderRule::SwapAdjacent,
            shared_prob: 0.3,
            copied_fraction: 1.0,
            seed: 1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.num_domains >= 2, "num_domains must be at least 2");
        ensure!(self.vocab_per_domain > 0 && self.shared_vocab > 0, "vocabulary sizes must be positive");
        let (lo, hi) = self.sentence_len_range;
        ensure!(lo >= 1 && lo <= hi, "invalid sentence length range {lo}..={hi}");
        ensure!((0.0..=1.0).contains(&self.shared_prob), "shared_prob must lie in [0, 1]");
        ensure!((0.0..=1.0).contains(&self.copied_fraction), "copied_fraction must lie in [0, 1]");
        Ok(())
    }

    pub fn concept_count(&self) -> usize {
        self.shared_vocab + self.num_domains * self.vocab_per_domain
    }

    fn is_copied(&self, concept: u32) -> bool {
        (concept as f64) < (self.shared_vocab as f64 * self.copied_fraction).round()
    }

    /// Surface form of `concept` in `language`.
    pub fn word(&self, language: &str, concept: u32) -> String {
        if self.is_copied(concept) {
            format!("n{concept}")
        } else {
            format!("{language}{concept}")
        }
    }
}

/// SplitMix64 finalizer, used to derive independent seeds.
fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn derive(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(mix(seed), |acc, &p| mix(acc ^ p))
}

fn tag_hash(tag: &str) -> u64 {
    let d = Sha256::digest(tag.as_bytes());
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

/// Deterministic sentence source for one configuration.
pub struct Generator {
    cfg: SynthConfig,
    shared_order: Vec<Vec<u32>>,
    shared_zipf: Zipf<f64>,
    domain_zipf: Zipf<f64>,
}

impl Generator {
    pub fn new(cfg: &SynthConfig) -> Result<Self> {
        cfg.validate()?;
        let shared_order = (0..cfg.num_domains)
            .map(|d| {
                let mut order: Vec<u32> = (0..cfg.shared_vocab as u32).collect();
                order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive(cfg.seed, &[1, d as u64])));
                order
            })
            .collect();
        let zipf = |n: usize| Zipf::new(n as f64, 1.0).map_err(|e| Error::Precondition(e.to_string()));
        Ok(Generator {
            shared_order,
            shared_zipf: zipf(cfg.shared_vocab)?,
            domain_zipf: zipf(cfg.vocab_per_domain)?,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &SynthConfig {
        &self.cfg
    }

    /// Concept sequence of sentence `index` of `domain`; a pure function of
    /// the seed, domain and index.
    pub fn concepts(&self, domain: usize, index: usize) -> Vec<u32> {
        let cfg = &self.cfg;
        let mut rng = ChaCha8Rng::seed_from_u64(derive(cfg.seed, &[2, domain as u64, index as u64]));
        let (lo, hi) = cfg.sentence_len_range;
        let len = rng.random_range(lo..=hi);
        (0..len)
            .map(|_| {
                if rng.random_bool(cfg.shared_prob) {
                    let rank = self.shared_zipf.sample(&mut rng) as usize - 1;
                    self.shared_order[domain][rank]
                } else {
                    let rank = self.domain_zipf.sample(&mut rng) as usize - 1;
                    (cfg.shared_vocab + domain * cfg.vocab_per_domain + rank) as u32
                }
            })
            .collect()
    }

    pub fn render(&self, language: &str, concepts: &[u32]) -> Vec<String> {
        let ordered = if language == LANG_A { concepts.to_vec() } else { self.cfg.reorder_rule.apply(concepts) };
        ordered.iter().map(|&c| self.cfg.word(language, c)).collect()
    }

    fn tagged(&self, language: &str, concepts: &[u32], domain: usize) -> (Vec<String>, SynthTag) {
        let ordered = if language == LANG_A { concepts.to_vec() } else { self.cfg.reorder_rule.apply(concepts) };
        let tokens = ordered.iter().map(|&c| self.cfg.word(language, c)).collect();
        (tokens, SynthTag { domain, concepts: ordered })
    }

    /// One language side of the sentences `(domain, index)`.
    pub fn side(&self, language: &str, role: CorpusRole, items: &[(usize, usize)]) -> Corpus {
        let mut sentences = Vec::with_capacity(items.len());
        let mut tags = Vec::with_capacity(items.len());
        for (k, &(d, i)) in items.iter().enumerate() {
            let (tokens, tag) = self.tagged(language, &self.concepts(d, i), d);
            sentences.push(Sentence { tokens, line_id: k });
            tags.push(tag);
        }
        Corpus { sentences, language: language.to_string(), domain: None, role, synth: Some(tags) }
    }

    pub fn parallel(&self, role: CorpusRole, items: &[(usize, usize)]) -> ParallelCorpus {
        ParallelCorpus { src: self.side(LANG_A, role, items), tgt: self.side(LANG_B, role, items) }
    }

    /// Every `(a, b)` word pair.
    pub fn dictionary(&self) -> Vec<(String, String)> {
        (0..self.cfg.concept_count() as u32).map(|c| (self.cfg.word(LANG_A, c), self.cfg.word(LANG_B, c))).collect()
    }
}

pub fn domain_name(d: usize) -> String {
    format!("d{d}")
}

/// Output of [`gen_corpus`].
pub struct SynthCorpus {
    pub domains: Vec<ParallelCorpus>,
    pub dictionary: Vec<(String, String)>,
}

/// `sentences_per_domain` translation pairs for every domain.
pub fn gen_corpus(cfg: &SynthConfig) -> Result<SynthCorpus> {
    let g = Generator::new(cfg)?;
    let domains = (0..cfg.num_domains)
        .map(|d| {
            let items: Vec<(usize, usize)> = (0..cfg.sentences_per_domain).map(|i| (d, i)).collect();
            let mut pc = g.parallel(CorpusRole::OldBitextSide, &items);
            pc.src.domain = Some(domain_name(d));
            pc.tgt.domain = Some(domain_name(d));
            pc
        })
        .collect();
    Ok(SynthCorpus { domains, dictionary: g.dictionary() })
}

/// Sizes of the data sets carved out of the generator for one adaptation
/// experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    /// Domains mixed into the old-domain bitext; empty means every domain
    /// except the new one.
    pub old_domains: Vec<usize>,
    pub new_domain: usize,
    pub old_train: usize,
    pub old_dev: usize,
    pub new_mono: usize,
    pub new_test: usize,
    pub pool_size: usize,
    pub pool_in_domain: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            old_domains: Vec::new(),
            new_domain: 1,
            old_train: 2000,
            old_dev: 500,
            new_mono: 1000,
            new_test: 500,
            pool_size: 5000,
            pool_in_domain: 0.2,
        }
    }
}

/// All corpora of one experiment. Nothing is shared between sets: every
/// sentence is drawn from a distinct generator index.
pub struct Scenario {
    pub old_train: ParallelCorpus,
    pub old_dev: ParallelCorpus,
    pub new_mono_a: Corpus,
    pub new_mono_b: Corpus,
    pub pool_a: Corpus,
    pub pool_b: Corpus,
    pub new_test: ParallelCorpus,
    pub dictionary: Vec<(String, String)>,
}

pub fn gen_scenario(cfg: &SynthConfig, sc: &ScenarioConfig) -> Result<Scenario> {
    let g = Generator::new(cfg)?;
    ensure!(sc.new_domain < cfg.num_domains, "new domain {} out of range", sc.new_domain);
    let old_domains: Vec<usize> = if sc.old_domains.is_empty() {
        (0..cfg.num_domains).filter(|&d| d != sc.new_domain).collect()
    } else {
        sc.old_domains.clone()
    };
    for &d in &old_domains {
        ensure!(d < cfg.num_domains, "old domain {d} out of range");
        ensure!(d != sc.new_domain, "old and new domain must differ");
    }
    ensure!((0.0..=1.0).contains(&sc.pool_in_domain), "pool_in_domain must lie in [0, 1]");
    let mut next = vec![0usize; cfg.num_domains];
    let mut take = |d: usize, n: usize| -> Vec<(usize, usize)> {
        let start = next[d];
        next[d] += n;
        (start..start + n).map(|i| (d, i)).collect()
    };

    // old-domain sentences cycle through the old domains
    let mut take_old = |n: usize| -> Vec<(usize, usize)> {
        (0..n).flat_map(|i| take(old_domains[i % old_domains.len()], 1)).collect()
    };
    let old_train = g.parallel(CorpusRole::OldBitextSide, &take_old(sc.old_train));
    let old_dev = g.parallel(CorpusRole::Dev, &take_old(sc.old_dev));
    let new_mono_a = g.side(LANG_A, CorpusRole::NewMonotext, &take(sc.new_domain, sc.new_mono));
    let new_mono_b = g.side(LANG_B, CorpusRole::NewMonotext, &take(sc.new_domain, sc.new_mono));
    let new_test = g.parallel(CorpusRole::Test, &take(sc.new_domain, sc.new_test));

    let in_domain = (sc.pool_size as f64 * sc.pool_in_domain).round() as usize;
    let others: Vec<usize> = (0..cfg.num_domains).filter(|&d| d != sc.new_domain).collect();
    let mut pool_for = |language: &str, salt: u64| {
        let mut items = take(sc.new_domain, in_domain);
        let rest = sc.pool_size - in_domain;
        for (k, &d) in others.iter().enumerate() {
            let share = rest / others.len() + usize::from(k < rest % others.len());
            items.extend(take(d, share));
        }
        items.shuffle(&mut ChaCha8Rng::seed_from_u64(derive(cfg.seed, &[3, salt])));
        g.side(language, CorpusRole::GenericPool, &items)
    };
    let pool_a = pool_for(LANG_A, 0);
    let pool_b = pool_for(LANG_B, 1);

    Ok(Scenario { old_train, old_dev, new_mono_a, new_mono_b, pool_a, pool_b, new_test, dictionary: g.dictionary() })
}

pub fn write_dictionary(dict: &[(String, String)], path: &Path) -> Result<()> {
    let mut out = String::new();
    for (a, b) in dict {
        out.push_str(&format!("{a}\t{b}\n"));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Write the ground-truth `line_id<TAB>domain` file of a synthetic corpus.
pub fn write_domain_labels(corpus: &Corpus, path: &Path) -> Result<()> {
    let labels = corpus
        .domain_labels()
        .ok_or_else(|| Error::UnsupportedCorpus("corpus carries no synthetic labels".into()))?;
    let names: Vec<String> = labels.iter().map(|&d| domain_name(d)).collect();
    crate::corpus::write_tsv_column(path, &names)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyEmbedderConfig {
    pub dim: usize,
    pub noise_sigma: f64,
    pub lang_rotation_seed: u64,
    pub lang_tag_dims: usize,
    /// How much the per-language rotations share, from 0 (independent) to 1
    /// (identical).
    pub lang_overlap: f64,
}

impl Default for ToyEmbedderConfig {
    fn default() -> Self {
        ToyEmbedderConfig { dim: 64, noise_sigma: 0.05, lang_rotation_seed: 7, lang_tag_dims: 2, lang_overlap: 0.5 }
    }
}

const OFFSET_SCALE: f64 = 0.5;
const TAG_SCALE: f64 = 10.0;

/// Stand-in for a frozen multilingual encoder.
///
/// `e(x) = [Q_lang (mean concept vector + domain offset) + noise ; tag_lang]`
/// where `Q_lang` is a random orthogonal matrix on the content coordinates and
/// `tag_lang` a fixed language indicator on the last `lang_tag_dims`
/// coordinates.
pub struct ToyEmbedder {
    cfg: ToyEmbedderConfig,
    rotations: HashMap<String, Matrix>,
}

impl ToyEmbedder {
    pub fn new(cfg: &ToyEmbedderConfig) -> Result<Self> {
        ensure!(cfg.lang_tag_dims >= 1 && cfg.dim > cfg.lang_tag_dims, "need dim > lang_tag_dims >= 1");
        ensure!(cfg.noise_sigma >= 0.0, "noise_sigma must be non-negative");
        ensure!((0.0..=1.0).contains(&cfg.lang_overlap), "lang_overlap must lie in [0, 1]");
        Ok(ToyEmbedder { cfg: cfg.clone(), rotations: HashMap::new() })
    }

    pub fn content_dim(&self) -> usize {
        self.cfg.dim - self.cfg.lang_tag_dims
    }

    fn gaussian(&self, seed: u64, n: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    pub fn concept_vector(&self, concept: u32) -> Vec<f64> {
        self.gaussian(derive(self.cfg.lang_rotation_seed, &[10, concept as u64]), self.content_dim())
    }

    pub fn domain_offset(&self, domain: usize) -> Vec<f64> {
        let v = self.gaussian(derive(self.cfg.lang_rotation_seed, &[11, domain as u64]), self.content_dim());
        v.into_iter().map(|x| x * OFFSET_SCALE).collect()
    }

    pub fn language_tag(&self, language: &str) -> Vec<f64> {
        let v = self.gaussian(derive(self.cfg.lang_rotation_seed, &[12, tag_hash(language)]), self.cfg.lang_tag_dims);
        let n = crate::numerics::norm(&v);
        v.into_iter().map(|x| x / n * TAG_SCALE).collect()
    }

    /// The content-space rotation for `language`.
    pub fn rotation(&mut self, language: &str) -> &Matrix {
        if !self.rotations.contains_key(language) {
            let dc = self.content_dim();
            let common = self.gaussian(derive(self.cfg.lang_rotation_seed, &[13]), dc * dc);
            let own = self.gaussian(derive(self.cfg.lang_rotation_seed, &[14, tag_hash(language)]), dc * dc);
            let (wc, wo) = (self.cfg.lang_overlap.sqrt(), (1.0 - self.cfg.lang_overlap).sqrt());
            let raw: Vec<f64> = common.iter().zip(&own).map(|(c, o)| wc * c + wo * o).collect();
            let q = orthonormalize(Matrix::from_vec(dc, dc, raw));
            self.rotations.insert(language.to_string(), q);
        }
        &self.rotations[language]
    }

    /// Embed a synthetic corpus.
    pub fn embed(&mut self, corpus: &Corpus) -> Result<EmbeddingMatrix> {
        let tags = corpus
            .synth
            .as_ref()
            .ok_or_else(|| Error::UnsupportedCorpus("toy embedding needs synthetic concept ids".into()))?;
        let dc = self.content_dim();
        let dim = self.cfg.dim;
        let q = self.rotation(&corpus.language).clone();
        let tag = self.language_tag(&corpus.language);
        let lang_seed = tag_hash(&corpus.language);
        let mut concept_cache: HashMap<u32, Vec<f64>> = HashMap::new();
        let mut offset_cache: HashMap<usize, Vec<f64>> = HashMap::new();
        let mut data = Vec::with_capacity(corpus.len() * dim);
        for (row, t) in tags.iter().enumerate() {
            if t.concepts.is_empty() {
                return Err(Error::UnsupportedCorpus(format!("sentence {row} has no concepts")));
            }
            let mut v = offset_cache.entry(t.domain).or_insert_with(|| self.domain_offset(t.domain)).clone();
            let inv = 1.0 / t.concepts.len() as f64;
            for &c in &t.concepts {
                let cv = concept_cache.entry(c).or_insert_with(|| self.concept_vector(c));
                for (a, b) in v.iter_mut().zip(cv.iter()) {
                    *a += b * inv;
                }
            }
            let mut content = q.mul_vec(&v);
            if self.cfg.noise_sigma > 0.0 {
                let noise = self.gaussian(derive(self.cfg.lang_rotation_seed, &[15, lang_seed, row as u64]), dc);
                for (x, n) in content.iter_mut().zip(noise) {
                    *x += self.cfg.noise_sigma * n;
                }
            }
            data.extend(content.iter().map(|&x| x as f32));
            data.extend(tag.iter().map(|&x| x as f32));
        }
        let mut m = EmbeddingMatrix::new(corpus.len(), dim, data)?;
        m.corpus_ref = Some(format!("{}:{}", corpus.language, corpus.role));
        Ok(m)
    }
}

/// Convenience wrapper around [`ToyEmbedder::embed`].
pub fn toy_embed(corpus: &Corpus, cfg: &ToyEmbedderConfig) -> Result<EmbeddingMatrix> {
    ToyEmbedder::new(cfg)?.embed(corpus)
}

/// Orthonormalize the rows of a square matrix (modified Gram-Schmidt, two
/// passes).
fn orthonormalize(mut m: Matrix) -> Matrix {
    let n = m.rows();
    for _ in 0..2 {
        for i in 0..n {
            for j in 0..i {
                let proj = crate::numerics::dot(m.row(i), m.row(j));
                let rj = m.row(j).to_vec();
                for (a, b) in m.row_mut(i).iter_mut().zip(&rj) {
                    *a -= proj * b;
                }
            }
            let nrm = crate::numerics::norm(m.row(i));
            m.row_mut(i).iter_mut().for_each(|a| *a /= nrm);
        }
    }
    m
}
