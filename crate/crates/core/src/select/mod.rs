//! Selection strategies over a generic monolingual pool: the cross-lingual
//! classifier, random, cross-entropy difference and the domain-finetune
//! baseline.

mod lm;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use lm::{ced_score, train_lm, train_lm_with_vocab, NgramLM, EOS_TOKEN, UNK_TOKEN};

use crate::align::AdaptiveLayer;
use crate::classify::{self, ClassifierConfig, ClassifierOutcome, DomainClassifier};
use crate::corpus::Corpus;
use crate::error::{ensure, Error, Result};
use crate::numerics::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ours,
    Random,
    Ced,
    DomainFinetune,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Ours, Method::Random, Method::Ced, Method::DomainFinetune];

    pub fn tag(self) -> &'static str {
        match self {
            Method::Ours => "ours",
            Method::Random => "random",
            Method::Ced => "ced",
            Method::DomainFinetune => "domain_finetune",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.tag() == s)
            .ok_or_else(|| Error::Config(format!("unknown selection method {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Polarity {
    HighestFirst,
    LowestFirst,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Selected {
    pub rank: usize,
    pub score: f64,
    pub line_id: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectionResult {
    pub method: Method,
    pub k: usize,
    pub pool: String,
    pub fingerprint: String,
    pub rows: Vec<Selected>,
}

impl SelectionResult {
    pub fn line_ids(&self) -> Vec<usize> {
        self.rows.iter().map(|r| r.line_id).collect()
    }

    /// The selected sentences of `pool`, in rank order.
    pub fn apply(&self, pool: &Corpus) -> Corpus {
        pool.subset(&self.line_ids())
    }

    /// Serialize as TSV with the sentences of `pool`.
    pub fn to_tsv(&self, pool: &Corpus) -> String {
        let mut out = format!("# method={} k={} config={} pool={}\n", self.method, self.k, self.fingerprint, self.pool);
        for r in &self.rows {
            let text = pool.sentences.get(r.line_id).map(|s| s.text()).unwrap_or_default();
            out.push_str(&format!("{}\t{}\t{}\t{}\n", r.rank, r.score, r.line_id, text));
        }
        out
    }

    /// Parse TSV produced by [`SelectionResult::to_tsv`]; also returns the
    /// sentence column.
    pub fn parse_tsv(text: &str, path: &Path) -> Result<(SelectionResult, Vec<String>)> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::format(path, 0, "missing header"))?;
        let fields = header
            .strip_prefix("# ")
            .ok_or_else(|| Error::format(path, 0, "header must start with '# '"))?;
        let (mut method, mut k, mut fingerprint, mut pool) = (None, None, None, String::new());
        for kv in fields.split(' ') {
            let (key, value) = kv.split_once('=').ok_or_else(|| Error::format(path, 0, format!("bad header field {kv:?}")))?;
            match key {
                "method" => method = Some(value.parse::<Method>()?),
                "k" => k = value.parse::<usize>().ok(),
                "config" => fingerprint = Some(value.to_string()),
                "pool" => pool = value.to_string(),
                _ => return Err(Error::format(path, 0, format!("unknown header field {key:?}"))),
            }
        }
        let (method, k, fingerprint) = match (method, k, fingerprint) {
            (Some(m), Some(k), Some(f)) => (m, k, f),
            _ => return Err(Error::format(path, 0, "header needs method, k and config")),
        };
        let mut rows = Vec::new();
        let mut sentences = Vec::new();
        let mut offset = header.len() as u64 + 1;
        for line in lines {
            let mut parts = line.splitn(4, '\t');
            let mut next = || parts.next().ok_or_else(|| Error::format(path, offset, "expected 4 tab-separated columns"));
            let rank = next()?.parse().map_err(|_| Error::format(path, offset, "bad rank"))?;
            let score = next()?.parse().map_err(|_| Error::format(path, offset, "bad score"))?;
            let line_id = next()?.parse().map_err(|_| Error::format(path, offset, "bad line_id"))?;
            sentences.push(next()?.to_string());
            rows.push(Selected { rank, score, line_id });
            offset += line.len() as u64 + 1;
        }
        Ok((SelectionResult { method, k, pool, fingerprint, rows }, sentences))
    }

    pub fn save(&self, pool: &Corpus, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv(pool)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(SelectionResult, Vec<String>)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_tsv(&text, path)
    }
}

/// Short stable digest of a configuration description.
pub fn fingerprint(description: &str) -> String {
    hex::encode(&Sha256::digest(description.as_bytes())[..8])
}

fn capped(k: usize, n: usize) -> Result<usize> {
    ensure!(k >= 1, "k must be at least 1");
    if n == 0 {
        return Err(Error::Precondition("cannot select from an empty pool".into()));
    }
    if k > n {
        log::warn!("k={k} exceeds pool size {n}; selecting the whole pool");
    }
    Ok(k.min(n))
}

/// The `k` best rows under `polarity`, ties to the lower line id.
pub fn select_topk(method: Method, scores: &[f64], k: usize, polarity: Polarity) -> Result<SelectionResult> {
    let take = capped(k, scores.len())?;
    let mut ids: Vec<usize> = (0..scores.len()).collect();
    ids.sort_by(|&a, &b| {
        let ord = scores[a].total_cmp(&scores[b]);
        let ord = if polarity == Polarity::HighestFirst { ord.reverse() } else { ord };
        ord.then(a.cmp(&b))
    });
    let rows = ids
        .into_iter()
        .take(take)
        .enumerate()
        .map(|(r, i)| Selected { rank: r + 1, score: scores[i], line_id: i })
        .collect();
    Ok(SelectionResult { method, k, pool: String::new(), fingerprint: String::new(), rows })
}

/// Uniform sample of `k` line ids without replacement.
pub fn random_select(pool_size: usize, k: usize, seed: u64) -> Result<SelectionResult> {
    let take = capped(k, pool_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids = index::sample(&mut rng, pool_size, take).into_vec();
    ids.shuffle(&mut rng);
    let rows = ids.into_iter().enumerate().map(|(r, i)| Selected { rank: r + 1, score: 0.0, line_id: i }).collect();
    Ok(SelectionResult { method: Method::Random, k, pool: String::new(), fingerprint: String::new(), rows })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CedConfig {
    pub order: usize,
    pub add_k: f64,
    /// Sentences sampled from the pool for the generic LM.
    pub generic_sample: usize,
    pub seed: u64,
}

impl Default for CedConfig {
    fn default() -> Self {
        CedConfig { order: 3, add_k: 0.1, generic_sample: 1000, seed: 1 }
    }
}

impl CedConfig {
    pub fn describe(&self) -> String {
        format!("ced order={} add_k={} generic_sample={} seed={} finetune=count_pool_1:1 vocab=old_bitext", self.order, self.add_k, self.generic_sample, self.seed)
    }
}

/// Rank the pool by cross-entropy difference.
///
/// The in-domain LM pools the counts of both old bitext sides with the
/// new-domain monotext. As with finetuning a pretrained LM, the vocabulary
/// is fixed by the old bitext; both LMs share it.
pub fn ced_select(old_sides: &[&Corpus], new_mono: &Corpus, pool: &Corpus, k: usize, cfg: &CedConfig) -> Result<SelectionResult> {
    ensure!(!pool.is_empty(), "cannot select from an empty pool");
    let base = train_lm(old_sides.iter().flat_map(|c| c.token_lists()), cfg.order, cfg.add_k);
    let in_domain = old_sides.iter().flat_map(|c| c.token_lists()).chain(new_mono.token_lists());
    let lm_in = train_lm_with_vocab(in_domain, &base, cfg.order, cfg.add_k);
    let sample = cfg.generic_sample.min(pool.len()).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sample_ids = index::sample(&mut rng, pool.len(), sample).into_vec();
    sample_ids.sort_unstable();
    let lm_generic =
        train_lm_with_vocab(sample_ids.iter().map(|&i| pool.sentences[i].tokens.as_slice()), &base, cfg.order, cfg.add_k);
    let scores: Vec<f64> = pool.token_lists().map(|t| ced_score(t, &lm_in, &lm_generic)).collect();
    let mut sel = select_topk(Method::Ced, &scores, k, Polarity::LowestFirst)?;
    sel.fingerprint = fingerprint(&cfg.describe());
    Ok(sel)
}

/// Rank the pool by the classifier's in-domain probability on adaptive
/// representations.
pub fn classifier_select(clf: &DomainClassifier, layer: &AdaptiveLayer, pool_embeddings: &Matrix, k: usize) -> Result<SelectionResult> {
    let scores = classify::score(clf, layer, pool_embeddings)?;
    select_topk(Method::Ours, &scores, k, Polarity::HighestFirst)
}

/// The domain-finetune baseline: the same classifier recipe trained and
/// applied on raw embedder outputs.
pub fn domain_finetune_select(
    new_mono: &Matrix,
    old_side: &Matrix,
    pool: &Matrix,
    k: usize,
    cfg: &ClassifierConfig,
) -> Result<(SelectionResult, ClassifierOutcome)> {
    let outcome = classify::train_classifier_on_reps(new_mono, old_side, cfg)?;
    let scores = outcome.classifier.probabilities(pool)?;
    let sel = select_topk(Method::DomainFinetune, &scores, k, Polarity::HighestFirst)?;
    Ok((sel, outcome))
}

/// Fraction of selected rows whose label equals `target`.
pub fn precision_at_k(sel: &SelectionResult, labels: &[usize], target: usize) -> f64 {
    if sel.rows.is_empty() {
        return 0.0;
    }
    let hits = sel.rows.iter().filter(|r| labels.get(r.line_id) == Some(&target)).count();
    hits as f64 / sel.rows.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::CorpusRole;

    #[test]
    fn topk_cases() {
        let s = select_topk(Method::Ours, &[0.9, 0.1, 0.5], 2, Polarity::HighestFirst).unwrap();
        assert_eq!(s.line_ids(), vec![0, 2]);
        let s = select_topk(Method::Ours, &[0.3, 0.3, 0.3], 2, Polarity::HighestFirst).unwrap();
        assert_eq!(s.line_ids(), vec![0, 1]);
        let s = select_topk(Method::Ced, &[0.9, 0.1, 0.5], 2, Polarity::LowestFirst).unwrap();
        assert_eq!(s.line_ids(), vec![1, 2]);
        assert!(select_topk(Method::Ours, &[], 2, Polarity::HighestFirst).is_err());
    }

    #[test]
    fn random_full_pool_is_permutation() {
        let s = random_select(7, 7, 3).unwrap();
        let mut ids = s.line_ids();
        ids.sort_unstable();
        assert_eq!(ids, (0..7).collect::<Vec<_>>());
        assert_eq!(random_select(7, 3, 9).unwrap(), random_select(7, 3, 9).unwrap());
        assert_eq!(random_select(4, 10, 1).unwrap().rows.len(), 4);
    }

    #[test]
    fn tsv_round_trip() {
        let pool = Corpus::from_texts("b", CorpusRole::GenericPool, &["x y", "z", "w v u"]).unwrap();
        let mut s = select_topk(Method::Ours, &[0.25, 1.0 / 3.0, 0.7], 2, Polarity::HighestFirst).unwrap();
        s.pool = "pool_b".into();
        s.fingerprint = fingerprint("cfg");
        let text = s.to_tsv(&pool);
        assert!(text.starts_with("# method=ours k=2 config="));
        let (back, sentences) = SelectionResult::parse_tsv(&text, Path::new("x.tsv")).unwrap();
        assert_eq!(back, s);
        assert_eq!(sentences, vec!["w v u", "z"]);
    }

    #[test]
    fn ced_identical_lms_is_zero() {
        let c = Corpus::from_texts("a", CorpusRole::GenericPool, &["a b c", "b c d e"]).unwrap();
        let lm1 = train_lm(c.token_lists(), 3, 0.1);
        let lm2 = train_lm(c.token_lists(), 3, 0.1);
        for t in c.token_lists() {
            assert_eq!(ced_score(t, &lm1, &lm2), 0.0);
        }
    }
}
