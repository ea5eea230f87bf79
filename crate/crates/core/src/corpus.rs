//! Tokenized monolingual and parallel corpora.
//!
//! Files are UTF-8, one sentence per line, tokens separated by ASCII
//! whitespace. Blank lines and lines longer than [`MAX_SENTENCE_TOKENS`] are
//! dropped on load and counted; surviving sentences are numbered `0..n`.

use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

pub const MAX_SENTENCE_TOKENS: usize = 175;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sentence {
    pub tokens: Vec<String>,
    pub line_id: usize,
}

impl Sentence {
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

/// Hidden generator state attached to synthetic sentences: the domain the
/// sentence was drawn from and its language-independent concept sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthTag {
    pub domain: usize,
    pub concepts: Vec<u32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusRole {
    OldBitextSide,
    NewMonotext,
    GenericPool,
    Dev,
    Test,
}

impl fmt::Display for CorpusRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            CorpusRole::OldBitextSide => "old_bitext_side",
            CorpusRole::NewMonotext => "new_monotext",
            CorpusRole::GenericPool => "generic_pool",
            CorpusRole::Dev => "dev",
            CorpusRole::Test => "test",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub sentences: Vec<Sentence>,
    pub language: String,
    pub domain: Option<String>,
    pub role: CorpusRole,
    /// Present only for corpora produced by the synthetic generator.
    pub synth: Option<Vec<SynthTag>>,
}

/// Lines discarded while ingesting a file.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct IngestStats {
    pub blank_dropped: usize,
    pub overlong_dropped: usize,
}

impl Corpus {
    pub fn new(language: impl Into<String>, role: CorpusRole, token_lists: Vec<Vec<String>>) -> Result<Self> {
        let language = language.into();
        ensure!(!language.is_empty(), "corpus language tag must be non-empty");
        if let Some(i) = token_lists.iter().position(|t| t.is_empty()) {
            return Err(Error::Precondition(format!("sentence {i} of the {language} corpus is empty")));
        }
        if let Some(i) = token_lists.iter().position(|t| t.iter().any(|w| w.is_empty() || w.contains(char::is_whitespace))) {
            return Err(Error::Precondition(format!("sentence {i} of the {language} corpus has an empty or whitespace token")));
        }
        let sentences = token_lists
            .into_iter()
            .enumerate()
            .map(|(line_id, tokens)| Sentence { tokens, line_id })
            .collect();
        Ok(Corpus { sentences, language, domain: None, role, synth: None })
    }

    pub fn from_texts<S: AsRef<str>>(language: &str, role: CorpusRole, lines: &[S]) -> Result<Self> {
        let tokens = lines.iter().map(|l| tokenize(l.as_ref())).collect();
        Corpus::new(language, role, tokens)
    }

    pub fn with_domain(mut self, domain: impl Into<String>) -> Self {
        self.domain = Some(domain.into());
        self
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn token_lists(&self) -> impl Iterator<Item = &[String]> {
        self.sentences.iter().map(|s| s.tokens.as_slice())
    }

    /// Sentences at `ids`, in that order, renumbered from 0.
    pub fn subset(&self, ids: &[usize]) -> Corpus {
        Corpus {
            sentences: ids
                .iter()
                .enumerate()
                .map(|(k, &i)| Sentence { tokens: self.sentences[i].tokens.clone(), line_id: k })
                .collect(),
            language: self.language.clone(),
            domain: self.domain.clone(),
            role: self.role,
            synth: self.synth.as_ref().map(|tags| ids.iter().map(|&i| tags[i].clone()).collect()),
        }
    }

    /// Concatenate corpora of the same language, renumbering line ids.
    pub fn concat(parts: &[&Corpus], role: CorpusRole) -> Result<Corpus> {
        ensure!(!parts.is_empty(), "nothing to concatenate");
        let language = parts[0].language.clone();
        ensure!(parts.iter().all(|p| p.language == language), "cannot concatenate corpora of different languages");
        let keep_synth = parts.iter().all(|p| p.synth.is_some());
        let mut sentences = Vec::new();
        let mut synth = Vec::new();
        for p in parts {
            for s in &p.sentences {
                sentences.push(Sentence { tokens: s.tokens.clone(), line_id: sentences.len() });
            }
            if keep_synth {
                synth.extend(p.synth.as_ref().unwrap().iter().cloned());
            }
        }
        Ok(Corpus { sentences, language, domain: None, role, synth: keep_synth.then_some(synth) })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for s in &self.sentences {
            out.push_str(&s.text());
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_text().as_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Ground-truth domain of each sentence, for synthetic corpora.
    pub fn domain_labels(&self) -> Option<Vec<usize>> {
        self.synth.as_ref().map(|t| t.iter().map(|t| t.domain).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParallelCorpus {
    pub src: Corpus,
    pub tgt: Corpus,
}

impl ParallelCorpus {
    pub fn new(src: Corpus, tgt: Corpus) -> Result<Self> {
        if src.len() != tgt.len() {
            return Err(Error::Alignment { src: src.len(), tgt: tgt.len() });
        }
        ensure!(src.language != tgt.language, "parallel sides share language {}", src.language);
        Ok(ParallelCorpus { src, tgt })
    }

    pub fn pair_count(&self) -> usize {
        self.src.len()
    }

    pub fn subset(&self, ids: &[usize]) -> ParallelCorpus {
        ParallelCorpus { src: self.src.subset(ids), tgt: self.tgt.subset(ids) }
    }

    /// The same pairs with source and target exchanged.
    pub fn reversed(&self) -> ParallelCorpus {
        ParallelCorpus { src: self.tgt.clone(), tgt: self.src.clone() }
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&[String], &[String])> {
        self.src.token_lists().zip(self.tgt.token_lists())
    }
}

pub fn tokenize(line: &str) -> Vec<String> {
    line.split_ascii_whitespace().map(str::to_string).collect()
}

/// Raw lines of a file, `None` for blank ones.
fn read_lines(path: &Path) -> Result<Vec<Option<Vec<String>>>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = std::str::from_utf8(&bytes)
        .map_err(|e| Error::format(path, e.valid_up_to() as u64, "invalid UTF-8"))?;
    let mut lines: Vec<Option<Vec<String>>> = text
        .split('\n')
        .map(|l| {
            let t = tokenize(l);
            (!t.is_empty()).then_some(t)
        })
        .collect();
    if text.ends_with('\n') {
        lines.pop();
    }
    Ok(lines)
}

pub fn load_corpus(path: &Path, language: &str, domain: Option<&str>) -> Result<(Corpus, IngestStats)> {
    let mut stats = IngestStats::default();
    let mut kept = Vec::new();
    for line in read_lines(path)? {
        match line {
            None => stats.blank_dropped += 1,
            Some(t) if t.len() > MAX_SENTENCE_TOKENS => stats.overlong_dropped += 1,
            Some(t) => kept.push(t),
        }
    }
    if kept.is_empty() {
        return Err(Error::EmptyCorpus(path.to_path_buf()));
    }
    if stats.blank_dropped > 0 || stats.overlong_dropped > 0 {
        log::info!(
            "{}: dropped {} blank and {} overlong lines",
            path.display(),
            stats.blank_dropped,
            stats.overlong_dropped
        );
    }
    let mut corpus = Corpus::new(language, CorpusRole::GenericPool, kept)?;
    corpus.domain = domain.map(str::to_string);
    Ok((corpus, stats))
}

/// Load two line-aligned files. Blank lines are dropped per side, so the
/// non-blank counts must agree; a pair where either side is overlong is
/// dropped as a whole.
pub fn load_parallel(src_path: &Path, tgt_path: &Path, languages: (&str, &str)) -> Result<(ParallelCorpus, IngestStats)> {
    let src_lines = read_lines(src_path)?;
    let tgt_lines = read_lines(tgt_path)?;
    let blank = src_lines.iter().filter(|l| l.is_none()).count();
    let src: Vec<Vec<String>> = src_lines.into_iter().flatten().collect();
    let tgt: Vec<Vec<String>> = tgt_lines.into_iter().flatten().collect();
    if src.len() != tgt.len() {
        return Err(Error::Alignment { src: src.len(), tgt: tgt.len() });
    }
    let mut stats = IngestStats { blank_dropped: blank, overlong_dropped: 0 };
    let (mut s_keep, mut t_keep) = (Vec::new(), Vec::new());
    for (s, t) in src.into_iter().zip(tgt) {
        if s.len() > MAX_SENTENCE_TOKENS || t.len() > MAX_SENTENCE_TOKENS {
            stats.overlong_dropped += 1;
        } else {
            s_keep.push(s);
            t_keep.push(t);
        }
    }
    if s_keep.is_empty() {
        return Err(Error::EmptyCorpus(src_path.to_path_buf()));
    }
    let pc = ParallelCorpus::new(
        Corpus::new(languages.0, CorpusRole::OldBitextSide, s_keep)?,
        Corpus::new(languages.1, CorpusRole::OldBitextSide, t_keep)?,
    )?;
    Ok((pc, stats))
}

/// Index sets of a seeded train/dev/test partition. Each list is ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitIds {
    pub train: Vec<usize>,
    pub dev: Vec<usize>,
    pub test: Vec<usize>,
}

/// Partition `0..n` with `floor(n * f)` ids for dev and test and the
/// remainder for train.
pub fn split_ids(n: usize, fractions: (f64, f64, f64), seed: u64) -> Result<SplitIds> {
    let (ftr, fdev, ftest) = fractions;
    ensure!(ftr > 0.0 && fdev > 0.0 && ftest > 0.0, "split fractions must be positive, got {fractions:?}");
    ensure!((ftr + fdev + ftest - 1.0).abs() <= 1e-9, "split fractions must sum to 1, got {fractions:?}");
    ensure!(n >= 3, "cannot split {n} sentences three ways");
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_dev = (n as f64 * fdev).floor() as usize;
    let n_test = (n as f64 * ftest).floor() as usize;
    let mut dev = ids[..n_dev].to_vec();
    let mut test = ids[n_dev..n_dev + n_test].to_vec();
    let mut train = ids[n_dev + n_test..].to_vec();
    dev.sort_unstable();
    test.sort_unstable();
    train.sort_unstable();
    Ok(SplitIds { train, dev, test })
}

pub fn split_corpus(c: &Corpus, fractions: (f64, f64, f64), seed: u64) -> Result<(Corpus, Corpus, Corpus)> {
    let ids = split_ids(c.len(), fractions, seed)?;
    let mut dev = c.subset(&ids.dev);
    dev.role = CorpusRole::Dev;
    let mut test = c.subset(&ids.test);
    test.role = CorpusRole::Test;
    Ok((c.subset(&ids.train), dev, test))
}

/// Write `line_id<TAB>value` rows.
pub fn write_tsv_column<T: fmt::Display>(path: &Path, values: &[T]) -> Result<()> {
    let mut out = String::new();
    for (i, v) in values.iter().enumerate() {
        out.push_str(&format!("{i}\t{v}\n"));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Read `line_id<TAB>value` rows written by [`write_tsv_column`].
pub fn read_tsv_column(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut offset = 0u64;
    for line in text.lines() {
        let mut parts = line.splitn(2, '\t');
        let id: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(path, offset, "expected numeric line id"))?;
        if id != out.len() {
            return Err(Error::format(path, offset, format!("line id {id} out of sequence")));
        }
        out.push(parts.next().unwrap_or("").to_string());
        offset += line.len() as u64 + 1;
    }
    Ok(out)
}
