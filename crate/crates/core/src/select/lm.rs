//! Count-based n-gram language model with add-k smoothing and backoff to
//! the longest history that was seen in training.

use std::collections::HashMap;

/// Reserved id for out-of-vocabulary tokens.
const UNK: u32 = 0;
/// Reserved id for the end-of-sentence token.
const EOS: u32 = 1;
/// Padding id for histories; never predicted, so not part of the vocabulary.
const BOS: u32 = u32::MAX;

pub const UNK_TOKEN: &str = "<unk>";
pub const EOS_TOKEN: &str = "</s>";

#[derive(Clone, Debug, Default)]
struct History {
    total: u64,
    next: HashMap<u32, u64>,
}

#[derive(Clone, Debug)]
pub struct NgramLM {
    order: usize,
    add_k: f64,
    vocab: HashMap<String, u32>,
    /// Keyed by history; histories of every length `0..order` are stored.
    histories: HashMap<Vec<u32>, History>,
}

impl NgramLM {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn add_k(&self) -> f64 {
        self.add_k
    }

    /// Vocabulary size including UNK and EOS.
    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn token_id(&self, token: &str) -> u32 {
        self.vocab.get(token).copied().unwrap_or(UNK)
    }

    /// `P(word | history)`; the history may be longer than `order - 1`.
    pub fn prob(&self, history: &[&str], word: &str) -> f64 {
        let ids: Vec<u32> = history.iter().map(|t| self.token_id(t)).collect();
        let w = if word == EOS_TOKEN { EOS } else { self.token_id(word) };
        self.prob_ids(&ids, w)
    }

    fn prob_ids(&self, history: &[u32], word: u32) -> f64 {
        let keep = history.len().min(self.order - 1);
        let full = &history[history.len() - keep..];
        let v = self.vocab.len() as f64;
        for start in 0..=full.len() {
            if let Some(h) = self.histories.get(&full[start..]) {
                if h.total > 0 {
                    let c = h.next.get(&word).copied().unwrap_or(0) as f64;
                    return (c + self.add_k) / (h.total as f64 + self.add_k * v);
                }
            }
        }
        1.0 / v
    }

    fn padded(&self, tokens: &[String]) -> Vec<u32> {
        let mut ids = vec![BOS; self.order - 1];
        ids.extend(tokens.iter().map(|t| self.token_id(t)));
        ids.push(EOS);
        ids
    }

    /// Mean negative log-probability per token, EOS included, in nats.
    pub fn cross_entropy(&self, tokens: &[String]) -> f64 {
        let ids = self.padded(tokens);
        let pad = self.order - 1;
        let mut total = 0.0;
        for t in pad..ids.len() {
            total -= self.prob_ids(&ids[t - pad..t], ids[t]).ln();
        }
        total / (tokens.len() + 1) as f64
    }

    /// Tokens of the vocabulary in id order, with the reserved ones first.
    pub fn vocabulary(&self) -> Vec<&str> {
        let mut v: Vec<(&str, u32)> = self.vocab.iter().map(|(t, &i)| (t.as_str(), i)).collect();
        v.sort_by_key(|&(_, i)| i);
        v.into_iter().map(|(t, _)| t).collect()
    }
}

fn build_vocab<'a>(sentences: impl IntoIterator<Item = &'a [String]>) -> HashMap<String, u32> {
    let mut vocab = HashMap::from([(UNK_TOKEN.to_string(), UNK), (EOS_TOKEN.to_string(), EOS)]);
    for s in sentences {
        for t in s.iter() {
            let next = vocab.len() as u32;
            vocab.entry(t.clone()).or_insert(next);
        }
    }
    vocab
}

/// Count n-grams of every sentence; the vocabulary is every training token.
pub fn train_lm<'a, I>(sentences: I, order: usize, add_k: f64) -> NgramLM
where
    I: IntoIterator<Item = &'a [String]>,
{
    let sentences: Vec<&[String]> = sentences.into_iter().collect();
    let vocab = build_vocab(sentences.iter().copied());
    count(sentences, vocab, order, add_k)
}

/// Like [`train_lm`], but with the vocabulary of `vocab_from`; other tokens
/// are counted as UNK.
pub fn train_lm_with_vocab<'a, I>(sentences: I, vocab_from: &NgramLM, order: usize, add_k: f64) -> NgramLM
where
    I: IntoIterator<Item = &'a [String]>,
{
    count(sentences.into_iter().collect(), vocab_from.vocab.clone(), order, add_k)
}

fn count(sentences: Vec<&[String]>, vocab: HashMap<String, u32>, order: usize, add_k: f64) -> NgramLM {
    assert!(order >= 1, "n-gram order must be at least 1");
    let mut lm = NgramLM { order, add_k, vocab, histories: HashMap::new() };
    let pad = order - 1;
    for s in &sentences {
        let ids = lm.padded(s);
        for t in pad..ids.len() {
            for len in 0..=pad {
                let h = lm.histories.entry(ids[t - len..t].to_vec()).or_default();
                h.total += 1;
                *h.next.entry(ids[t]).or_default() += 1;
            }
        }
    }
    lm
}

/// Cross-entropy difference `H_in(x) - H_generic(x)`; lower is more in-domain.
pub fn ced_score(tokens: &[String], lm_in: &NgramLM, lm_generic: &NgramLM) -> f64 {
    lm_in.cross_entropy(tokens) - lm_generic.cross_entropy(tokens)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn bigram_hand_count() {
        let s = toks("a b a b");
        let lm = train_lm([s.as_slice()], 2, 0.1);
        assert_eq!(lm.vocab_size(), 4);
        assert!((lm.prob(&["a"], "b") - 2.1 / 2.4).abs() < 1e-12);
    }

    #[test]
    fn distribution_sums_to_one() {
        let corpus = [toks("a b c a"), toks("c c b")];
        let lm = train_lm(corpus.iter().map(Vec::as_slice), 3, 0.1);
        for hist in [vec!["a"], vec!["c", "c"], vec!["zz", "a"], vec![]] {
            let total: f64 = lm.vocabulary().iter().map(|w| lm.prob(&hist, w)).sum();
            assert!((total - 1.0).abs() < 1e-9, "{hist:?}: {total}");
        }
    }

    #[test]
    fn own_sentence_beats_unknown_words() {
        let s = toks("x y z x y");
        let lm = train_lm([s.as_slice()], 3, 0.1);
        assert!(lm.cross_entropy(&s) < lm.cross_entropy(&toks("p q r s t")));
    }
}
