use std::collections::{BTreeMap, HashMap};

use crate::{Error, Result};

pub const PAD: usize = 0;
pub const EOS: usize = 1;
pub const UNK: usize = 2;
pub const BLANK: usize = 3;
pub const BOS: usize = 4;

/// Reserved tokens in id order.
pub const RESERVED: [&str; 5] = ["<pad>", "<eos>", "<unk>", "<blank>", "<bos>"];

/// Minimum corpus frequency is strictly greater than this.
pub const MIN_COUNT: usize = 3;

/// Word ↔ id mapping with reserved tokens at fixed low ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    ids: HashMap<String, usize>,
    freq: BTreeMap<String, usize>,
}

impl Vocabulary {
    /// Keeps words occurring more than three times; ids follow descending
    /// frequency, then lexicographic order, after the reserved tokens.
    pub fn build(captions: &[Vec<String>]) -> Result<Self> {
        Self::build_with_threshold(captions, MIN_COUNT)
    }

    pub fn build_with_threshold(captions: &[Vec<String>], min_count: usize) -> Result<Self> {
        if captions.iter().all(Vec::is_empty) {
            return Err(Error::usage("cannot build a vocabulary from an empty corpus"));
        }
        let mut freq = BTreeMap::new();
        for w in captions.iter().flatten() {
            if RESERVED.contains(&w.as_str()) {
                continue;
            }
            *freq.entry(w.clone()).or_insert(0) += 1;
        }
        let mut kept: Vec<(&String, &usize)> = freq.iter().filter(|(_, &c)| c > min_count).collect();
        kept.sort_by(|a, b| b.1.cmp(a.1).then_with(|| a.0.cmp(b.0)));
        let words = RESERVED.iter().map(|s| s.to_string()).chain(kept.into_iter().map(|(w, _)| w.clone())).collect();
        Ok(Self::from_parts(words, freq))
    }

    /// Vocabulary over an explicit word list (reserved tokens are prepended).
    pub fn from_words<S: AsRef<str>>(words: &[S]) -> Self {
        let list = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(words.iter().map(|w| w.as_ref().to_string()).filter(|w| !RESERVED.contains(&w.as_str())))
            .collect();
        Self::from_parts(list, BTreeMap::new())
    }

    fn from_parts(words: Vec<String>, freq: BTreeMap<String, usize>) -> Self {
        let ids = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Vocabulary { words, ids, freq }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.ids.get(word).copied()
    }

    /// Id of `word`, or `<unk>`.
    pub fn id_or_unk(&self, word: &str) -> usize {
        self.id(word).unwrap_or(UNK)
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn frequency(&self, word: &str) -> usize {
        self.freq.get(word).copied().unwrap_or(0)
    }

    pub fn frequencies(&self) -> &BTreeMap<String, usize> {
        &self.freq
    }

    pub fn is_reserved(id: usize) -> bool {
        id < RESERVED.len()
    }
}

/// Lowercases, splits on whitespace and strips punctuation; reserved tokens
/// such as `<blank>` survive intact.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .filter_map(|raw| {
            let lower = raw.to_lowercase();
            if RESERVED.contains(&lower.as_str()) {
                return Some(lower);
            }
            let w: String = lower.chars().filter(|c| c.is_alphanumeric() || *c == '\'' || *c == '-').collect();
            let w = w.trim_matches(|c| c == '\'' || c == '-').to_string();
            (!w.is_empty()).then_some(w)
        })
        .collect()
}

/// Word ids with `<unk>` substitution and a final `<eos>`, truncated or
/// `<pad>`-padded to exactly `max_len` entries.
pub fn encode_caption(tokens: &[String], vocab: &Vocabulary, max_len: usize) -> Vec<usize> {
    if max_len == 0 {
        return Vec::new();
    }
    let mut ids: Vec<usize> = tokens.iter().take(max_len - 1).map(|w| vocab.id_or_unk(w)).collect();
    ids.push(EOS);
    ids.resize(max_len, PAD);
    ids
}

/// Words up to the first `<eos>`, skipping padding.
pub fn decode_caption(ids: &[usize], vocab: &Vocabulary) -> Vec<String> {
    ids.iter()
        .take_while(|&&id| id != EOS)
        .filter(|&&id| id != PAD)
        .map(|&id| vocab.word(id).to_string())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CandidateSelection {
    pub words: Vec<String>,
    /// Set when fewer than the requested number of words were available.
    pub warning: Option<String>,
}

/// The `v` most frequent tagged words (ties lexicographic).
pub fn select_candidates<S: AsRef<str>>(tagged: &[S], freq: &BTreeMap<String, usize>, v: usize) -> CandidateSelection {
    let mut words: Vec<&str> = tagged.iter().map(AsRef::as_ref).collect();
    words.sort_unstable();
    words.dedup();
    words.sort_by(|a, b| freq.get(*b).unwrap_or(&0).cmp(freq.get(*a).unwrap_or(&0)).then_with(|| a.cmp(b)));
    let warning = (words.len() < v).then(|| format!("only {} candidate words available, {v} requested", words.len()));
    CandidateSelection { words: words.into_iter().take(v).map(str::to_string).collect(), warning }
}
