use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::features::{load_features, save_features, FeatureClip};
use super::vocab::{tokenize, Vocabulary};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// A caption with exactly one `<blank>` and the word it replaces.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FibItem {
    pub sentence: Vec<String>,
    pub answer: String,
}

/// Five candidate captions, one of which describes the clip.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct McItem {
    pub choices: Vec<Vec<String>>,
    pub answer: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub clip: FeatureClip,
    pub caption: Vec<String>,
    pub planted: Vec<String>,
    pub split: Split,
    pub fib: Option<FibItem>,
    pub mc: Option<McItem>,
}

/// Clips with captions, the concept candidate list and the vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub candidates: Vec<String>,
    pub vocab: Vocabulary,
}

#[derive(Serialize, Deserialize)]
struct ManifestLine {
    id: String,
    clip: String,
    caption: String,
    planted: Vec<String>,
    split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fib: Option<FibLine>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    choices: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    answer: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct FibLine {
    sentence: String,
    answer: String,
}

impl Dataset {
    /// Builds a dataset whose vocabulary comes from the training captions.
    pub fn new(samples: Vec<Sample>, candidates: Vec<String>) -> Result<Self> {
        let train: Vec<Vec<String>> = samples.iter().filter(|s| s.split == Split::Train).map(|s| s.caption.clone()).collect();
        let vocab = Vocabulary::build(&train)?;
        Ok(Dataset { samples, candidates, vocab })
    }

    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    /// Vocabulary ids of the candidate words (`<unk>` when absent).
    pub fn candidate_vocab_ids(&self) -> Vec<usize> {
        self.candidates.iter().map(|w| self.vocab.id_or_unk(w)).collect()
    }

    /// Binary concept targets: candidate `i` is 1 iff it occurs in the caption.
    pub fn concept_targets(&self, caption: &[String]) -> Vec<f64> {
        self.candidates.iter().map(|w| if caption.contains(w) { 1.0 } else { 0.0 }).collect()
    }

    /// Writes `manifest.jsonl`, `candidates.txt` and `features/<id>.ctfv` under `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir.join("features"))?;
        let mut manifest = fs::File::create(dir.join("manifest.jsonl"))?;
        for s in &self.samples {
            let rel = format!("features/{}.ctfv", s.id);
            save_features(&s.clip, dir.join(&rel))?;
            let line = ManifestLine {
                id: s.id.clone(),
                clip: rel,
                caption: s.caption.join(" "),
                planted: s.planted.clone(),
                split: s.split,
                fib: s.fib.as_ref().map(|f| FibLine { sentence: f.sentence.join(" "), answer: f.answer.clone() }),
                choices: s.mc.as_ref().map(|m| m.choices.iter().map(|c| c.join(" ")).collect()),
                answer: s.mc.as_ref().map(|m| m.answer),
            };
            writeln!(manifest, "{}", serde_json::to_string(&line)?)?;
        }
        let mut cand = fs::File::create(dir.join("candidates.txt"))?;
        for w in &self.candidates {
            writeln!(cand, "{w}")?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let candidates = read_candidates(dir.join("candidates.txt"))?;
        let file = fs::File::open(dir.join("manifest.jsonl"))?;
        let mut samples = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let m: ManifestLine =
                serde_json::from_str(&line).map_err(|e| Error::input(format!("manifest line {}: {e}", i + 1)))?;
            let mut clip = load_features(dir.join(&m.clip))?;
            clip.id = m.id.clone();
            let mc = match (m.choices, m.answer) {
                (Some(choices), Some(answer)) => {
                    if answer >= choices.len() {
                        return Err(Error::input(format!("manifest line {}: answer {answer} out of range", i + 1)));
                    }
                    Some(McItem { choices: choices.iter().map(|c| tokenize(c)).collect(), answer })
                }
                (None, None) => None,
                _ => return Err(Error::input(format!("manifest line {}: choices and answer must appear together", i + 1))),
            };
            samples.push(Sample {
                id: m.id,
                clip,
                caption: tokenize(&m.caption),
                planted: m.planted,
                split: m.split,
                fib: m.fib.map(|f| FibItem { sentence: tokenize(&f.sentence), answer: f.answer }),
                mc,
            });
        }
        Dataset::new(samples, candidates)
    }
}

/// Reads a candidate-word file: one word per line, blank lines ignored.
pub fn read_candidates(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let text = fs::read_to_string(path)?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_string).collect())
}
