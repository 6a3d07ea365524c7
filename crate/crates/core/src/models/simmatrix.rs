use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ConceptSource, DetectorOutput, Head, TaskModel};
use crate::corpus::{Sample, Vocabulary};
use crate::nn::{load_checkpoint, save_checkpoint};
use crate::{Error, ParamStore, Result, Scalar, Tape, Tensor};

/// Dense score table: rows are sentences (queries), columns are clips.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub sentence_ids: Vec<String>,
    pub clip_ids: Vec<String>,
    scores: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct IdLine {
    kind: String,
    index: usize,
    id: String,
}

impl SimilarityMatrix {
    pub fn new(sentence_ids: Vec<String>, clip_ids: Vec<String>, scores: Vec<f64>) -> Result<Self> {
        if scores.len() != sentence_ids.len() * clip_ids.len() {
            return Err(Error::dim(format!(
                "{} scores for a {}×{} matrix",
                scores.len(),
                sentence_ids.len(),
                clip_ids.len()
            )));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::input("similarity matrix has non-finite entries"));
        }
        Ok(SimilarityMatrix { sentence_ids, clip_ids, scores })
    }

    /// Square matrix with generated ids, handy for metric tests.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != m) {
            return Err(Error::dim("ragged similarity rows"));
        }
        SimilarityMatrix::new(
            (0..n).map(|i| format!("s{i}")).collect(),
            (0..m).map(|j| format!("c{j}")).collect(),
            rows.concat(),
        )
    }

    pub fn rows(&self) -> usize {
        self.sentence_ids.len()
    }

    pub fn cols(&self) -> usize {
        self.clip_ids.len()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.scores[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.scores[r * self.cols()..(r + 1) * self.cols()]
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    fn ids_path(path: &Path) -> PathBuf {
        let mut p = path.as_os_str().to_owned();
        p.push(".ids.jsonl");
        PathBuf::from(p)
    }

    /// Writes the table as a one-tensor checkpoint at `path` and the ids as
    /// JSON lines at `path.ids.jsonl` (preceded by a `run` line when given).
    pub fn save(&self, path: impl AsRef<Path>, run: Option<&serde_json::Value>) -> Result<()> {
        let path = path.as_ref();
        let mut store = ParamStore::<f64>::new();
        store.add("similarity", Tensor::new(vec![self.rows(), self.cols()], self.scores.clone())?)?;
        save_checkpoint(&store, path)?;
        let mut w = BufWriter::new(File::create(Self::ids_path(path))?);
        if let Some(run) = run {
            writeln!(w, "{}", serde_json::json!({ "run": run }))?;
        }
        for (kind, ids) in [("sentence", &self.sentence_ids), ("clip", &self.clip_ids)] {
            for (index, id) in ids.iter().enumerate() {
                writeln!(w, "{}", serde_json::to_string(&IdLine { kind: kind.into(), index, id: id.clone() })?)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let store = load_checkpoint::<f64>(path)?;
        let t = store.by_name("similarity").ok_or_else(|| Error::input("checkpoint has no `similarity` tensor"))?;
        if t.rank() != 2 {
            return Err(Error::input(format!("similarity tensor has shape {:?}", t.shape())));
        }
        let mut sentence_ids = vec![String::new(); t.shape()[0]];
        let mut clip_ids = vec![String::new(); t.shape()[1]];
        for line in BufReader::new(File::open(Self::ids_path(path))?).lines() {
            let line = line?;
            let v: serde_json::Value = serde_json::from_str(&line)?;
            if v.get("run").is_some() {
                continue;
            }
            let l: IdLine = serde_json::from_value(v)?;
            let slot = match l.kind.as_str() {
                "sentence" => sentence_ids.get_mut(l.index),
                "clip" => clip_ids.get_mut(l.index),
                other => return Err(Error::input(format!("unknown id kind `{other}`"))),
            };
            *slot.ok_or_else(|| Error::input(format!("{} index {} out of range", l.kind, l.index)))? = l.id;
        }
        SimilarityMatrix::new(sentence_ids, clip_ids, t.data().to_vec())
    }
}

/// Scores every (sentence, clip) pair with `scorer(sentence_index, clip_index)`.
pub fn similarity_matrix<F>(sentence_ids: &[String], clip_ids: &[String], mut scorer: F) -> Result<SimilarityMatrix>
where
    F: FnMut(usize, usize) -> Result<f64>,
{
    if sentence_ids.is_empty() || clip_ids.is_empty() {
        return Err(Error::usage("similarity matrix needs at least one sentence and one clip"));
    }
    let mut scores = Vec::with_capacity(sentence_ids.len() * clip_ids.len());
    for i in 0..sentence_ids.len() {
        for j in 0..clip_ids.len() {
            scores.push(scorer(i, j)?);
        }
    }
    SimilarityMatrix::new(sentence_ids.to_vec(), clip_ids.to_vec(), scores)
}

impl<T: Scalar> TaskModel<T> {
    /// Inference-mode score of one (clip, sentence) pair with a multiple-choice or retrieval head.
    pub fn pair_score(&self, clip: &Sample, sentence: &[String], vocab: &Vocabulary, cache: Option<&DetectorOutput>) -> Result<f64> {
        let mut tape = Tape::new();
        let enc = self.encode(&mut tape, &clip.clip, cache.map_or(ConceptSource::Live, ConceptSource::Cached))?;
        let ids: Vec<usize> = sentence.iter().map(|w| vocab.id_or_unk(w)).collect();
        let s = match &self.head {
            Head::Mc(h) => h.score(&mut tape, self, &enc, &ids)?,
            Head::Retrieval(h) => h.score(&mut tape, self, &enc, &ids)?,
            _ => return Err(Error::usage(format!("task {} does not score pairs", self.task))),
        };
        Ok(tape.item(s.score)?.to_f64_lossy())
    }

    /// Score table of the captions of `queries` (rows) against the clips of `clips` (columns).
    /// Each clip is encoded once.
    pub fn similarity(
        &self,
        queries: &[&Sample],
        clips: &[&Sample],
        vocab: &Vocabulary,
        cache: Option<&HashMap<String, DetectorOutput>>,
    ) -> Result<SimilarityMatrix> {
        if queries.is_empty() || clips.is_empty() {
            return Err(Error::usage("similarity matrix needs at least one sentence and one clip"));
        }
        let sentences: Vec<Vec<usize>> =
            queries.iter().map(|s| s.caption.iter().map(|w| vocab.id_or_unk(w)).collect()).collect();
        let mut scores = vec![0.0; queries.len() * clips.len()];
        for (j, c) in clips.iter().enumerate() {
            let mut tape = Tape::new();
            let source = match cache.and_then(|m| m.get(&c.id)) {
                Some(out) => ConceptSource::Cached(out),
                None => ConceptSource::Live,
            };
            let enc = self.encode(&mut tape, &c.clip, source)?;
            let mark = tape.len();
            for (i, ids) in sentences.iter().enumerate() {
                let s = match &self.head {
                    Head::Mc(h) => h.score(&mut tape, self, &enc, ids)?,
                    Head::Retrieval(h) => h.score(&mut tape, self, &enc, ids)?,
                    _ => return Err(Error::usage(format!("task {} does not score pairs", self.task))),
                };
                scores[i * clips.len() + j] = tape.item(s.score)?.to_f64_lossy();
                tape.truncate(mark);
            }
        }
        SimilarityMatrix::new(
            queries.iter().map(|s| s.id.clone()).collect(),
            clips.iter().map(|s| s.id.clone()).collect(),
            scores,
        )
    }
}
