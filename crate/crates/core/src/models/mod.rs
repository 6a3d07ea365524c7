//! The task networks: description, fill-in-the-blank, multiple-choice and
//! retrieval heads on a shared backbone (concept detector, video encoder and
//! word embedding).

mod describe;
mod fib;
mod mc;
mod retrieval;
mod simmatrix;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use crate::concept::{concept_loss, detect, ConceptDetector, ConceptSet, DetectorConfig};
use crate::corpus::{FeatureClip, Sample};
use crate::nn::{Embedding, Init, Lstm, LstmConfig, LstmState};
use crate::semattn::attention_regularizer;
use crate::tensor::PoolKind;
use crate::{Error, ParamStore, Result, Scalar, Tape, Tensor, Var};

pub use describe::{argmax, description_loss, DecodeStep, DescriptionHead, Generated, TeacherForced};
pub use fib::{best_word, fib_loss, FibHead, FibOutput};
pub use mc::{hinge_loss, mc_loss, McHead, PairScore};
pub use retrieval::{retrieval_loss, RetrievalHead};
pub use simmatrix::{similarity_matrix, SimilarityMatrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    Detector,
    Description,
    Fib,
    Mc,
    Retrieval,
}

impl Task {
    pub const ALL: [Task; 5] = [Task::Detector, Task::Description, Task::Fib, Task::Mc, Task::Retrieval];

    pub fn name(self) -> &'static str {
        match self {
            Task::Detector => "detector",
            Task::Description => "desc",
            Task::Fib => "fib",
            Task::Mc => "mc",
            Task::Retrieval => "ret",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "detector" | "concept" => Ok(Task::Detector),
            "desc" | "description" => Ok(Task::Description),
            "fib" => Ok(Task::Fib),
            "mc" => Ok(Task::Mc),
            "ret" | "retrieval" => Ok(Task::Retrieval),
            _ => Err(Error::usage(format!("unknown task `{s}` (expected detector, desc, fib, mc or ret)"))),
        }
    }
}

/// Architecture hyperparameters shared by all heads.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab: usize,
    /// Word-embedding width `d`.
    pub embed: usize,
    /// Language-model hidden width `D`.
    pub hidden: usize,
    pub depth: usize,
    pub layer_norm: bool,
    pub forget_bias: f64,
    /// Dropout on LSTM inputs and between stacked layers.
    pub dropout: f64,
    pub detector: DetectorConfig,
    /// Vocabulary id of each candidate concept word.
    pub candidate_ids: Vec<usize>,
    /// Compact bilinear output width.
    pub sketch_dim: usize,
    /// Maxout output width.
    pub maxout_dim: usize,
    /// Dropout before the maxout layer.
    pub retrieval_dropout: f64,
    /// Seed of the fixed count-sketch tables.
    pub sketch_seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.detector.validate()?;
        if self.candidate_ids.len() != self.detector.vocab {
            return Err(Error::usage(format!(
                "{} candidate ids for a detector over {} words",
                self.candidate_ids.len(),
                self.detector.vocab
            )));
        }
        if let Some(&bad) = self.candidate_ids.iter().find(|&&i| i >= self.vocab) {
            return Err(Error::usage(format!("candidate id {bad} outside the vocabulary")));
        }
        if self.embed == 0 || self.hidden == 0 || self.depth == 0 || self.vocab == 0 {
            return Err(Error::usage("model extents must be positive"));
        }
        Ok(())
    }

    fn lstm(&self, input: usize) -> LstmConfig {
        LstmConfig {
            input_size: input,
            hidden_size: self.hidden,
            depth: self.depth,
            layer_norm: self.layer_norm,
            forget_bias: self.forget_bias,
            dropout: self.dropout,
        }
    }
}

/// Cached detector output for a clip whose detector is not being trained.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectorOutput {
    pub set: ConceptSet,
    pub confidence: Vec<f64>,
}

/// Where concept words come from during a forward pass.
#[derive(Clone, Copy, Debug)]
pub enum ConceptSource<'a> {
    /// Run the detector on the tape (gradients reach it through the concept loss).
    Live,
    Cached(&'a DetectorOutput),
}

/// Per-clip quantities every head consumes.
#[derive(Clone, Debug)]
pub struct ClipEncoding {
    /// Encoder state after every frame.
    pub states: Vec<LstmState>,
    /// Concept embeddings `[K × d]`.
    pub concepts: Var,
    pub set: ConceptSet,
    /// Detector confidences `[1 × V]`.
    pub confidence: Var,
}

impl ClipEncoding {
    pub fn last(&self) -> &LstmState {
        self.states.last().expect("non-empty clip")
    }
}

/// Detector, video encoder and word embedding.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub detector: ConceptDetector,
    pub encoder: Lstm,
    pub embedding: Embedding,
}

impl Backbone {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, config: &ModelConfig, init: &mut Init) -> Result<Self> {
        let detector = ConceptDetector::new(store, "det", config.detector.clone(), init)?;
        let encoder = Lstm::new(store, "enc", config.lstm(config.detector.channels), init)?;
        let embedding = Embedding::new(store, "emb", config.embed, config.vocab, init)?;
        Ok(Backbone { detector, encoder, embedding })
    }

    /// Runs reducer, detector (or uses the cache) and the video encoder.
    pub fn encode<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        config: &ModelConfig,
        clip: &FeatureClip,
        source: ConceptSource<'_>,
    ) -> Result<ClipEncoding> {
        let frames = ConceptDetector::clip_input(tape, clip)?;
        let (v, set, confidence) = match source {
            ConceptSource::Live => {
                let v = self.detector.reduce(tape, store, frames)?;
                let roll = self.detector.forward_reduced(tape, store, v)?;
                let p = tape.value(roll.confidence).to_f64_vec();
                let set = crate::concept::top_k(&p, config.detector.k)?;
                (v, set, roll.confidence)
            }
            ConceptSource::Cached(out) => {
                let v = self.detector.reduce(tape, store, frames)?;
                let c = tape.constant(Tensor::from_f64(vec![1, out.confidence.len()], &out.confidence)?);
                (v, out.set.clone(), c)
            }
        };
        let n = tape.shape(v)[0];
        if n == 0 {
            return Err(Error::usage("cannot encode an empty clip"));
        }
        let pooled = tape.pool2d(v, PoolKind::Avg, None)?;
        let rows = tape.reshape(pooled, &[n, config.detector.channels])?;
        let mut inputs = Vec::with_capacity(n);
        for i in 0..n {
            let r = tape.slice(rows, 0, i, 1)?;
            inputs.push(tape.dropout(r, config.dropout)?);
        }
        let init = self.encoder.zero_state(tape, 1);
        let states = self.encoder.run(tape, store, &inputs, init)?;
        let ids: Vec<usize> = set.candidates.iter().map(|&c| config.candidate_ids[c]).collect();
        let concepts = self.embedding.lookup(tape, store, &ids)?;
        Ok(ClipEncoding { states, concepts, set, confidence })
    }

    /// Hidden state per layer of the final encoder step with zero cells, for initialising a language LSTM.
    pub fn initial_state<T: Scalar>(&self, tape: &mut Tape<T>, lstm: &Lstm, enc: &ClipEncoding) -> Result<LstmState> {
        lstm.state_from_hidden(tape, &enc.last().h)
    }
}

/// Components of a task loss, all scalars.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    /// Likelihood or hinge term.
    pub primary: Var,
    /// Unweighted sum of attention regularizers.
    pub regularizer: Var,
    /// Unweighted concept loss.
    pub concept: Var,
}

/// `primary + λ1·Σ g(A) + λ2·L_con`.
pub fn combine_loss<T: Scalar>(
    tape: &mut Tape<T>,
    primary: Var,
    attention: &[Var],
    concept: Option<Var>,
    lambda1: f64,
    lambda2: f64,
) -> Result<LossParts> {
    let mut reg = tape.scalar(T::zero());
    for &a in attention {
        let g = attention_regularizer(tape, a)?;
        reg = tape.add(reg, g)?;
    }
    let con = match concept {
        Some(c) => c,
        None => tape.scalar(T::zero()),
    };
    let r = tape.scale(reg, T::of(lambda1));
    let c = tape.scale(con, T::of(lambda2));
    let total = tape.add(primary, r)?;
    let total = tape.add(total, c)?;
    Ok(LossParts { total, primary, regularizer: reg, concept: con })
}

/// Weights of the auxiliary loss terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub margin: f64,
}

#[derive(Clone, Debug)]
pub enum Head {
    Detector,
    Description(DescriptionHead),
    Fib(FibHead),
    Mc(McHead),
    Retrieval(RetrievalHead),
}

/// A backbone, one task head and the parameters of both.
#[derive(Clone, Debug)]
pub struct TaskModel<T> {
    pub task: Task,
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub backbone: Backbone,
    pub head: Head,
}

impl<T: Scalar> TaskModel<T> {
    /// Builds and initialises a model; identical `(task, config, seed)` give identical parameters.
    pub fn new(task: Task, config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let backbone = Backbone::new(&mut store, &config, &mut init)?;
        let head = match task {
            Task::Detector => Head::Detector,
            Task::Description => Head::Description(DescriptionHead::new(&mut store, &config, &mut init)?),
            Task::Fib => Head::Fib(FibHead::new(&mut store, &config, &mut init)?),
            Task::Mc => Head::Mc(McHead::new(&mut store, &config, &mut init)?),
            Task::Retrieval => Head::Retrieval(RetrievalHead::new(&mut store, &config, &mut init)?),
        };
        Ok(TaskModel { task, config, store, backbone, head })
    }

    pub fn encode(&self, tape: &mut Tape<T>, clip: &FeatureClip, source: ConceptSource<'_>) -> Result<ClipEncoding> {
        self.backbone.encode(tape, &self.store, &self.config, clip, source)
    }

    /// Detector output in inference mode.
    pub fn detect(&self, clip: &FeatureClip) -> Result<DetectorOutput> {
        let (set, confidence) = detect(&self.backbone.detector, &self.store, clip, self.config.detector.k)?;
        Ok(DetectorOutput { set, confidence })
    }

    /// Concept loss of an encoding against the words of `caption`.
    pub fn concept_term(&self, tape: &mut Tape<T>, enc: &ClipEncoding, targets: &[f64]) -> Result<Var> {
        concept_loss(tape, enc.confidence, targets)
    }

    /// Loss of a batch, averaged over its samples (retrieval uses in-batch negatives).
    pub fn batch_loss(
        &self,
        tape: &mut Tape<T>,
        batch: &[&Sample],
        targets: &[Vec<f64>],
        vocab: &crate::corpus::Vocabulary,
        weights: LossWeights,
        cache: Option<&HashMap<String, DetectorOutput>>,
    ) -> Result<LossParts> {
        if batch.is_empty() || targets.len() != batch.len() {
            return Err(Error::usage("batch and targets must be non-empty and aligned"));
        }
        let source = |s: &Sample| -> Result<ConceptSource<'_>> {
            match cache {
                None => Ok(ConceptSource::Live),
                Some(c) => c
                    .get(&s.id)
                    .map(ConceptSource::Cached)
                    .ok_or_else(|| Error::usage(format!("no cached concepts for clip {}", s.id))),
            }
        };
        if let Head::Retrieval(h) = &self.head {
            let mut encs = Vec::with_capacity(batch.len());
            for s in batch {
                encs.push(self.encode(tape, &s.clip, source(s)?)?);
            }
            let parts = h.batch_loss(tape, self, &encs, batch, targets, vocab, weights)?;
            return Ok(scale_parts(tape, parts, 1.0 / batch.len() as f64));
        }
        let mut acc: Option<LossParts> = None;
        for (s, t) in batch.iter().zip(targets) {
            let enc = self.encode(tape, &s.clip, source(s)?)?;
            let parts = self.sample_loss(tape, &enc, s, t, vocab, weights)?;
            acc = Some(match acc {
                None => parts,
                Some(a) => add_parts(tape, a, parts)?,
            });
        }
        Ok(scale_parts(tape, acc.expect("non-empty batch"), 1.0 / batch.len() as f64))
    }

    /// Loss of one sample given its encoding (not used for retrieval).
    pub fn sample_loss(
        &self,
        tape: &mut Tape<T>,
        enc: &ClipEncoding,
        sample: &Sample,
        targets: &[f64],
        vocab: &crate::corpus::Vocabulary,
        w: LossWeights,
    ) -> Result<LossParts> {
        let con = self.concept_term(tape, enc, targets)?;
        match &self.head {
            Head::Detector => combine_loss(tape, con, &[], None, 0.0, 0.0).map(|mut p| {
                p.concept = con;
                p
            }),
            Head::Description(h) => {
                let gold: Vec<usize> = sample.caption.iter().map(|w| vocab.id_or_unk(w)).collect();
                let tf = h.teacher_forced(tape, self, enc, &gold)?;
                description_loss(tape, &tf, Some(con), w.lambda1, w.lambda2)
            }
            Head::Fib(h) => {
                let fib = sample.fib.as_ref().ok_or_else(|| Error::usage(format!("sample {} has no blank sentence", sample.id)))?;
                let ids: Vec<usize> = fib.sentence.iter().map(|w| vocab.id_or_unk(w)).collect();
                let out = h.forward(tape, self, enc, &ids)?;
                fib_loss(tape, &out, vocab.id_or_unk(&fib.answer), Some(con), w.lambda1, w.lambda2)
            }
            Head::Mc(h) => {
                let mc = sample.mc.as_ref().ok_or_else(|| Error::usage(format!("sample {} has no choices", sample.id)))?;
                let mut scores = Vec::with_capacity(mc.choices.len());
                for c in &mc.choices {
                    let ids: Vec<usize> = c.iter().map(|w| vocab.id_or_unk(w)).collect();
                    scores.push(h.score(tape, self, enc, &ids)?);
                }
                mc_loss(tape, &scores, mc.answer, w.margin, Some(con), w.lambda1, w.lambda2)
            }
            Head::Retrieval(_) => Err(Error::usage("retrieval losses are defined over batches")),
        }
    }
}

pub(crate) fn add_parts<T: Scalar>(tape: &mut Tape<T>, a: LossParts, b: LossParts) -> Result<LossParts> {
    Ok(LossParts {
        total: tape.add(a.total, b.total)?,
        primary: tape.add(a.primary, b.primary)?,
        regularizer: tape.add(a.regularizer, b.regularizer)?,
        concept: tape.add(a.concept, b.concept)?,
    })
}

fn scale_parts<T: Scalar>(tape: &mut Tape<T>, p: LossParts, c: f64) -> LossParts {
    LossParts {
        total: tape.scale(p.total, T::of(c)),
        primary: tape.scale(p.primary, T::of(c)),
        regularizer: tape.scale(p.regularizer, T::of(c)),
        concept: tape.scale(p.concept, T::of(c)),
    }
}

/// Shared fixtures and scalar oracles for the head tests.
#[cfg(test)]
pub(crate) mod testutil {
    use super::*;
    use crate::corpus::Dataset;
    use crate::train::{tiny_corpus, tiny_train_config};

    pub fn tiny(task: Task, seed: u64) -> (Dataset, TaskModel<f64>) {
        let data = tiny_corpus().unwrap();
        let config = tiny_train_config(task).model_config(&data).unwrap();
        let model = TaskModel::new(task, config, seed).unwrap();
        (data, model)
    }

    pub fn ids(words: &[String], data: &Dataset) -> Vec<usize> {
        words.iter().map(|w| data.vocab.id_or_unk(w)).collect()
    }

    /// Regularizer summed loop by loop over a row-major `[rows × cols]` slice.
    pub fn regularizer(a: &[f64], cols: usize) -> f64 {
        let rows = a.len() / cols;
        let p: f64 = (0..cols).map(|i| (0..rows).map(|t| a[t * cols + i]).sum::<f64>().powi(2)).sum();
        let q: f64 = (0..rows).map(|t| (0..cols).map(|i| a[t * cols + i]).sum::<f64>().sqrt()).sum();
        p.sqrt() + q * q
    }

    pub fn matrix_regularizer(tape: &Tape<f64>, a: Var) -> f64 {
        regularizer(tape.data(a), *tape.shape(a).last().unwrap())
    }

    /// Mean binary cross-entropy.
    pub fn bce(p: &[f64], t: &[f64]) -> f64 {
        -p.iter().zip(t).map(|(&p, &t)| t * p.max(1e-12).ln() + (1.0 - t) * (1.0 - p).max(1e-12).ln()).sum::<f64>() / p.len() as f64
    }

    pub fn hinge(scores: &[f64], pos: usize, margin: f64) -> f64 {
        scores.iter().enumerate().filter(|&(l, _)| l != pos).map(|(_, &s)| (s - scores[pos] + margin).max(0.0)).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::testutil::*;
    use super::*;
    use crate::corpus::Split;

    #[test]
    fn same_seed_gives_same_parameters() {
        let (_, a) = tiny(Task::Mc, 4);
        let (_, b) = tiny(Task::Mc, 4);
        let (_, c) = tiny(Task::Mc, 5);
        let values = |m: &TaskModel<f64>| m.store.iter().flat_map(|(_, t)| t.data().to_vec()).collect::<Vec<_>>();
        assert_eq!(values(&a), values(&b));
        assert_ne!(values(&a), values(&c));
    }

    #[test]
    fn cached_and_live_concepts_agree() {
        let (data, model) = tiny(Task::Description, 2);
        let s = data.split(Split::Train)[0];
        let out = model.detect(&s.clip).unwrap();
        let mut tape = Tape::new();
        let live = model.encode(&mut tape, &s.clip, ConceptSource::Live).unwrap();
        let cached = model.encode(&mut tape, &s.clip, ConceptSource::Cached(&out)).unwrap();
        assert_eq!(live.set.candidates, cached.set.candidates);
        assert_eq!(tape.data(live.concepts), tape.data(cached.concepts));
        assert_eq!(tape.data(live.confidence).to_vec(), out.confidence);
    }

    #[test]
    fn combine_loss_weights_each_term() {
        let mut tape = Tape::<f64>::new();
        let primary = tape.scalar(2.0);
        let a = tape.constant(Tensor::ones(vec![1, 1]));
        let con = tape.scalar(0.5);
        let p = combine_loss(&mut tape, primary, &[a, a], Some(con), 0.1, 4.0).unwrap();
        assert_eq!(tape.item(p.regularizer).unwrap(), 4.0);
        assert!((tape.item(p.total).unwrap() - (2.0 + 0.4 + 2.0)).abs() < 1e-15);
    }

    #[test]
    fn detector_loss_is_the_concept_term() {
        let (data, model) = tiny(Task::Detector, 1);
        let s = data.split(Split::Train)[0];
        let t = data.concept_targets(&s.caption);
        let w = LossWeights { lambda1: 0.3, lambda2: 0.7, margin: 1.0 };
        let mut tape = Tape::new();
        let enc = model.encode(&mut tape, &s.clip, ConceptSource::Live).unwrap();
        let parts = model.sample_loss(&mut tape, &enc, s, &t, &data.vocab, w).unwrap();
        let want = bce(tape.data(enc.confidence), &t);
        assert!((tape.item(parts.total).unwrap() - want).abs() < 1e-12);
    }
}
