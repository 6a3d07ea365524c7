use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Adam, TrainConfig};
use crate::concept::top_k;
use crate::corpus::{Dataset, Sample, Split, Vocabulary};
use crate::eval::{accuracy, median_rank};
use crate::models::{ConceptSource, DetectorOutput, FibHead, Head, LossWeights, Task, TaskModel};
use crate::nn::{load_checkpoint, save_checkpoint};
use crate::{Error, ParamStore, Result, Scalar, Tape};

/// Concept targets for one sample over the model's candidate list.
pub fn concept_targets(dataset: &Dataset, sample: &Sample, vocab_size: usize) -> Vec<f64> {
    let mut t = dataset.concept_targets(&sample.caption);
    t.truncate(vocab_size);
    t
}

/// Inference-mode detector outputs keyed by sample id.
pub fn build_cache<T: Scalar>(model: &TaskModel<T>, samples: &[&Sample]) -> Result<HashMap<String, DetectorOutput>> {
    samples.iter().map(|s| Ok((s.id.clone(), model.detect(&s.clip)?))).collect()
}

/// Copies every `det.*` tensor of the checkpoint at `path` into `model`.
pub fn transfer_detector<T: Scalar>(model: &mut TaskModel<T>, path: impl AsRef<Path>) -> Result<usize> {
    let source: ParamStore<T> = load_checkpoint(path)?;
    let mut copied = 0;
    for (name, t) in source.iter().filter(|(n, _)| n.starts_with("det.")) {
        model.store.set_values(name, t).map_err(|e| Error::usage(format!("cannot transfer `{name}`: {e}")))?;
        copied += 1;
    }
    let expected = model.store.iter().filter(|(n, _)| n.starts_with("det.")).count();
    if copied != expected {
        return Err(Error::usage(format!("checkpoint holds {copied} of {expected} detector tensors")));
    }
    Ok(copied)
}

/// Rebuilds a model saved by [`TrainOutcome::save`] for use on `dataset`.
pub fn load_trained<T: Scalar>(dir: impl AsRef<Path>, dataset: &Dataset) -> Result<(TaskModel<T>, TrainConfig)> {
    let dir = dir.as_ref();
    let text = fs::read_to_string(dir.join("config.txt"))?;
    let config = TrainConfig::from_kv(&crate::kv::KeyValues::parse(&text)?)?;
    let mut model = TaskModel::<T>::new(config.task, config.model_config(dataset)?, config.seed)?;
    let saved: ParamStore<T> = load_checkpoint(dir.join("model.ctsn"))?;
    if saved.len() != model.store.len() {
        return Err(Error::input(format!("checkpoint has {} tensors, model expects {}", saved.len(), model.store.len())));
    }
    for (name, t) in saved.iter() {
        model.store.set_values(name, t).map_err(|e| Error::input(format!("checkpoint does not fit this dataset: {e}")))?;
    }
    Ok((model, config))
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub epoch: usize,
    pub split: Split,
    pub loss: Option<f64>,
    pub metric: Option<f64>,
}

/// Validation or test result of a task model.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    /// `recall`, `exact`, `acc` or `medr`.
    pub metric: &'static str,
    pub value: f64,
    pub higher_is_better: bool,
    pub count: usize,
}

impl EvalResult {
    fn better_than(&self, other: f64) -> bool {
        if self.higher_is_better {
            self.value > other
        } else {
            self.value < other
        }
    }
}

pub struct TrainOutcome<T> {
    pub model: TaskModel<T>,
    pub config: TrainConfig,
    pub rows: Vec<MetricRow>,
    /// Epoch whose parameters were kept (0 means the initial ones).
    pub best_epoch: usize,
    pub best: Option<EvalResult>,
    /// Detector outputs used when the detector was frozen.
    pub cache: Option<HashMap<String, DetectorOutput>>,
}

impl<T: Scalar> TrainOutcome<T> {
    /// `epoch,split,loss,metric` lines; absent values are empty.
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("epoch,split,loss,metric\n");
        for r in &self.rows {
            let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            let split = match r.split {
                Split::Train => "train",
                Split::Val => "val",
                Split::Test => "test",
            };
            let _ = writeln!(s, "{},{},{},{}", r.epoch, split, f(r.loss), f(r.metric));
        }
        s
    }

    /// Writes `model.ctsn`, `config.txt`, `metrics.csv` and `run.json` under `dir`.
    pub fn save(&self, dir: impl AsRef<Path>, run: &serde_json::Value) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        save_checkpoint(&self.model.store, dir.join("model.ctsn"))?;
        fs::write(dir.join("config.txt"), self.config.to_kv().to_text())?;
        fs::write(dir.join("metrics.csv"), self.metrics_csv())?;
        let mut meta = serde_json::json!({
            "run": run,
            "task": self.config.task.name(),
            "best_epoch": self.best_epoch,
        });
        if let Some(b) = &self.best {
            meta["metric"] = serde_json::json!({ "name": b.metric, "value": b.value });
        }
        fs::write(dir.join("run.json"), serde_json::to_string_pretty(&meta)? + "\n")?;
        Ok(())
    }
}

fn check_task_data(task: Task, samples: &[&Sample]) -> Result<()> {
    let missing = match task {
        Task::Fib => samples.iter().find(|s| s.fib.is_none()),
        Task::Mc => samples.iter().find(|s| s.mc.is_none()),
        _ => None,
    };
    match missing {
        Some(s) => Err(Error::usage(format!("task {task} needs variants the dataset lacks (sample {})", s.id))),
        None => Ok(()),
    }
}

fn cached<'a>(cache: Option<&'a HashMap<String, DetectorOutput>>, s: &Sample) -> Result<ConceptSource<'a>> {
    match cache {
        None => Ok(ConceptSource::Live),
        Some(c) => c
            .get(&s.id)
            .map(ConceptSource::Cached)
            .ok_or_else(|| Error::usage(format!("no cached concepts for clip {}", s.id))),
    }
}

fn ids(words: &[String], vocab: &Vocabulary) -> Vec<usize> {
    words.iter().map(|w| vocab.id_or_unk(w)).collect()
}

/// Evaluates `model` on a split: detector recall of caption concepts within
/// the top K, exact caption match, FIB or MC accuracy, or retrieval median rank
/// over the first `candidates` clips.
pub fn evaluate<T: Scalar>(
    model: &TaskModel<T>,
    dataset: &Dataset,
    split: Split,
    config: &TrainConfig,
    cache: Option<&HashMap<String, DetectorOutput>>,
) -> Result<EvalResult> {
    let samples = dataset.split(split);
    if samples.is_empty() {
        return Err(Error::usage(format!("split {split:?} is empty")));
    }
    check_task_data(model.task, &samples)?;
    let vocab = &dataset.vocab;
    let v = model.config.detector.vocab;
    let result = |metric, value, higher_is_better, count| EvalResult { metric, value, higher_is_better, count };
    match &model.head {
        Head::Detector => {
            let (mut hit, mut total) = (0usize, 0usize);
            for s in &samples {
                let out = model.detect(&s.clip)?;
                let targets = concept_targets(dataset, s, v);
                let top = top_k(&out.confidence, model.config.detector.k)?;
                total += targets.iter().filter(|&&t| t > 0.0).count();
                hit += top.candidates.iter().filter(|&&c| targets[c] > 0.0).count();
            }
            Ok(result("recall", if total == 0 { 0.0 } else { hit as f64 / total as f64 }, true, samples.len()))
        }
        Head::Description(h) => {
            let mut preds = Vec::with_capacity(samples.len());
            let mut golds = Vec::with_capacity(samples.len());
            for s in &samples {
                let mut tape = Tape::new();
                let enc = model.encode(&mut tape, &s.clip, cached(cache, s)?)?;
                let g = h.generate(&mut tape, model, &enc, config.max_len)?;
                preds.push(g.words().to_vec());
                golds.push(ids(&s.caption, vocab));
            }
            Ok(result("exact", accuracy(&preds, &golds)?, true, samples.len()))
        }
        Head::Fib(h) => {
            let mut preds = Vec::with_capacity(samples.len());
            let mut golds = Vec::with_capacity(samples.len());
            for s in &samples {
                let fib = s.fib.as_ref().expect("checked");
                let mut tape = Tape::new();
                let enc = model.encode(&mut tape, &s.clip, cached(cache, s)?)?;
                let out = h.forward(&mut tape, model, &enc, &ids(&fib.sentence, vocab))?;
                preds.push(FibHead::predict(&tape, &out));
                golds.push(vocab.id_or_unk(&fib.answer));
            }
            Ok(result("acc", accuracy(&preds, &golds)?, true, samples.len()))
        }
        Head::Mc(h) => {
            let mut preds = Vec::with_capacity(samples.len());
            let mut golds = Vec::with_capacity(samples.len());
            for s in &samples {
                let mc = s.mc.as_ref().expect("checked");
                let mut tape = Tape::new();
                let enc = model.encode(&mut tape, &s.clip, cached(cache, s)?)?;
                let mut best = (0, f64::NEG_INFINITY);
                for (i, c) in mc.choices.iter().enumerate() {
                    let sc = h.score(&mut tape, model, &enc, &ids(c, vocab))?;
                    let x = tape.item(sc.score)?.to_f64_lossy();
                    if x > best.1 {
                        best = (i, x);
                    }
                }
                preds.push(best.0);
                golds.push(mc.answer);
            }
            Ok(result("acc", accuracy(&preds, &golds)?, true, samples.len()))
        }
        Head::Retrieval(_) => {
            let n = samples.len().min(config.eval_candidates.max(1));
            let subset = &samples[..n];
            let m = model.similarity(subset, subset, vocab, cache)?;
            Ok(result("medr", median_rank(&m)? as f64, false, n))
        }
    }
}

/// Seed of the dropout stream of one sample in one step.
fn tape_seed(seed: u64, epoch: usize, step: usize, pos: usize) -> u64 {
    let mut z = seed ^ ((epoch as u64) << 42) ^ ((step as u64) << 16) ^ pos as u64;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

struct StepContext<'a, T> {
    model: &'a TaskModel<T>,
    dataset: &'a Dataset,
    weights: LossWeights,
    cache: Option<&'a HashMap<String, DetectorOutput>>,
}

impl<T: Scalar> StepContext<'_, T> {
    /// Loss of one sample scaled by `scale`, backpropagated on its own tape.
    fn sample_tape(&self, sample: &Sample, seed: u64, scale: f64) -> Result<(Tape<T>, f64)> {
        let mut tape = Tape::training(seed);
        let targets = concept_targets(self.dataset, sample, self.model.config.detector.vocab);
        let parts = self.model.batch_loss(&mut tape, &[sample], &[targets], &self.dataset.vocab, self.weights, self.cache)?;
        let loss = tape.scale(parts.total, T::of(scale));
        let value = tape.item(parts.total)?.to_f64_lossy();
        tape.backward(loss)?;
        Ok((tape, value))
    }
}

/// Accumulates the gradient of the mean batch loss into the model store and
/// returns the mean loss. Per-sample tapes are absorbed in batch order, so the
/// result does not depend on `threads`.
fn accumulate<T: Scalar>(
    model: &mut TaskModel<T>,
    dataset: &Dataset,
    batch: &[&Sample],
    weights: LossWeights,
    cache: Option<&HashMap<String, DetectorOutput>>,
    seeds: &[u64],
    threads: usize,
) -> Result<f64> {
    let scale = 1.0 / batch.len() as f64;
    if model.task == Task::Retrieval {
        let mut tape = Tape::training(seeds[0]);
        let targets: Vec<Vec<f64>> =
            batch.iter().map(|s| concept_targets(dataset, s, model.config.detector.vocab)).collect();
        let parts = model.batch_loss(&mut tape, batch, &targets, &dataset.vocab, weights, cache)?;
        let value = tape.item(parts.total)?.to_f64_lossy();
        tape.backward(parts.total)?;
        model.store.absorb(&tape);
        return Ok(value);
    }
    let ctx = StepContext { model, dataset, weights, cache };
    let tapes: Vec<Result<(Tape<T>, f64)>> = if threads <= 1 || batch.len() == 1 {
        batch.iter().zip(seeds).map(|(s, &seed)| ctx.sample_tape(s, seed, scale)).collect()
    } else {
        let chunk = batch.len().div_ceil(threads);
        std::thread::scope(|scope| {
            let handles: Vec<_> = batch
                .chunks(chunk)
                .zip(seeds.chunks(chunk))
                .map(|(b, sd)| {
                    let ctx = &ctx;
                    scope.spawn(move || b.iter().zip(sd).map(|(s, &seed)| ctx.sample_tape(s, seed, scale)).collect::<Vec<_>>())
                })
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
        })
    };
    let mut total = 0.0;
    let mut done = Vec::with_capacity(tapes.len());
    for t in tapes {
        let (tape, value) = t?;
        total += value * scale;
        done.push(tape);
    }
    for tape in &done {
        model.store.absorb(tape);
    }
    Ok(total)
}

/// Trains a task model on the train split with Adam, keeping the parameters
/// of the best validation epoch.
pub fn train<T: Scalar>(dataset: &Dataset, config: &TrainConfig) -> Result<TrainOutcome<T>> {
    config.validate()?;
    let train_set = dataset.split(Split::Train);
    if train_set.is_empty() {
        return Err(Error::usage("dataset has no training samples"));
    }
    check_task_data(config.task, &train_set)?;
    if config.task == Task::Retrieval && train_set.len() < 2 {
        return Err(Error::usage("retrieval training needs at least two training clips"));
    }
    if config.task == Task::Detector && !config.finetune_detector {
        return Err(Error::usage("detector training with a frozen detector"));
    }
    let mut model = TaskModel::<T>::new(config.task, config.model_config(dataset)?, config.seed)?;
    if let Some(path) = &config.transfer {
        transfer_detector(&mut model, path)?;
    }
    let cache = if config.finetune_detector {
        None
    } else {
        model.store.set_trainable("det.", false);
        let all: Vec<&Sample> = dataset.samples.iter().collect();
        Some(build_cache(&model, &all)?)
    };
    let has_val = !dataset.split(Split::Val).is_empty();
    let weights = LossWeights { lambda1: config.lambda1, lambda2: config.lambda2, margin: config.margin() };
    let mut adam = Adam::new(config.lr);
    let mut rows = Vec::new();
    let mut best_store = model.store.clone();
    let mut best: Option<EvalResult> = None;
    let mut best_epoch = 0;
    let mut stale = 0;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        if config.lr_decay {
            adam.lr = config.lr * (1.0 - (epoch - 1) as f64 / config.epochs as f64);
        }
        let (mut loss_sum, mut steps) = (0.0, 0usize);
        for (step, idx) in order.chunks(config.batch_size).enumerate() {
            if config.task == Task::Retrieval && idx.len() < 2 {
                continue;
            }
            let batch: Vec<&Sample> = idx.iter().map(|&i| train_set[i]).collect();
            let seeds: Vec<u64> = (0..batch.len()).map(|p| tape_seed(config.seed, epoch, step, p)).collect();
            let loss = accumulate(&mut model, dataset, &batch, weights, cache.as_ref(), &seeds, config.threads)?;
            if !loss.is_finite() {
                return Err(Error::Domain(format!("non-finite training loss at epoch {epoch}")));
            }
            if config.clip_norm > 0.0 {
                model.store.clip_grad_norm(config.clip_norm);
            }
            adam.step(&mut model.store)?;
            loss_sum += loss;
            steps += 1;
        }
        rows.push(MetricRow { epoch, split: Split::Train, loss: Some(loss_sum / steps.max(1) as f64), metric: None });
        if !has_val {
            best_store = model.store.clone();
            best_epoch = epoch;
            continue;
        }
        let r = evaluate(&model, dataset, Split::Val, config, cache.as_ref())?;
        rows.push(MetricRow { epoch, split: Split::Val, loss: None, metric: Some(r.value) });
        if best.as_ref().is_none_or(|b| r.better_than(b.value)) {
            best = Some(r);
            best_store = model.store.clone();
            best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if config.patience > 0 && stale >= config.patience {
                break;
            }
        }
    }
    best_store.zero_grads();
    model.store = best_store;
    Ok(TrainOutcome { model, config: config.clone(), rows, best_epoch, best, cache })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, SyntheticSpec};

    fn tiny() -> Dataset {
        let spec = SyntheticSpec { concepts: 6, frames: 3, train: 16, val: 4, test: 4, ..SyntheticSpec::default() };
        generate_synthetic(&spec).unwrap().dataset
    }

    fn cfg(task: Task) -> TrainConfig {
        TrainConfig {
            task,
            epochs: 2,
            batch_size: 4,
            embed: 8,
            hidden: 8,
            attn_channels: 4,
            sketch_dim: 16,
            maxout_dim: 8,
            lr: 1e-2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn thread_count_does_not_change_the_result() {
        let d = tiny();
        let a = train::<f64>(&d, &TrainConfig { threads: 1, ..cfg(Task::Fib) }).unwrap();
        let b = train::<f64>(&d, &TrainConfig { threads: 3, ..cfg(Task::Fib) }).unwrap();
        assert_eq!(a.rows, b.rows);
        for ((_, x), (_, y)) in a.model.store.iter().zip(b.model.store.iter()) {
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn frozen_detector_is_untouched() {
        let d = tiny();
        let c = TrainConfig { finetune_detector: false, ..cfg(Task::Mc) };
        let out = train::<f64>(&d, &c).unwrap();
        let fresh = TaskModel::<f64>::new(Task::Mc, c.model_config(&d).unwrap(), c.seed).unwrap();
        for (name, t) in out.model.store.iter().filter(|(n, _)| n.starts_with("det.")) {
            assert_eq!(t.data(), fresh.store.by_name(name).unwrap().data(), "{name}");
        }
        assert!(out.cache.is_some());
    }

    #[test]
    fn metrics_log_has_train_and_val_rows() {
        let out = train::<f64>(&tiny(), &cfg(Task::Retrieval)).unwrap();
        let csv = out.metrics_csv();
        assert!(csv.starts_with("epoch,split,loss,metric\n"));
        assert_eq!(csv.lines().count(), 1 + 2 * out.rows.iter().filter(|r| r.split == Split::Val).count());
        assert!(out.best_epoch >= 1);
    }

    #[test]
    fn transfer_copies_detector_tensors() {
        let d = tiny();
        let c = cfg(Task::Detector);
        let src = TaskModel::<f64>::new(Task::Detector, c.model_config(&d).unwrap(), 99).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("det.ctsn");
        save_checkpoint(&src.store, &path).unwrap();
        let mut dst = TaskModel::<f64>::new(Task::Description, c.model_config(&d).unwrap(), 1).unwrap();
        assert!(transfer_detector(&mut dst, &path).unwrap() > 0);
        for (name, t) in src.store.iter().filter(|(n, _)| n.starts_with("det.")) {
            let got: Vec<f32> = dst.store.by_name(name).unwrap().data().iter().map(|&x| x as f32).collect();
            let want: Vec<f32> = t.data().iter().map(|&x| x as f32).collect();
            assert_eq!(got, want);
        }
    }
}
