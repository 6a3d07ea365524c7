use super::TrainConfig;
use crate::corpus::{generate_synthetic, Dataset, Sample, Split, SyntheticSpec};
use crate::models::{LossWeights, Task, TaskModel};
use crate::tensor::{grad_check, GradCheckReport};
use crate::{Error, Precision, Result};

/// Central-difference step of the gradient suite.
pub const GRADCHECK_STEP: f64 = 1e-6;
/// Largest accepted relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Seven concepts over 8-channel 4×4 grids and three frames; its vocabulary
/// has exactly 20 entries.
pub fn tiny_corpus() -> Result<Dataset> {
    let spec = SyntheticSpec { concepts: 7, frames: 3, channels: 8, train: 40, val: 4, test: 4, seed: 3, ..SyntheticSpec::default() };
    let d = generate_synthetic(&spec)?.dataset;
    if d.vocab.len() != 20 {
        return Err(Error::usage(format!("tiny corpus vocabulary has {} words, expected 20", d.vocab.len())));
    }
    Ok(d)
}

/// Small widths, K = 3 and no dropout.
pub fn tiny_train_config(task: Task) -> TrainConfig {
    TrainConfig {
        task,
        embed: 8,
        hidden: 8,
        detector_channels: 8,
        attn_channels: 4,
        k: 3,
        dropout: 0.0,
        retrieval_dropout: 0.0,
        sketch_dim: 16,
        maxout_dim: 8,
        lambda1: 0.1,
        lambda2: 0.5,
        precision: Precision::F64,
        ..TrainConfig::default()
    }
}

/// Checks every parameter gradient of the full loss of `task` (with the
/// regularizer and concept terms) on two training clips of the tiny corpus.
pub fn gradcheck_task(task: Task) -> Result<GradCheckReport> {
    gradcheck_config(&tiny_train_config(task))
}

/// Gradient check of the task loss under `config` on the tiny corpus.
pub fn gradcheck_config(config: &TrainConfig) -> Result<GradCheckReport> {
    if config.dropout != 0.0 || config.retrieval_dropout != 0.0 {
        return Err(Error::usage("gradient checks need dropout disabled"));
    }
    let task = config.task;
    let dataset = tiny_corpus()?;
    let model = TaskModel::<f64>::new(task, config.model_config(&dataset)?, config.seed)?;
    let batch: Vec<&Sample> = dataset.split(Split::Train).into_iter().take(2).collect();
    let targets: Vec<Vec<f64>> = batch.iter().map(|s| dataset.concept_targets(&s.caption)).collect();
    let weights = LossWeights { lambda1: config.lambda1, lambda2: config.lambda2, margin: config.margin() };
    let TaskModel { task, config: model_config, mut store, backbone, head } = model;
    grad_check(&mut store, GRADCHECK_STEP, GRADCHECK_TOLERANCE, |tape, st| {
        let view = TaskModel { task, config: model_config.clone(), store: st.clone(), backbone: backbone.clone(), head: head.clone() };
        Ok(view.batch_loss(tape, &batch, &targets, &dataset.vocab, weights, None)?.total)
    })
}
