//! Optimizer, training loop, detector transfer and ensembling.

mod adam;
mod ensemble;
mod gradsuite;
mod looping;

pub use adam::Adam;
pub use ensemble::{average_distributions, average_matrices, ensemble_blank, ensemble_caption, ensemble_choice};
pub use gradsuite::{gradcheck_config, gradcheck_task, tiny_corpus, tiny_train_config, GRADCHECK_STEP, GRADCHECK_TOLERANCE};
pub use looping::{
    build_cache, concept_targets, evaluate, load_trained, train, transfer_detector, EvalResult, MetricRow, TrainOutcome,
};

use crate::concept::DetectorConfig;
use crate::corpus::Dataset;
use crate::kv::KeyValues;
use crate::models::{ModelConfig, Task};
use crate::{Error, Precision, Result};

/// Default multiple-choice margin.
pub const MC_MARGIN: f64 = 1.0;
/// Default retrieval margin.
pub const RETRIEVAL_MARGIN: f64 = 3.0;

/// Flat training configuration; every field maps to one `key = value` line.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub task: Task,
    pub lr: f64,
    /// Decay the learning rate linearly to zero over the epochs.
    pub lr_decay: bool,
    pub lambda1: f64,
    pub lambda2: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub dropout: f64,
    pub margin_mc: f64,
    pub margin_ret: f64,
    /// Concepts kept per clip.
    pub k: usize,
    /// Candidate words used by the detector; 0 keeps the whole list.
    pub v: usize,
    pub embed: usize,
    pub hidden: usize,
    pub depth: usize,
    /// Reduced detector channel width `D'` (also the trace hidden size).
    pub detector_channels: usize,
    pub attn_channels: usize,
    pub grid: usize,
    pub layer_norm: bool,
    pub forget_bias: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub clip_norm: f64,
    /// Epochs without validation improvement before stopping; 0 disables early stopping.
    pub patience: usize,
    /// Checkpoint whose `det.*` tensors initialise the detector.
    pub transfer: Option<String>,
    /// Train the detector jointly; when false its outputs are computed once and cached.
    pub finetune_detector: bool,
    pub sketch_dim: usize,
    pub maxout_dim: usize,
    pub retrieval_dropout: f64,
    pub max_len: usize,
    pub precision: Precision,
    pub threads: usize,
    /// Candidates per retrieval validation matrix.
    pub eval_candidates: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            task: Task::Description,
            lr: 1e-4,
            lr_decay: false,
            lambda1: 1e-3,
            lambda2: 1.0,
            batch_size: 8,
            epochs: 10,
            seed: 1,
            dropout: 0.2,
            margin_mc: MC_MARGIN,
            margin_ret: RETRIEVAL_MARGIN,
            k: 3,
            v: 0,
            embed: 16,
            hidden: 16,
            depth: 1,
            detector_channels: 16,
            attn_channels: 32,
            grid: 4,
            layer_norm: true,
            forget_bias: 1.0,
            clip_norm: 5.0,
            patience: 5,
            transfer: None,
            finetune_detector: true,
            sketch_dim: 64,
            maxout_dim: 32,
            retrieval_dropout: 0.5,
            max_len: 16,
            precision: Precision::F32,
            threads: 1,
            eval_candidates: 100,
        }
    }
}

macro_rules! kv_fields {
    ($($key:literal => $field:ident),* $(,)?) => {
        impl TrainConfig {
            fn read_fields(&mut self, kv: &KeyValues) -> Result<()> {
                $(kv.read_into($key, &mut self.$field)?;)*
                Ok(())
            }

            fn write_fields(&self, kv: &mut KeyValues) {
                $(kv.set($key, &self.$field);)*
            }
        }
    };
}

kv_fields! {
    "lr" => lr, "lr_decay" => lr_decay, "lambda1" => lambda1, "lambda2" => lambda2, "batch_size" => batch_size,
    "epochs" => epochs, "seed" => seed, "dropout" => dropout, "margin_mc" => margin_mc,
    "margin_ret" => margin_ret, "k" => k, "v" => v, "embed" => embed, "hidden" => hidden,
    "depth" => depth, "detector_channels" => detector_channels, "attn_channels" => attn_channels,
    "grid" => grid, "layer_norm" => layer_norm, "forget_bias" => forget_bias,
    "clip_norm" => clip_norm, "patience" => patience, "finetune_detector" => finetune_detector,
    "sketch_dim" => sketch_dim, "maxout_dim" => maxout_dim, "retrieval_dropout" => retrieval_dropout,
    "max_len" => max_len, "precision" => precision, "threads" => threads,
    "eval_candidates" => eval_candidates,
}

impl TrainConfig {
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let mut c = TrainConfig::default();
        if let Some(t) = kv.get_raw("task") {
            c.task = t.parse()?;
        }
        c.read_fields(kv)?;
        c.transfer = kv.get_raw("transfer").filter(|s| !s.is_empty()).map(str::to_string);
        let known: Vec<String> = c.to_kv().keys().map(str::to_string).collect();
        if let Some(bad) = kv.keys().find(|k| !known.iter().any(|n| n == k)) {
            return Err(Error::usage(format!("unknown config key `{bad}`")));
        }
        c.validate()?;
        Ok(c)
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.set("task", self.task);
        self.write_fields(&mut kv);
        kv.set("transfer", self.transfer.clone().unwrap_or_default());
        kv
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("k", self.k),
            ("embed", self.embed),
            ("hidden", self.hidden),
            ("depth", self.depth),
            ("detector_channels", self.detector_channels),
            ("attn_channels", self.attn_channels),
            ("grid", self.grid),
            ("sketch_dim", self.sketch_dim),
            ("maxout_dim", self.maxout_dim),
            ("max_len", self.max_len),
            ("threads", self.threads),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::usage(format!("`{name}` must be positive")));
        }
        if !(self.lr > 0.0) || self.lambda1 < 0.0 || self.lambda2 < 0.0 || self.margin_mc < 0.0 || self.margin_ret < 0.0 {
            return Err(Error::usage("lr must be positive; lambdas and margins non-negative"));
        }
        for (name, r) in [("dropout", self.dropout), ("retrieval_dropout", self.retrieval_dropout)] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::usage(format!("`{name}` = {r} outside [0, 1)")));
            }
        }
        if self.task == Task::Retrieval && self.batch_size < 2 {
            return Err(Error::usage("retrieval training needs batch_size >= 2"));
        }
        Ok(())
    }

    pub fn margin(&self) -> f64 {
        match self.task {
            Task::Retrieval => self.margin_ret,
            _ => self.margin_mc,
        }
    }

    /// Architecture for `dataset` under this configuration.
    pub fn model_config(&self, dataset: &Dataset) -> Result<ModelConfig> {
        let first = dataset.samples.first().ok_or_else(|| Error::usage("dataset has no samples"))?;
        let (h, w, c) = first.clip.grid();
        if dataset.samples.iter().any(|s| s.clip.grid() != (h, w, c)) {
            return Err(Error::input("clips disagree on frame shape"));
        }
        let ids = dataset.candidate_vocab_ids();
        let v = if self.v == 0 { ids.len() } else { self.v.min(ids.len()) };
        if v == 0 {
            return Err(Error::usage("dataset has no candidate words"));
        }
        let detector = DetectorConfig {
            input: (h, w, c),
            grid: (self.grid, self.grid),
            channels: self.detector_channels,
            hidden: self.detector_channels,
            attn_channels: self.attn_channels,
            vocab: v,
            k: self.k,
            depth: 1,
            layer_norm: self.layer_norm,
            forget_bias: self.forget_bias,
            dropout: 0.0,
        };
        Ok(ModelConfig {
            vocab: dataset.vocab.len(),
            embed: self.embed,
            hidden: self.hidden,
            depth: self.depth,
            layer_norm: self.layer_norm,
            forget_bias: self.forget_bias,
            dropout: self.dropout,
            detector,
            candidate_ids: ids[..v].to_vec(),
            sketch_dim: self.sketch_dim,
            maxout_dim: self.maxout_dim,
            retrieval_dropout: self.retrieval_dropout,
            sketch_seed: self.seed ^ 0x5eed_5ce7c4,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn margins_default_to_one_and_three() {
        let c = TrainConfig::default();
        assert_eq!(c.margin_mc, 1.0);
        assert_eq!(c.margin_ret, 3.0);
        assert_eq!(TrainConfig { task: Task::Retrieval, ..c.clone() }.margin(), 3.0);
        assert_eq!(TrainConfig { task: Task::Mc, ..c }.margin(), 1.0);
    }

    #[test]
    fn config_round_trips_through_text() {
        let c = TrainConfig { task: Task::Fib, lr: 3e-3, transfer: Some("det.ctsn".into()), ..TrainConfig::default() };
        let back = TrainConfig::from_kv(&KeyValues::parse(&c.to_kv().to_text()).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(TrainConfig::from_kv(&KeyValues::parse("bogus = 1").unwrap()).is_err());
        assert!(TrainConfig::from_kv(&KeyValues::parse("dropout = 1.0").unwrap()).is_err());
        assert!(TrainConfig::from_kv(&KeyValues::parse("lr = abc").unwrap()).is_err());
    }
}
