//! Vocabulary, caption encoding, feature files and the synthetic planted-concept corpus.

mod dataset;
mod features;
mod synthetic;
mod vocab;

pub use dataset::{read_candidates, Dataset, FibItem, McItem, Sample, Split};
pub use features::{load_features, read_features, subsample_indices, write_features, save_features, FeatureClip, N_MAX};
pub use synthetic::{generate_synthetic, nearest_signature, template_caption, Placement, SyntheticCorpus, SyntheticSpec, DISTRACTORS, LEXICON};
pub use vocab::{
    decode_caption, encode_caption, select_candidates, tokenize, CandidateSelection, Vocabulary, BLANK, BOS, EOS,
    PAD, RESERVED, UNK,
};
