//! Corpus types, feature and manifest I/O, batching and the synthetic task.

mod corpus;
mod features;
mod synthetic;
mod vocab;

pub use corpus::{
    id_bucket, load_manifest, make_batches, parse_manifest, split_validation, write_manifest, Corpus,
    ManifestEntry, Utterance,
};
pub use features::{read_features, write_features, FeatureSequence};
pub use synthetic::{write_corpus, SyntheticTask, SyntheticTaskConfig};
pub use vocab::{Vocab, EOS, PAD, RESERVED, UNK};
