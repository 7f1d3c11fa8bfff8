//! Synthetic corpus generation and the project's file formats.

mod checkpoint;
mod config;
mod corpus;
mod manifest;

pub use checkpoint::{load_features, save_features, symmetric_difference, Checkpoint, FEATURE_TENSOR, MAGIC};
pub use config::KvConfig;
pub use corpus::{gen_corpus, Corpus, CorpusConfig, MarkovChain, Split, Utterance};
pub use manifest::{
    format_tokens, parse_tokens, read_token_lines, write_corpus, write_token_lines, Manifest, ManifestEntry, LM_FILE,
    META_FILE,
};
