//! Dataset A/B construction: manifests, phonemization, pseudo-labeling via
//! external clients, filtering, upsampled mixing, token batching and the
//! synthetic toy corpus.

mod client;
mod manifest;
mod phonemize;
mod stages;
mod toy;

pub use client::{
    Client, ClientRequest, ClientResponse, ReplayClient, SubprocessClient, Task, ToyClient,
    ToyMtMode, Transcript,
};
pub use manifest::{read_manifest, write_manifest, CorpusManifest, ManifestRole, Origin, UtteranceRecord};
pub use phonemize::{phonemize, Lexicon, OovPolicy, PhoneSet};
pub use stages::{
    batch_by_tokens, filter_corpus, mix_upsample, pseudo_translate, synthesize_targets,
    upsample_factor, Batch, CharRange, Dropped, FilterRule,
};
pub use toy::{generate_toy_corpus, ToyCorpus, ToySpec, ToyVoice};

pub use crate::model::PromptCategory as Category;

use thiserror::Error;

use crate::audio::AudioError;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("duplicate record id {0:?}")]
    DuplicateId(String),
    #[error("out-of-vocabulary words: {}", .0.join(", "))]
    Oov(Vec<String>),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid toy spec: {0}")]
    Spec(String),
    #[error("client: {0}")]
    Client(String),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;
