//! Auxiliary phone decoding, PER, BLEU variants, ASR-BLEU through an
//! external recogniser, and evaluation reports.

mod decode;
mod metrics;
mod report;

pub use decode::{decode_hypothesis, decode_phonemes, length_normalizer, DecodeConfig, DecodeMode, Hypothesis};
pub use metrics::{
    bleu, bleu_tokens, corpus_stats, edit_distance, phoneme_error_rate, tokenize, BleuMode, NgramStats, BLEU_MAX_ORDER,
};
pub use report::{
    asr_bleu, config_fingerprint, evaluate, evaluate_with_asr, translate_audio, AsrBleu, AsrConfig, AsrRow, EvalConfig, EvalReport,
    PromptChoice, UtteranceRow,
};

use thiserror::Error;

use crate::audio::AudioError;
use crate::data::DataError;
use crate::model::ModelError;
use crate::train::TrainError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("undefined rate: {0}")]
    UndefinedRate(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;
