//! Transformer S2ST network: subsampling encoder, spectrogram decoder with
//! pre-net/post-net and stop head, tapped auxiliary phone decoders and the
//! multi-task loss.

mod auxiliary;
mod check;
mod config;
mod decoder;
mod encoder;
mod infer;
mod init;
mod loss;

pub use auxiliary::{aux_io, decode_auxiliary_teacher_forced, AuxKind};
pub use check::full_loss_gradcheck;
pub(crate) use init::param_shapes;
pub use config::{ModelConfig, PromptAttachment};
pub use decoder::{decode_spectrogram_teacher_forced, pad_target, postnet, DecoderOutput};
pub use encoder::{conv_subsample, encode, subsampled_len, EncoderStates};
pub use infer::{infer_spectrogram, InferredSpectrogram};
pub use loss::{
    combine_losses, total_loss, utterance_loss_terms, LossBreakdown, LossMode, LossTargets,
    LossVars, UtteranceLoss,
};

use ndiff::{Graph, GraphOptions, NdError, ParamStore, Precision, Tensor};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{cmvn_normalize, AudioError, CmvnStats, MelSpectrogram, N_MELS};

/// Start-of-sequence token of both phone vocabularies.
pub const BOS: usize = 0;
/// End-of-sequence token of both phone vocabularies.
pub const EOS: usize = 1;
/// Token id of phone 0; phone `p` is token `p + PHONE_OFFSET`.
pub const PHONE_OFFSET: usize = 2;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("token {index} outside vocabulary of {size}")]
    Vocab { index: usize, size: usize },
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error(transparent)]
    Engine(#[from] NdError),
    #[error(transparent)]
    Audio(#[from] AudioError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Provenance tag fed to the encoder as a learned embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptCategory {
    Primary,
    Secondary,
}

impl PromptCategory {
    /// Row of the prompt embedding table.
    pub fn index(self) -> usize {
        match self {
            PromptCategory::Primary => 0,
            PromptCategory::Secondary => 1,
        }
    }
}

/// Parameters plus the feature normalisation they were trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct S2stModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub src_cmvn: CmvnStats,
    pub tgt_cmvn: CmvnStats,
}

impl S2stModel {
    /// Freshly initialised model with identity normalisation.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = init::init_params(&config, seed)?;
        Ok(S2stModel {
            config,
            params,
            src_cmvn: CmvnStats::identity(),
            tgt_cmvn: CmvnStats::identity(),
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// A tape over this model's parameters.
    pub fn graph(&self, precision: Precision, training: bool, seed: u64) -> Graph<'_> {
        Graph::new(
            &self.params,
            GraphOptions {
                precision,
                training,
                seed,
            },
        )
    }

    /// CMVN-normalised source features as a `[T, 80]` tensor.
    pub fn source_input(&self, mel: &MelSpectrogram) -> Result<Tensor> {
        mel_tensor(&cmvn_normalize(mel, &self.src_cmvn)?)
    }

    /// CMVN-normalised target features as a `[T, 80]` tensor.
    pub fn target_input(&self, mel: &MelSpectrogram) -> Result<Tensor> {
        mel_tensor(&cmvn_normalize(mel, &self.tgt_cmvn)?)
    }
}

/// Parameter count implied by a config, without allocating a model.
pub fn parameter_count(config: &ModelConfig) -> Result<usize> {
    config.validate()?;
    Ok(init::param_shapes(config)
        .iter()
        .map(|(_, shape, _)| shape.iter().product::<usize>())
        .sum())
}

/// `[T, 80]` tensor view of a spectrogram.
pub fn mel_tensor(mel: &MelSpectrogram) -> Result<Tensor> {
    Ok(Tensor::new(
        vec![mel.n_frames(), N_MELS],
        mel.data().iter().map(|&v| v as f64).collect(),
    )?)
}
