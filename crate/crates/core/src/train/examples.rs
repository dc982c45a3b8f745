use std::collections::HashMap;

use ndiff::Tensor;
use serde::{Deserialize, Serialize};

use super::{Result, TrainError};
use crate::audio::{cmvn_normalize, mel_spectrogram, read_wav, resample, CmvnStats, FrontendConfig, MelOrigin, MelSpectrogram};
use crate::data::{Category, CorpusManifest};
use crate::model::{aux_io, mel_tensor, pad_target, ModelConfig, S2stModel};

/// Variance floor for CMVN channels that barely move.
const CMVN_VAR_FLOOR: f64 = 1e-4;

/// Sample rates the model's features are computed at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureConfig {
    pub src_sr: u32,
    pub tgt_sr: u32,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            src_sr: 8000,
            tgt_sr: 24000,
        }
    }
}

/// Raw features and phone labels of one record.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub category: Category,
    pub src_mel: MelSpectrogram,
    pub tgt_mel: Option<MelSpectrogram>,
    pub src_phones: Vec<usize>,
    pub tgt_phones: Vec<usize>,
}

fn load_mel(path: &str, sr: u32, origin: MelOrigin, cache: &mut HashMap<(String, u32), MelSpectrogram>) -> Result<MelSpectrogram> {
    if let Some(m) = cache.get(&(path.to_string(), sr)) {
        return Ok(m.clone());
    }
    let wave = read_wav(path)?;
    let wave = if wave.sample_rate == sr { wave } else { resample(&wave, sr)? };
    let mut mel = mel_spectrogram(&wave, &FrontendConfig::for_rate(sr))?;
    mel.origin = origin;
    cache.insert((path.to_string(), sr), mel.clone());
    Ok(mel)
}

/// Mel features of one audio file, resampled to `sr` first when needed.
pub fn audio_features(path: &str, sr: u32, origin: MelOrigin) -> Result<MelSpectrogram> {
    load_mel(path, sr, origin, &mut HashMap::new())
}

/// Computes mel features for every record, resampling audio to the feature
/// rates. Target audio is loaded only when `with_target_audio` is set.
pub fn load_examples(manifest: &CorpusManifest, features: &FeatureConfig, with_target_audio: bool) -> Result<Vec<Example>> {
    let mut cache = HashMap::new();
    manifest
        .records
        .iter()
        .map(|r| {
            if r.src_phones.is_empty() || r.tgt_phones.is_empty() {
                return Err(TrainError::Contract(format!("record {} lacks phone labels", r.id)));
            }
            let src_mel = load_mel(&r.src_audio, features.src_sr, MelOrigin::Source, &mut cache)?;
            let tgt_mel = if with_target_audio {
                let path = r
                    .tgt_audio
                    .as_deref()
                    .ok_or_else(|| TrainError::Contract(format!("record {} has no target audio", r.id)))?;
                Some(load_mel(path, features.tgt_sr, MelOrigin::Target, &mut cache)?)
            } else {
                None
            };
            Ok(Example {
                id: r.id.clone(),
                category: r.category,
                src_mel,
                tgt_mel,
                src_phones: r.src_phones.clone(),
                tgt_phones: r.tgt_phones.clone(),
            })
        })
        .collect()
}

/// Fresh model whose CMVN statistics come from `examples`.
pub fn init_model(config: ModelConfig, seed: u64, examples: &[Example]) -> Result<S2stModel> {
    let mut model = S2stModel::new(config, seed)?;
    model.src_cmvn = CmvnStats::from_spectrograms(examples.iter().map(|e| &e.src_mel), CMVN_VAR_FLOOR);
    let targets: Vec<&MelSpectrogram> = examples.iter().filter_map(|e| e.tgt_mel.as_ref()).collect();
    if !targets.is_empty() {
        model.tgt_cmvn = CmvnStats::from_spectrograms(targets, CMVN_VAR_FLOOR);
    }
    Ok(model)
}

/// Model-ready view of an [`Example`]: normalised features and token ids.
#[derive(Debug, Clone)]
pub struct PreparedExample {
    pub id: String,
    pub category: Category,
    /// Normalised source features, kept as a spectrogram for augmentation.
    pub src: MelSpectrogram,
    /// Normalised target padded to a multiple of r, and its real frame count.
    pub tgt: Option<(Tensor, usize)>,
    pub src_in: Vec<usize>,
    pub src_out: Vec<usize>,
    pub tgt_in: Vec<usize>,
    pub tgt_out: Vec<usize>,
}

impl PreparedExample {
    pub fn new(model: &S2stModel, ex: &Example) -> Result<Self> {
        let cfg = &model.config;
        let check = |phones: &[usize], vocab: usize, side: &str| {
            match phones.iter().find(|&&p| p + crate::model::PHONE_OFFSET >= vocab) {
                Some(p) => Err(TrainError::Contract(format!(
                    "{side} phone {p} of {} does not fit a vocabulary of {vocab}",
                    ex.id
                ))),
                None => Ok(()),
            }
        };
        check(&ex.src_phones, cfg.src_phone_vocab, "source")?;
        check(&ex.tgt_phones, cfg.tgt_phone_vocab, "target")?;
        let src = cmvn_normalize(&ex.src_mel, &model.src_cmvn)?;
        let tgt = match &ex.tgt_mel {
            Some(m) => Some(pad_target(&model.target_input(m)?, cfg.reduction_factor)?),
            None => None,
        };
        let (src_in, src_out) = aux_io(&ex.src_phones);
        let (tgt_in, tgt_out) = aux_io(&ex.tgt_phones);
        Ok(PreparedExample {
            id: ex.id.clone(),
            category: ex.category,
            src,
            tgt,
            src_in,
            src_out,
            tgt_in,
            tgt_out,
        })
    }

    pub fn src_tensor(&self) -> Result<Tensor> {
        Ok(mel_tensor(&self.src)?)
    }
}
