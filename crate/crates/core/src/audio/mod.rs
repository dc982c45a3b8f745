//! Audio frontend: waveforms, log-mel features, augmentation and inversion.

mod augment;
mod cmvn;
mod griffin_lim;
mod mel;
mod melfile;
mod resample;
mod wav;

pub use augment::{spec_augment, SpecAugmentPolicy};
pub use cmvn::{cmvn_denormalize, cmvn_normalize, CmvnStats};
pub use griffin_lim::griffin_lim_invert;
pub use mel::{hz_to_mel, mel_spectrogram, mel_to_hz, stft_power, MelFilterbank};
pub use melfile::{read_mel, read_mel_file, write_mel, write_mel_file, MEL_MAGIC};
pub use resample::resample;
pub use wav::{read_wav, write_wav};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of mel channels used everywhere in the model.
pub const N_MELS: usize = 80;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid normalisation stats: {0}")]
    InvalidStats(String),
    #[error("wav: {0}")]
    Wav(#[from] hound::Error),
    #[error("mel file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AudioError>;

/// Mono PCM signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(AudioError::InvalidArgument("sample rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(AudioError::InvalidArgument("non-finite sample".into()));
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MelOrigin {
    Source,
    Target,
    Predicted,
}

/// `T x 80` log-mel matrix, row-major by frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    frames: Vec<f32>,
    n_frames: usize,
    pub sample_rate: u32,
    pub hop_length: u32,
    pub origin: MelOrigin,
}

impl MelSpectrogram {
    pub fn new(
        frames: Vec<f32>,
        sample_rate: u32,
        hop_length: u32,
        origin: MelOrigin,
    ) -> Result<Self> {
        if frames.len() % N_MELS != 0 {
            return Err(AudioError::InvalidArgument(format!(
                "{} values do not form rows of {N_MELS}",
                frames.len()
            )));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(AudioError::InvalidArgument("non-finite mel entry".into()));
        }
        Ok(MelSpectrogram {
            n_frames: frames.len() / N_MELS,
            frames,
            sample_rate,
            hop_length,
            origin,
        })
    }

    pub fn empty(sample_rate: u32, hop_length: u32, origin: MelOrigin) -> Self {
        MelSpectrogram {
            frames: Vec::new(),
            n_frames: 0,
            sample_rate,
            hop_length,
            origin,
        }
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_mels(&self) -> usize {
        N_MELS
    }

    pub fn data(&self) -> &[f32] {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.frames[t * N_MELS..(t + 1) * N_MELS]
    }

    pub fn get(&self, t: usize, c: usize) -> f32 {
        self.frames[t * N_MELS + c]
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.frames
    }

    /// Per-channel mean over frames.
    pub fn mean_frame(&self) -> Vec<f64> {
        let mut m = vec![0.0; N_MELS];
        for t in 0..self.n_frames {
            for (c, v) in self.frame(t).iter().enumerate() {
                m[c] += *v as f64;
            }
        }
        let n = self.n_frames.max(1) as f64;
        m.iter_mut().for_each(|v| *v /= n);
        m
    }
}

/// STFT and mel settings for one sample rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrontendConfig {
    pub sample_rate: u32,
    /// Analysis window (and FFT) size in samples.
    pub n_fft: usize,
    pub hop_length: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub log_floor: f64,
}

impl FrontendConfig {
    /// 25 ms Hann window, 10 ms hop, 80 mels spanning `[0, sr/2]`.
    pub fn for_rate(sample_rate: u32) -> Self {
        FrontendConfig {
            sample_rate,
            n_fft: (sample_rate as usize * 25) / 1000,
            hop_length: (sample_rate as usize) / 100,
            n_mels: N_MELS,
            f_min: 0.0,
            f_max: sample_rate as f64 / 2.0,
            log_floor: 1e-10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AudioError::InvalidArgument(m));
        if self.sample_rate == 0 || self.n_fft == 0 || self.hop_length == 0 {
            return bad("sample rate, n_fft and hop must be positive".into());
        }
        if self.hop_length > self.n_fft {
            return bad(format!("hop {} exceeds n_fft {}", self.hop_length, self.n_fft));
        }
        if self.n_mels != N_MELS {
            return bad(format!("n_mels must be {N_MELS}, got {}", self.n_mels));
        }
        if !(self.f_min >= 0.0 && self.f_min < self.f_max) {
            return bad(format!("bad mel range [{}, {}]", self.f_min, self.f_max));
        }
        if self.f_max > self.sample_rate as f64 / 2.0 {
            return bad(format!("f_max {} above Nyquist", self.f_max));
        }
        if self.log_floor <= 0.0 {
            return bad("log_floor must be positive".into());
        }
        Ok(())
    }
}
