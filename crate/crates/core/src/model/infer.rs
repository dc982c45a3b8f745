use ndiff::{Graph, Tensor};

use super::decoder::{decoder_stack, finish};
use super::{EncoderStates, ModelConfig, ModelError, Result};
use crate::audio::N_MELS;

/// Result of free-running spectrogram decoding, in normalised feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct InferredSpectrogram {
    /// `[r·steps, 80]` after the post-net.
    pub mel: Tensor,
    /// `[r·steps, 80]` before the post-net.
    pub mel_before: Tensor,
    pub steps: usize,
    pub stopped_early: bool,
    /// `sigmoid(stop_logit)` of every step taken.
    pub stop_probs: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Autoregressive decoding: each step consumes the previous step's `r`
/// predicted frames and stops once `sigmoid(stop) > stop_threshold` or after
/// `max_steps` steps.
pub fn infer_spectrogram(
    g: &mut Graph,
    cfg: &ModelConfig,
    enc: &EncoderStates,
    stop_threshold: f64,
    max_steps: usize,
) -> Result<InferredSpectrogram> {
    if max_steps == 0 {
        return Err(ModelError::Contract("max_steps must be at least 1".into()));
    }
    let w = cfg.reduction_factor * N_MELS;
    let mut inputs = vec![0.0; w];
    let mut frames: Vec<f64> = Vec::new();
    let mut stop_probs = Vec::new();
    let mut stopped_early = false;
    for step in 0..max_steps {
        let x = g.constant(Tensor::new(vec![step + 1, w], inputs.clone())?);
        let (out, stop) = decoder_stack(g, cfg, enc, x)?;
        let row = g.value(out).row(step).to_vec();
        let prob = sigmoid(g.value(stop).data()[step]);
        frames.extend_from_slice(&row);
        inputs.extend_from_slice(&row);
        stop_probs.push(prob);
        if prob > stop_threshold {
            stopped_early = true;
            break;
        }
    }
    let steps = stop_probs.len();
    let before = g.constant(Tensor::new(vec![steps, w], frames)?);
    let zeros = g.constant(Tensor::zeros(&[steps, 1]));
    let out = finish(g, cfg, before, zeros)?;
    Ok(InferredSpectrogram {
        mel: g.value(out.mel_after).clone(),
        mel_before: g.value(out.mel_before).clone(),
        steps,
        stopped_early,
        stop_probs,
    })
}
