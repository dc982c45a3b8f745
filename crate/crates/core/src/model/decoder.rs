use ndiff::{causal_mask, key_mask, multi_head_attention, Graph, Padding, Tensor, Var};

use super::encoder::{
    add_positions, attn_params, dense, feed_forward, layer_norm, p, residual,
};
use super::{EncoderStates, ModelConfig, ModelError, Result};
use crate::audio::N_MELS;

/// Teacher-forced or inferred spectrogram decoder outputs.
#[derive(Debug, Clone, Copy)]
pub struct DecoderOutput {
    /// `[T_out, 80]` before the post-net.
    pub mel_before: Var,
    /// `[T_out, 80]` with the post-net residual added.
    pub mel_after: Var,
    /// `[T_out, 80]` post-net output alone.
    pub postnet: Var,
    /// `[steps, 1]`, one logit per decoder step.
    pub stop_logits: Var,
    pub steps: usize,
}

/// Zero-pads a `[T, 80]` target to a multiple of `r` frames, returning the
/// padded tensor and the number of real frames.
pub fn pad_target(target: &Tensor, r: usize) -> Result<(Tensor, usize)> {
    if target.rank() != 2 || target.shape()[1] != N_MELS {
        return Err(ModelError::Contract(format!(
            "expected [T, {N_MELS}] target, got {:?}",
            target.shape()
        )));
    }
    let t = target.shape()[0];
    let padded = t.div_ceil(r) * r;
    let mut data = target.data().to_vec();
    data.resize(padded * N_MELS, 0.0);
    Ok((Tensor::new(vec![padded, N_MELS], data)?, t))
}

/// Decoder inputs for teacher forcing: a zero frame group for step 0, then
/// target group `s - 1` for step `s`, as `[steps, r*80]`.
fn shifted_groups(target: &Tensor, r: usize) -> Result<Tensor> {
    let t = target.shape()[0];
    let steps = t / r;
    let w = r * N_MELS;
    let mut data = vec![0.0; steps * w];
    data[w..].copy_from_slice(&target.data()[..(steps - 1) * w]);
    Ok(Tensor::new(vec![steps, w], data)?)
}

/// Pre-net, Transformer stack and output heads over `[steps, r*80]` inputs.
/// Returns `([steps, r*80] frames, [steps, 1] stop logits)`.
pub(crate) fn decoder_stack(
    g: &mut Graph,
    cfg: &ModelConfig,
    enc: &EncoderStates,
    inputs: Var,
) -> Result<(Var, Var)> {
    let steps = g.shape(inputs)[0];
    let mut x = dense(g, inputs, "dec.prenet.fc1")?;
    x = g.relu(x)?;
    x = g.dropout(x, cfg.prenet_dropout, true)?;
    x = dense(g, x, "dec.prenet.fc2")?;
    x = g.relu(x)?;
    x = g.dropout(x, cfg.prenet_dropout, true)?;
    x = dense(g, x, "dec.in")?;
    x = add_positions(g, x)?;
    x = g.dropout(x, cfg.dropout, false)?;

    let self_mask = causal_mask(steps);
    let cross_mask = key_mask(steps, &enc.valid);
    for l in 0..cfg.dec_layers {
        let pre = format!("dec.l{l}");
        let h = layer_norm(g, x, &format!("{pre}.ln1"))?;
        let ap = attn_params(g, &format!("{pre}.self"))?;
        let a = multi_head_attention(g, h, h, h, &ap, cfg.dec_heads, &self_mask)?;
        x = residual(g, x, a, cfg.dropout)?;
        let h = layer_norm(g, x, &format!("{pre}.ln2"))?;
        let ap = attn_params(g, &format!("{pre}.cross"))?;
        let a = multi_head_attention(g, h, enc.output, enc.output, &ap, cfg.dec_heads, &cross_mask)?;
        x = residual(g, x, a, cfg.dropout)?;
        let h = layer_norm(g, x, &format!("{pre}.ln3"))?;
        let f = feed_forward(g, h, &pre, cfg.dropout)?;
        x = residual(g, x, f, cfg.dropout)?;
    }
    let h = layer_norm(g, x, "dec.ln")?;
    let frames = dense(g, h, "dec.out")?;
    let stop = dense(g, h, "dec.stop")?;
    Ok((frames, stop))
}

/// Five-layer convolutional refinement over time, `[T, 80] -> [T, 80]`.
pub fn postnet(g: &mut Graph, cfg: &ModelConfig, mel: Var) -> Result<Var> {
    let t = g.shape(mel)[0];
    let x = g.t(mel)?;
    let mut x = g.reshape(x, &[N_MELS, t, 1])?;
    for j in 0..cfg.postnet_layers {
        let w = p(g, &format!("post.c{j}.w"))?;
        let b = p(g, &format!("post.c{j}.b"))?;
        x = g.conv2d(x, w, Some(b), (1, 1), Padding::Same)?;
        if j + 1 < cfg.postnet_layers {
            x = g.tanh(x)?;
            x = g.dropout(x, cfg.dropout, false)?;
        }
    }
    let x = g.reshape(x, &[N_MELS, t])?;
    Ok(g.t(x)?)
}

/// Applies the post-net to `[steps, r*80]` decoder frames.
pub(crate) fn finish(
    g: &mut Graph,
    cfg: &ModelConfig,
    frames: Var,
    stop_logits: Var,
) -> Result<DecoderOutput> {
    let steps = g.shape(frames)[0];
    let mel_before = g.reshape(frames, &[steps * cfg.reduction_factor, N_MELS])?;
    let post = postnet(g, cfg, mel_before)?;
    let mel_after = g.add(mel_before, post)?;
    Ok(DecoderOutput {
        mel_before,
        mel_after,
        postnet: post,
        stop_logits,
        steps,
    })
}

/// Teacher-forced decoding of a target already padded to a multiple of `r`
/// frames (see [`pad_target`]).
pub fn decode_spectrogram_teacher_forced(
    g: &mut Graph,
    cfg: &ModelConfig,
    enc: &EncoderStates,
    target: &Tensor,
) -> Result<DecoderOutput> {
    let r = cfg.reduction_factor;
    if target.rank() != 2 || target.shape()[1] != N_MELS {
        return Err(ModelError::Contract(format!(
            "expected [T, {N_MELS}] target, got {:?}",
            target.shape()
        )));
    }
    let t = target.shape()[0];
    if t == 0 {
        return Err(ModelError::EmptyInput("zero-frame target".into()));
    }
    if t % r != 0 {
        return Err(ModelError::Contract(format!(
            "target of {t} frames is not a multiple of the reduction factor {r}; pad it with pad_target"
        )));
    }
    let inputs = g.constant(shifted_groups(target, r)?);
    let (frames, stop) = decoder_stack(g, cfg, enc, inputs)?;
    finish(g, cfg, frames, stop)
}
