use ndiff::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::{DecoderOutput, ModelConfig, ModelError, Result};
use crate::audio::N_MELS;

/// Scalar loss components of one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub spec_loss: f64,
    pub stop_loss: f64,
    pub aux_src_loss: f64,
    pub aux_tgt_loss: f64,
    pub total: f64,
}

/// How components are combined into the total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossMode {
    /// `spec + stop + w_src·aux_src + w_tgt·aux_tgt` with the config's weights.
    Full,
    /// Auxiliary tasks only, e.g. `0.5·aux_src + 0.5·aux_tgt` for pre-training.
    AuxOnly { w_src: f64, w_tgt: f64 },
}

/// Supervision for one utterance.
#[derive(Debug, Clone, Copy)]
pub struct LossTargets<'a> {
    /// Normalised target mel padded to the decoder's frame count; `None` when
    /// the spectrogram decoder is not trained.
    pub mel: Option<&'a Tensor>,
    /// Real (unpadded) frames in `mel`.
    pub n_valid_frames: usize,
    /// Auxiliary targets as token ids, ending with EOS.
    pub src_tokens: &'a [usize],
    pub tgt_tokens: &'a [usize],
}

/// Unnormalised loss sums of one utterance and their element counts.
#[derive(Debug, Clone, Copy)]
pub struct UtteranceLoss {
    pub spec_sum: Option<Var>,
    pub spec_count: usize,
    pub stop_sum: Option<Var>,
    pub stop_count: usize,
    pub aux_src_sum: Var,
    pub src_count: usize,
    pub aux_tgt_sum: Var,
    pub tgt_count: usize,
}

/// Graph nodes of the pooled loss components.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub spec: Var,
    pub stop: Var,
    pub aux_src: Var,
    pub aux_tgt: Var,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        LossBreakdown {
            spec_loss: g.value(self.spec).item(),
            stop_loss: g.value(self.stop).item(),
            aux_src_loss: g.value(self.aux_src).item(),
            aux_tgt_loss: g.value(self.aux_tgt).item(),
            total: g.value(self.total).item(),
        }
    }
}

/// Sum over tokens of the label-smoothed cross-entropy
/// `-Σ_v q_v log p_v` with `q = (1-ε)·onehot + ε/V`.
fn smoothed_ce_sum(g: &mut Graph, logits: Var, targets: &[usize], eps: f64) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != targets.len() {
        return Err(ModelError::Contract(format!(
            "{} targets for logits {shape:?}",
            targets.len()
        )));
    }
    let v = shape[1];
    let mut q = vec![eps / v as f64; targets.len() * v];
    for (i, &t) in targets.iter().enumerate() {
        if t >= v {
            return Err(ModelError::Vocab { index: t, size: v });
        }
        q[i * v + t] += 1.0 - eps;
    }
    let q = g.constant(Tensor::new(shape, q)?);
    let lp = g.log_softmax(logits)?;
    let prod = g.mul(lp, q)?;
    let s = g.sum(prod)?;
    Ok(g.scale(s, -1.0)?)
}

/// `Σ |d| + d²` over the unmasked rows of `pred - target`.
fn l1_l2_sum(g: &mut Graph, pred: Var, target: Var, mask: Var) -> Result<Var> {
    let d = g.sub(pred, target)?;
    let d = g.mul(d, mask)?;
    let a = g.abs(d)?;
    let sq = g.mul(d, d)?;
    let both = g.add(a, sq)?;
    Ok(g.sum(both)?)
}

/// Per-utterance loss sums. `out` may be `None` only when `targets.mel` is too.
pub fn utterance_loss_terms(
    g: &mut Graph,
    cfg: &ModelConfig,
    out: Option<&DecoderOutput>,
    aux_src_logits: Var,
    aux_tgt_logits: Var,
    targets: &LossTargets,
) -> Result<UtteranceLoss> {
    let aux_src_sum = smoothed_ce_sum(g, aux_src_logits, targets.src_tokens, cfg.label_smoothing)?;
    let aux_tgt_sum = smoothed_ce_sum(g, aux_tgt_logits, targets.tgt_tokens, cfg.label_smoothing)?;
    let mut terms = UtteranceLoss {
        spec_sum: None,
        spec_count: 0,
        stop_sum: None,
        stop_count: 0,
        aux_src_sum,
        src_count: targets.src_tokens.len(),
        aux_tgt_sum,
        tgt_count: targets.tgt_tokens.len(),
    };
    let (out, mel) = match (out, targets.mel) {
        (Some(o), Some(m)) => (o, m),
        (None, None) => return Ok(terms),
        _ => {
            return Err(ModelError::Contract(
                "decoder output and target mel must be given together".into(),
            ))
        }
    };
    let t = g.shape(out.mel_before)[0];
    if mel.shape() != [t, N_MELS] || targets.n_valid_frames > t {
        return Err(ModelError::Contract(format!(
            "target {:?} with {} valid frames for {t} predicted frames",
            mel.shape(),
            targets.n_valid_frames
        )));
    }
    let n_valid = targets.n_valid_frames;
    let mask: Vec<f64> = (0..t * N_MELS)
        .map(|i| if i / N_MELS < n_valid { 1.0 } else { 0.0 })
        .collect();
    let mask = g.constant(Tensor::new(vec![t, N_MELS], mask)?);
    let target = g.constant(mel.clone());
    let before = l1_l2_sum(g, out.mel_before, target, mask)?;
    let after = l1_l2_sum(g, out.mel_after, target, mask)?;
    terms.spec_sum = Some(g.add(before, after)?);
    terms.spec_count = n_valid * N_MELS;

    // Weighted BCE: w·y·softplus(-z) + (1-y)·softplus(z), y = 1 on the step
    // holding the last real frame, steps after it are padding.
    let r = cfg.reduction_factor;
    let real_steps = n_valid.div_ceil(r);
    let steps = out.steps;
    let (mut pos, mut neg) = (vec![0.0; steps], vec![0.0; steps]);
    for s in 0..real_steps {
        if s + 1 == real_steps {
            pos[s] = cfg.stop_pos_weight;
        } else {
            neg[s] = 1.0;
        }
    }
    let z = out.stop_logits;
    let nz = g.scale(z, -1.0)?;
    let sp_pos = g.softplus(nz)?;
    let sp_neg = g.softplus(z)?;
    let cpos = g.constant(Tensor::new(vec![steps, 1], pos)?);
    let cneg = g.constant(Tensor::new(vec![steps, 1], neg)?);
    let a = g.mul(sp_pos, cpos)?;
    let b = g.mul(sp_neg, cneg)?;
    let ab = g.add(a, b)?;
    terms.stop_sum = Some(g.sum(ab)?);
    terms.stop_count = real_steps;
    Ok(terms)
}

fn pooled(g: &mut Graph, sums: &[Var], count: usize) -> Result<Var> {
    if sums.is_empty() || count == 0 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let mut acc = sums[0];
    for &s in &sums[1..] {
        acc = g.add(acc, s)?;
    }
    Ok(g.scale(acc, 1.0 / count as f64)?)
}

/// Pools per-utterance sums into batch means and forms the weighted total.
pub fn combine_losses(
    g: &mut Graph,
    cfg: &ModelConfig,
    terms: &[UtteranceLoss],
    mode: LossMode,
) -> Result<LossVars> {
    if terms.is_empty() {
        return Err(ModelError::DegenerateBatch("no utterances".into()));
    }
    let count = |f: fn(&UtteranceLoss) -> usize| terms.iter().map(f).sum::<usize>();
    let collect = |f: fn(&UtteranceLoss) -> Option<Var>| terms.iter().filter_map(f).collect::<Vec<_>>();
    let aux_src = pooled(g, &collect(|t| Some(t.aux_src_sum)), count(|t| t.src_count))?;
    let aux_tgt = pooled(g, &collect(|t| Some(t.aux_tgt_sum)), count(|t| t.tgt_count))?;
    let (w_src, w_tgt) = match mode {
        LossMode::Full => (cfg.w_src, cfg.w_tgt),
        LossMode::AuxOnly { w_src, w_tgt } => (w_src, w_tgt),
    };
    let ws = g.scale(aux_src, w_src)?;
    let wt = g.scale(aux_tgt, w_tgt)?;
    let aux = g.add(ws, wt)?;
    let (spec, stop, total) = match mode {
        LossMode::Full => {
            let n_spec = count(|t| t.spec_count);
            if n_spec == 0 {
                return Err(ModelError::DegenerateBatch(
                    "every target frame is padding".into(),
                ));
            }
            let spec = pooled(g, &collect(|t| t.spec_sum), n_spec)?;
            let stop = pooled(g, &collect(|t| t.stop_sum), count(|t| t.stop_count))?;
            let main = g.add(spec, stop)?;
            let total = g.add(main, aux)?;
            (spec, stop, total)
        }
        LossMode::AuxOnly { .. } => {
            if count(|t| t.src_count) + count(|t| t.tgt_count) == 0 {
                return Err(ModelError::DegenerateBatch("no auxiliary tokens".into()));
            }
            let zero = g.constant(Tensor::scalar(0.0));
            (zero, zero, aux)
        }
    };
    Ok(LossVars {
        spec,
        stop,
        aux_src,
        aux_tgt,
        total,
    })
}

/// Full multi-task loss of a single utterance.
pub fn total_loss(
    g: &mut Graph,
    cfg: &ModelConfig,
    out: &DecoderOutput,
    aux_src_logits: Var,
    aux_tgt_logits: Var,
    targets: &LossTargets,
) -> Result<LossVars> {
    let terms = utterance_loss_terms(g, cfg, Some(out), aux_src_logits, aux_tgt_logits, targets)?;
    combine_losses(g, cfg, &[terms], LossMode::Full)
}
