use ndiff::Graph;
use serde::{Deserialize, Serialize};

use super::{EvalError, Result};
use crate::model::{decode_auxiliary_teacher_forced, AuxKind, EncoderStates, ModelConfig, BOS, EOS, PHONE_OFFSET};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Greedy,
    Beam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    pub beam_size: usize,
    /// Most phones emitted; a hypothesis reaching it ends without EOS.
    pub max_len: usize,
    /// Exponent α of the `((5 + L) / 6)^α` length normaliser.
    pub length_penalty: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig::greedy(64)
    }
}

impl DecodeConfig {
    pub fn greedy(max_len: usize) -> Self {
        DecodeConfig {
            mode: DecodeMode::Greedy,
            beam_size: 1,
            max_len,
            length_penalty: 0.6,
        }
    }

    pub fn beam(beam_size: usize, max_len: usize) -> Self {
        DecodeConfig {
            mode: DecodeMode::Beam,
            beam_size,
            max_len,
            length_penalty: 0.6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(EvalError::Contract("beam_size must be at least 1".into()));
        }
        if self.mode == DecodeMode::Greedy && self.beam_size != 1 {
            return Err(EvalError::Contract("greedy decoding uses beam_size 1".into()));
        }
        if !self.length_penalty.is_finite() || self.length_penalty < 0.0 {
            return Err(EvalError::Contract("length_penalty must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// `((5 + len) / 6)^alpha`; `len` counts emitted tokens including EOS.
pub fn length_normalizer(len: usize, alpha: f64) -> f64 {
    ((5.0 + len as f64) / 6.0).powf(alpha)
}

/// A finished decode.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Phone ids, reserved tokens removed.
    pub phones: Vec<usize>,
    pub log_prob: f64,
    /// Whether the hypothesis ended with EOS rather than at `max_len`.
    pub ended: bool,
    /// `log_prob` over the length normaliser.
    pub score: f64,
}

impl Hypothesis {
    fn finish(phones: Vec<usize>, log_prob: f64, ended: bool, alpha: f64) -> Self {
        let len = phones.len() + usize::from(ended);
        Hypothesis {
            score: log_prob / length_normalizer(len, alpha),
            phones,
            log_prob,
            ended,
        }
    }
}

/// Log-probabilities of the next token after `tokens` (which start with BOS).
fn next_log_probs(g: &mut Graph, cfg: &ModelConfig, enc: &EncoderStates, which: AuxKind, tokens: &[usize]) -> Result<Vec<f64>> {
    let logits = decode_auxiliary_teacher_forced(g, cfg, enc, which, tokens)?;
    let row = g.value(logits).row(tokens.len() - 1);
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    let out: Vec<f64> = row.iter().map(|v| v - lse).collect();
    if out.iter().any(|v| v.is_nan()) {
        return Err(EvalError::Contract("non-finite decoder output".into()));
    }
    Ok(out)
}

fn greedy(g: &mut Graph, cfg: &ModelConfig, enc: &EncoderStates, which: AuxKind, dc: &DecodeConfig) -> Result<Hypothesis> {
    let mut tokens = vec![BOS];
    let mut log_prob = 0.0;
    let mut ended = false;
    while tokens.len() - 1 < dc.max_len {
        let lp = next_log_probs(g, cfg, enc, which, &tokens)?;
        // BOS is never emitted; ties go to the lowest id.
        let mut best = EOS;
        for t in EOS + 1..lp.len() {
            if lp[t] > lp[best] {
                best = t;
            }
        }
        log_prob += lp[best];
        if best == EOS {
            ended = true;
            break;
        }
        tokens.push(best);
    }
    let phones = tokens[1..].iter().map(|t| t - PHONE_OFFSET).collect();
    Ok(Hypothesis::finish(phones, log_prob, ended, dc.length_penalty))
}

/// Each step ranks every one-token extension of the live hypotheses by raw
/// log-probability and keeps the best `beam_size`; extensions ending in EOS
/// leave the beam as finished. The result is the finished hypothesis with
/// the best length-normalised score.
fn beam(g: &mut Graph, cfg: &ModelConfig, enc: &EncoderStates, which: AuxKind, dc: &DecodeConfig) -> Result<Hypothesis> {
    let mut live: Vec<(Vec<usize>, f64)> = vec![(vec![BOS], 0.0)];
    let mut finished: Vec<Hypothesis> = Vec::new();
    let phones_of = |tokens: &[usize]| tokens[1..].iter().map(|t| t - PHONE_OFFSET).collect::<Vec<_>>();
    for _ in 0..dc.max_len {
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (i, (tokens, lp0)) in live.iter().enumerate() {
            let lp = next_log_probs(g, cfg, enc, which, tokens)?;
            cands.extend((EOS..lp.len()).map(|t| (lp0 + lp[t], i, t)));
        }
        // Stable: equal scores keep (hypothesis, token) order.
        cands.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut next = Vec::new();
        for &(lp, i, t) in cands.iter().take(dc.beam_size) {
            if t == EOS {
                finished.push(Hypothesis::finish(phones_of(&live[i].0), lp, true, dc.length_penalty));
            } else {
                let mut tokens = live[i].0.clone();
                tokens.push(t);
                next.push((tokens, lp));
            }
        }
        live = next;
        if live.is_empty() {
            break;
        }
    }
    for (tokens, lp) in &live {
        finished.push(Hypothesis::finish(phones_of(tokens), *lp, false, dc.length_penalty));
    }
    let mut best = finished.swap_remove(0);
    for h in finished {
        // Earlier hypotheses win ties.
        if h.score > best.score {
            best = h;
        }
    }
    Ok(best)
}

/// Autoregressive auxiliary decode over encoder states already on `g`.
pub fn decode_hypothesis(
    g: &mut Graph,
    cfg: &ModelConfig,
    enc: &EncoderStates,
    which: AuxKind,
    dc: &DecodeConfig,
) -> Result<Hypothesis> {
    dc.validate()?;
    match dc.mode {
        DecodeMode::Greedy => greedy(g, cfg, enc, which, dc),
        DecodeMode::Beam => beam(g, cfg, enc, which, dc),
    }
}

/// Phone ids decoded by the `which` auxiliary decoder.
pub fn decode_phonemes(
    g: &mut Graph,
    cfg: &ModelConfig,
    enc: &EncoderStates,
    which: AuxKind,
    dc: &DecodeConfig,
) -> Result<Vec<usize>> {
    Ok(decode_hypothesis(g, cfg, enc, which, dc)?.phones)
}
