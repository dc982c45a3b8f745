use ndiff::{causal_mask, key_mask, multi_head_attention, Graph, Var};
use serde::{Deserialize, Serialize};

use super::encoder::{add_positions, attn_params, dense, feed_forward, layer_norm, p, residual};
use super::{EncoderStates, ModelConfig, ModelError, Result, BOS, EOS, PHONE_OFFSET};

/// Which auxiliary phone decoder: source transcription or target translation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AuxKind {
    Source,
    Target,
}

impl AuxKind {
    pub fn prefix(self) -> &'static str {
        match self {
            AuxKind::Source => "aux_src",
            AuxKind::Target => "aux_tgt",
        }
    }

    pub fn tap(self, cfg: &ModelConfig) -> usize {
        match self {
            AuxKind::Source => cfg.tap_src,
            AuxKind::Target => cfg.tap_tgt,
        }
    }

    pub fn layers(self, cfg: &ModelConfig) -> usize {
        match self {
            AuxKind::Source => cfg.aux_src_layers,
            AuxKind::Target => cfg.aux_tgt_layers,
        }
    }

    pub fn vocab(self, cfg: &ModelConfig) -> usize {
        match self {
            AuxKind::Source => cfg.src_phone_vocab,
            AuxKind::Target => cfg.tgt_phone_vocab,
        }
    }
}

/// Teacher-forcing input `[BOS, t_1..t_n]` and target `[t_1..t_n, EOS]` for
/// a phone sequence, with phones shifted past the reserved ids.
pub fn aux_io(phones: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let toks: Vec<usize> = phones.iter().map(|p| p + PHONE_OFFSET).collect();
    let mut input = Vec::with_capacity(toks.len() + 1);
    input.push(BOS);
    input.extend_from_slice(&toks);
    let mut target = toks;
    target.push(EOS);
    (input, target)
}

/// Logits `[L, vocab]` of one auxiliary decoder for token ids `input`
/// (starting with BOS). Cross-attention reads only the tapped encoder layer.
pub fn decode_auxiliary_teacher_forced(
    g: &mut Graph,
    cfg: &ModelConfig,
    enc: &EncoderStates,
    which: AuxKind,
    input: &[usize],
) -> Result<Var> {
    let vocab = which.vocab(cfg);
    if let Some(&bad) = input.iter().find(|&&t| t >= vocab) {
        return Err(ModelError::Vocab {
            index: bad,
            size: vocab,
        });
    }
    if input.first() != Some(&BOS) {
        return Err(ModelError::Contract(
            "auxiliary decoder input must start with BOS".into(),
        ));
    }
    let pre = which.prefix();
    let memory = enc.tap(which.tap(cfg))?;
    let memory = layer_norm(g, memory, &format!("{pre}.mem_ln"))?;

    let table = p(g, &format!("{pre}.emb"))?;
    let x = g.embedding(table, input)?;
    let x = g.scale(x, (cfg.aux_dim as f64).sqrt())?;
    let mut x = add_positions(g, x)?;
    x = g.dropout(x, cfg.dropout, false)?;
    let len = input.len();
    let self_mask = causal_mask(len);
    let cross_mask = key_mask(len, &enc.valid);
    for l in 0..which.layers(cfg) {
        let lp = format!("{pre}.l{l}");
        let h = layer_norm(g, x, &format!("{lp}.ln1"))?;
        let ap = attn_params(g, &format!("{lp}.self"))?;
        let a = multi_head_attention(g, h, h, h, &ap, cfg.aux_heads, &self_mask)?;
        x = residual(g, x, a, cfg.dropout)?;
        let h = layer_norm(g, x, &format!("{lp}.ln2"))?;
        let ap = attn_params(g, &format!("{lp}.cross"))?;
        let a = multi_head_attention(g, h, memory, memory, &ap, cfg.aux_heads, &cross_mask)?;
        x = residual(g, x, a, cfg.dropout)?;
        let h = layer_norm(g, x, &format!("{lp}.ln3"))?;
        let f = feed_forward(g, h, &lp, cfg.dropout)?;
        x = residual(g, x, f, cfg.dropout)?;
    }
    let h = layer_norm(g, x, &format!("{pre}.ln"))?;
    dense(g, h, &format!("{pre}.out"))
}
