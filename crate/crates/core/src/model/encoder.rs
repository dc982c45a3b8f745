use ndiff::{
    key_mask, linear, multi_head_attention, sinusoidal_positions, AttentionParams, Graph, Padding,
    Tensor, Var,
};

use super::{ModelConfig, ModelError, PromptAttachment, PromptCategory, Result};
use crate::audio::N_MELS;

pub(crate) const LN_EPS: f64 = 1e-5;

pub(crate) fn p(g: &mut Graph, name: &str) -> Result<Var> {
    Ok(g.param_by_name(name)?)
}

pub(crate) fn attn_params(g: &mut Graph, prefix: &str) -> Result<AttentionParams> {
    let mut get = |s: &str| p(g, &format!("{prefix}.{s}"));
    let wk = get("wk")?;
    let d_model = g.shape(wk)[1];
    let bk = g.constant(Tensor::zeros(&[d_model]));
    let mut get = |s: &str| p(g, &format!("{prefix}.{s}"));
    Ok(AttentionParams {
        wq: get("wq")?,
        bq: get("bq")?,
        wk,
        bk,
        wv: get("wv")?,
        bv: get("bv")?,
        wo: get("wo")?,
        bo: get("bo")?,
    })
}

pub(crate) fn layer_norm(g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
    let gain = p(g, &format!("{prefix}.g"))?;
    let bias = p(g, &format!("{prefix}.b"))?;
    Ok(g.layer_norm(x, gain, bias, LN_EPS)?)
}

pub(crate) fn dense(g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
    let w = p(g, &format!("{prefix}.w"))?;
    let b = p(g, &format!("{prefix}.b"))?;
    Ok(linear(g, x, w, b)?)
}

/// Position-wise `ff2(dropout(relu(ff1(x))))`.
pub(crate) fn feed_forward(g: &mut Graph, x: Var, prefix: &str, dropout: f64) -> Result<Var> {
    let h = dense(g, x, &format!("{prefix}.ff1"))?;
    let h = g.relu(h)?;
    let h = g.dropout(h, dropout, false)?;
    dense(g, h, &format!("{prefix}.ff2"))
}

/// `x + dropout(y)`.
pub(crate) fn residual(g: &mut Graph, x: Var, y: Var, dropout: f64) -> Result<Var> {
    let y = g.dropout(y, dropout, false)?;
    Ok(g.add(x, y)?)
}

pub(crate) fn add_positions(g: &mut Graph, x: Var) -> Result<Var> {
    let (len, dim) = (g.shape(x)[0], g.shape(x)[1]);
    let pos = g.constant(sinusoidal_positions(len, dim)?);
    Ok(g.add(x, pos)?)
}

/// Length after two stride-2 convolutions with same padding.
pub fn subsampled_len(t: usize) -> usize {
    t.div_ceil(2).div_ceil(2)
}

/// Per-layer encoder activations of one utterance.
#[derive(Debug, Clone)]
pub struct EncoderStates {
    /// Output of each encoder layer, `[T', enc_dim]`, bottom layer first.
    pub layers: Vec<Var>,
    /// Final layer after the closing layer norm; the spectrogram decoder reads this.
    pub output: Var,
    /// Attendable positions (prompt position included when present).
    pub valid: Vec<bool>,
}

impl EncoderStates {
    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    /// State of a 1-based encoder layer.
    pub fn tap(&self, layer: usize) -> Result<Var> {
        if layer == 0 || layer > self.layers.len() {
            return Err(ModelError::Contract(format!(
                "tap {layer} outside 1..={}",
                self.layers.len()
            )));
        }
        Ok(self.layers[layer - 1])
    }
}

/// Two 3x3 stride-2 convolutions over `(time, mel)` followed by a projection
/// to `enc_dim`: `[T, 80] -> [ceil(ceil(T/2)/2), enc_dim]`.
pub fn conv_subsample(g: &mut Graph, mel: Var) -> Result<Var> {
    let shape = g.shape(mel).to_vec();
    if shape.len() != 2 || shape[1] != N_MELS {
        return Err(ModelError::Contract(format!(
            "expected [T, {N_MELS}] features, got {shape:?}"
        )));
    }
    let t = shape[0];
    if t == 0 {
        return Err(ModelError::EmptyInput("zero-frame input to the encoder".into()));
    }
    let x = g.reshape(mel, &[1, t, N_MELS])?;
    let mut x = x;
    for name in ["enc.sub.conv1", "enc.sub.conv2"] {
        let w = p(g, &format!("{name}.w"))?;
        let b = p(g, &format!("{name}.b"))?;
        x = g.conv2d(x, w, Some(b), (2, 2), Padding::Same)?;
        x = g.relu(x)?;
    }
    let s = g.shape(x).to_vec();
    let (c, t2, f2) = (s[0], s[1], s[2]);
    let x = g.transpose(x, 0, 1)?;
    let x = g.reshape(x, &[t2, c * f2])?;
    dense(g, x, "enc.sub.proj")
}

/// Runs the encoder on `[T, 80]` normalised features.
///
/// With a prompt, one embedding row is prepended: before the convolutions for
/// [`PromptAttachment::Frame`], after them otherwise.
pub fn encode(
    g: &mut Graph,
    cfg: &ModelConfig,
    features: &Tensor,
    prompt: Option<PromptCategory>,
) -> Result<EncoderStates> {
    if prompt.is_some() && !cfg.prompt_enabled {
        return Err(ModelError::Config(
            "prompt supplied but prompt_enabled is false".into(),
        ));
    }
    if features.rank() != 2 || features.shape()[0] == 0 {
        return Err(ModelError::EmptyInput(format!(
            "encoder input of shape {:?}",
            features.shape()
        )));
    }
    let mut mel = g.constant(features.clone());
    if let (Some(cat), PromptAttachment::Frame) = (prompt, cfg.prompt_attachment) {
        let table = p(g, "prompt.frame")?;
        let row = g.embedding(table, &[cat.index()])?;
        mel = g.concat(&[row, mel], 0)?;
    }
    let mut x = conv_subsample(g, mel)?;
    if let (Some(cat), PromptAttachment::Token) = (prompt, cfg.prompt_attachment) {
        let table = p(g, "prompt.emb")?;
        let row = g.embedding(table, &[cat.index()])?;
        let row = g.scale(row, (cfg.enc_dim as f64).sqrt())?;
        x = g.concat(&[row, x], 0)?;
    }
    let mut x = add_positions(g, x)?;
    x = g.dropout(x, cfg.dropout, false)?;
    let len = g.shape(x)[0];
    let valid = vec![true; len];
    let mask = key_mask(len, &valid);
    let mut layers = Vec::with_capacity(cfg.enc_layers);
    for l in 0..cfg.enc_layers {
        let pre = format!("enc.l{l}");
        let h = layer_norm(g, x, &format!("{pre}.ln1"))?;
        let ap = attn_params(g, &format!("{pre}.attn"))?;
        let a = multi_head_attention(g, h, h, h, &ap, cfg.enc_heads, &mask)?;
        x = residual(g, x, a, cfg.dropout)?;
        let h = layer_norm(g, x, &format!("{pre}.ln2"))?;
        let f = feed_forward(g, h, &pre, cfg.dropout)?;
        x = residual(g, x, f, cfg.dropout)?;
        layers.push(x);
    }
    let output = layer_norm(g, x, "enc.ln")?;
    Ok(EncoderStates {
        layers,
        output,
        valid,
    })
}
