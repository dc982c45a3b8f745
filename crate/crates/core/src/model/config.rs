use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelError, Result};

/// Where the prompt embedding enters the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PromptAttachment {
    /// One learned `enc_dim` token prepended after convolutional subsampling.
    #[default]
    Token,
    /// One learned 80-dim frame prepended to the mel input before the convolutions.
    Frame,
}

/// Architecture hyperparameters.
///
/// Phone vocabulary sizes include the two reserved ids `BOS = 0` and `EOS = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub enc_layers: usize,
    pub enc_dim: usize,
    pub enc_heads: usize,
    pub ffn_dim: usize,
    pub dec_layers: usize,
    pub dec_dim: usize,
    pub dec_heads: usize,
    pub dec_ffn_dim: usize,
    pub prenet_hidden: usize,
    pub prenet_bottleneck: usize,
    /// Pre-net dropout; applied at inference too.
    pub prenet_dropout: f64,
    pub reduction_factor: usize,
    pub aux_src_layers: usize,
    pub aux_tgt_layers: usize,
    pub aux_dim: usize,
    pub aux_heads: usize,
    pub aux_ffn_dim: usize,
    /// 1-based encoder layer feeding the source (ASR) auxiliary decoder.
    pub tap_src: usize,
    /// 1-based encoder layer feeding the target (ST) auxiliary decoder.
    pub tap_tgt: usize,
    pub w_src: f64,
    pub w_tgt: f64,
    pub n_mels: usize,
    pub src_phone_vocab: usize,
    pub tgt_phone_vocab: usize,
    pub prompt_enabled: bool,
    #[serde(default)]
    pub prompt_attachment: PromptAttachment,
    pub subsample_channels: usize,
    pub postnet_layers: usize,
    pub postnet_channels: usize,
    pub postnet_kernel: usize,
    pub dropout: f64,
    pub label_smoothing: f64,
    pub stop_pos_weight: f64,
}

impl ModelConfig {
    /// Spanish-English conversational setup.
    pub fn fisher() -> Self {
        ModelConfig {
            enc_layers: 12,
            enc_dim: 512,
            enc_heads: 8,
            ffn_dim: 2048,
            dec_layers: 6,
            dec_dim: 512,
            dec_heads: 8,
            dec_ffn_dim: 2048,
            prenet_hidden: 256,
            prenet_bottleneck: 32,
            prenet_dropout: 0.5,
            reduction_factor: 4,
            aux_src_layers: 1,
            aux_tgt_layers: 1,
            aux_dim: 64,
            aux_heads: 4,
            aux_ffn_dim: 256,
            tap_src: 6,
            tap_tgt: 9,
            w_src: 0.3,
            w_tgt: 0.3,
            n_mels: 80,
            src_phone_vocab: 64,
            tgt_phone_vocab: 64,
            prompt_enabled: false,
            prompt_attachment: PromptAttachment::Token,
            subsample_channels: 256,
            postnet_layers: 5,
            postnet_channels: 512,
            postnet_kernel: 5,
            dropout: 0.1,
            label_smoothing: 0.1,
            stop_pos_weight: 5.0,
        }
    }

    /// English-Chinese TED setup: deeper auxiliary decoders tapped lower.
    pub fn teden2zh() -> Self {
        ModelConfig {
            aux_src_layers: 4,
            aux_tgt_layers: 4,
            tap_src: 4,
            tap_tgt: 9,
            ..Self::fisher()
        }
    }

    /// Desk-scale configuration for the synthetic corpus.
    pub fn toy() -> Self {
        ModelConfig {
            enc_layers: 2,
            enc_dim: 64,
            enc_heads: 4,
            ffn_dim: 256,
            dec_layers: 2,
            dec_dim: 64,
            dec_heads: 4,
            dec_ffn_dim: 256,
            prenet_hidden: 64,
            prenet_bottleneck: 32,
            aux_src_layers: 1,
            aux_tgt_layers: 1,
            aux_dim: 32,
            aux_heads: 2,
            aux_ffn_dim: 128,
            tap_src: 1,
            tap_tgt: 2,
            src_phone_vocab: 32,
            tgt_phone_vocab: 32,
            subsample_channels: 8,
            postnet_channels: 64,
            ..Self::fisher()
        }
    }

    /// Two-layer, width-16 instance with dropout disabled, small enough for
    /// finite-difference checking of the whole loss.
    pub fn tiny() -> Self {
        ModelConfig {
            enc_layers: 2,
            enc_dim: 16,
            enc_heads: 2,
            ffn_dim: 32,
            dec_layers: 2,
            dec_dim: 16,
            dec_heads: 2,
            dec_ffn_dim: 32,
            prenet_hidden: 8,
            prenet_bottleneck: 4,
            prenet_dropout: 0.0,
            reduction_factor: 2,
            aux_src_layers: 1,
            aux_tgt_layers: 1,
            aux_dim: 8,
            aux_heads: 2,
            aux_ffn_dim: 16,
            tap_src: 1,
            tap_tgt: 2,
            src_phone_vocab: 6,
            tgt_phone_vocab: 6,
            subsample_channels: 2,
            postnet_channels: 4,
            dropout: 0.0,
            ..Self::fisher()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return bad("encoder and decoder need at least one layer".into());
        }
        if !(1 <= self.tap_src && self.tap_src <= self.tap_tgt && self.tap_tgt <= self.enc_layers) {
            return bad(format!(
                "taps must satisfy 1 <= tap_src ({}) <= tap_tgt ({}) <= enc_layers ({})",
                self.tap_src, self.tap_tgt, self.enc_layers
            ));
        }
        if self.reduction_factor == 0 {
            return bad("reduction_factor must be at least 1".into());
        }
        if !(self.w_src >= 0.0 && self.w_tgt >= 0.0) {
            return bad(format!("negative loss weight {}/{}", self.w_src, self.w_tgt));
        }
        for (name, dim, heads) in [
            ("enc", self.enc_dim, self.enc_heads),
            ("dec", self.dec_dim, self.dec_heads),
            ("aux", self.aux_dim, self.aux_heads),
        ] {
            if heads == 0 || dim % heads != 0 {
                return bad(format!("{name}_dim {dim} not divisible by {heads} heads"));
            }
            if dim % 2 != 0 {
                return bad(format!("{name}_dim {dim} must be even for positional encodings"));
            }
        }
        if self.n_mels != crate::audio::N_MELS {
            return bad(format!("n_mels must be {}", crate::audio::N_MELS));
        }
        if self.src_phone_vocab < 3 || self.tgt_phone_vocab < 3 {
            return bad("phone vocabularies need BOS, EOS and at least one phone".into());
        }
        if self.postnet_layers < 2 || self.postnet_kernel % 2 == 0 {
            return bad("post-net needs at least 2 layers and an odd kernel".into());
        }
        for (name, p) in [("dropout", self.dropout), ("prenet_dropout", self.prenet_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("{name} {p} not in [0, 1)"));
            }
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!("label_smoothing {} not in [0, 1)", self.label_smoothing));
        }
        if self.stop_pos_weight <= 0.0 {
            return bad("stop_pos_weight must be positive".into());
        }
        let mins = [
            self.enc_dim,
            self.ffn_dim,
            self.dec_dim,
            self.dec_ffn_dim,
            self.prenet_hidden,
            self.prenet_bottleneck,
            self.aux_ffn_dim,
            self.subsample_channels,
            self.postnet_channels,
        ];
        if mins.contains(&0) {
            return bad("all layer widths must be positive".into());
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
