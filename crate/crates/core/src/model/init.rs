use ndiff::{ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ModelConfig, PromptAttachment, Result};
use crate::audio::N_MELS;

#[derive(Debug, Clone, Copy)]
pub(crate) enum Init {
    Zeros,
    Ones,
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    Uniform { fan_in: usize, fan_out: usize },
    /// Normal with the given standard deviation.
    Normal(f64),
}

type Spec = (String, Vec<usize>, Init);

fn linear(out: &mut Vec<Spec>, name: &str, d_in: usize, d_out: usize) {
    out.push((
        format!("{name}.w"),
        vec![d_in, d_out],
        Init::Uniform {
            fan_in: d_in,
            fan_out: d_out,
        },
    ));
    out.push((format!("{name}.b"), vec![d_out], Init::Zeros));
}

fn layer_norm(out: &mut Vec<Spec>, name: &str, d: usize) {
    out.push((format!("{name}.g"), vec![d], Init::Ones));
    out.push((format!("{name}.b"), vec![d], Init::Zeros));
}

fn attention(out: &mut Vec<Spec>, name: &str, d_q: usize, d_kv: usize, d_model: usize) {
    for (p, d_in) in [("q", d_q), ("k", d_kv), ("v", d_kv), ("o", d_model)] {
        out.push((
            format!("{name}.w{p}"),
            vec![d_in, d_model],
            Init::Uniform {
                fan_in: d_in,
                fan_out: d_model,
            },
        ));
        // A key bias shifts every score of a query equally, which softmax
        // cancels, so it is omitted.
        if p != "k" {
            out.push((format!("{name}.b{p}"), vec![d_model], Init::Zeros));
        }
    }
}

fn conv(out: &mut Vec<Spec>, name: &str, c_out: usize, c_in: usize, kh: usize, kw: usize) {
    out.push((
        format!("{name}.w"),
        vec![c_out, c_in, kh, kw],
        Init::Uniform {
            fan_in: c_in * kh * kw,
            fan_out: c_out * kh * kw,
        },
    ));
    out.push((format!("{name}.b"), vec![c_out], Init::Zeros));
}

fn aux_decoder(out: &mut Vec<Spec>, prefix: &str, cfg: &ModelConfig, layers: usize, vocab: usize) {
    let d = cfg.aux_dim;
    out.push((
        format!("{prefix}.emb"),
        vec![vocab, d],
        Init::Normal((d as f64).powf(-0.5)),
    ));
    layer_norm(out, &format!("{prefix}.mem_ln"), cfg.enc_dim);
    for l in 0..layers {
        let p = format!("{prefix}.l{l}");
        layer_norm(out, &format!("{p}.ln1"), d);
        attention(out, &format!("{p}.self"), d, d, d);
        layer_norm(out, &format!("{p}.ln2"), d);
        attention(out, &format!("{p}.cross"), d, cfg.enc_dim, d);
        layer_norm(out, &format!("{p}.ln3"), d);
        linear(out, &format!("{p}.ff1"), d, cfg.aux_ffn_dim);
        linear(out, &format!("{p}.ff2"), cfg.aux_ffn_dim, d);
    }
    layer_norm(out, &format!("{prefix}.ln"), d);
    linear(out, &format!("{prefix}.out"), d, vocab);
}

/// Width of the flattened subsampler output: channels times the mel axis after
/// two stride-2 convolutions.
pub(crate) fn subsample_width(cfg: &ModelConfig) -> usize {
    cfg.subsample_channels * N_MELS.div_ceil(2).div_ceil(2)
}

/// Every parameter in creation order with its shape and initialiser.
pub(crate) fn param_shapes(cfg: &ModelConfig) -> Vec<Spec> {
    let mut s = Vec::new();
    let c = cfg.subsample_channels;
    conv(&mut s, "enc.sub.conv1", c, 1, 3, 3);
    conv(&mut s, "enc.sub.conv2", c, c, 3, 3);
    linear(&mut s, "enc.sub.proj", subsample_width(cfg), cfg.enc_dim);
    if cfg.prompt_enabled {
        let (name, width) = match cfg.prompt_attachment {
            PromptAttachment::Token => ("prompt.emb", cfg.enc_dim),
            PromptAttachment::Frame => ("prompt.frame", N_MELS),
        };
        s.push((
            name.to_string(),
            vec![2, width],
            Init::Normal((cfg.enc_dim as f64).powf(-0.5)),
        ));
    }
    let d = cfg.enc_dim;
    for l in 0..cfg.enc_layers {
        let p = format!("enc.l{l}");
        layer_norm(&mut s, &format!("{p}.ln1"), d);
        attention(&mut s, &format!("{p}.attn"), d, d, d);
        layer_norm(&mut s, &format!("{p}.ln2"), d);
        linear(&mut s, &format!("{p}.ff1"), d, cfg.ffn_dim);
        linear(&mut s, &format!("{p}.ff2"), cfg.ffn_dim, d);
    }
    layer_norm(&mut s, "enc.ln", d);

    let r80 = cfg.reduction_factor * N_MELS;
    let dd = cfg.dec_dim;
    linear(&mut s, "dec.prenet.fc1", r80, cfg.prenet_hidden);
    linear(&mut s, "dec.prenet.fc2", cfg.prenet_hidden, cfg.prenet_bottleneck);
    linear(&mut s, "dec.in", cfg.prenet_bottleneck, dd);
    for l in 0..cfg.dec_layers {
        let p = format!("dec.l{l}");
        layer_norm(&mut s, &format!("{p}.ln1"), dd);
        attention(&mut s, &format!("{p}.self"), dd, dd, dd);
        layer_norm(&mut s, &format!("{p}.ln2"), dd);
        attention(&mut s, &format!("{p}.cross"), dd, d, dd);
        layer_norm(&mut s, &format!("{p}.ln3"), dd);
        linear(&mut s, &format!("{p}.ff1"), dd, cfg.dec_ffn_dim);
        linear(&mut s, &format!("{p}.ff2"), cfg.dec_ffn_dim, dd);
    }
    layer_norm(&mut s, "dec.ln", dd);
    linear(&mut s, "dec.out", dd, r80);
    linear(&mut s, "dec.stop", dd, 1);

    let k = cfg.postnet_kernel;
    for j in 0..cfg.postnet_layers {
        let c_in = if j == 0 { N_MELS } else { cfg.postnet_channels };
        let c_out = if j + 1 == cfg.postnet_layers {
            N_MELS
        } else {
            cfg.postnet_channels
        };
        conv(&mut s, &format!("post.c{j}"), c_out, c_in, k, 1);
    }

    aux_decoder(&mut s, "aux_src", cfg, cfg.aux_src_layers, cfg.src_phone_vocab);
    aux_decoder(&mut s, "aux_tgt", cfg, cfg.aux_tgt_layers, cfg.tgt_phone_vocab);
    s
}

pub(crate) fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (name, shape, init) in param_shapes(cfg) {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform { fan_in, fan_out } => {
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-a..a)).collect()
            }
            Init::Normal(sd) => {
                let dist = Normal::new(0.0, sd).expect("positive standard deviation");
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            }
        };
        // Stored values are always f32-representable so checkpoints round-trip.
        let data = data.into_iter().map(|v| v as f32 as f64).collect();
        store.add(name, Tensor::new(shape, data)?)?;
    }
    Ok(store)
}
