use ndiff::{finite_diff_report, GradCheckReport, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    aux_io, decode_auxiliary_teacher_forced, decode_spectrogram_teacher_forced, encode, pad_target,
    total_loss, AuxKind, LossTargets, ModelConfig, ModelError, Result, S2stModel,
};

/// Finite-difference check of the complete multi-task loss of a randomly
/// initialised model on one random utterance, over every parameter.
///
/// Dropout must be disabled in `cfg`, since the check requires a deterministic
/// forward pass.
pub fn full_loss_gradcheck(cfg: &ModelConfig, seed: u64, eps: f64) -> Result<GradCheckReport> {
    let mut model = S2stModel::new(cfg.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    // Zero biases put ReLU inputs exactly on the kink for the all-zero first
    // decoder input, where the one-sided derivative is undefined.
    let ids: Vec<_> = model.params.ids().collect();
    for &id in &ids {
        for v in model.params.get_mut(id).data_mut() {
            *v += rng.gen_range(-0.05..0.05);
        }
    }
    let mut mel = |t: usize| {
        Tensor::new(vec![t, 80], (0..t * 80).map(|_| rng.gen_range(-1.0..1.0)).collect())
    };
    let src = mel(24)?;
    let (tgt, n_valid) = pad_target(&mel(2 * cfg.reduction_factor - 1)?, cfg.reduction_factor)?;
    let n_src = cfg.src_phone_vocab - super::PHONE_OFFSET;
    let n_tgt = cfg.tgt_phone_vocab - super::PHONE_OFFSET;
    let (src_in, src_out) = aux_io(&[0, 1 % n_src, 2 % n_src]);
    let (tgt_in, tgt_out) = aux_io(&[1 % n_tgt, 0]);
    finite_diff_report(&model.params, &ids, eps, |g| {
        let enc = encode(g, cfg, &src, None).map_err(engine)?;
        let out = decode_spectrogram_teacher_forced(g, cfg, &enc, &tgt).map_err(engine)?;
        let a = decode_auxiliary_teacher_forced(g, cfg, &enc, AuxKind::Source, &src_in).map_err(engine)?;
        let b = decode_auxiliary_teacher_forced(g, cfg, &enc, AuxKind::Target, &tgt_in).map_err(engine)?;
        let targets = LossTargets {
            mel: Some(&tgt),
            n_valid_frames: n_valid,
            src_tokens: &src_out,
            tgt_tokens: &tgt_out,
        };
        Ok(total_loss(g, cfg, &out, a, b, &targets).map_err(engine)?.total)
    })
    .map_err(ModelError::from)
}

fn engine(e: ModelError) -> ndiff::NdError {
    match e {
        ModelError::Engine(e) => e,
        other => ndiff::NdError::Contract(other.to_string()),
    }
}
