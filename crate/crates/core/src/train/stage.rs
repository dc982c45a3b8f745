use std::io::Write;
use std::path::PathBuf;

use ndiff::{NdError, Precision, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    clip_gradients, load_examples, lr_at_step, optimizer_step, save_checkpoint, Checkpoint, FeatureConfig,
    OptimizerState, PreparedExample, Result, TrainError,
};
use crate::audio::{spec_augment, SpecAugmentPolicy};
use crate::data::{batch_by_tokens, mix_upsample, CorpusManifest};
use crate::model::{
    combine_losses, decode_auxiliary_teacher_forced, decode_spectrogram_teacher_forced, encode, mel_tensor,
    utterance_loss_terms, AuxKind, LossBreakdown, LossMode, LossTargets, ModelConfig, ModelError, PromptCategory, S2stModel,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageKind {
    /// Auxiliary ASR and ST tasks on the secondary corpus.
    Pretrain,
    /// Full loss on the primary corpus.
    Finetune,
    /// Full loss on upsampled primary plus secondary.
    Mixed,
    /// Mixed-tuning with a category prompt on every input.
    Prompt,
}

impl StageKind {
    pub fn name(self) -> &'static str {
        match self {
            StageKind::Pretrain => "pretrain",
            StageKind::Finetune => "finetune",
            StageKind::Mixed => "mixed",
            StageKind::Prompt => "prompt",
        }
    }
}

fn default_clip() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub kind: StageKind,
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub max_steps: u64,
    /// Cap on summed source frames per batch.
    pub batch_tokens: usize,
    pub dropout: f64,
    pub seed: u64,
    /// Auxiliary loss weight overrides. Pre-training defaults to 0.5 each,
    /// other stages to the model config's weights.
    #[serde(default)]
    pub w_src: Option<f64>,
    #[serde(default)]
    pub w_tgt: Option<f64>,
    /// Global gradient-norm clip; 0 disables.
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    #[serde(default)]
    pub spec_augment: bool,
    /// Prompt stage only: update the prompt embeddings and nothing else.
    #[serde(default)]
    pub freeze_non_prompt: bool,
    /// Pre-training alternates ASR-only and ST-only steps instead of
    /// weighting both tasks in every batch.
    #[serde(default)]
    pub pretrain_alternating: bool,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    #[serde(default)]
    pub checkpoint_every: u64,
}

impl StageConfig {
    pub fn new(kind: StageKind, base_lr: f64, warmup_steps: u64, max_steps: u64, batch_tokens: usize, seed: u64) -> Self {
        StageConfig {
            kind,
            base_lr,
            warmup_steps,
            max_steps,
            batch_tokens,
            dropout: 0.1,
            seed,
            w_src: None,
            w_tgt: None,
            clip_norm: default_clip(),
            spec_augment: false,
            freeze_non_prompt: false,
            pretrain_alternating: false,
            checkpoint_every: 0,
        }
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if self.warmup_steps == 0 || self.batch_tokens == 0 {
            return bad("warmup_steps and batch_tokens must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.clip_norm < 0.0 {
            return bad("clip_norm must be non-negative".into());
        }
        for w in [self.w_src, self.w_tgt].into_iter().flatten() {
            if !(w >= 0.0) {
                return bad(format!("loss weight {w} must be non-negative"));
            }
        }
        if self.kind == StageKind::Prompt && !model.prompt_enabled {
            return bad("prompt stage needs a model with prompt_enabled".into());
        }
        if self.freeze_non_prompt && self.kind != StageKind::Prompt {
            return bad("freeze_non_prompt applies to the prompt stage only".into());
        }
        Ok(())
    }

    fn loss_mode(&self, step: u64) -> LossMode {
        match self.kind {
            StageKind::Pretrain if self.pretrain_alternating => {
                if step % 2 == 1 {
                    LossMode::AuxOnly { w_src: 1.0, w_tgt: 0.0 }
                } else {
                    LossMode::AuxOnly { w_src: 0.0, w_tgt: 1.0 }
                }
            }
            StageKind::Pretrain => LossMode::AuxOnly {
                w_src: self.w_src.unwrap_or(0.5),
                w_tgt: self.w_tgt.unwrap_or(0.5),
            },
            _ => LossMode::Full,
        }
    }
}

/// Seed of a step's dropout and augmentation draws.
fn step_seed(seed: u64, step: u64) -> u64 {
    let mut x = seed ^ step.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutput {
    pub lr: f64,
    pub loss: LossBreakdown,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

/// Forward, backward, clip and Adam update on one batch. `step` is 1-based
/// within the stage.
pub fn train_step(
    model: &mut S2stModel,
    batch: &[&PreparedExample],
    stage: &StageConfig,
    opt: &mut OptimizerState,
    step: u64,
) -> Result<StepOutput> {
    if batch.is_empty() {
        return Err(TrainError::Contract("empty batch".into()));
    }
    let lr = lr_at_step(step, stage.base_lr, stage.warmup_steps)?;
    let mode = stage.loss_mode(step);
    let mut cfg = model.config.clone();
    cfg.dropout = stage.dropout;
    if stage.kind != StageKind::Pretrain {
        cfg.w_src = stage.w_src.unwrap_or(cfg.w_src);
        cfg.w_tgt = stage.w_tgt.unwrap_or(cfg.w_tgt);
    }
    let seed = step_seed(stage.seed, step);
    let non_finite = || {
        let ids: Vec<String> = batch.iter().map(|e| e.id.clone()).collect();
        log::error!("non-finite values at step {step}; batch {ids:?}");
        TrainError::NonFinite { step, ids }
    };
    let fault = |e: ModelError| match e {
        ModelError::Engine(NdError::NumericFault { .. }) => non_finite(),
        other => other.into(),
    };
    let (loss, mut grads) = {
        let mut g = model.graph(Precision::F32, true, seed);
        let mut terms = Vec::with_capacity(batch.len());
        for (i, ex) in batch.iter().enumerate() {
            let src = if stage.spec_augment {
                let policy = SpecAugmentPolicy::basic(ex.src.n_frames());
                mel_tensor(&spec_augment(&ex.src, &policy, step_seed(seed, i as u64)))?
            } else {
                ex.src_tensor()?
            };
            let prompt: Option<PromptCategory> = (stage.kind == StageKind::Prompt).then_some(ex.category);
            let enc = encode(&mut g, &cfg, &src, prompt).map_err(fault)?;
            let a = decode_auxiliary_teacher_forced(&mut g, &cfg, &enc, AuxKind::Source, &ex.src_in).map_err(fault)?;
            let b = decode_auxiliary_teacher_forced(&mut g, &cfg, &enc, AuxKind::Target, &ex.tgt_in).map_err(fault)?;
            let (out, mel, n_valid): (_, Option<&Tensor>, usize) = match (&mode, &ex.tgt) {
                (LossMode::Full, Some((tgt, n))) => {
                    (Some(decode_spectrogram_teacher_forced(&mut g, &cfg, &enc, tgt).map_err(fault)?), Some(tgt), *n)
                }
                (LossMode::Full, None) => {
                    return Err(TrainError::Contract(format!(
                        "{} stage needs target audio for {}",
                        stage.kind.name(),
                        ex.id
                    )))
                }
                (LossMode::AuxOnly { .. }, _) => (None, None, 0),
            };
            let targets = LossTargets {
                mel,
                n_valid_frames: n_valid,
                src_tokens: &ex.src_out,
                tgt_tokens: &ex.tgt_out,
            };
            terms.push(utterance_loss_terms(&mut g, &cfg, out.as_ref(), a, b, &targets).map_err(fault)?);
        }
        let vars = combine_losses(&mut g, &cfg, &terms, mode).map_err(fault)?;
        let loss = vars.breakdown(&g);
        if !loss.total.is_finite() {
            return Err(non_finite());
        }
        let grads = g.backward(vars.total).map_err(|e| fault(e.into()))?;
        (loss, grads)
    };
    let grad_norm = clip_gradients(&mut grads, stage.clip_norm);
    let trainable: Option<Vec<bool>> = stage
        .freeze_non_prompt
        .then(|| model.params.iter().map(|(_, name, _)| name.starts_with("prompt.")).collect());
    optimizer_step(&mut model.params, &grads, opt, lr, Precision::F32, trainable.as_deref())?;
    Ok(StepOutput { lr, loss, grad_norm })
}

/// Batch index used at `step` (1-based): batches are visited in a fresh
/// seeded permutation every epoch.
pub fn batch_schedule(n_batches: usize, seed: u64, step: u64) -> usize {
    let epoch = (step - 1) / n_batches as u64;
    let pos = ((step - 1) % n_batches as u64) as usize;
    let mut order: Vec<usize> = (0..n_batches).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    order[pos]
}

/// Corpora available to a stage.
#[derive(Debug, Clone, Copy)]
pub struct StageData<'a> {
    pub primary: Option<&'a CorpusManifest>,
    pub secondary: Option<&'a CorpusManifest>,
    pub features: FeatureConfig,
}

/// Where a stage writes its log and checkpoints; `None` skips writing.
#[derive(Debug, Clone, Default)]
pub struct StageOutputs {
    pub log_path: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: u64,
    pub stage: StageKind,
    pub lr: f64,
    pub spec_loss: f64,
    pub stop_loss: f64,
    pub aux_src: f64,
    pub aux_tgt: f64,
    pub total: f64,
}

fn stage_manifest(stage: &StageConfig, data: &StageData) -> Result<CorpusManifest> {
    let need = |m: Option<&CorpusManifest>, what: &str| {
        m.cloned()
            .ok_or_else(|| TrainError::Contract(format!("{} stage needs {what} data", stage.kind.name())))
    };
    match stage.kind {
        StageKind::Pretrain => need(data.secondary, "secondary"),
        StageKind::Finetune => need(data.primary, "primary"),
        StageKind::Mixed | StageKind::Prompt => {
            let a = need(data.primary, "primary")?;
            let b = need(data.secondary, "secondary")?;
            Ok(mix_upsample(&a, &b, stage.seed)?)
        }
    }
}

/// Runs steps `1..=max_steps` of a stage (or continues a checkpoint of the
/// same stage) and returns the final checkpoint together with the log of the
/// steps run here. The optimizer starts fresh at every stage.
pub fn run_stage(
    model: S2stModel,
    stage: &StageConfig,
    data: &StageData,
    outputs: &StageOutputs,
    resume: Option<Checkpoint>,
) -> Result<(Checkpoint, Vec<LogEntry>)> {
    stage.validate(&model.config)?;
    let (mut model, mut opt, start) = match resume {
        Some(ck) => {
            let (expected, found) = (model.config.fingerprint(), ck.model.config.fingerprint());
            if expected != found {
                return Err(TrainError::FingerprintMismatch { expected, found });
            }
            if ck.stage != stage.kind || ck.seed != stage.seed {
                return Err(TrainError::Contract(format!(
                    "checkpoint belongs to stage {} seed {}, not {} seed {}",
                    ck.stage.name(),
                    ck.seed,
                    stage.kind.name(),
                    stage.seed
                )));
            }
            (ck.model, ck.opt, ck.step + 1)
        }
        None => {
            let opt = OptimizerState::new(&model.params);
            (model, opt, 1)
        }
    };

    let manifest = stage_manifest(stage, data)?;
    let with_audio = stage.kind != StageKind::Pretrain;
    let examples = load_examples(&manifest, &data.features, with_audio)?;
    let prepared = examples
        .iter()
        .map(|e| PreparedExample::new(&model, e))
        .collect::<Result<Vec<_>>>()?;
    let batches = batch_by_tokens(&manifest, stage.batch_tokens, true)?;
    if batches.is_empty() {
        return Err(TrainError::Contract(format!("{} stage has no data", stage.kind.name())));
    }

    let mut log_file = match &outputs.log_path {
        Some(p) => Some(std::fs::OpenOptions::new().create(true).append(true).open(p)?),
        None => None,
    };
    if let Some(dir) = &outputs.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut log = Vec::new();
    for step in start..=stage.max_steps {
        let b = &batches[batch_schedule(batches.len(), stage.seed, step)];
        let batch: Vec<&PreparedExample> = b.indices.iter().map(|&i| &prepared[i]).collect();
        let out = train_step(&mut model, &batch, stage, &mut opt, step)?;
        let entry = LogEntry {
            step,
            stage: stage.kind,
            lr: out.lr,
            spec_loss: out.loss.spec_loss,
            stop_loss: out.loss.stop_loss,
            aux_src: out.loss.aux_src_loss,
            aux_tgt: out.loss.aux_tgt_loss,
            total: out.loss.total,
        };
        if let Some(f) = log_file.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&entry).expect("log entry serialises"))?;
        }
        log::debug!("{} step {step}: total {:.5} lr {:.3e}", stage.kind.name(), entry.total, entry.lr);
        log.push(entry);
        if let Some(dir) = &outputs.checkpoint_dir {
            if stage.checkpoint_every > 0 && step % stage.checkpoint_every == 0 && step < stage.max_steps {
                let ck = Checkpoint {
                    model: model.clone(),
                    opt: opt.clone(),
                    stage: stage.kind,
                    step,
                    seed: stage.seed,
                };
                save_checkpoint(&ck, dir.join(format!("{}-{step:06}.ckpt", stage.kind.name())))?;
            }
        }
    }
    let ck = Checkpoint {
        model,
        opt,
        stage: stage.kind,
        step: stage.max_steps.max(start - 1),
        seed: stage.seed,
    };
    if let Some(dir) = &outputs.checkpoint_dir {
        save_checkpoint(&ck, dir.join(format!("{}-final.ckpt", stage.kind.name())))?;
    }
    Ok((ck, log))
}
