use std::fmt::Write as _;
use std::path::Path;

use ndiff::checkpoint::params_to_bytes;
use ndiff::Precision;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{decode_phonemes, edit_distance, BleuMode, DecodeConfig, EvalError, NgramStats, Result};
use crate::audio::{cmvn_denormalize, griffin_lim_invert, write_mel_file, write_wav, FrontendConfig, MelOrigin, MelSpectrogram};
use crate::data::{Category, Client, ClientRequest, CorpusManifest, Task, Transcript, UtteranceRecord};
use crate::model::{
    decode_spectrogram_teacher_forced, encode, infer_spectrogram, AuxKind, S2stModel,
};
use crate::train::{audio_features, load_examples, FeatureConfig, PreparedExample};

/// Which prompt the encoder gets during evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptChoice {
    None,
    /// Each record's own category.
    Record,
    Primary,
    Secondary,
}

impl PromptChoice {
    pub fn resolve(self, model: &S2stModel, record: Category) -> Result<Option<Category>> {
        let cat = match self {
            PromptChoice::None => return Ok(None),
            PromptChoice::Record => record,
            PromptChoice::Primary => Category::Primary,
            PromptChoice::Secondary => Category::Secondary,
        };
        if !model.config.prompt_enabled {
            return Err(EvalError::Contract("prompted evaluation of a model without prompts".into()));
        }
        Ok(Some(cat))
    }
}

/// Speech synthesis and recognition settings for ASR-BLEU.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AsrConfig {
    pub mode: BleuMode,
    pub griffin_lim_iters: usize,
    pub stop_threshold: f64,
    /// Decoder steps allowed per source frame, times `r`.
    pub max_frame_ratio: f64,
}

impl Default for AsrConfig {
    fn default() -> Self {
        AsrConfig {
            mode: BleuMode::WordCiDetok,
            griffin_lim_iters: 32,
            stop_threshold: 0.5,
            max_frame_ratio: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default)]
    pub decode: DecodeConfig,
    #[serde(default)]
    pub features: FeatureConfig,
    #[serde(default = "default_prompt")]
    pub prompt: PromptChoice,
    /// Teacher-forced spectrogram L1 against target audio.
    #[serde(default)]
    pub spec_l1: bool,
    #[serde(default)]
    pub asr: AsrConfig,
}

fn default_prompt() -> PromptChoice {
    PromptChoice::None
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            decode: DecodeConfig::default(),
            features: FeatureConfig::default(),
            prompt: PromptChoice::None,
            spec_l1: false,
            asr: AsrConfig::default(),
        }
    }
}

/// ASR-BLEU outcome of one utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsrRow {
    pub id: String,
    pub wav: String,
    pub mel: String,
    pub text: Option<String>,
    pub failure: Option<String>,
    /// Against the reference translation; `None` on failure.
    pub stats: Option<NgramStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsrBleu {
    pub mode: BleuMode,
    /// `None` when no utterance was recognised.
    pub score: Option<f64>,
    /// Fraction of utterances the client recognised.
    pub coverage: f64,
    pub n_ok: usize,
    pub n_total: usize,
    pub reason: Option<String>,
}

impl AsrBleu {
    pub fn from_rows(rows: &[AsrRow], mode: BleuMode) -> Self {
        let mut total = NgramStats::default();
        let mut n_ok = 0;
        for s in rows.iter().filter_map(|r| r.stats.as_ref()) {
            total.add(s);
            n_ok += 1;
        }
        let n_total = rows.len();
        let (score, reason) = if n_ok == 0 {
            (None, Some(format!("no utterance recognised out of {n_total}")))
        } else {
            (Some(total.bleu()), None)
        };
        AsrBleu {
            mode,
            score,
            coverage: if n_total == 0 { 0.0 } else { n_ok as f64 / n_total as f64 },
            n_ok,
            n_total,
            reason,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRow {
    pub id: String,
    pub category: Category,
    pub prompt: Option<Category>,
    pub src_ref: Vec<usize>,
    pub src_hyp: Vec<usize>,
    pub src_edits: usize,
    pub tgt_ref: Vec<usize>,
    pub tgt_hyp: Vec<usize>,
    pub tgt_stats: NgramStats,
    /// Sum of `|pred - target|` over real frames and the number of entries.
    pub spec_l1_sum: Option<f64>,
    pub spec_l1_count: Option<usize>,
    pub asr: Option<AsrRow>,
}

/// Corpus metrics plus the per-utterance rows they are pooled from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_fingerprint: String,
    pub n_utterances: usize,
    /// Source-side phone error rate of the auxiliary ASR decoder.
    pub s_per: f64,
    /// Phone BLEU of the auxiliary target decoder.
    pub tp_bleu: f64,
    pub spec_l1: Option<f64>,
    pub asr_bleu: Option<AsrBleu>,
    pub rows: Vec<UtteranceRow>,
}

impl EvalReport {
    /// Pools `rows` into corpus metrics.
    pub fn from_rows(config_fingerprint: String, rows: Vec<UtteranceRow>, asr_mode: Option<BleuMode>) -> Result<Self> {
        let ref_len: usize = rows.iter().map(|r| r.src_ref.len()).sum();
        if ref_len == 0 {
            return Err(EvalError::UndefinedRate("no source reference phones".into()));
        }
        let edits: usize = rows.iter().map(|r| r.src_edits).sum();
        let mut tgt = NgramStats::default();
        rows.iter().for_each(|r| tgt.add(&r.tgt_stats));
        let spec_l1 = if rows.iter().all(|r| r.spec_l1_sum.is_some()) && !rows.is_empty() {
            let sum: f64 = rows.iter().filter_map(|r| r.spec_l1_sum).sum();
            let count: usize = rows.iter().filter_map(|r| r.spec_l1_count).sum();
            Some(sum / count.max(1) as f64)
        } else {
            None
        };
        let asr_bleu = match asr_mode {
            Some(mode) => {
                let asr: Vec<AsrRow> = rows.iter().filter_map(|r| r.asr.clone()).collect();
                if asr.len() != rows.len() {
                    return Err(EvalError::Contract("ASR outcome missing for some rows".into()));
                }
                Some(AsrBleu::from_rows(&asr, mode))
            }
            None => None,
        };
        Ok(EvalReport {
            config_fingerprint,
            n_utterances: rows.len(),
            s_per: edits as f64 / ref_len as f64,
            tp_bleu: tgt.bleu(),
            spec_l1,
            asr_bleu,
            rows,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| EvalError::Contract(format!("bad report: {e}")))
    }

    /// One row per evaluated set, columns `BLEU | S-PER | Tp-BLEU`.
    pub fn table(sets: &[(&str, &EvalReport)]) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "| {:<12} | {:>8} | {:>6} | {:>7} | {:>8} |", "set", "BLEU", "S-PER", "Tp-BLEU", "coverage");
        let _ = writeln!(out, "|{:-<14}|{:->10}|{:->8}|{:->9}|{:->10}|", "", "", "", "", "");
        for (name, r) in sets {
            let (bleu, cov) = match &r.asr_bleu {
                Some(a) => (
                    a.score.map_or("n/a".to_string(), |s| format!("{s:.1}")),
                    format!("{:.2}", a.coverage),
                ),
                None => ("-".to_string(), "-".to_string()),
            };
            let _ = writeln!(
                out,
                "| {:<12} | {:>8} | {:>6.3} | {:>7.1} | {:>8} |",
                name, bleu, r.s_per, r.tp_bleu, cov
            );
        }
        out
    }
}

/// Digest of the model (config, normalisation, weights) and the evaluation
/// settings.
pub fn config_fingerprint(model: &S2stModel, cfg: &EvalConfig) -> String {
    let mut h = Sha256::new();
    h.update(model.config.fingerprint().as_bytes());
    h.update(serde_json::to_vec(&(&model.src_cmvn, &model.tgt_cmvn)).expect("cmvn serialises"));
    h.update(params_to_bytes(&model.params));
    h.update(serde_json::to_vec(cfg).expect("eval config serialises"));
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn check_records(manifest: &CorpusManifest) -> Result<()> {
    if manifest.is_empty() {
        return Err(EvalError::Contract("empty evaluation manifest".into()));
    }
    Ok(())
}

/// Auxiliary decodes, PER and Tp-BLEU, optionally spectrogram L1.
fn aux_rows(model: &S2stModel, manifest: &CorpusManifest, cfg: &EvalConfig) -> Result<Vec<UtteranceRow>> {
    check_records(manifest)?;
    cfg.decode.validate()?;
    let examples = load_examples(manifest, &cfg.features, cfg.spec_l1)?;
    let mc = &model.config;
    let mut rows = Vec::with_capacity(examples.len());
    for ex in &examples {
        let prepared = PreparedExample::new(model, ex)?;
        let prompt = cfg.prompt.resolve(model, ex.category)?;
        let mut g = model.graph(Precision::F64, false, 0);
        let enc = encode(&mut g, mc, &prepared.src_tensor()?, prompt)?;
        let src_hyp = decode_phonemes(&mut g, mc, &enc, AuxKind::Source, &cfg.decode)?;
        let tgt_hyp = decode_phonemes(&mut g, mc, &enc, AuxKind::Target, &cfg.decode)?;
        let (spec_l1_sum, spec_l1_count) = match (&prepared.tgt, cfg.spec_l1) {
            (Some((target, n_valid)), true) => {
                let out = decode_spectrogram_teacher_forced(&mut g, mc, &enc, target)?;
                let pred = g.value(out.mel_after);
                let n = n_valid * pred.shape()[1];
                let sum: f64 = pred.data()[..n].iter().zip(&target.data()[..n]).map(|(a, b)| (a - b).abs()).sum();
                (Some(sum), Some(n))
            }
            _ => (None, None),
        };
        rows.push(UtteranceRow {
            id: ex.id.clone(),
            category: ex.category,
            prompt,
            src_edits: edit_distance(&ex.src_phones, &src_hyp),
            src_ref: ex.src_phones.clone(),
            src_hyp,
            tgt_stats: NgramStats::segment(&tgt_hyp, &ex.tgt_phones),
            tgt_ref: ex.tgt_phones.clone(),
            tgt_hyp,
            spec_l1_sum,
            spec_l1_count,
            asr: None,
        });
    }
    Ok(rows)
}

/// Translates the speech in `src_audio` by free-running spectrogram decoding
/// and Griffin-Lim, writing the predicted mel to `out_mel` and the waveform
/// to `out_wav`.
pub fn translate_audio(
    model: &S2stModel,
    src_audio: &str,
    features: &FeatureConfig,
    prompt: Option<Category>,
    asr: &AsrConfig,
    out_wav: &Path,
    out_mel: &Path,
) -> Result<()> {
    let mc = &model.config;
    let src = audio_features(src_audio, features.src_sr, MelOrigin::Source)?;
    let mut g = model.graph(Precision::F64, false, 0);
    let enc = encode(&mut g, mc, &model.source_input(&src)?, prompt)?;
    let max_steps = ((src.n_frames() as f64 * asr.max_frame_ratio) / mc.reduction_factor as f64).ceil().max(1.0) as usize;
    let inferred = infer_spectrogram(&mut g, mc, &enc, asr.stop_threshold, max_steps)?;
    let fe = FrontendConfig::for_rate(features.tgt_sr);
    let norm = MelSpectrogram::new(
        inferred.mel.data().iter().map(|&v| v as f32).collect(),
        fe.sample_rate,
        fe.hop_length as u32,
        MelOrigin::Predicted,
    )?;
    let mel = cmvn_denormalize(&norm, &model.tgt_cmvn)?;
    let wave = griffin_lim_invert(&mel, &fe, asr.griffin_lim_iters)?;
    write_mel_file(out_mel, &mel)?;
    write_wav(out_wav, &wave)?;
    Ok(())
}

/// Synthesises `record` into `audit_dir` and returns the WAV and mel paths.
fn synthesize(model: &S2stModel, record: &UtteranceRecord, cfg: &EvalConfig, audit_dir: &Path) -> Result<(String, String)> {
    let prompt = cfg.prompt.resolve(model, record.category)?;
    let mel_path = audit_dir.join(format!("{}.mel", record.id));
    let wav_path = audit_dir.join(format!("{}.wav", record.id));
    translate_audio(model, &record.src_audio, &cfg.features, prompt, &cfg.asr, &wav_path, &mel_path)?;
    Ok((wav_path.to_string_lossy().into_owned(), mel_path.to_string_lossy().into_owned()))
}

/// ASR-BLEU: predicted speech is inverted with Griffin-Lim, transcribed by
/// `client` and scored against each record's `tgt_text`. Audio, mels and
/// the client transcript (`asr_transcript.jsonl`) stay in `audit_dir`.
pub fn asr_bleu(
    model: &S2stModel,
    manifest: &CorpusManifest,
    client: &mut dyn Client,
    cfg: &EvalConfig,
    audit_dir: &Path,
) -> Result<(AsrBleu, Vec<AsrRow>)> {
    check_records(manifest)?;
    std::fs::create_dir_all(audit_dir)?;
    let mut paths = Vec::with_capacity(manifest.len());
    let mut requests = Vec::with_capacity(manifest.len());
    for r in &manifest.records {
        if r.tgt_text.is_none() {
            return Err(EvalError::Contract(format!("record {} has no reference translation", r.id)));
        }
        let (wav, mel) = synthesize(model, r, cfg, audit_dir)?;
        requests.push(ClientRequest {
            id: r.id.clone(),
            task: Task::Asr,
            text: None,
            audio: Some(wav.clone()),
        });
        paths.push((wav, mel));
    }
    let mut transcript = Transcript::default();
    let responses = transcript.call(client, &requests)?;
    transcript.save(audit_dir.join("asr_transcript.jsonl"))?;
    let mode = cfg.asr.mode;
    let rows: Vec<AsrRow> = manifest
        .records
        .iter()
        .zip(responses)
        .zip(paths)
        .map(|((rec, resp), (wav, mel))| {
            let reference = super::tokenize(rec.tgt_text.as_deref().unwrap_or_default(), mode);
            let (text, failure) = match (resp.ok, resp.text) {
                (true, Some(t)) => (Some(t), None),
                (true, None) => (None, Some("client returned no text".to_string())),
                (false, _) => (None, Some(resp.err.unwrap_or_else(|| "client failure".into()))),
            };
            let stats = text.as_deref().map(|t| NgramStats::segment(&super::tokenize(t, mode), &reference));
            AsrRow {
                id: rec.id.clone(),
                wav,
                mel,
                text,
                failure,
                stats,
            }
        })
        .collect();
    Ok((AsrBleu::from_rows(&rows, mode), rows))
}

/// S-PER and Tp-BLEU from auxiliary decodes (plus spectrogram L1 when
/// configured).
pub fn evaluate(model: &S2stModel, manifest: &CorpusManifest, cfg: &EvalConfig) -> Result<EvalReport> {
    let rows = aux_rows(model, manifest, cfg)?;
    EvalReport::from_rows(config_fingerprint(model, cfg), rows, None)
}

/// [`evaluate`] plus ASR-BLEU through `client`.
pub fn evaluate_with_asr(
    model: &S2stModel,
    manifest: &CorpusManifest,
    cfg: &EvalConfig,
    client: &mut dyn Client,
    audit_dir: &Path,
) -> Result<EvalReport> {
    let mut rows = aux_rows(model, manifest, cfg)?;
    let (_, asr) = asr_bleu(model, manifest, client, cfg, audit_dir)?;
    for (row, a) in rows.iter_mut().zip(asr) {
        row.asr = Some(a);
    }
    EvalReport::from_rows(config_fingerprint(model, cfg), rows, Some(cfg.asr.mode))
}
