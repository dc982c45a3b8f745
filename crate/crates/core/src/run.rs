//! Pipeline steps behind the `s2st` subcommands. Each step takes a resolved
//! [`RunConfig`] and returns the files it wrote, so a run can be reproduced
//! without the command-line layer.

use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::audio::{read_wav, AudioError, MelOrigin};
use crate::config::{load_inventory, load_lexicon, ConfigError, PhoneSource, RunConfig};
use crate::data::{
    filter_corpus, generate_toy_corpus, phonemize, pseudo_translate, read_manifest, synthesize_targets,
    write_manifest, Category, CorpusManifest, DataError, Lexicon, ManifestRole, OovPolicy, PhoneSet, Transcript,
};
use crate::eval::{evaluate, evaluate_with_asr, translate_audio, EvalConfig, EvalError, EvalReport};
use crate::model::{full_loss_gradcheck, ModelConfig, ModelError, S2stModel};
use crate::train::{
    audio_features, init_model, load_checkpoint, load_examples, run_stage, Checkpoint, LogEntry, StageData,
    StageKind, StageOutputs, TrainError,
};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("{0}")]
    Contract(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Engine(#[from] ndiff::NdError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, RunError>;

fn contract<T>(msg: impl Into<String>) -> Result<T> {
    Err(RunError::Contract(msg.into()))
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    Ok(())
}

/// A file a run produced, with its content hash.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: u64,
}

impl Artifact {
    pub fn of(path: impl Into<PathBuf>) -> std::io::Result<Self> {
        let path = path.into();
        let mut f = std::fs::File::open(&path)?;
        let mut h = Sha256::new();
        let mut buf = vec![0u8; 1 << 16];
        let mut bytes = 0u64;
        loop {
            let n = f.read(&mut buf)?;
            if n == 0 {
                break;
            }
            h.update(&buf[..n]);
            bytes += n as u64;
        }
        Ok(Artifact {
            path,
            sha256: h.finalize().iter().map(|b| format!("{b:02x}")).collect(),
            bytes,
        })
    }
}

/// Record of one command invocation: what it wrote and what went wrong.
/// A run succeeded exactly when `errors` is empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub artifacts: Vec<Artifact>,
    pub errors: Vec<String>,
}

impl RunManifest {
    pub fn new(command: impl Into<String>, args: Vec<String>) -> Self {
        RunManifest {
            command: command.into(),
            args,
            config: None,
            seed: None,
            artifacts: Vec::new(),
            errors: Vec::new(),
        }
    }

    /// Hashes and records `paths`; unreadable files become errors.
    pub fn record(&mut self, paths: &[PathBuf]) {
        for p in paths {
            match Artifact::of(p) {
                Ok(a) => self.artifacts.push(a),
                Err(e) => self.errors.push(format!("{}: {e}", p.display())),
            }
        }
    }

    pub fn ok(&self) -> bool {
        self.errors.is_empty()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        create_parent(path)?;
        std::fs::write(path, serde_json::to_string_pretty(self).expect("manifest serialises"))?;
        Ok(())
    }
}

/// Writes the toy corpus of `[toy]`: manifests at `paths.primary`,
/// `paths.secondary` and `paths.eval`; audio, the corpus spec, phone
/// inventories and a target-free copy of the secondary corpus (input for
/// `prepare`) under `<output_dir>/toy`.
pub fn gen_toy(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let Some(toy) = &cfg.toy else {
        return contract("gen-toy needs a [toy] table");
    };
    let (train, eval) = toy.specs(cfg.seed);
    let dir = cfg.paths.output_dir.join("toy");
    let corpus = generate_toy_corpus(&train, &dir)?;
    let mut out = Vec::new();
    let put = |m: &CorpusManifest, path: &Path, out: &mut Vec<PathBuf>| -> Result<()> {
        create_parent(path)?;
        write_manifest(m, path)?;
        out.push(path.to_path_buf());
        for r in &m.records {
            out.push(PathBuf::from(&r.src_audio));
            out.extend(r.tgt_audio.as_ref().map(PathBuf::from));
        }
        Ok(())
    };
    let need = |p: &Option<PathBuf>, key: &str| p.clone().ok_or_else(|| RunError::Contract(format!("gen-toy needs {key}")));
    put(&corpus.primary, &need(&cfg.paths.primary, "paths.primary")?, &mut out)?;
    put(&corpus.secondary, &need(&cfg.paths.secondary, "paths.secondary")?, &mut out)?;
    if toy.n_eval > 0 {
        let held_out = generate_toy_corpus(&eval, &dir)?;
        put(&held_out.primary, &need(&cfg.paths.eval, "paths.eval")?, &mut out)?;
    }

    let spec_path = dir.join("toy_spec.json");
    std::fs::write(&spec_path, serde_json::to_string_pretty(&train).expect("spec serialises"))?;
    let src_inv = dir.join("src_phones.txt");
    let tgt_inv = dir.join("tgt_phones.txt");
    std::fs::write(&src_inv, train.src_vocab.join("\n") + "\n")?;
    std::fs::write(&tgt_inv, train.tgt_vocab.join("\n") + "\n")?;
    let mut asr = corpus.secondary.clone();
    for r in &mut asr.records {
        r.src_phones.clear();
        r.tgt_text = None;
        r.tgt_text_origin = None;
        r.tgt_phones.clear();
        r.tgt_audio = None;
        r.tgt_audio_origin = None;
    }
    let asr_path = dir.join("secondary_asr.jsonl");
    write_manifest(&asr, &asr_path)?;
    out.extend([spec_path, src_inv, tgt_inv, asr_path]);
    Ok(out)
}

/// Text-to-ids conversion for `prepare`.
pub enum Phonemizer {
    Lexicon(Lexicon, PhoneSet),
    Inventory(PhoneSet),
}

impl Phonemizer {
    pub fn load(src: &PhoneSource) -> Result<Self> {
        Ok(match src {
            PhoneSource::Lexicon(p) => {
                let lex = load_lexicon(p)?;
                let set = lex.phone_set();
                Phonemizer::Lexicon(lex, set)
            }
            PhoneSource::Inventory(p) => Phonemizer::Inventory(load_inventory(p)?),
        })
    }

    pub fn ids(&self, text: &str, oov: OovPolicy) -> std::result::Result<Vec<usize>, DataError> {
        let ids = match self {
            Phonemizer::Lexicon(lex, set) => phonemize(text, lex, set, oov)?,
            Phonemizer::Inventory(set) => {
                let mut missing = Vec::new();
                let mut ids = Vec::new();
                for tok in text.split_whitespace() {
                    match set.id(tok) {
                        Some(i) => ids.push(i),
                        None => missing.push(tok.to_string()),
                    }
                }
                if oov == OovPolicy::Error && !missing.is_empty() {
                    return Err(DataError::Oov(missing));
                }
                ids
            }
        };
        if ids.is_empty() {
            return Err(DataError::Contract("no phones".into()));
        }
        Ok(ids)
    }
}

/// Pseudo-labels `prepare.input`: MT for target text, TTS for target speech,
/// phone ids and frame counts, then the configured filters. Records a stage
/// fails on are flagged rather than aborting the run.
pub fn prepare(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let Some(p) = &cfg.prepare else {
        return contract("prepare needs a [prepare] table");
    };
    let out_path = cfg.prepare_output().expect("validated at load");
    let dir = cfg.paths.output_dir.join("prepare");
    std::fs::create_dir_all(&dir)?;
    let input = read_manifest(&p.input)?;
    let (Some(mt), Some(tts)) = (&cfg.clients.mt, &cfg.clients.tts) else {
        return contract("prepare needs clients.mt and clients.tts");
    };

    let mut transcript = Transcript::default();
    let translated = pseudo_translate(&input, mt.build()?.as_mut(), &mut transcript)?;
    let mt_path = dir.join("mt_transcript.jsonl");
    transcript.save(&mt_path)?;
    let mut transcript = Transcript::default();
    let mut m = synthesize_targets(&translated, tts.build()?.as_mut(), &mut transcript)?;
    let tts_path = dir.join("tts_transcript.jsonl");
    transcript.save(&tts_path)?;

    let src = p.src_phones.as_ref().map(Phonemizer::load).transpose()?;
    let tgt = p.tgt_phones.as_ref().map(Phonemizer::load).transpose()?;
    for rec in m.records.iter_mut().filter(|r| r.failure.is_none()) {
        let labelled = (|| -> std::result::Result<(), String> {
            if let Some(ph) = &src {
                rec.src_phones = ph.ids(&rec.src_text, p.oov).map_err(|e| format!("src phonemize: {e}"))?;
            }
            if let Some(ph) = &tgt {
                let text = rec.tgt_text.as_deref().unwrap_or_default();
                rec.tgt_phones = ph.ids(text, p.oov).map_err(|e| format!("tgt phonemize: {e}"))?;
            }
            if rec.duration.is_none() {
                rec.duration = Some(read_wav(&rec.src_audio).map_err(|e| format!("features: {e}"))?.duration_secs());
            }
            if rec.src_frames.is_none() {
                let mel = audio_features(&rec.src_audio, cfg.features.src_sr, MelOrigin::Source)
                    .map_err(|e| format!("features: {e}"))?;
                rec.src_frames = Some(mel.n_frames());
            }
            Ok(())
        })();
        if let Err(e) = labelled {
            rec.failure = Some(e);
        }
    }

    let (mut kept, dropped) = filter_corpus(&m, &p.filters)?;
    kept.role = ManifestRole::Secondary;
    create_parent(&out_path)?;
    write_manifest(&kept, &out_path)?;
    let dropped_path = dir.join("dropped.jsonl");
    let lines: Vec<String> = dropped
        .iter()
        .map(|d| {
            serde_json::json!({"id": d.record.id, "reason": d.reason, "failure": d.record.failure}).to_string() + "\n"
        })
        .collect();
    std::fs::write(&dropped_path, lines.concat())?;
    log::info!("prepare: kept {} of {} records", kept.len(), input.len());

    let mut out = vec![out_path, mt_path, tts_path, dropped_path];
    out.extend(kept.records.iter().filter_map(|r| r.tgt_audio.as_ref().map(PathBuf::from)));
    Ok(out)
}

fn read_optional(path: &Option<PathBuf>) -> Result<Option<CorpusManifest>> {
    Ok(path.as_ref().map(read_manifest).transpose()?)
}

/// Fresh model whose normalisation statistics cover every record of
/// `manifests`, targets included when all records have target audio.
pub fn initial_model(config: ModelConfig, seed: u64, features: &crate::train::FeatureConfig, manifests: &[&CorpusManifest]) -> Result<S2stModel> {
    let records: Vec<_> = manifests.iter().flat_map(|m| m.records.iter().cloned()).collect();
    let all = CorpusManifest::new(ManifestRole::Mixed, records)?;
    let with_targets = all.records.iter().all(|r| r.tgt_audio.is_some());
    let examples = load_examples(&all, features, with_targets)?;
    Ok(init_model(config, seed, &examples)?)
}

pub struct StageRun {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogEntry>,
    pub artifacts: Vec<PathBuf>,
}

/// Runs the `kind` stage of the config into `<output_dir>/<stage>/`. The
/// model comes from `init` if given, else from the final checkpoint of the
/// pretrain stage when the config has one, else fresh.
pub fn train_stage(cfg: &RunConfig, kind: StageKind, init: Option<&Path>) -> Result<StageRun> {
    let Some(stage) = cfg.stage(kind) else {
        return contract(format!("config has no {} stage", kind.name()));
    };
    let primary = read_optional(&cfg.paths.primary)?;
    let secondary = read_optional(&cfg.paths.secondary)?;
    let start = init
        .map(Path::to_path_buf)
        .or_else(|| cfg.predecessor(kind).map(|k| cfg.final_checkpoint(k)));
    let model = match start {
        Some(path) => {
            if !path.exists() {
                return contract(format!("{} not found; run the stage that writes it first", path.display()));
            }
            load_checkpoint(&path, Some(&cfg.model.fingerprint()))?.model
        }
        None => {
            let ms: Vec<&CorpusManifest> = primary.iter().chain(secondary.iter()).collect();
            initial_model(cfg.model.clone(), cfg.seed, &cfg.features, &ms)?
        }
    };
    let dir = cfg.stage_dir(kind);
    std::fs::create_dir_all(&dir)?;
    let log_path = dir.join("log.jsonl");
    if log_path.exists() {
        std::fs::remove_file(&log_path)?;
    }
    let data = StageData {
        primary: primary.as_ref(),
        secondary: secondary.as_ref(),
        features: cfg.features,
    };
    let outputs = StageOutputs {
        log_path: Some(log_path.clone()),
        checkpoint_dir: Some(dir.clone()),
    };
    let (checkpoint, log) = run_stage(model, stage, &data, &outputs, None)?;
    let mut artifacts = vec![cfg.final_checkpoint(kind), log_path];
    if stage.checkpoint_every > 0 {
        let mut step = stage.checkpoint_every;
        while step < stage.max_steps {
            artifacts.push(dir.join(format!("{}-{step:06}.ckpt", kind.name())));
            step += stage.checkpoint_every;
        }
    }
    Ok(StageRun {
        checkpoint,
        log,
        artifacts,
    })
}

/// Speech-to-speech translation of one WAV file; the mel goes next to
/// `out_wav` with a `.mel` extension.
pub fn translate(
    model: &S2stModel,
    eval: &EvalConfig,
    input: &Path,
    prompt: Option<Category>,
    out_wav: &Path,
) -> Result<Vec<PathBuf>> {
    if prompt.is_some() && !model.config.prompt_enabled {
        return contract("--prompt needs a model trained with prompts");
    }
    let out_mel = out_wav.with_extension("mel");
    create_parent(out_wav)?;
    translate_audio(
        model,
        &input.to_string_lossy(),
        &eval.features,
        prompt,
        &eval.asr,
        out_wav,
        &out_mel,
    )?;
    Ok(vec![out_wav.to_path_buf(), out_mel])
}

/// Evaluates `model` on `manifest` and writes `report.json` and
/// `report.txt` into `out_dir`. ASR-BLEU runs when `clients.asr` is set; its
/// audio and transcript go to `out_dir/asr_audit`.
pub fn evaluate_run(cfg: &RunConfig, model: &S2stModel, manifest: &Path, out_dir: &Path) -> Result<(EvalReport, Vec<PathBuf>)> {
    let m = read_manifest(manifest)?;
    std::fs::create_dir_all(out_dir)?;
    let mut out = Vec::new();
    let report = match &cfg.clients.asr {
        Some(spec) => {
            let audit = out_dir.join("asr_audit");
            std::fs::create_dir_all(&audit)?;
            let r = evaluate_with_asr(model, &m, &cfg.eval, spec.build()?.as_mut(), &audit)?;
            let mut files: Vec<PathBuf> = std::fs::read_dir(&audit)?
                .map(|e| e.map(|e| e.path()))
                .collect::<std::io::Result<_>>()?;
            files.sort();
            out.extend(files);
            r
        }
        None => evaluate(model, &m, &cfg.eval)?,
    };
    let json = out_dir.join("report.json");
    let txt = out_dir.join("report.txt");
    std::fs::write(&json, report.to_json())?;
    let name = manifest.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    std::fs::write(&txt, EvalReport::table(&[(&name, &report)]))?;
    out.splice(0..0, [json, txt]);
    Ok((report, out))
}

pub const PRIMITIVE_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckSummary {
    /// `(primitive, seed, max relative error)`.
    pub primitives: Vec<(String, u64, f64)>,
    /// `(seed, max relative error, worst parameter)` for the whole loss.
    pub model: Vec<(u64, f64, Option<String>)>,
    pub passed: bool,
}

/// Finite-difference suite: every engine primitive in 64-bit against
/// [`PRIMITIVE_TOLERANCE`] and the full loss of the two-layer width-16
/// model against [`MODEL_TOLERANCE`].
pub fn gradcheck(seeds: &[u64]) -> Result<GradcheckSummary> {
    let mut primitives = Vec::new();
    let mut model = Vec::new();
    for &seed in seeds {
        for r in ndiff::primitive_suite(seed, 1e-5)? {
            primitives.push((r.kind.to_string(), seed, r.max_relative_error));
        }
        let rep = full_loss_gradcheck(&ModelConfig::tiny(), seed, 3e-5)?;
        model.push((seed, rep.max_relative_error, rep.worst_param));
    }
    let passed = primitives.iter().all(|p| p.2 < PRIMITIVE_TOLERANCE) && model.iter().all(|m| m.1 < MODEL_TOLERANCE);
    Ok(GradcheckSummary {
        primitives,
        model,
        passed,
    })
}
