use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use s2st::config::load_config;
use s2st::run::{train_stage, RunManifest};
use s2st::train::StageKind;

fn s2st(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_s2st"))
        .args(args)
        .env("S2ST_OUTPUT_ROOT", root)
        .output()
        .expect("s2st runs")
}

fn manifest(path: &Path) -> RunManifest {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// A small prompt-enabled toy run whose secondary corpus is produced by
/// `prepare` through the toy client binary.
fn write_config(dir: &Path) -> PathBuf {
    let client = env!("CARGO_BIN_EXE_s2st-toy-client");
    let spec = dir.join("out/toy/toy_spec.json");
    let text = format!(
        r#"profile = "toy"
seed = 5

[model]
prompt_enabled = true
enc_dim = 16
enc_heads = 2
ffn_dim = 32
dec_dim = 16
dec_heads = 2
dec_ffn_dim = 32
prenet_hidden = 16
prenet_bottleneck = 8
aux_dim = 16
aux_ffn_dim = 32
postnet_channels = 8
postnet_layers = 2

[toy]
n_phones = 4
n_primary = 4
n_secondary = 6
n_eval = 2
conflicts = 4

[paths]
primary = "data/primary.jsonl"
secondary = "data/secondary_pseudo.jsonl"
eval = "data/eval.jsonl"
output_dir = "out"

[prepare]
input = "out/toy/secondary_asr.jsonl"
src_phones = {{ inventory = "out/toy/src_phones.txt" }}
tgt_phones = {{ inventory = "out/toy/tgt_phones.txt" }}

[clients.mt]
command = ["{client}", "--spec", "{spec}", "mt"]

[clients.tts]
command = ["{client}", "--spec", "{spec}", "tts", "--out-dir", "{tts}"]

[clients.asr]
command = ["{client}", "--spec", "{spec}", "asr"]

[[stages]]
kind = "pretrain"
max_steps = 4
warmup_steps = 2

[[stages]]
kind = "prompt"
max_steps = 3
warmup_steps = 2
checkpoint_every = 2

[eval]
prompt = "record"
decode = {{ mode = "beam", beam_size = 2, max_len = 6, length_penalty = 0.6 }}
"#,
        spec = spec.display(),
        tts = dir.join("out/tts").display(),
    );
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(s2st(dir.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(s2st(dir.path(), &["gradcheck", "--bogus"]).status.code(), Some(2));
    assert_eq!(s2st(dir.path(), &["translate", "--in", "x.wav"]).status.code(), Some(2));
    assert_eq!(s2st(dir.path(), &[]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_1_and_are_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "profile = \"toy\"\n[model]\ntap_src = 5\n").unwrap();
    let out = s2st(dir.path(), &["gen-toy", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("tap_src"));
    let m = manifest(&dir.path().join("run-gen-toy.json"));
    assert_eq!(m.errors.len(), 1);
    assert!(m.artifacts.is_empty());

    // Valid config, but it has no [toy] table.
    std::fs::write(&cfg, "profile = \"toy\"\n").unwrap();
    let out = s2st(dir.path(), &["gen-toy", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let m = manifest(&dir.path().join("runs/run-gen-toy.json"));
    assert!(m.errors[0].contains("[toy]"), "{:?}", m.errors);
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = s2st(dir.path(), &["gradcheck", "--seeds", "3"]);
    assert_ok(&out);
    let m = manifest(&dir.path().join("run-gradcheck.json"));
    assert!(m.ok());
    assert_eq!(m.artifacts.len(), 1);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("gradcheck.json")).unwrap()).unwrap();
    assert_eq!(summary["passed"], true);
}

#[test]
fn full_pipeline_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = write_config(root);
    let c = cfg.to_str().unwrap();

    assert_ok(&s2st(root, &["gen-toy", "-c", c]));
    assert!(root.join("data/primary.jsonl").exists());
    assert!(root.join("data/eval.jsonl").exists());
    assert_ok(&s2st(root, &["prepare", "-c", c]));
    let prepared = s2st::data::read_manifest(root.join("data/secondary_pseudo.jsonl")).unwrap();
    assert_eq!(prepared.len(), 6);
    // The toy MT applies the secondary mapping, so the pseudo labels equal
    // the ones gen-toy generated directly.
    let generated = s2st::data::read_manifest(root.join("data/primary.jsonl")).unwrap();
    assert!(generated.records.iter().all(|r| !r.src_phones.is_empty()));
    let spec: s2st::data::ToySpec =
        serde_json::from_str(&std::fs::read_to_string(root.join("out/toy/toy_spec.json")).unwrap()).unwrap();
    let (_, map_s) = spec.mappings().unwrap();
    for r in &prepared.records {
        let want: Vec<usize> = r.src_phones.iter().map(|&p| map_s[p]).collect();
        assert_eq!(r.tgt_phones, want, "{}", r.id);
        assert!(r.src_frames.is_some() && r.tgt_audio.is_some());
    }

    assert_ok(&s2st(root, &["pretrain", "-c", c]));
    let out = s2st(root, &["prompttune", "-c", c]);
    assert_ok(&out);
    let ckpt = root.join("out/prompt/prompt-final.ckpt");
    assert!(String::from_utf8_lossy(&out.stdout).contains("prompt-final.ckpt"));
    let m = manifest(&root.join("out/run-prompttune.json"));
    assert!(m.ok());
    let names: Vec<String> = m
        .artifacts
        .iter()
        .map(|a| a.path.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names, ["prompt-final.ckpt", "log.jsonl", "prompt-000002.ckpt"]);

    // The subcommand is a thin adapter: the library call reproduces it.
    let conf = load_config(&cfg).unwrap();
    let direct = train_stage(&conf, StageKind::Prompt, None).unwrap();
    let again = std::fs::read(&ckpt).unwrap();
    let mut buf = Vec::new();
    s2st::train::write_checkpoint(&direct.checkpoint, &mut buf).unwrap();
    assert_eq!(buf, again);
    assert_eq!(s2st::run::Artifact::of(&ckpt).unwrap().sha256, m.artifacts[0].sha256);

    let src = generated.records[0].src_audio.clone();
    let y = root.join("trans/y.wav");
    let out = s2st(
        root,
        &["translate", "--in", &src, "--ckpt", ckpt.to_str().unwrap(), "--out", y.to_str().unwrap(), "--prompt", "primary", "-c", c],
    );
    assert_ok(&out);
    assert!(y.exists() && root.join("trans/y.mel").exists());
    let mel = s2st::audio::read_mel_file(root.join("trans/y.mel"), s2st::audio::MelOrigin::Predicted).unwrap();
    assert!(mel.n_frames() > 0);

    let out = s2st(root, &["evaluate", "--ckpt", ckpt.to_str().unwrap(), "-c", c]);
    assert_ok(&out);
    let report_text = std::fs::read_to_string(root.join("out/eval/report.json")).unwrap();
    let report = s2st::eval::EvalReport::from_json(&report_text).unwrap();
    assert_eq!(report.n_utterances, 2);
    let asr = report.asr_bleu.as_ref().expect("asr client configured");
    assert_eq!(asr.n_total, 2);
    assert!(root.join("out/eval/asr_audit/asr_transcript.jsonl").exists());
    assert!(std::fs::read_to_string(root.join("out/eval/report.txt")).unwrap().contains("Tp-BLEU"));
    let m = manifest(&root.join("out/run-evaluate.json"));
    assert!(m.ok() && m.artifacts.len() >= 3);

    // Fine-tuning is not configured.
    let out = s2st(root, &["finetune", "-c", c]);
    assert_eq!(out.status.code(), Some(1));
}
