use ndiff::{Precision, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

use s2st::data::*;
use s2st::eval::*;
use s2st::model::*;
use s2st::train::{init_model, load_examples, FeatureConfig};

fn random_mel(t: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(vec![t, 80], (0..t * 80).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn tiny_with_vocab(vocab: usize) -> ModelConfig {
    let mut cfg = ModelConfig::tiny();
    cfg.src_phone_vocab = vocab;
    cfg.tgt_phone_vocab = vocab;
    cfg
}

fn decode(model: &S2stModel, mel: &Tensor, which: AuxKind, dc: &DecodeConfig) -> Hypothesis {
    let mut g = model.graph(Precision::F64, false, 0);
    let enc = encode(&mut g, &model.config, mel, None).unwrap();
    decode_hypothesis(&mut g, &model.config, &enc, which, dc).unwrap()
}

/// Scores every phone sequence of length `0..=max_len` with one
/// teacher-forced pass each and returns the best by normalised score.
fn exhaustive(model: &S2stModel, mel: &Tensor, which: AuxKind, max_len: usize, alpha: f64) -> (Vec<usize>, f64) {
    let vocab = which.vocab(&model.config);
    let n_phones = vocab - PHONE_OFFSET;
    let mut seqs: Vec<Vec<usize>> = vec![vec![]];
    let mut frontier: Vec<Vec<usize>> = vec![vec![]];
    for _ in 0..max_len {
        frontier = frontier
            .iter()
            .flat_map(|s| {
                (0..n_phones).map(move |p| {
                    let mut t = s.clone();
                    t.push(p);
                    t
                })
            })
            .collect();
        seqs.extend(frontier.iter().cloned());
    }
    let mut best: Option<(Vec<usize>, f64)> = None;
    for seq in seqs {
        let ended = seq.len() < max_len;
        let (input, mut target) = aux_io(&seq);
        if !ended {
            target.pop();
        }
        let mut g = model.graph(Precision::F64, false, 0);
        let enc = encode(&mut g, &model.config, mel, None).unwrap();
        let logits = decode_auxiliary_teacher_forced(&mut g, &model.config, &enc, which, &input).unwrap();
        let lv = g.value(logits).clone();
        let mut lp = 0.0;
        for (i, &t) in target.iter().enumerate() {
            let row = lv.row(i);
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            lp += row[t] - z.ln();
        }
        let len = target.len() as f64;
        let score = lp / ((5.0 + len) / 6.0).powf(alpha);
        if best.as_ref().is_none_or(|b| score > b.1) {
            best = Some((seq, score));
        }
    }
    best.unwrap()
}

#[test]
fn beam_one_is_greedy_bit_for_bit() {
    for seed in 0..4 {
        let model = S2stModel::new(tiny_with_vocab(6), seed).unwrap();
        let mel = random_mel(12, seed + 10);
        for which in [AuxKind::Source, AuxKind::Target] {
            let g = decode(&model, &mel, which, &DecodeConfig::greedy(8));
            let b = decode(&model, &mel, which, &DecodeConfig::beam(1, 8));
            assert_eq!(g.phones, b.phones);
            assert_eq!(g.log_prob.to_bits(), b.log_prob.to_bits());
            assert_eq!(g.score.to_bits(), b.score.to_bits());
        }
    }
}

#[test]
fn max_len_bounds_output() {
    let model = S2stModel::new(tiny_with_vocab(6), 1).unwrap();
    let mel = random_mel(12, 3);
    for dc in [DecodeConfig::greedy(1), DecodeConfig::beam(3, 1)] {
        assert!(decode(&model, &mel, AuxKind::Target, &dc).phones.len() <= 1);
    }
    assert!(decode(&model, &mel, AuxKind::Target, &DecodeConfig::greedy(0)).phones.is_empty());
    let mut bad = DecodeConfig::beam(0, 3);
    let mut g = model.graph(Precision::F64, false, 0);
    let enc = encode(&mut g, &model.config, &mel, None).unwrap();
    assert!(decode_phonemes(&mut g, &model.config, &enc, AuxKind::Target, &bad).is_err());
    bad = DecodeConfig::greedy(3);
    bad.beam_size = 2;
    assert!(bad.validate().is_err());
}

#[test]
fn beam_matches_exhaustive_search_on_vocab_four() {
    let mut hits = 0;
    let mut total = 0;
    for seed in 0..10 {
        let model = S2stModel::new(tiny_with_vocab(4), seed).unwrap();
        let mel = random_mel(10, 100 + seed);
        for which in [AuxKind::Source, AuxKind::Target] {
            for (alpha, max_len) in [(0.0, 3), (0.6, 3), (0.6, 2), (0.6, 1)] {
                let (oracle, oracle_score) = exhaustive(&model, &mel, which, max_len, alpha);
                let mut dc = DecodeConfig::beam(3, max_len);
                dc.length_penalty = alpha;
                let h = decode(&model, &mel, which, &dc);
                total += 1;
                if h.phones == oracle {
                    assert!((h.score - oracle_score).abs() < 1e-12);
                    hits += 1;
                } else {
                    eprintln!("seed {seed} {which:?} alpha {alpha}: beam {:?} ({}) vs exhaustive {oracle:?} ({oracle_score})", h.phones, h.score);
                }
            }
        }
    }
    assert_eq!(hits, total);
}

/// Minimum cost over every alignment path, enumerated without memoisation.
fn edit_paths(r: &[u8], h: &[u8]) -> usize {
    match (r.split_first(), h.split_first()) {
        (None, _) => h.len(),
        (_, None) => r.len(),
        (Some((a, rr)), Some((b, hh))) => {
            let sub = usize::from(a != b) + edit_paths(rr, hh);
            let del = 1 + edit_paths(rr, h);
            let ins = 1 + edit_paths(r, hh);
            sub.min(del).min(ins)
        }
    }
}

fn all_sequences(alphabet: u8, max_len: usize) -> Vec<Vec<u8>> {
    let mut out = vec![vec![]];
    let mut frontier = vec![vec![]];
    for _ in 0..max_len {
        frontier = frontier
            .iter()
            .flat_map(|s: &Vec<u8>| {
                (0..alphabet).map(move |c| {
                    let mut t = s.clone();
                    t.push(c);
                    t
                })
            })
            .collect();
        out.extend(frontier.iter().cloned());
    }
    out
}

#[test]
fn per_equals_exhaustive_edit_paths() {
    for (alphabet, max_len) in [(2, 6), (3, 4)] {
        let seqs = all_sequences(alphabet, max_len);
        for r in seqs.iter().filter(|s| !s.is_empty()) {
            for h in &seqs {
                let d = edit_paths(r, h);
                assert_eq!(edit_distance(r, h), d, "{r:?} {h:?}");
                assert_eq!(phoneme_error_rate(r, h).unwrap(), d as f64 / r.len() as f64);
            }
        }
    }
}

#[test]
fn per_examples() {
    assert_eq!(phoneme_error_rate(&["a", "b", "c"], &["a", "b", "c"]).unwrap(), 0.0);
    assert_eq!(phoneme_error_rate(&["a", "b", "c"], &["a", "c"]).unwrap(), 1.0 / 3.0);
    assert_eq!(phoneme_error_rate(&["a"], &["b", "c"]).unwrap(), 2.0);
    let empty: [&str; 0] = [];
    assert!(matches!(phoneme_error_rate(&empty, &["a"]), Err(EvalError::UndefinedRate(_))));
}

// Values computed by hand from n-gram counts; see each case's comment.
#[test]
fn bleu_frozen_values() {
    // p = 3/3, 2/2, 1/1, (0+1)/(0+1); BP = exp(1 - 4/3).
    let v = bleu(&["the cat sat"], &["the cat sat down"], BleuMode::WordCiDetok).unwrap();
    assert!((v - 71.65313105737893).abs() < 1e-6, "{v}");
    // p = 5/5, 3/4, 2/3, 1/2; BP = exp(1 - 6/5).
    let v = bleu(&["今天天气好"], &["今天天气很好"], BleuMode::Char).unwrap();
    assert!((v - 57.89300674674099).abs() < 1e-6, "{v}");
    // Tokens `hello , world !` against `hello world !`:
    // p = 3/4, 1/3, (0+1)/(2+1), (0+1)/(1+1); no brevity penalty.
    let v = bleu(&["Hello, World!"], &["hello world !"], BleuMode::WordCiDetok).unwrap();
    assert!((v - 45.18010018049224).abs() < 1e-6, "{v}");
    // Pooled over two segments: p = 5/6, 3/4, 2/2, 1/1; BP = exp(1 - 7/6).
    let v = bleu(&["a b c d", "a x"], &["a b c d", "a y z"], BleuMode::Phone).unwrap();
    assert!((v - 75.26405111736055).abs() < 1e-6, "{v}");
    let v = bleu(&["a x", "a b c d"], &["a y z", "a b c d"], BleuMode::Phone).unwrap();
    assert!((v - 75.26405111736055).abs() < 1e-6, "{v}");
}

#[test]
fn bleu_edge_cases() {
    for mode in [BleuMode::WordCiDetok, BleuMode::Char, BleuMode::Phone] {
        assert_eq!(bleu(&["a b c d e"], &["a b c d e"], mode).unwrap(), 100.0);
        assert_eq!(bleu(&["p q"], &["x y z"], mode).unwrap(), 0.0);
        assert_eq!(bleu(&[""], &["x y z"], mode).unwrap(), 0.0);
    }
    assert_eq!(bleu(&["THE Cat"], &["the cat"], BleuMode::WordCiDetok).unwrap(), 100.0);
    // Case is kept in phone mode: p = 1/2, (0+1)/(1+1), 1, 1.
    let v = bleu(&["AH B"], &["ah B"], BleuMode::Phone).unwrap();
    assert!((v - 100.0 * 0.25f64.powf(0.25)).abs() < 1e-9, "{v}");
    assert!(matches!(bleu(&["a"], &["a", "b"], BleuMode::Phone), Err(EvalError::Contract(_))));
    let none: [&str; 0] = [];
    assert!(bleu(&none, &none, BleuMode::Phone).is_err());
    assert_eq!(tokenize("It's 3.5 km, isn't it?", BleuMode::WordCiDetok), vec!["it's", "3.5", "km", ",", "isn't", "it", "?"]);
    assert_eq!(tokenize("a b", BleuMode::Char), vec!["a", "b"]);
    assert_eq!(bleu_tokens(&[vec![1, 2, 3, 4]], &[vec![1, 2, 3, 4]]).unwrap(), 100.0);
}

fn toy_setup(dir: &std::path::Path, n_primary: usize, seed: u64) -> (S2stModel, CorpusManifest) {
    let spec = ToySpec::standard(4, n_primary, 0, 0, seed);
    let corpus = generate_toy_corpus(&spec, dir).unwrap();
    let examples = load_examples(&corpus.primary, &FeatureConfig::default(), true).unwrap();
    let model = init_model(tiny_with_vocab(6), seed, &examples).unwrap();
    (model, corpus.primary)
}

struct OracleAsr(HashMap<String, String>);

impl Client for OracleAsr {
    fn process(&mut self, requests: &[ClientRequest]) -> std::result::Result<Vec<ClientResponse>, DataError> {
        Ok(requests
            .iter()
            .map(|q| ClientResponse {
                id: q.id.clone(),
                ok: true,
                text: self.0.get(&q.id).cloned(),
                audio: None,
                err: None,
            })
            .collect())
    }
}

struct FailingAsr;

impl Client for FailingAsr {
    fn process(&mut self, requests: &[ClientRequest]) -> std::result::Result<Vec<ClientResponse>, DataError> {
        Ok(requests.iter().map(|q| ClientResponse::failure(q.id.clone(), "offline")).collect())
    }
}

#[test]
fn evaluate_random_model_is_well_formed_and_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (model, manifest) = toy_setup(dir.path(), 6, 5);
    let mut cfg = EvalConfig::default();
    cfg.decode.max_len = 12;
    cfg.spec_l1 = true;
    let a = evaluate(&model, &manifest, &cfg).unwrap();
    let b = evaluate(&model, &manifest, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.to_json(), b.to_json());
    assert_eq!(a.n_utterances, 6);
    assert!(a.s_per >= 0.8, "S-PER {}", a.s_per);
    assert!((0.0..=100.0).contains(&a.tp_bleu));
    assert!(a.spec_l1.unwrap() > 0.0);

    // Corpus numbers from the rows, recomputed here without the library's pooling.
    let edits: usize = a.rows.iter().map(|r| edit_distance(&r.src_ref, &r.src_hyp)).sum();
    let refs: usize = a.rows.iter().map(|r| r.src_ref.len()).sum();
    assert_eq!(a.s_per, edits as f64 / refs as f64);
    let hyps: Vec<Vec<usize>> = a.rows.iter().map(|r| r.tgt_hyp.clone()).collect();
    let tgts: Vec<Vec<usize>> = a.rows.iter().map(|r| r.tgt_ref.clone()).collect();
    assert_eq!(a.tp_bleu, bleu_tokens(&hyps, &tgts).unwrap());
    let again = EvalReport::from_rows(a.config_fingerprint.clone(), a.rows.clone(), None).unwrap();
    assert_eq!(again, a);
    assert_eq!(EvalReport::from_json(&a.to_json()).unwrap(), a);
    let table = EvalReport::table(&[("dev", &a)]);
    assert_eq!(table.lines().count(), 3);
    assert!(table.contains("S-PER") && table.contains("Tp-BLEU"));

    let mut other = cfg.clone();
    other.decode = DecodeConfig::beam(2, 12);
    assert_ne!(config_fingerprint(&model, &other), a.config_fingerprint);
    let prompted = EvalConfig {
        prompt: PromptChoice::Record,
        ..cfg
    };
    assert!(matches!(evaluate(&model, &manifest, &prompted), Err(EvalError::Contract(_))));
}

#[test]
fn asr_bleu_with_oracle_and_failing_clients() {
    let dir = tempfile::tempdir().unwrap();
    let (model, manifest) = toy_setup(dir.path(), 4, 7);
    let mut cfg = EvalConfig::default();
    cfg.decode.max_len = 10;
    cfg.asr.griffin_lim_iters = 4;
    let refs: HashMap<String, String> =
        manifest.records.iter().map(|r| (r.id.clone(), r.tgt_text.clone().unwrap())).collect();
    let audit = dir.path().join("audit");
    let (score, rows) = asr_bleu(&model, &manifest, &mut OracleAsr(refs), &cfg, &audit).unwrap();
    assert_eq!(score.score, Some(100.0));
    assert_eq!(score.coverage, 1.0);
    for r in &rows {
        assert!(std::path::Path::new(&r.wav).exists() && std::path::Path::new(&r.mel).exists());
    }
    let transcript = Transcript::load(audit.join("asr_transcript.jsonl")).unwrap();
    assert_eq!(transcript.pairs.len(), 4);

    let (score, rows) = asr_bleu(&model, &manifest, &mut FailingAsr, &cfg, &audit).unwrap();
    assert_eq!(score.coverage, 0.0);
    assert_eq!(score.score, None);
    assert!(score.reason.is_some());
    assert!(rows.iter().all(|r| r.failure.as_deref() == Some("offline")));

    let report = evaluate_with_asr(&model, &manifest, &cfg, &mut FailingAsr, &audit).unwrap();
    assert_eq!(report.asr_bleu.as_ref().unwrap().n_total, 4);
    assert!(EvalReport::table(&[("test", &report)]).contains("n/a"));
}
