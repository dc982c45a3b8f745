use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Category, CorpusManifest, DataError, ManifestRole, Origin, Result, UtteranceRecord};
use crate::audio::{mel_spectrogram, resample, write_wav, FrontendConfig, MelSpectrogram, Waveform};

/// Synthetic "language": each phone is a pair of sinusoids held for
/// `frames_per_phone` hops.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyVoice {
    pub symbols: Vec<String>,
    pub sample_rate: u32,
    pub frames_per_phone: usize,
    /// Two frequencies per phone, in Hz.
    pub freqs: Vec<[f64; 2]>,
}

impl ToyVoice {
    /// Lays `2n` frequencies evenly over `[200 Hz, 0.45 sr]`; phone `k` takes one
    /// from the lower half and a permuted one from the upper half.
    pub fn new(symbols: Vec<String>, sample_rate: u32, frames_per_phone: usize) -> Result<Self> {
        let n = symbols.len();
        if n == 0 {
            return Err(DataError::Spec("empty phone inventory".into()));
        }
        if frames_per_phone == 0 {
            return Err(DataError::Spec("frames_per_phone must be positive".into()));
        }
        if sample_rate < 1000 {
            return Err(DataError::Spec(format!("sample rate {sample_rate} too low")));
        }
        let mut seen = HashSet::new();
        for s in &symbols {
            if s.is_empty() || s.chars().any(char::is_whitespace) {
                return Err(DataError::Spec(format!("phone symbol {s:?} must be a non-empty word")));
            }
            if !seen.insert(s) {
                return Err(DataError::Spec(format!("duplicate phone symbol {s:?}")));
            }
        }
        let fe = FrontendConfig::for_rate(sample_rate);
        let (lo, hi) = (200.0, 0.45 * sample_rate as f64);
        let step = (hi - lo) / (2 * n) as f64;
        let bin = sample_rate as f64 / fe.n_fft as f64;
        if step < 1.5 * bin {
            return Err(DataError::Spec(format!(
                "{n} phones do not fit at {sample_rate} Hz (spacing {step:.1} Hz < 1.5 bins)"
            )));
        }
        let f = |j: usize| lo + (j as f64 + 0.5) * step;
        // Any stride coprime with n gives a permutation of the upper band.
        let stride = (1..=n).rev().find(|s| gcd(*s, n) == 1 && *s * 2 <= n + 1).unwrap_or(1);
        let freqs = (0..n).map(|k| [f(k), f(n + (k * stride) % n)]).collect();
        Ok(ToyVoice {
            symbols,
            sample_rate,
            frames_per_phone,
            freqs,
        })
    }

    pub fn frontend(&self) -> FrontendConfig {
        FrontendConfig::for_rate(self.sample_rate)
    }

    pub fn hop(&self) -> usize {
        self.frontend().hop_length
    }

    /// Samples per phone.
    pub fn segment_len(&self) -> usize {
        self.frames_per_phone * self.hop()
    }

    pub fn parse_text(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|w| {
                self.symbols
                    .iter()
                    .position(|s| s == w)
                    .ok_or_else(|| DataError::Contract(format!("unknown toy phone {w:?}")))
            })
            .collect()
    }

    pub fn render(&self, phones: &[usize]) -> String {
        phones
            .iter()
            .map(|&p| self.symbols[p].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Clean synthesis when `rng` is `None`; otherwise per-phone amplitude
    /// jitter, random phases and additive noise of std `noise`.
    pub fn synthesize(&self, phones: &[usize], rng: Option<&mut ChaCha8Rng>, noise: f64) -> Result<Waveform> {
        if let Some(&p) = phones.iter().find(|&&p| p >= self.symbols.len()) {
            return Err(DataError::Contract(format!("phone id {p} outside the inventory")));
        }
        let seg = self.segment_len();
        let sr = self.sample_rate as f64;
        let mut out = vec![0f32; phones.len() * seg];
        let mut rng = rng;
        let normal = Normal::new(0.0, noise.max(0.0)).expect("non-negative std");
        for (j, &p) in phones.iter().enumerate() {
            let (amps, phases) = match rng.as_deref_mut() {
                Some(r) => (
                    [r.gen_range(0.8..1.2), r.gen_range(0.8..1.2)],
                    [r.gen_range(0.0..std::f64::consts::TAU), r.gen_range(0.0..std::f64::consts::TAU)],
                ),
                None => ([1.0, 1.0], [0.0, 0.0]),
            };
            for i in 0..seg {
                let t = i as f64 / sr;
                let mut v = 0.0;
                for h in 0..2 {
                    v += 0.25 * amps[h] * (std::f64::consts::TAU * self.freqs[p][h] * t + phases[h]).sin();
                }
                if let Some(r) = rng.as_deref_mut() {
                    if noise > 0.0 {
                        v += normal.sample(r);
                    }
                }
                out[j * seg + i] = v as f32;
            }
        }
        Ok(Waveform::new(out, self.sample_rate)?)
    }

    /// Mean log-mel of the central frame of each phone, from a clean
    /// three-segment rendition.
    pub fn templates(&self) -> Result<Vec<Vec<f64>>> {
        let fe = self.frontend();
        (0..self.symbols.len())
            .map(|p| {
                let wave = self.synthesize(&[p, p, p], None, 0.0)?;
                let mel = mel_spectrogram(&wave, &fe)?;
                let mid = self.frames_per_phone + self.frames_per_phone / 2;
                Ok(mel.frame(mid).iter().map(|&v| v as f64).collect())
            })
            .collect()
    }

    /// Template matching over consecutive `frames_per_phone` segments; a
    /// trailing partial segment counts when at least half full.
    pub fn recognize_mel(&self, mel: &MelSpectrogram, templates: &[Vec<f64>]) -> Vec<usize> {
        let fpp = self.frames_per_phone;
        let n_seg = (mel.n_frames() + fpp / 2) / fpp;
        (0..n_seg)
            .map(|s| {
                let start = s * fpp;
                let end = ((s + 1) * fpp).min(mel.n_frames());
                // Interior frames avoid window smear across phone boundaries.
                let (a, b) = if end - start >= 3 { (start + 1, end - 1) } else { (start, end) };
                let mut avg = vec![0.0; mel.n_mels()];
                for t in a..b {
                    for (c, v) in mel.frame(t).iter().enumerate() {
                        avg[c] += *v as f64 / (b - a) as f64;
                    }
                }
                let mut best = (f64::NEG_INFINITY, 0);
                for (p, tpl) in templates.iter().enumerate() {
                    let c = pearson(&avg, tpl);
                    if c > best.0 {
                        best = (c, p);
                    }
                }
                best.1
            })
            .collect()
    }

    pub fn recognize(&self, wave: &Waveform) -> Result<Vec<usize>> {
        let wave = if wave.sample_rate != self.sample_rate {
            resample(wave, self.sample_rate)?
        } else {
            wave.clone()
        };
        let mel = mel_spectrogram(&wave, &self.frontend())?;
        Ok(self.recognize_mel(&mel, &self.templates()?))
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let mut num = 0.0;
    let (mut va, mut vb) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        num += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    num / (va * vb).sqrt().max(1e-12)
}

fn default_src_sr() -> u32 {
    8000
}

fn default_tgt_sr() -> u32 {
    24000
}

fn default_noise() -> f64 {
    0.01
}

/// Parameters of a synthetic two-domain corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToySpec {
    pub n_primary: usize,
    pub n_secondary: usize,
    pub src_vocab: Vec<String>,
    pub tgt_vocab: Vec<String>,
    /// Target symbol for each source phone, by source index.
    pub mapping_primary: Vec<String>,
    pub mapping_secondary: Vec<String>,
    /// Inclusive bounds on phones per utterance.
    pub utterance_len_range: (usize, usize),
    pub frames_per_phone: usize,
    pub seed: u64,
    #[serde(default = "default_src_sr")]
    pub src_sr: u32,
    #[serde(default = "default_tgt_sr")]
    pub tgt_sr: u32,
    /// Additive noise std on source audio.
    #[serde(default = "default_noise")]
    pub noise: f64,
    /// Prepended to every record id, so several corpora can share a directory.
    #[serde(default)]
    pub id_prefix: String,
}

impl ToySpec {
    /// `n` source phones `s0..`, `n` target phones `t0..`; the primary mapping
    /// is a seeded permutation and the secondary one rotates the targets of the
    /// first `conflicts` source phones.
    pub fn standard(n: usize, n_primary: usize, n_secondary: usize, conflicts: usize, seed: u64) -> Self {
        use rand::seq::SliceRandom;
        let src_vocab: Vec<String> = (0..n).map(|i| format!("s{i}")).collect();
        let tgt_vocab: Vec<String> = (0..n).map(|i| format!("t{i}")).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x6d61_7070));
        let mapping_primary: Vec<String> = perm.iter().map(|&j| tgt_vocab[j].clone()).collect();
        let mut mapping_secondary = mapping_primary.clone();
        let c = conflicts.min(n);
        if c >= 2 {
            for i in 0..c {
                mapping_secondary[i] = mapping_primary[(i + 1) % c].clone();
            }
        }
        ToySpec {
            n_primary,
            n_secondary,
            src_vocab,
            tgt_vocab,
            mapping_primary,
            mapping_secondary,
            utterance_len_range: (3, 6),
            frames_per_phone: 4,
            seed,
            src_sr: default_src_sr(),
            tgt_sr: default_tgt_sr(),
            noise: default_noise(),
            id_prefix: String::new(),
        }
    }

    pub fn src_voice(&self) -> Result<ToyVoice> {
        ToyVoice::new(self.src_vocab.clone(), self.src_sr, self.frames_per_phone)
    }

    pub fn tgt_voice(&self) -> Result<ToyVoice> {
        ToyVoice::new(self.tgt_vocab.clone(), self.tgt_sr, self.frames_per_phone)
    }

    fn mapping_ids(&self, mapping: &[String], name: &str) -> Result<Vec<usize>> {
        if mapping.len() != self.src_vocab.len() {
            return Err(DataError::Spec(format!(
                "{name} covers {} of {} source phones",
                mapping.len(),
                self.src_vocab.len()
            )));
        }
        let ids = mapping
            .iter()
            .map(|t| {
                self.tgt_vocab
                    .iter()
                    .position(|s| s == t)
                    .ok_or_else(|| DataError::Spec(format!("{name} maps to unknown target {t:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let distinct: HashSet<_> = ids.iter().collect();
        if distinct.len() != ids.len() {
            return Err(DataError::Spec(format!("{name} is not injective")));
        }
        Ok(ids)
    }

    /// Resolved mappings `(primary, secondary)` as target ids by source id.
    pub fn mappings(&self) -> Result<(Vec<usize>, Vec<usize>)> {
        Ok((
            self.mapping_ids(&self.mapping_primary, "mapping_primary")?,
            self.mapping_ids(&self.mapping_secondary, "mapping_secondary")?,
        ))
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.utterance_len_range;
        if lo == 0 || lo > hi {
            return Err(DataError::Spec(format!("bad utterance_len_range ({lo}, {hi})")));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(DataError::Spec("noise must be finite and non-negative".into()));
        }
        self.src_voice()?;
        self.tgt_voice()?;
        self.mappings()?;
        Ok(())
    }
}

/// Generated manifests; audio lives under `root`.
#[derive(Debug, Clone)]
pub struct ToyCorpus {
    pub root: PathBuf,
    pub primary: CorpusManifest,
    pub secondary: CorpusManifest,
}

/// Writes `src/<id>.wav` and `tgt/<id>.wav` under `out_dir` and returns the
/// primary and secondary manifests. Target speech is toy TTS output, so its
/// origin is pseudo in both domains.
pub fn generate_toy_corpus(spec: &ToySpec, out_dir: impl AsRef<Path>) -> Result<ToyCorpus> {
    spec.validate()?;
    let root = out_dir.as_ref().to_path_buf();
    std::fs::create_dir_all(root.join("src"))?;
    std::fs::create_dir_all(root.join("tgt"))?;
    let src_voice = spec.src_voice()?;
    let tgt_voice = spec.tgt_voice()?;
    let (map_p, map_s) = spec.mappings()?;

    let build = |cat: Category, n: usize| -> Result<CorpusManifest> {
        let (tag, mapping, text_origin, role) = match cat {
            Category::Primary => ("p", &map_p, Origin::Real, ManifestRole::Primary),
            Category::Secondary => ("s", &map_s, Origin::Pseudo, ManifestRole::Secondary),
        };
        let mut records = Vec::with_capacity(n);
        for i in 0..n {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(((cat.index() as u64) << 40) | i as u64);
            let id = format!("{}{tag}{i:05}", spec.id_prefix);
            let len = rng.gen_range(spec.utterance_len_range.0..=spec.utterance_len_range.1);
            let src: Vec<usize> = (0..len).map(|_| rng.gen_range(0..spec.src_vocab.len())).collect();
            let tgt: Vec<usize> = src.iter().map(|&s| mapping[s]).collect();
            let src_wave = src_voice.synthesize(&src, Some(&mut rng), spec.noise)?;
            let tgt_wave = tgt_voice.synthesize(&tgt, None, 0.0)?;
            let src_path = root.join("src").join(format!("{id}.wav"));
            let tgt_path = root.join("tgt").join(format!("{id}.wav"));
            write_wav(&src_path, &src_wave)?;
            write_wav(&tgt_path, &tgt_wave)?;
            let mut rec = UtteranceRecord::new(
                id,
                src_path.to_string_lossy(),
                spec.src_sr,
                src_voice.render(&src),
                cat,
            );
            rec.src_phones = src;
            rec.tgt_text = Some(tgt_voice.render(&tgt));
            rec.tgt_text_origin = Some(text_origin);
            rec.tgt_phones = tgt;
            rec.tgt_audio = Some(tgt_path.to_string_lossy().into_owned());
            rec.tgt_audio_origin = Some(Origin::Pseudo);
            rec.duration = Some(src_wave.duration_secs());
            rec.src_frames = Some(len * spec.frames_per_phone);
            records.push(rec);
        }
        CorpusManifest::new(role, records)
    };
    let primary = build(Category::Primary, spec.n_primary)?;
    let secondary = build(Category::Secondary, spec.n_secondary)?;
    Ok(ToyCorpus {
        root,
        primary,
        secondary,
    })
}
