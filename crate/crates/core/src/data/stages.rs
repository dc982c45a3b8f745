use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    Client, ClientRequest, CorpusManifest, DataError, ManifestRole, Origin, Result, Task, Transcript,
    UtteranceRecord,
};

fn mark_failed(rec: &mut UtteranceRecord, stage: &str, err: Option<&str>) {
    rec.failure = Some(format!("{stage}: {}", err.unwrap_or("unknown error")));
}

/// Fills `tgt_text` from an MT client. Failed requests flag the record instead
/// of aborting; records already flagged are passed through.
pub fn pseudo_translate(
    manifest: &CorpusManifest,
    client: &mut dyn Client,
    transcript: &mut Transcript,
) -> Result<CorpusManifest> {
    let mut out = manifest.clone();
    let pending: Vec<usize> = (0..out.records.len())
        .filter(|&i| out.records[i].failure.is_none())
        .collect();
    let requests: Vec<ClientRequest> = pending
        .iter()
        .map(|&i| ClientRequest {
            id: out.records[i].id.clone(),
            task: Task::Mt,
            text: Some(out.records[i].src_text.clone()),
            audio: None,
        })
        .collect();
    let responses = transcript.call(client, &requests)?;
    for (&i, resp) in pending.iter().zip(responses) {
        let rec = &mut out.records[i];
        match (resp.ok, resp.text) {
            (true, Some(text)) => {
                if rec.tgt_text.as_deref() != Some(text.as_str()) {
                    // Audio rendered from a different text is stale.
                    rec.tgt_audio = None;
                    rec.tgt_audio_origin = None;
                    rec.tgt_phones.clear();
                }
                rec.tgt_text = Some(text);
                rec.tgt_text_origin = Some(Origin::Pseudo);
            }
            (true, None) => mark_failed(rec, "mt", Some("response without text")),
            (false, _) => mark_failed(rec, "mt", resp.err.as_deref()),
        }
    }
    Ok(out)
}

/// Fills `tgt_audio` from a TTS client. Records that already have target
/// audio are left alone, so a rerun is a no-op.
pub fn synthesize_targets(
    manifest: &CorpusManifest,
    client: &mut dyn Client,
    transcript: &mut Transcript,
) -> Result<CorpusManifest> {
    let mut out = manifest.clone();
    let mut pending = Vec::new();
    for (i, rec) in out.records.iter_mut().enumerate() {
        if rec.failure.is_some() || rec.tgt_audio.is_some() {
            continue;
        }
        match rec.tgt_text.as_deref() {
            Some(t) if !t.trim().is_empty() => pending.push(i),
            _ => mark_failed(rec, "tts", Some("empty target text")),
        }
    }
    let requests: Vec<ClientRequest> = pending
        .iter()
        .map(|&i| ClientRequest {
            id: out.records[i].id.clone(),
            task: Task::Tts,
            text: out.records[i].tgt_text.clone(),
            audio: None,
        })
        .collect();
    let responses = transcript.call(client, &requests)?;
    for (&i, resp) in pending.iter().zip(responses) {
        let rec = &mut out.records[i];
        match (resp.ok, resp.audio) {
            (true, Some(path)) => {
                rec.tgt_audio = Some(path);
                rec.tgt_audio_origin = Some(Origin::Pseudo);
            }
            (true, None) => mark_failed(rec, "tts", Some("response without audio")),
            (false, _) => mark_failed(rec, "tts", resp.err.as_deref()),
        }
    }
    Ok(out)
}

/// Inclusive character range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharRange {
    pub lo: char,
    pub hi: char,
}

impl CharRange {
    pub fn contains(&self, c: char) -> bool {
        self.lo <= c && c <= self.hi
    }

    pub fn latin() -> Vec<CharRange> {
        vec![CharRange { lo: 'A', hi: 'Z' }, CharRange { lo: 'a', hi: 'z' }]
    }

    /// CJK unified ideographs and extension A.
    pub fn cjk() -> Vec<CharRange> {
        vec![
            CharRange { lo: '\u{3400}', hi: '\u{4DBF}' },
            CharRange { lo: '\u{4E00}', hi: '\u{9FFF}' },
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule")]
pub enum FilterRule {
    /// A text containing characters from both sets.
    CodeSwitch {
        src_charset: Vec<CharRange>,
        tgt_charset: Vec<CharRange>,
    },
    /// A client failed on the record.
    SynthesisFailed,
    /// Source longer than `seconds`.
    MaxDuration { seconds: f64 },
    /// Empty source or target text.
    EmptyText,
}

impl FilterRule {
    pub fn name(&self) -> &'static str {
        match self {
            FilterRule::CodeSwitch { .. } => "code_switch",
            FilterRule::SynthesisFailed => "synthesis_failed",
            FilterRule::MaxDuration { .. } => "max_duration",
            FilterRule::EmptyText => "empty_text",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            FilterRule::CodeSwitch {
                src_charset,
                tgt_charset,
            } => {
                if src_charset.is_empty() || tgt_charset.is_empty() {
                    return Err(DataError::Contract("code_switch charsets must be non-empty".into()));
                }
                for a in src_charset {
                    if a.lo > a.hi {
                        return Err(DataError::Contract(format!("empty char range {a:?}")));
                    }
                    for b in tgt_charset {
                        if a.lo <= b.hi && b.lo <= a.hi {
                            return Err(DataError::Contract(format!(
                                "code_switch charsets overlap: {a:?} and {b:?}"
                            )));
                        }
                    }
                }
                Ok(())
            }
            FilterRule::MaxDuration { seconds } if !(*seconds > 0.0) => Err(DataError::Contract(format!(
                "max_duration must be positive, got {seconds}"
            ))),
            _ => Ok(()),
        }
    }

    fn violated(&self, rec: &UtteranceRecord) -> Result<bool> {
        Ok(match self {
            FilterRule::CodeSwitch {
                src_charset,
                tgt_charset,
            } => {
                let mixed = |text: &str| {
                    text.chars().any(|c| src_charset.iter().any(|r| r.contains(c)))
                        && text.chars().any(|c| tgt_charset.iter().any(|r| r.contains(c)))
                };
                mixed(&rec.src_text) || rec.tgt_text.as_deref().is_some_and(mixed)
            }
            FilterRule::SynthesisFailed => rec.failure.is_some(),
            FilterRule::MaxDuration { seconds } => record_duration(rec)? > *seconds,
            FilterRule::EmptyText => {
                rec.src_text.trim().is_empty() || rec.tgt_text.as_deref().is_none_or(|t| t.trim().is_empty())
            }
        })
    }
}

/// Stored duration, else read from the source WAV header.
fn record_duration(rec: &UtteranceRecord) -> Result<f64> {
    if let Some(d) = rec.duration {
        return Ok(d);
    }
    let reader = hound::WavReader::open(&rec.src_audio).map_err(crate::audio::AudioError::from)?;
    Ok(reader.duration() as f64 / reader.spec().sample_rate as f64)
}

/// A record removed by [`filter_corpus`] with the name of the first rule it broke.
#[derive(Debug, Clone, PartialEq)]
pub struct Dropped {
    pub record: UtteranceRecord,
    pub reason: &'static str,
}

/// Splits records into kept and dropped, preserving order in both.
pub fn filter_corpus(manifest: &CorpusManifest, rules: &[FilterRule]) -> Result<(CorpusManifest, Vec<Dropped>)> {
    for r in rules {
        r.validate()?;
    }
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    'records: for rec in &manifest.records {
        for rule in rules {
            if rule.violated(rec)? {
                dropped.push(Dropped {
                    record: rec.clone(),
                    reason: rule.name(),
                });
                continue 'records;
            }
        }
        kept.push(rec.clone());
    }
    Ok((
        CorpusManifest {
            role: manifest.role,
            records: kept,
        },
        dropped,
    ))
}

/// `max(1, round(n_secondary / n_primary))`.
pub fn upsample_factor(n_primary: usize, n_secondary: usize) -> usize {
    ((n_secondary as f64 / n_primary as f64).round() as usize).max(1)
}

/// Primary records repeated [`upsample_factor`] times (copies after the first
/// get `~k` id suffixes) plus every secondary record, shuffled by `seed`.
pub fn mix_upsample(primary: &CorpusManifest, secondary: &CorpusManifest, seed: u64) -> Result<CorpusManifest> {
    if primary.is_empty() || secondary.is_empty() {
        return Err(DataError::Contract(format!(
            "mixing needs both corpora non-empty ({} primary, {} secondary)",
            primary.len(),
            secondary.len()
        )));
    }
    let d = upsample_factor(primary.len(), secondary.len());
    let mut records = Vec::with_capacity(d * primary.len() + secondary.len());
    for k in 0..d {
        for rec in &primary.records {
            let mut r = rec.clone();
            if k > 0 {
                r.id = format!("{}~{k}", rec.id);
            }
            records.push(r);
        }
    }
    records.extend(secondary.records.iter().cloned());
    records.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    CorpusManifest::new(ManifestRole::Mixed, records)
}

/// Indices into a manifest plus their summed source frame count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub tokens: usize,
}

/// Greedy packing of records into batches of at most `max_tokens` source
/// frames. A record longer than the cap becomes a singleton batch.
pub fn batch_by_tokens(manifest: &CorpusManifest, max_tokens: usize, sort_by_length: bool) -> Result<Vec<Batch>> {
    if max_tokens == 0 {
        return Err(DataError::Contract("max_tokens must be positive".into()));
    }
    let frames: Vec<usize> = manifest
        .records
        .iter()
        .map(|r| {
            r.src_frames
                .ok_or_else(|| DataError::Contract(format!("record {} has no src_frames", r.id)))
        })
        .collect::<Result<_>>()?;
    let mut order: Vec<usize> = (0..frames.len()).collect();
    if sort_by_length {
        order.sort_by_key(|&i| frames[i]);
    }
    let mut batches = Vec::new();
    let mut cur = Batch {
        indices: Vec::new(),
        tokens: 0,
    };
    for i in order {
        let f = frames[i];
        if f > max_tokens {
            log::warn!(
                "record {} has {f} frames, over the {max_tokens}-token cap; batching it alone",
                manifest.records[i].id
            );
        }
        if !cur.indices.is_empty() && cur.tokens + f > max_tokens {
            batches.push(std::mem::replace(
                &mut cur,
                Batch {
                    indices: Vec::new(),
                    tokens: 0,
                },
            ));
        }
        cur.indices.push(i);
        cur.tokens += f;
        if cur.tokens > max_tokens {
            batches.push(std::mem::replace(
                &mut cur,
                Batch {
                    indices: Vec::new(),
                    tokens: 0,
                },
            ));
        }
    }
    if !cur.indices.is_empty() {
        batches.push(cur);
    }
    Ok(batches)
}
