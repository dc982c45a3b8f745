use std::collections::HashSet;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Category, DataError, Result};

/// Whether a text or audio field is human-made or produced by a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Real,
    Pseudo,
}

/// One utterance of dataset A or B. Target-side fields stay empty until the
/// stage that fills them has run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtteranceRecord {
    pub id: String,
    pub src_audio: String,
    pub src_sr: u32,
    pub src_text: String,
    #[serde(default)]
    pub src_phones: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tgt_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tgt_text_origin: Option<Origin>,
    #[serde(default)]
    pub tgt_phones: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tgt_audio: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tgt_audio_origin: Option<Origin>,
    pub category: Category,
    /// Source duration in seconds, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration: Option<f64>,
    /// Source mel frame count, used as the batching token count.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub src_frames: Option<usize>,
    /// Set when a client failed on this record; removed by the synthesis-failed filter.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl UtteranceRecord {
    pub fn new(id: impl Into<String>, src_audio: impl Into<String>, src_sr: u32, src_text: impl Into<String>, category: Category) -> Self {
        UtteranceRecord {
            id: id.into(),
            src_audio: src_audio.into(),
            src_sr,
            src_text: src_text.into(),
            src_phones: Vec::new(),
            tgt_text: None,
            tgt_text_origin: None,
            tgt_phones: Vec::new(),
            tgt_audio: None,
            tgt_audio_origin: None,
            category,
            duration: None,
            src_frames: None,
            failure: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ManifestRole {
    Primary,
    Secondary,
    Mixed,
}

/// Ordered records plus the role of the corpus they form.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusManifest {
    pub role: ManifestRole,
    pub records: Vec<UtteranceRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    role: ManifestRole,
}

impl CorpusManifest {
    pub fn new(role: ManifestRole, records: Vec<UtteranceRecord>) -> Result<Self> {
        let m = CorpusManifest { role, records };
        m.validate()?;
        Ok(m)
    }

    pub fn empty(role: ManifestRole) -> Self {
        CorpusManifest {
            role,
            records: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Checks id uniqueness and that every record's category matches the role.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.id.as_str()) {
                return Err(DataError::DuplicateId(r.id.clone()));
            }
            let ok = match self.role {
                ManifestRole::Primary => r.category == Category::Primary,
                ManifestRole::Secondary => r.category == Category::Secondary,
                ManifestRole::Mixed => true,
            };
            if !ok {
                return Err(DataError::Contract(format!(
                    "record {} has category {:?} in a {:?} manifest",
                    r.id, r.category, self.role
                )));
            }
        }
        Ok(())
    }
}

/// Writes a role header line followed by one JSON record per line.
pub fn write_manifest(manifest: &CorpusManifest, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    let header = serde_json::to_string(&Header { role: manifest.role }).expect("header serialises");
    writeln!(w, "{header}")?;
    for r in &manifest.records {
        writeln!(w, "{}", serde_json::to_string(r).expect("record serialises"))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a manifest written by [`write_manifest`]. Without a header line the
/// role is inferred from the records' categories; an empty file is an empty
/// mixed manifest.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<CorpusManifest> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut role = None;
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if i == 0 {
            if let Ok(h) = serde_json::from_str::<Header>(&line) {
                role = Some(h.role);
                continue;
            }
        }
        let rec: UtteranceRecord = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        records.push(rec);
    }
    let role = role.unwrap_or_else(|| {
        let prim = records.iter().any(|r| r.category == Category::Primary);
        let sec = records.iter().any(|r| r.category == Category::Secondary);
        match (prim, sec) {
            (true, false) => ManifestRole::Primary,
            (false, true) => ManifestRole::Secondary,
            _ => ManifestRole::Mixed,
        }
    });
    CorpusManifest::new(role, records)
}
