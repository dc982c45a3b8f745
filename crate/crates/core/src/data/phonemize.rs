use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{DataError, Result};

/// Word-boundary symbol inserted between words.
pub const WORD_BOUNDARY: &str = "WB";

/// Ordered phone inventory; a phone's id is its position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhoneSet {
    pub symbols: Vec<String>,
}

impl PhoneSet {
    pub fn new(symbols: Vec<String>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for s in &symbols {
            if !seen.insert(s.as_str()) {
                return Err(DataError::Contract(format!("duplicate phone symbol {s:?}")));
            }
        }
        Ok(PhoneSet { symbols })
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn id(&self, symbol: &str) -> Option<usize> {
        self.symbols.iter().position(|s| s == symbol)
    }

    pub fn symbol(&self, id: usize) -> Option<&str> {
        self.symbols.get(id).map(String::as_str)
    }

    /// Symbols for ids, joined by spaces. Unknown ids render as `<id>`.
    pub fn render(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.symbol(i).map(str::to_string).unwrap_or_else(|| format!("<{i}>")))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Pronunciation lexicon: lower-cased word to phone symbols.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lexicon {
    pub entries: BTreeMap<String, Vec<String>>,
}

impl Lexicon {
    pub fn from_pairs<I, W, P>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (W, Vec<P>)>,
        W: Into<String>,
        P: Into<String>,
    {
        Lexicon {
            entries: pairs
                .into_iter()
                .map(|(w, ps)| (w.into().to_lowercase(), ps.into_iter().map(Into::into).collect()))
                .collect(),
        }
    }

    /// Phone inventory covering the lexicon, sorted, with the boundary symbol last.
    pub fn phone_set(&self) -> PhoneSet {
        let mut syms: Vec<String> = self
            .entries
            .values()
            .flatten()
            .filter(|p| p.as_str() != WORD_BOUNDARY)
            .cloned()
            .collect();
        syms.sort();
        syms.dedup();
        syms.push(WORD_BOUNDARY.to_string());
        PhoneSet { symbols: syms }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OovPolicy {
    Skip,
    Error,
}

/// Whitespace-tokenised, lower-cased lookup; word entries are joined by the
/// boundary symbol. Returns ids in `phones`.
pub fn phonemize(text: &str, lexicon: &Lexicon, phones: &PhoneSet, oov: OovPolicy) -> Result<Vec<usize>> {
    if lexicon.entries.is_empty() {
        return Err(DataError::Contract("lexicon is empty".into()));
    }
    let mut missing = Vec::new();
    let mut words = Vec::new();
    for w in text.split_whitespace() {
        match lexicon.entries.get(&w.to_lowercase()) {
            Some(p) => words.push(p),
            None => missing.push(w.to_string()),
        }
    }
    if oov == OovPolicy::Error && !missing.is_empty() {
        return Err(DataError::Oov(missing));
    }
    let lookup = |s: &str| {
        phones
            .id(s)
            .ok_or_else(|| DataError::Contract(format!("phone {s:?} missing from the phone set")))
    };
    let mut out = Vec::new();
    for (i, entry) in words.iter().enumerate() {
        if i > 0 {
            out.push(lookup(WORD_BOUNDARY)?);
        }
        for p in entry.iter() {
            out.push(lookup(p)?);
        }
    }
    Ok(out)
}
