use std::collections::HashMap;
use std::hash::Hash;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{EvalError, Result};

pub const BLEU_MAX_ORDER: usize = 4;

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=hypothesis.len()).collect();
    let mut cur = vec![0; hypothesis.len() + 1];
    for (i, r) in reference.iter().enumerate() {
        cur[0] = i + 1;
        for (j, h) in hypothesis.iter().enumerate() {
            let sub = prev[j] + usize::from(r != h);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[hypothesis.len()]
}

/// `edit_distance / len(reference)`; may exceed 1.
pub fn phoneme_error_rate<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(EvalError::UndefinedRate("empty reference".into()));
    }
    Ok(edit_distance(reference, hypothesis) as f64 / reference.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BleuMode {
    /// Lowercased text through the usual detokenized-BLEU tokenizer.
    WordCiDetok,
    /// Every non-space character is a token.
    Char,
    /// Whitespace-separated phone symbols, case kept.
    Phone,
}

static TOK_SYMBOLS: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"([\{-~\[-` -&\(-\+:-@/])").expect("valid regex"));
static TOK_PERIOD_AFTER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"([^0-9])([\.,])").expect("valid regex"));
static TOK_PERIOD_BEFORE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"([\.,])([^0-9])").expect("valid regex"));
static TOK_DASH: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"([0-9])(-)").expect("valid regex"));

/// The mteval "13a" tokenizer.
fn tokenize_13a(text: &str) -> Vec<String> {
    let mut s = text.replace("<skipped>", "").replace("-\n", "").replace('\n', " ");
    if s.contains('&') {
        s = s
            .replace("&quot;", "\"")
            .replace("&amp;", "&")
            .replace("&lt;", "<")
            .replace("&gt;", ">");
    }
    let s = format!(" {s} ");
    let s = TOK_SYMBOLS.replace_all(&s, " $1 ");
    let s = TOK_PERIOD_AFTER.replace_all(&s, "$1 $2 ");
    let s = TOK_PERIOD_BEFORE.replace_all(&s, " $1 $2");
    let s = TOK_DASH.replace_all(&s, "$1 $2 ");
    s.split_whitespace().map(str::to_string).collect()
}

pub fn tokenize(text: &str, mode: BleuMode) -> Vec<String> {
    match mode {
        BleuMode::WordCiDetok => tokenize_13a(&text.to_lowercase()),
        BleuMode::Char => text.chars().filter(|c| !c.is_whitespace()).map(String::from).collect(),
        BleuMode::Phone => text.split_whitespace().map(str::to_string).collect(),
    }
}

/// Clipped n-gram matches and hypothesis n-gram totals for orders 1..=4,
/// plus lengths; sums over segments give corpus statistics.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NgramStats {
    pub matches: [u64; BLEU_MAX_ORDER],
    pub totals: [u64; BLEU_MAX_ORDER],
    pub hyp_len: u64,
    pub ref_len: u64,
}

fn ngram_counts<T: Eq + Hash>(toks: &[T], n: usize) -> HashMap<&[T], u64> {
    let mut m = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

impl NgramStats {
    pub fn segment<T: Eq + Hash>(hypothesis: &[T], reference: &[T]) -> Self {
        let mut s = NgramStats {
            hyp_len: hypothesis.len() as u64,
            ref_len: reference.len() as u64,
            ..Default::default()
        };
        for n in 1..=BLEU_MAX_ORDER {
            let h = ngram_counts(hypothesis, n);
            let r = ngram_counts(reference, n);
            s.totals[n - 1] = h.values().sum();
            s.matches[n - 1] = h.iter().map(|(g, c)| (*c).min(r.get(g).copied().unwrap_or(0))).sum();
        }
        s
    }

    pub fn add(&mut self, other: &NgramStats) {
        for n in 0..BLEU_MAX_ORDER {
            self.matches[n] += other.matches[n];
            self.totals[n] += other.totals[n];
        }
        self.hyp_len += other.hyp_len;
        self.ref_len += other.ref_len;
    }

    /// BLEU-4 in `[0, 100]` with brevity penalty. Orders 2..4 with no match
    /// use `(m + 1) / (t + 1)`; a unigram precision of zero gives 0.
    pub fn bleu(&self) -> f64 {
        if self.hyp_len == 0 || self.matches[0] == 0 {
            return 0.0;
        }
        let mut log_p = 0.0;
        for n in 0..BLEU_MAX_ORDER {
            let (m, t) = (self.matches[n] as f64, self.totals[n] as f64);
            let p = if n > 0 && self.matches[n] == 0 { (m + 1.0) / (t + 1.0) } else { m / t };
            log_p += p.ln() / BLEU_MAX_ORDER as f64;
        }
        let (c, r) = (self.hyp_len as f64, self.ref_len as f64);
        let bp = if c < r { (1.0 - r / c).exp() } else { 1.0 };
        (100.0 * bp * log_p.exp()).clamp(0.0, 100.0)
    }
}

pub fn corpus_stats<T: Eq + Hash>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<NgramStats> {
    if hyps.len() != refs.len() {
        return Err(EvalError::Contract(format!("{} hypotheses for {} references", hyps.len(), refs.len())));
    }
    if hyps.is_empty() {
        return Err(EvalError::Contract("BLEU needs at least one segment".into()));
    }
    let mut total = NgramStats::default();
    for (h, r) in hyps.iter().zip(refs) {
        total.add(&NgramStats::segment(h, r));
    }
    Ok(total)
}

/// Corpus BLEU over pre-tokenized segments, e.g. phone id sequences.
pub fn bleu_tokens<T: Eq + Hash>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<f64> {
    Ok(corpus_stats(hyps, refs)?.bleu())
}

/// Corpus BLEU over raw text segments.
pub fn bleu<S: AsRef<str>>(hyps: &[S], refs: &[S], mode: BleuMode) -> Result<f64> {
    let tok = |v: &[S]| v.iter().map(|s| tokenize(s.as_ref(), mode)).collect::<Vec<_>>();
    bleu_tokens(&tok(hyps), &tok(refs))
}
