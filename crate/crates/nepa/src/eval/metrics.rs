//! Sentence-level quote metrics, bin-set metrics and length statistics.
//!
//! Rates are derived from integer counts, so aggregation is exact: pooled
//! rates come from summed counts, never from averaging per-letter rates.

use std::collections::{BTreeMap, BTreeSet};

use auditlm::Scalar;
use serde::{Deserialize, Serialize};

use super::sentences::SentenceSpan;

/// Half-open character span.
pub type Span = (usize, usize);

fn ratio<S: Scalar>(num: u64, den: u64) -> Option<S> {
    (den > 0).then(|| S::count(num) / S::count(den))
}

/// Characters of `[start, end)` covered by the union of `spans`.
pub fn covered(start: usize, end: usize, spans: &[Span]) -> usize {
    let mut clipped: Vec<Span> = spans
        .iter()
        .map(|&(s, e)| (s.max(start), e.min(end)))
        .filter(|(s, e)| s < e)
        .collect();
    clipped.sort_unstable();
    let mut total = 0;
    let mut reach = start;
    for (s, e) in clipped {
        let s = s.max(reach);
        if e > s {
            total += e - s;
            reach = e;
        }
    }
    total
}

/// A sentence belongs to a selection if at least half of its characters
/// lie inside the selection's spans.
pub fn is_member(sentence: &SentenceSpan, spans: &[Span]) -> bool {
    !sentence.is_empty() && 2 * covered(sentence.start, sentence.end, spans) >= sentence.len()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuoteCounts {
    pub sentences: u64,
    /// Sentences selected as quotations.
    pub quoted: u64,
    /// Sentences selected by reviewers.
    pub selected: u64,
    pub both: u64,
}

impl QuoteCounts {
    /// Pr(selected | quoted); absent when nothing was quoted.
    pub fn precision<S: Scalar>(&self) -> Option<S> {
        ratio(self.both, self.quoted)
    }

    /// Pr(quoted | selected); absent when nothing was selected.
    pub fn recall<S: Scalar>(&self) -> Option<S> {
        ratio(self.both, self.selected)
    }

    pub fn add(&mut self, o: &QuoteCounts) {
        self.sentences += o.sentences;
        self.quoted += o.quoted;
        self.selected += o.selected;
        self.both += o.both;
    }
}

/// Classify every sentence of one letter against both selections.
pub fn quote_metrics(sentences: &[SentenceSpan], quote_spans: &[Span], sme_spans: &[Span]) -> QuoteCounts {
    let mut c = QuoteCounts::default();
    for s in sentences {
        let q = is_member(s, quote_spans);
        let m = is_member(s, sme_spans);
        c.sentences += 1;
        c.quoted += u64::from(q);
        c.selected += u64::from(m);
        c.both += u64::from(q && m);
    }
    c
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinCounts {
    /// Bins reviewers used for the letter.
    pub sme: u64,
    /// Bins the system used for the letter.
    pub system: u64,
    pub both: u64,
}

impl BinCounts {
    pub fn recall<S: Scalar>(&self) -> Option<S> {
        ratio(self.both, self.sme)
    }

    pub fn precision<S: Scalar>(&self) -> Option<S> {
        ratio(self.both, self.system)
    }

    pub fn add(&mut self, o: &BinCounts) {
        self.sme += o.sme;
        self.system += o.system;
        self.both += o.both;
    }
}

pub fn binning_metrics(sme: &BTreeSet<String>, system: &BTreeSet<String>) -> BinCounts {
    BinCounts {
        sme: sme.len() as u64,
        system: system.len() as u64,
        both: sme.intersection(system).count() as u64,
    }
}

/// Population standard deviation of the lengths over their mean, in
/// percent. Needs at least two lengths and a nonzero mean.
pub fn length_variability<S: Scalar>(lengths: &[usize]) -> Option<S> {
    if lengths.len() < 2 {
        return None;
    }
    let n = S::count(lengths.len() as u64);
    let xs: Vec<S> = lengths.iter().map(|&l| S::count(l as u64)).collect();
    let mean = xs.iter().fold(S::zero(), |a, &x| a + x) / n;
    if mean == S::zero() {
        return None;
    }
    let var = xs.iter().fold(S::zero(), |a, &x| a + (x - mean) * (x - mean)) / n;
    Some(var.sqrt() / mean * S::lit(100.0))
}

/// Letters whose length falls in `[lo, hi)`; the last bucket is open.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthBucket<S> {
    pub lo: usize,
    pub hi: Option<usize>,
    pub letters: usize,
    pub mean_recall: Option<S>,
}

/// Mean per-letter recall grouped by letter length. `edges` are the
/// ascending lower bounds of the buckets; letters shorter than the first
/// edge and letters without a recall value are left out.
pub fn recall_vs_length<S: Scalar>(letters: &[(usize, Option<S>)], edges: &[usize]) -> Vec<LengthBucket<S>> {
    edges
        .iter()
        .enumerate()
        .map(|(i, &lo)| {
            let hi = edges.get(i + 1).copied();
            let rs: Vec<S> = letters
                .iter()
                .filter(|(len, _)| *len >= lo && hi.is_none_or(|h| *len < h))
                .filter_map(|(_, r)| *r)
                .collect();
            let mean_recall =
                (!rs.is_empty()).then(|| rs.iter().fold(S::zero(), |a, &x| a + x) / S::count(rs.len() as u64));
            LengthBucket {
                lo,
                hi,
                letters: rs.len(),
                mean_recall,
            }
        })
        .collect()
}

/// A reviewer excerpt with its single bin.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SmeComment {
    pub start: usize,
    pub end: usize,
    pub bin_name: String,
}

/// A system concern: its verified quote spans and its bins.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SystemConcern {
    pub spans: Vec<Span>,
    pub bins: Vec<String>,
}

/// Counts per (reviewer bin, system bin) over sentences selected by both.
///
/// A shared sentence takes the bin of the reviewer excerpt overlapping it
/// most (earliest on ties) and counts once for every bin of every concern
/// whose own quotes cover it.
pub fn confusion_counts(
    sentences: &[SentenceSpan],
    sme: &[SmeComment],
    concerns: &[SystemConcern],
) -> BTreeMap<(String, String), u64> {
    let sme_spans: Vec<Span> = sme.iter().map(|c| (c.start, c.end)).collect();
    let quote_spans: Vec<Span> = concerns.iter().flat_map(|c| c.spans.iter().copied()).collect();
    let mut out = BTreeMap::new();
    for s in sentences {
        if !is_member(s, &sme_spans) || !is_member(s, &quote_spans) {
            continue;
        }
        let mut best: Option<(usize, &str)> = None;
        for c in sme {
            let o = covered(s.start, s.end, &[(c.start, c.end)]);
            if o > 0 && best.is_none_or(|(b, _)| o > b) {
                best = Some((o, &c.bin_name));
            }
        }
        let Some((_, sme_bin)) = best else { continue };
        let bins: BTreeSet<&str> = concerns
            .iter()
            .filter(|c| is_member(s, &c.spans))
            .flat_map(|c| c.bins.iter().map(String::as_str))
            .collect();
        for b in bins {
            *out.entry((sme_bin.to_string(), b.to_string())).or_insert(0) += 1;
        }
    }
    out
}
