//! Scoring a run's exported output against reviewer annotations.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use auditlm::Scalar;
use serde::{Deserialize, Serialize};

use super::metrics::{
    binning_metrics, confusion_counts, length_variability, quote_metrics, recall_vs_length, BinCounts, LengthBucket,
    QuoteCounts, SmeComment, Span, SystemConcern,
};
use super::sentences::split_sentences;
use crate::corpus::{read, InputError};
use crate::quote::QuoteSpan;

/// Lower bounds, in characters, of the recall-by-length buckets.
pub const DEFAULT_LENGTH_EDGES: &[usize] = &[0, 500, 1000, 2000, 4000, 8000];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemConcernRecord {
    pub concern_id: String,
    pub statement: String,
    pub bins: Vec<String>,
    pub quotes: Vec<QuoteSpan>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemLetter {
    pub letter_id: String,
    pub text: String,
    pub concerns: Vec<SystemConcernRecord>,
}

/// What the pipeline produced for a corpus.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SystemOutput {
    pub letters: Vec<SystemLetter>,
}

impl SystemOutput {
    pub fn load(path: &Path) -> Result<Self, InputError> {
        let text = read(path)?;
        serde_json::from_str(&text).map_err(|e| InputError::Parse {
            path: path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })
    }
}

/// One reviewer excerpt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruthComment {
    pub letter_id: String,
    pub start: usize,
    pub end: usize,
    pub bin_name: String,
}

pub fn parse_ground_truth(text: &str, origin: &str) -> Result<Vec<GroundTruthComment>, InputError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let c: GroundTruthComment = serde_json::from_str(line).map_err(|e| InputError::Parse {
            path: origin.to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if c.start >= c.end {
            return Err(InputError::Parse {
                path: origin.to_string(),
                line: i + 1,
                message: format!("empty span {}..{}", c.start, c.end),
            });
        }
        out.push(c);
    }
    Ok(out)
}

pub fn load_ground_truth(path: &Path) -> Result<Vec<GroundTruthComment>, InputError> {
    let text = read(path)?;
    parse_ground_truth(&text, &path.display().to_string())
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EvalError {
    #[error("annotation refers to unknown letter `{0}`")]
    UnknownLetter(String),
    #[error("annotation {start}..{end} lies outside letter `{letter_id}` ({len} characters)")]
    SpanOutOfRange {
        letter_id: String,
        start: usize,
        end: usize,
        len: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LetterScore<S> {
    pub letter_id: String,
    pub chars: usize,
    pub quotes: QuoteCounts,
    pub precision: Option<S>,
    pub recall: Option<S>,
    pub bins: BinCounts,
    pub bin_recall: Option<S>,
    pub bin_precision: Option<S>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate<S> {
    pub quotes: QuoteCounts,
    pub precision: Option<S>,
    pub recall: Option<S>,
    pub bins: BinCounts,
    pub bin_recall: Option<S>,
    pub bin_precision: Option<S>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinRecall<S> {
    pub bin_name: String,
    /// Letters the reviewers put in the bin.
    pub letters: usize,
    /// Of those, letters the system also put in the bin.
    pub matched: usize,
    pub recall: Option<S>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCell {
    pub sme_bin: String,
    pub system_bin: String,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport<S> {
    /// How aggregate rates are formed.
    pub aggregation: String,
    pub letters: Vec<LetterScore<S>>,
    pub aggregate: Aggregate<S>,
    /// Normalized standard deviation (%) of system quote lengths.
    pub system_length_variability: Option<S>,
    /// Normalized standard deviation (%) of reviewer excerpt lengths.
    pub sme_length_variability: Option<S>,
    pub recall_by_length: Vec<LengthBucket<S>>,
    pub bin_recall: Vec<BinRecall<S>>,
    pub confusion: Vec<ConfusionCell>,
}

fn ratio<S: Scalar>(num: usize, den: usize) -> Option<S> {
    (den > 0).then(|| S::count(num as u64) / S::count(den as u64))
}

pub fn evaluate<S: Scalar>(
    system: &SystemOutput,
    truth: &[GroundTruthComment],
    length_edges: &[usize],
) -> Result<EvalReport<S>, EvalError> {
    let mut by_letter: BTreeMap<&str, Vec<&GroundTruthComment>> = BTreeMap::new();
    for c in truth {
        let Some(l) = system.letters.iter().find(|l| l.letter_id == c.letter_id) else {
            return Err(EvalError::UnknownLetter(c.letter_id.clone()));
        };
        let len = l.text.chars().count();
        if c.end > len {
            return Err(EvalError::SpanOutOfRange {
                letter_id: c.letter_id.clone(),
                start: c.start,
                end: c.end,
                len,
            });
        }
        by_letter.entry(&c.letter_id).or_default().push(c);
    }

    let mut letters = Vec::new();
    let mut agg_q = QuoteCounts::default();
    let mut agg_b = BinCounts::default();
    let mut confusion: BTreeMap<(String, String), u64> = BTreeMap::new();
    let mut per_bin: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut system_lengths = Vec::new();
    let mut sme_lengths = Vec::new();

    for l in &system.letters {
        let sentences = split_sentences(&l.text);
        let gt = by_letter.get(l.letter_id.as_str()).cloned().unwrap_or_default();
        let sme_spans: Vec<Span> = gt.iter().map(|c| (c.start, c.end)).collect();
        let quote_spans: Vec<Span> = l
            .concerns
            .iter()
            .flat_map(|c| c.quotes.iter().map(|q| (q.start, q.end)))
            .collect();
        system_lengths.extend(quote_spans.iter().map(|(s, e)| e - s));
        sme_lengths.extend(sme_spans.iter().map(|(s, e)| e - s));

        let q = quote_metrics(&sentences, &quote_spans, &sme_spans);
        let sme_bins: BTreeSet<String> = gt.iter().map(|c| c.bin_name.clone()).collect();
        let sys_bins: BTreeSet<String> = l.concerns.iter().flat_map(|c| c.bins.iter().cloned()).collect();
        let b = binning_metrics(&sme_bins, &sys_bins);
        for bin in &sme_bins {
            let e = per_bin.entry(bin.clone()).or_default();
            e.0 += 1;
            e.1 += usize::from(sys_bins.contains(bin));
        }

        let sme: Vec<SmeComment> = gt
            .iter()
            .map(|c| SmeComment { start: c.start, end: c.end, bin_name: c.bin_name.clone() })
            .collect();
        let concerns: Vec<SystemConcern> = l
            .concerns
            .iter()
            .map(|c| SystemConcern {
                spans: c.quotes.iter().map(|q| (q.start, q.end)).collect(),
                bins: c.bins.clone(),
            })
            .collect();
        for (k, v) in confusion_counts(&sentences, &sme, &concerns) {
            *confusion.entry(k).or_insert(0) += v;
        }

        agg_q.add(&q);
        agg_b.add(&b);
        letters.push(LetterScore {
            letter_id: l.letter_id.clone(),
            chars: l.text.chars().count(),
            quotes: q,
            precision: q.precision(),
            recall: q.recall(),
            bins: b,
            bin_recall: b.recall(),
            bin_precision: b.precision(),
        });
    }

    let lengths: Vec<(usize, Option<S>)> = letters.iter().map(|l| (l.chars, l.recall)).collect();
    Ok(EvalReport {
        aggregation: "pooled counts over letters (micro-average); letters with an undefined rate contribute \
                      their counts but no per-letter rate"
            .to_string(),
        aggregate: Aggregate {
            quotes: agg_q,
            precision: agg_q.precision(),
            recall: agg_q.recall(),
            bins: agg_b,
            bin_recall: agg_b.recall(),
            bin_precision: agg_b.precision(),
        },
        letters,
        system_length_variability: length_variability(&system_lengths),
        sme_length_variability: length_variability(&sme_lengths),
        recall_by_length: recall_vs_length(&lengths, length_edges),
        bin_recall: per_bin
            .into_iter()
            .map(|(bin_name, (n, m))| BinRecall { bin_name, letters: n, matched: m, recall: ratio(m, n) })
            .collect(),
        confusion: confusion
            .into_iter()
            .map(|((sme_bin, system_bin), count)| ConfusionCell { sme_bin, system_bin, count })
            .collect(),
    })
}

fn pct<S: Scalar>(x: Option<S>) -> String {
    match x.and_then(|v| v.to_f64()) {
        Some(v) => format!("{:.1}%", v * 100.0),
        None => "n/a".to_string(),
    }
}

fn plain<S: Scalar>(x: Option<S>) -> String {
    match x.and_then(|v| v.to_f64()) {
        Some(v) => format!("{v:.1}%"),
        None => "n/a".to_string(),
    }
}

impl<S: Scalar + Serialize> EvalReport<S> {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let a = &self.aggregate;
        let _ = writeln!(s, "# Evaluation\n");
        let _ = writeln!(s, "Aggregation: {}.\n", self.aggregation);
        let _ = writeln!(s, "| Letters | Quote precision | Quote recall | Binning recall | Binning precision |");
        let _ = writeln!(s, "|---|---|---|---|---|");
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} |\n",
            self.letters.len(),
            pct(a.precision),
            pct(a.recall),
            pct(a.bin_recall),
            pct(a.bin_precision)
        );
        let _ = writeln!(s, "## Normalized standard deviation of excerpt length\n");
        let _ = writeln!(s, "| System quotes | Reviewer excerpts |");
        let _ = writeln!(s, "|---|---|");
        let _ = writeln!(
            s,
            "| {} | {} |\n",
            plain(self.system_length_variability),
            plain(self.sme_length_variability)
        );
        let _ = writeln!(s, "## Recall by letter length\n");
        let _ = writeln!(s, "| Characters | Letters | Mean recall |");
        let _ = writeln!(s, "|---|---|---|");
        for b in &self.recall_by_length {
            let range = match b.hi {
                Some(hi) => format!("{}-{}", b.lo, hi),
                None => format!("{}+", b.lo),
            };
            let _ = writeln!(s, "| {range} | {} | {} |", b.letters, pct(b.mean_recall));
        }
        let _ = writeln!(s, "\n## Recall per bin\n");
        let _ = writeln!(s, "| Bin | Letters | Matched | Recall |");
        let _ = writeln!(s, "|---|---|---|---|");
        for b in &self.bin_recall {
            let _ = writeln!(s, "| {} | {} | {} | {} |", b.bin_name, b.letters, b.matched, pct(b.recall));
        }
        let _ = writeln!(s, "\n## Sentences quoted by both, reviewer bin vs system bin\n");
        let _ = writeln!(s, "| Reviewer bin | System bin | Sentences |");
        let _ = writeln!(s, "|---|---|---|");
        for c in &self.confusion {
            let _ = writeln!(s, "| {} | {} | {} |", c.sme_bin, c.system_bin, c.count);
        }
        let _ = writeln!(s, "\n## Per letter\n");
        let _ = writeln!(s, "| Letter | Chars | Sentences | Precision | Recall | Bin recall | Bin precision |");
        let _ = writeln!(s, "|---|---|---|---|---|---|---|");
        for l in &self.letters {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} | {} | {} |",
                l.letter_id,
                l.chars,
                l.quotes.sentences,
                pct(l.precision),
                pct(l.recall),
                pct(l.bin_recall),
                pct(l.bin_precision)
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> SystemOutput {
        SystemOutput {
            letters: vec![SystemLetter {
                letter_id: "L1".into(),
                text: "Protect the creek. Roads are loud. Thanks.".into(),
                concerns: vec![SystemConcernRecord {
                    concern_id: "c1".into(),
                    statement: "creek".into(),
                    bins: vec!["water".into()],
                    quotes: vec![QuoteSpan { raw_quote: "Protect the creek.".into(), start: 0, end: 18, similarity: 1.0 }],
                }],
            }],
        }
    }

    #[test]
    fn scores_one_letter() {
        let truth = vec![
            GroundTruthComment { letter_id: "L1".into(), start: 0, end: 18, bin_name: "water".into() },
            GroundTruthComment { letter_id: "L1".into(), start: 19, end: 34, bin_name: "noise".into() },
        ];
        let r = evaluate::<f64>(&fixture(), &truth, &[0]).unwrap();
        assert_eq!(r.aggregate.precision, Some(1.0));
        assert_eq!(r.aggregate.recall, Some(0.5));
        assert_eq!(r.aggregate.bin_recall, Some(0.5));
        assert_eq!(r.confusion, vec![ConfusionCell { sme_bin: "water".into(), system_bin: "water".into(), count: 1 }]);
        assert!(r.to_markdown().contains("| 1 | 100.0% | 50.0% |"));
    }

    #[test]
    fn rejects_bad_annotations() {
        let bad = vec![GroundTruthComment { letter_id: "L9".into(), start: 0, end: 1, bin_name: "x".into() }];
        assert_eq!(evaluate::<f64>(&fixture(), &bad, &[0]).unwrap_err(), EvalError::UnknownLetter("L9".into()));
        let far = vec![GroundTruthComment { letter_id: "L1".into(), start: 0, end: 999, bin_name: "x".into() }];
        assert!(matches!(evaluate::<f64>(&fixture(), &far, &[0]), Err(EvalError::SpanOutOfRange { .. })));
        assert!(parse_ground_truth("{\"letter_id\":\"a\",\"start\":3,\"end\":3,\"bin_name\":\"b\"}", "t").is_err());
    }
}
