//! Per-batch report: bin summaries with citations, plus the completeness
//! ledger for every letter. Serializes as JSON and renders as Markdown.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::quote::QuoteSpan;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Citation {
    pub letter_id: String,
    pub concern_id: String,
    #[serde(flatten)]
    pub span: QuoteSpan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinReport {
    pub bin_name: String,
    pub summary: String,
    pub invocation_id: String,
    pub citations: Vec<Citation>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LetterStatus {
    pub letter_id: String,
    pub summary_invocation: Option<String>,
    pub extract_invocation: Option<String>,
    pub concerns: usize,
    pub dropped_concerns: usize,
    pub binned_concerns: usize,
    /// Whether any bin summary cites the letter.
    pub cited: bool,
}

impl LetterStatus {
    /// Summary and extraction done, and every kept concern binned.
    pub fn complete(&self) -> bool {
        self.summary_invocation.is_some() && self.extract_invocation.is_some() && self.binned_concerns == self.concerns
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeadTask {
    pub kind: String,
    pub key: String,
    pub attempts: u32,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    pub run_id: String,
    pub batch_id: String,
    pub batch_index: usize,
    pub state: String,
    pub letters: Vec<LetterStatus>,
    pub concerns: usize,
    pub failed_verifications: usize,
    pub rejected_citations: usize,
    pub bins: Vec<BinReport>,
    pub dead_tasks: Vec<DeadTask>,
}

impl BatchReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let complete = self.letters.iter().filter(|l| l.complete()).count();
        let _ = writeln!(s, "# Batch {} ({})\n", self.batch_index, self.batch_id);
        let _ = writeln!(s, "- state: {}", self.state);
        let _ = writeln!(s, "- letters: {} ({} complete)", self.letters.len(), complete);
        let _ = writeln!(s, "- concerns: {}", self.concerns);
        let _ = writeln!(s, "- concerns dropped for unverifiable quotes: {}", self.failed_verifications);
        let _ = writeln!(s, "- citations rejected: {}", self.rejected_citations);
        let _ = writeln!(s, "- dead tasks: {}", self.dead_tasks.len());
        for b in &self.bins {
            let _ = writeln!(s, "\n## {}\n\n{}\n", b.bin_name, b.summary.trim());
            for c in &b.citations {
                let _ = writeln!(
                    s,
                    "- [{}] \"{}\" (chars {}..{}, similarity {:.3})",
                    c.letter_id,
                    c.span.raw_quote.replace('\n', " "),
                    c.span.start,
                    c.span.end,
                    c.span.similarity
                );
            }
        }
        if !self.dead_tasks.is_empty() {
            let _ = writeln!(s, "\n## Failures\n");
            for d in &self.dead_tasks {
                let _ = writeln!(
                    s,
                    "- {} `{}` after {} attempt(s): {}",
                    d.kind,
                    d.key,
                    d.attempts,
                    d.error.as_deref().unwrap_or("unknown error")
                );
            }
        }
        s
    }
}
