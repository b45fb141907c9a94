//! Fuzzy quote verification.
//!
//! A quote is accepted if some window of the source text, with length
//! within ±20% of the quote's, has normalized edit similarity
//! `1 - d / max(|quote|, |window|)` at or above the threshold. All lengths
//! and offsets count Unicode scalar values.
//!
//! The search runs a semi-global edit distance pass (free start in the
//! text) to find window ends that can possibly reach the threshold, then
//! scores every admissible window ending there with a reverse pass.

use serde::{Deserialize, Serialize};

pub const DEFAULT_THRESHOLD: f64 = 0.85;
pub const DEFAULT_LENGTH_SLACK: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchConfig {
    pub threshold: f64,
    /// Admissible window lengths are `|quote| * (1 ± slack)`.
    pub length_slack: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            length_slack: DEFAULT_LENGTH_SLACK,
        }
    }
}

/// A verified quote: `[start, end)` in characters of the source text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuoteSpan {
    pub raw_quote: String,
    pub start: usize,
    pub end: usize,
    pub similarity: f64,
}

impl QuoteSpan {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

/// Substring by character offsets.
pub fn slice_chars(text: &str, start: usize, end: usize) -> String {
    text.chars().skip(start).take(end.saturating_sub(start)).collect()
}

/// `1 - d / max(|a|, |b|)` for an edit distance `d`.
pub fn similarity_from(distance: usize, a_len: usize, b_len: usize) -> f64 {
    let m = a_len.max(b_len);
    if m == 0 {
        return 1.0;
    }
    1.0 - distance as f64 / m as f64
}

pub fn levenshtein(a: &[char], b: &[char]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Normalized edit similarity of two strings.
pub fn similarity(a: &str, b: &str) -> f64 {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    similarity_from(levenshtein(&a, &b), a.len(), b.len())
}

/// Admissible window lengths for a quote of `q` characters in a text of
/// `n` characters.
pub fn window_lengths(q: usize, n: usize, slack: f64) -> (usize, usize) {
    let lo = ((q as f64) * (1.0 - slack)).ceil().max(1.0) as usize;
    let hi = ((q as f64) * (1.0 + slack)).floor() as usize;
    let hi = hi.max(lo).min(n);
    (lo.min(hi), hi)
}

/// Best-matching window for `quote` in `text`, if it reaches the
/// threshold. Ties go to the earliest start, then the shortest window.
pub fn verify_quote(quote: &str, text: &str, config: &MatchConfig) -> Option<QuoteSpan> {
    let q: Vec<char> = quote.chars().collect();
    let t: Vec<char> = text.chars().collect();
    if q.is_empty() || t.is_empty() {
        return None;
    }
    let (lo, hi) = window_lengths(q.len(), t.len(), config.length_slack);
    // any window at or above threshold has distance at most this
    let budget = ((1.0 - config.threshold) * q.len().max(hi) as f64 + 1e-9).floor() as usize;

    // semi-global pass: best[e] = min distance of the quote to any
    // substring ending at e
    let m = q.len();
    let mut col: Vec<usize> = (0..=m).collect();
    let mut ends = Vec::new();
    for (e, &tc) in t.iter().enumerate() {
        let mut diag = col[0];
        col[0] = 0;
        for i in 1..=m {
            let up = col[i];
            col[i] = (diag + usize::from(q[i - 1] != tc)).min(up + 1).min(col[i - 1] + 1);
            diag = up;
        }
        if col[m] <= budget && e + 1 >= lo {
            ends.push(e + 1);
        }
    }

    let mut best: Option<(f64, usize, usize)> = None;
    let better = |cand: (f64, usize, usize), cur: Option<(f64, usize, usize)>| match cur {
        None => true,
        Some(c) => cand.0 > c.0 || (cand.0 == c.0 && (cand.1, cand.2) < (c.1, c.2)),
    };
    for end in ends {
        // reverse pass over t[end-k..end] for k = 1..=hi
        let mut col: Vec<usize> = (0..=m).collect();
        for k in 1..=hi.min(end) {
            let tc = t[end - k];
            let mut diag = col[0];
            col[0] = k;
            for i in 1..=m {
                let up = col[i];
                col[i] = (diag + usize::from(q[m - i] != tc)).min(up + 1).min(col[i - 1] + 1);
                diag = up;
            }
            if k >= lo {
                let sim = similarity_from(col[m], m, k);
                let cand = (sim, end - k, k);
                if sim >= config.threshold && better(cand, best) {
                    best = Some(cand);
                }
            }
        }
    }
    best.map(|(similarity, start, len)| QuoteSpan {
        raw_quote: quote.to_string(),
        start,
        end: start + len,
        similarity,
    })
}

/// Recompute a persisted span's similarity against its source.
pub fn recheck(span: &QuoteSpan, text: &str) -> f64 {
    similarity(&span.raw_quote, &slice_chars(text, span.start, span.end))
}

#[cfg(test)]
mod tests {
    use super::*;

    const LETTER: &str = "I support solar power. Alternative 5 is the most sensible option here. \
                          It avoids undisturbed land.";

    #[test]
    fn exact_sentence() {
        let s = verify_quote("It avoids undisturbed land.", LETTER, &MatchConfig::default()).unwrap();
        assert_eq!(s.similarity, 1.0);
        assert_eq!(slice_chars(LETTER, s.start, s.end), "It avoids undisturbed land.");
    }

    #[test]
    fn truncated_quote_matches_its_region() {
        let s = verify_quote(
            "Alternative 5 is the most sensible option",
            LETTER,
            &MatchConfig::default(),
        )
        .unwrap();
        assert!(s.similarity > 0.9);
        assert!(slice_chars(LETTER, s.start, s.end).starts_with("Alternative 5"));
    }

    #[test]
    fn unrelated_text_rejected() {
        assert!(verify_quote("Ban all offshore drilling immediately", LETTER, &MatchConfig::default()).is_none());
    }

    #[test]
    fn one_typo_in_sixty() {
        let text = "The agency should protect desert tortoise habitat near the river corridor.";
        let exact: String = text.chars().take(60).collect();
        let mut typo: Vec<char> = exact.chars().collect();
        typo[30] = if typo[30] == 'x' { 'y' } else { 'x' };
        let typo: String = typo.into_iter().collect();
        let s = verify_quote(&typo, text, &MatchConfig::default()).unwrap();
        assert!(s.similarity >= 0.98, "{}", s.similarity);
        assert_eq!((s.start, s.end), (0, 60));
    }

    #[test]
    fn multibyte_offsets_are_characters() {
        let text = "Ça va. Über alles gut.";
        let s = verify_quote("Über alles gut.", text, &MatchConfig::default()).unwrap();
        assert_eq!((s.start, s.end), (7, 22));
        assert_eq!(recheck(&s, text), 1.0);
    }

    #[test]
    fn quote_longer_than_text() {
        let s = verify_quote("abcdefghij", "abcdefghi", &MatchConfig::default()).unwrap();
        assert_eq!((s.start, s.end), (0, 9));
        assert!((s.similarity - 0.9).abs() < 1e-12);
    }

    #[test]
    fn window_bounds() {
        assert_eq!(window_lengths(10, 100, 0.2), (8, 12));
        assert_eq!(window_lengths(3, 100, 0.2), (3, 3));
        assert_eq!(window_lengths(10, 5, 0.2), (5, 5));
    }
}
