//! Deterministic sentence segmentation.

use serde::{Deserialize, Serialize};

/// Tokens that end in a period without ending a sentence.
pub const ABBREVIATIONS: &[&str] = &[
    "al", "approx", "cf", "corp", "dept", "dr", "e.g", "fig", "gov", "i.e", "inc", "jr", "ltd", "mr", "mrs",
    "ms", "mt", "prof", "sr", "st", "u.s", "vs",
];

/// One sentence: `[start, end)` in characters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceSpan {
    pub index: usize,
    pub start: usize,
    pub end: usize,
}

impl SentenceSpan {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

fn terminal(c: char) -> bool {
    matches!(c, '.' | '!' | '?')
}

fn closer(c: char) -> bool {
    matches!(c, '"' | '\'' | ')' | ']' | '\u{201d}' | '\u{2019}')
}

fn guarded(chars: &[char], dot: usize) -> bool {
    let mut s = dot;
    while s > 0 && !chars[s - 1].is_whitespace() {
        s -= 1;
    }
    let word: String = chars[s..dot]
        .iter()
        .skip_while(|c| matches!(c, '(' | '"' | '\'' | '[' | '\u{201c}' | '\u{2018}'))
        .flat_map(|c| c.to_lowercase())
        .collect();
    ABBREVIATIONS.contains(&word.as_str())
}

/// Split on `.`, `!` or `?` (plus trailing closing quotes and brackets)
/// followed by whitespace or the end of the text. Periods after a guarded
/// abbreviation do not split. Spans are trimmed of surrounding whitespace
/// and together cover every non-whitespace character.
pub fn split_sentences(text: &str) -> Vec<SentenceSpan> {
    let chars: Vec<char> = text.chars().collect();
    let n = chars.len();
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    let mut i = 0;
    while i < n {
        let c = chars[i];
        if start.is_none() {
            if c.is_whitespace() {
                i += 1;
                continue;
            }
            start = Some(i);
        }
        if terminal(c) {
            let mut j = i + 1;
            while j < n && (terminal(chars[j]) || closer(chars[j])) {
                j += 1;
            }
            let at_break = j == n || chars[j].is_whitespace();
            let abbreviation = c == '.' && j == i + 1 && guarded(&chars, i);
            if at_break && !abbreviation {
                out.push(SentenceSpan {
                    index: out.len(),
                    start: start.take().expect("open sentence"),
                    end: j,
                });
            }
            i = j;
            continue;
        }
        i += 1;
    }
    if let Some(s) = start {
        let mut end = n;
        while end > s && chars[end - 1].is_whitespace() {
            end -= 1;
        }
        out.push(SentenceSpan {
            index: out.len(),
            start: s,
            end,
        });
    }
    out
}

/// Sentence texts, for callers that do not need offsets.
pub fn sentence_texts(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    split_sentences(text)
        .iter()
        .map(|s| chars[s.start..s.end].iter().collect())
        .collect()
}
