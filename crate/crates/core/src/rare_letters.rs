//! The "rare letters" word-counting task used to demonstrate prompt
//! selection: count the words of a sentence that contain any letter from a
//! hidden set.

use crate::schema::{FieldKind, FieldSpec, Schema, SubroutineSpec};

/// Default hidden letter set.
pub const RARE_LETTERS: [char; 4] = ['Q', 'W', 'X', 'Z'];

/// Sentences that each contain every letter of [`RARE_LETTERS`].
pub const PANGRAMS: &[&str] = &[
    "Pack my box with five dozen liquor jugs.",
    "The quick brown fox jumps over the lazy dog.",
    "Sphinx of black quartz, judge my vow.",
    "Jackdaws love my big sphinx of quartz.",
    "How vexingly quick daft zebras jump!",
    "The five boxing wizards jump quickly.",
    "Quick zephyrs blow, vexing daft Jim.",
    "Waltz, bad nymph, for quick jigs vex.",
    "Two driven jocks help fax my big quiz.",
    "Jived fox nymph grabs quick waltz.",
];

/// Number of whitespace-separated words containing at least one of
/// `letters`, compared case-insensitively.
pub fn count_rare_words(text: &str, letters: &[char]) -> usize {
    let upper: Vec<char> = letters.iter().map(|c| c.to_ascii_uppercase()).collect();
    text.split_whitespace()
        .filter(|w| w.chars().any(|c| upper.contains(&c.to_ascii_uppercase())))
        .count()
}

pub fn input_schema() -> Schema {
    Schema::new(vec![FieldSpec::new(
        "given_text",
        FieldKind::Text,
        "The given text",
    )])
    .expect("static schema")
}

pub fn output_schema() -> Schema {
    Schema::new(vec![
        FieldSpec::new("scratch_work", FieldKind::Text, "A place for scratch work"),
        FieldSpec::new(
            "character_count",
            FieldKind::Integer,
            "Number of instances in the text",
        ),
    ])
    .expect("static schema")
}

pub fn spec() -> SubroutineSpec {
    SubroutineSpec::new(
        "rare_letters",
        "Count the of number of words containing rare letters in the given text.",
        input_schema(),
        output_schema(),
    )
    .expect("static spec")
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent scan: lower-case everything and test membership per byte.
    fn oracle(text: &str) -> usize {
        let mut n = 0;
        for word in text.split(' ').filter(|w| !w.is_empty()) {
            let lw = word.to_lowercase();
            if lw.contains('q') || lw.contains('w') || lw.contains('x') || lw.contains('z') {
                n += 1;
            }
        }
        n
    }

    #[test]
    fn pack_my_box() {
        // box, with, dozen, liquor
        assert_eq!(count_rare_words("Pack my box with five dozen liquor jugs.", &RARE_LETTERS), 4);
        // Quick, wax, zebras
        assert_eq!(count_rare_words("Quick wax zebras jump.", &RARE_LETTERS), 3);
    }

    #[test]
    fn matches_oracle_on_pool() {
        for s in PANGRAMS {
            assert_eq!(count_rare_words(s, &RARE_LETTERS), oracle(s), "{s}");
        }
    }

    #[test]
    fn pool_sentences_contain_every_letter() {
        for s in PANGRAMS {
            let up = s.to_uppercase();
            for c in RARE_LETTERS {
                assert!(up.contains(c), "{s} lacks {c}");
            }
        }
    }
}
