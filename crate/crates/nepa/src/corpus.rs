//! Pipeline inputs: letters, binning guidance and project context.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use auditlm::schema::is_identifier;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum InputError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("letter `{0}` has empty text")]
    EmptyLetter(String),
    #[error("duplicate letter id `{0}`")]
    DuplicateLetter(String),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("guidance defines no bins")]
    NoBins,
    #[error("bin name `{0}` is not an identifier")]
    BadBinName(String),
    #[error("duplicate bin `{0}`")]
    DuplicateBin(String),
}

pub(crate) fn read(path: &Path) -> Result<String, InputError> {
    std::fs::read_to_string(path).map_err(|source| InputError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// One piece of public correspondence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Letter {
    #[serde(rename = "id", alias = "letter_id")]
    pub letter_id: String,
    pub text: String,
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl Letter {
    pub fn new(letter_id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            letter_id: letter_id.into(),
            text: text.into(),
            metadata: BTreeMap::new(),
        }
    }

    /// Length in characters; all offsets into `text` count characters.
    pub fn char_len(&self) -> usize {
        self.text.chars().count()
    }
}

/// Check a corpus: nonempty, distinct ids, nonempty texts.
pub fn validate_corpus(letters: &[Letter]) -> Result<(), InputError> {
    if letters.is_empty() {
        return Err(InputError::EmptyCorpus);
    }
    let mut seen = HashSet::new();
    for l in letters {
        if l.text.trim().is_empty() {
            return Err(InputError::EmptyLetter(l.letter_id.clone()));
        }
        if !seen.insert(l.letter_id.as_str()) {
            return Err(InputError::DuplicateLetter(l.letter_id.clone()));
        }
    }
    Ok(())
}

/// Parse newline-delimited `{id, text, metadata}` records. Blank lines are
/// skipped.
pub fn parse_corpus(text: &str, origin: &str) -> Result<Vec<Letter>, InputError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let letter: Letter = serde_json::from_str(line).map_err(|e| InputError::Parse {
            path: origin.to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(letter);
    }
    validate_corpus(&out)?;
    Ok(out)
}

pub fn load_corpus(path: &Path) -> Result<Vec<Letter>, InputError> {
    parse_corpus(&read(path)?, &path.display().to_string())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinDef {
    #[serde(rename = "name", alias = "bin_name")]
    pub bin_name: String,
    #[serde(default)]
    pub guidance: String,
}

impl BinDef {
    pub fn new(name: &str, guidance: &str) -> Self {
        Self {
            bin_name: name.to_string(),
            guidance: guidance.to_string(),
        }
    }
}

/// Binning guidance: general instructions plus the bin list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Guidance {
    #[serde(default)]
    pub instructions: String,
    pub bins: Vec<BinDef>,
}

impl Guidance {
    pub fn new(instructions: &str, bins: Vec<BinDef>) -> Result<Self, InputError> {
        let g = Self {
            instructions: instructions.to_string(),
            bins,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), InputError> {
        if self.bins.is_empty() {
            return Err(InputError::NoBins);
        }
        let mut seen = HashSet::new();
        for b in &self.bins {
            if !is_identifier(&b.bin_name) {
                return Err(InputError::BadBinName(b.bin_name.clone()));
            }
            if !seen.insert(b.bin_name.as_str()) {
                return Err(InputError::DuplicateBin(b.bin_name.clone()));
            }
        }
        Ok(())
    }

    pub fn bin_names(&self) -> Vec<String> {
        self.bins.iter().map(|b| b.bin_name.clone()).collect()
    }

    pub fn has_bin(&self, name: &str) -> bool {
        self.bins.iter().any(|b| b.bin_name == name)
    }

    /// Parse TOML, or JSON when `origin` ends in `.json`.
    pub fn parse(text: &str, origin: &str) -> Result<Self, InputError> {
        let parsed: Result<Self, String> = if origin.ends_with(".json") {
            serde_json::from_str(text).map_err(|e| e.to_string())
        } else {
            toml::from_str(text).map_err(|e| e.to_string())
        };
        let g = parsed.map_err(|message| InputError::Parse {
            path: origin.to_string(),
            line: 0,
            message,
        })?;
        g.validate()?;
        Ok(g)
    }

    pub fn load(path: &Path) -> Result<Self, InputError> {
        Self::parse(&read(path)?, &path.display().to_string())
    }
}

/// Project description text. Surrounding whitespace is dropped.
pub fn load_context(path: &Path) -> Result<String, InputError> {
    Ok(read(path)?.trim().to_string())
}

/// Split letters into consecutive batches of at most `size`.
pub fn partition<T: Clone>(items: &[T], size: usize) -> Vec<Vec<T>> {
    items.chunks(size.max(1)).map(<[T]>::to_vec).collect()
}
