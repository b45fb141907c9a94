//! Declarations of the four pipeline stages and the per-batch binning
//! schema.

use std::collections::BTreeMap;
use std::fmt;

use auditlm::critique::RatingDimension;
use auditlm::schema::{is_identifier, FieldKind, FieldSpec, Record, Schema, SchemaError, SubroutineSpec, Value};
use serde::{Deserialize, Serialize};

/// Concerns binned by one binning call, at most.
pub const DEFAULT_BIN_BATCH: usize = 20;
/// Starting length of concern keys in the binning schema.
pub const KEY_PREFIX_LEN: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Summarize,
    Extract,
    Bin,
    BinSummary,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Summarize, Stage::Extract, Stage::Bin, Stage::BinSummary];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Summarize => "summarize",
            Stage::Extract => "extract",
            Stage::Bin => "bin",
            Stage::BinSummary => "bin_summary",
        }
    }

    pub fn parse(s: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|st| st.as_str() == s)
    }

    /// Stage label of the critique invocations of this stage.
    pub fn critique_label(self) -> String {
        format!("{}_critique", self.as_str())
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Stage label of letter-ingest records.
pub const INGEST_STAGE: &str = "ingest";

/// Rating dimensions per stage. Configuration, not code.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageDims {
    pub summarize: Vec<RatingDimension>,
    pub extract: Vec<RatingDimension>,
    pub bin: Vec<RatingDimension>,
    pub bin_summary: Vec<RatingDimension>,
}

impl Default for StageDims {
    fn default() -> Self {
        let d = |names: &[&str]| names.iter().map(|n| RatingDimension::new(n)).collect();
        Self {
            summarize: d(&["coverage", "brevity"]),
            extract: d(&["faithfulness", "completeness"]),
            bin: d(&["correctness"]),
            bin_summary: d(&["coverage", "citation_quality"]),
        }
    }
}

impl StageDims {
    pub fn get(&self, stage: Stage) -> &[RatingDimension] {
        match stage {
            Stage::Summarize => &self.summarize,
            Stage::Extract => &self.extract,
            Stage::Bin => &self.bin,
            Stage::BinSummary => &self.bin_summary,
        }
    }
}

fn text(name: &str, doc: &str) -> FieldSpec {
    FieldSpec::new(name, FieldKind::Text, doc)
}

fn record(fields: Vec<FieldSpec>) -> FieldKind {
    FieldKind::Record { fields }
}

fn schema(fields: Vec<FieldSpec>) -> Schema {
    Schema::new(fields).expect("static schema")
}

fn declare(name: &str, task: &str, input: Schema, output: Schema, context: &str) -> SubroutineSpec {
    SubroutineSpec::new(name, task, input, output)
        .expect("static declaration")
        .with_context(context)
}

pub fn ingest_spec() -> SubroutineSpec {
    SubroutineSpec::new(
        "letter_ingest",
        "Record one letter of public correspondence as received.",
        schema(vec![
            text("letter_id", "Identifier of the letter in the corpus"),
            text("text", "Full text of the letter"),
        ]),
        Schema::empty(),
    )
    .expect("static declaration")
}

pub fn summarize_spec(context: &str) -> SubroutineSpec {
    declare(
        "summarize_letter",
        "Summarize one letter of public correspondence, distilling its chief concerns \
         without regard to authorship, tone, or extraneous information.",
        schema(vec![text("letter", "Full text of the letter")]),
        schema(vec![text("summary", "Summary of the letter's concerns")]),
        context,
    )
}

pub fn extract_spec(context: &str) -> SubroutineSpec {
    let concern = record(vec![
        text("statement", "The concern, stated in plain language"),
        FieldSpec::new(
            "quotes",
            FieldKind::nonempty_list(FieldKind::Text),
            "Verbatim quotes from the letter that support the concern",
        ),
    ]);
    declare(
        "extract_concerns",
        "Using the letter and its summary, list the distinct concerns the letter raises. \
         Support each concern with quotes copied verbatim from the letter.",
        schema(vec![
            text("letter", "Full text of the letter"),
            text("summary", "Summary of the letter's concerns"),
        ]),
        schema(vec![FieldSpec::new("concerns", FieldKind::list(concern), "Concerns raised by the letter")]),
        context,
    )
}

pub fn bin_spec(context: &str) -> SubroutineSpec {
    declare(
        "bin_concerns",
        "Map each concern to one or more bins, following the binning guidance. \
         Use only the bin names provided.",
        schema(vec![
            FieldSpec::new(
                "concerns",
                FieldKind::list(record(vec![
                    text("key", "Short key identifying the concern"),
                    text("statement", "The concern"),
                ])),
                "Concerns to bin",
            ),
            FieldSpec::new(
                "bins",
                FieldKind::list(record(vec![text("name", "Bin name"), text("guidance", "What belongs in the bin")])),
                "Available bins",
            ),
            text("instructions", "General binning guidance"),
        ]),
        schema(vec![FieldSpec::new(
            "assignments",
            FieldKind::list(record(vec![
                text("concern", "Key of the concern"),
                FieldSpec::new("bins", FieldKind::nonempty_list(FieldKind::Text), "Bins for the concern"),
            ])),
            "One entry per concern",
        )]),
        context,
    )
}

pub fn bin_summary_spec(context: &str) -> SubroutineSpec {
    declare(
        "summarize_bin",
        "Summarize the concerns assigned to one bin, citing the letters they came from \
         with quotes copied verbatim from those letters.",
        schema(vec![
            text("bin_name", "The bin"),
            text("bin_guidance", "What belongs in the bin"),
            FieldSpec::new(
                "concerns",
                FieldKind::list(record(vec![
                    text("letter_id", "Letter the concern came from"),
                    text("statement", "The concern"),
                    FieldSpec::new("quotes", FieldKind::list(FieldKind::Text), "Supporting quotes"),
                ])),
                "Concerns assigned to the bin",
            ),
        ]),
        schema(vec![
            text("summary", "Summary of the concerns in the bin"),
            FieldSpec::new(
                "citations",
                FieldKind::nonempty_list(record(vec![
                    text("letter_id", "Cited letter"),
                    text("quote", "Verbatim quote from the cited letter"),
                ])),
                "Citations supporting the summary",
            ),
        ]),
        context,
    )
}

pub fn stage_spec(stage: Stage, context: &str) -> SubroutineSpec {
    match stage {
        Stage::Summarize => summarize_spec(context),
        Stage::Extract => extract_spec(context),
        Stage::Bin => bin_spec(context),
        Stage::BinSummary => bin_summary_spec(context),
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KeyError {
    #[error("concern id `{0}` cannot be used as a schema key")]
    BadId(String),
    #[error("duplicate concern id `{0}`")]
    Duplicate(String),
}

/// Shortest common prefix length (at least [`KEY_PREFIX_LEN`]) at which all
/// ids are distinct, and the resulting keys.
pub fn concern_keys(ids: &[String]) -> Result<Vec<String>, KeyError> {
    for id in ids {
        if !is_identifier(id) {
            return Err(KeyError::BadId(id.clone()));
        }
    }
    let longest = ids.iter().map(|i| i.chars().count()).max().unwrap_or(0);
    let mut len = KEY_PREFIX_LEN;
    loop {
        let keys: Vec<String> = ids.iter().map(|i| i.chars().take(len).collect()).collect();
        let mut seen = std::collections::HashSet::new();
        let dup = keys.iter().position(|k| !seen.insert(k.as_str()));
        match dup {
            None => return Ok(keys),
            Some(i) if len >= longest => return Err(KeyError::Duplicate(ids[i].clone())),
            Some(_) => len += 1,
        }
    }
}

/// Output schema for one binning call: one field per concern key whose
/// value is a nonempty list of bin names.
pub fn binning_schema(keys: &[(String, String)], bin_names: &[String]) -> Result<Schema, SchemaError> {
    Schema::new(
        keys.iter()
            .map(|(key, statement)| {
                FieldSpec::new(
                    key.clone(),
                    FieldKind::nonempty_list(FieldKind::enumeration(bin_names.iter().cloned())),
                    statement.clone(),
                )
            })
            .collect(),
    )
}

/// Per-batch binning output in the declared list form.
pub fn assignments_view(output: &Record) -> Record {
    let items = output
        .iter()
        .map(|(key, bins)| {
            Value::Record(
                Record::new()
                    .with("concern", key)
                    .with("bins", bins.clone()),
            )
        })
        .collect::<Vec<_>>();
    Record::new().with("assignments", items)
}

/// Bin names per key from a per-batch binning output.
pub fn assignments(output: &Record) -> BTreeMap<String, Vec<String>> {
    output
        .iter()
        .map(|(key, bins)| {
            let names = bins
                .as_list()
                .unwrap_or_default()
                .iter()
                .filter_map(|v| v.as_text().map(str::to_string))
                .collect();
            (key.to_string(), names)
        })
        .collect()
}
