//! Named output generators for the scripted backend.
//!
//! A generator maps a request (system prompt, parsed user payload, output
//! schema) to a JSON payload. Arms of a scripted backend are described by a
//! pair of generator names: one for correct behavior and one for incorrect.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use indexmap::IndexMap;
use serde_json::{json, Map, Value as Json};

use super::GenerationRequest;
use crate::rare_letters::{count_rare_words, RARE_LETTERS};
use crate::schema::{FieldKind, FieldSpec, Schema};

pub struct GenContext<'a> {
    pub request: &'a GenerationRequest,
    /// User payload sections by name.
    pub fields: IndexMap<String, String>,
    /// Deterministic per-call entropy.
    pub entropy: u64,
}

impl GenContext<'_> {
    pub fn field(&self, name: &str) -> Option<&str> {
        self.fields.get(name).map(String::as_str)
    }

    /// First section whose name ends with `suffix`.
    pub fn field_ending(&self, suffix: &str) -> Option<&str> {
        self.fields
            .iter()
            .find(|(k, _)| k.ends_with(suffix))
            .map(|(_, v)| v.as_str())
    }

    pub fn schema(&self) -> &Schema {
        &self.request.schema
    }
}

pub type Generator = Arc<dyn Fn(&GenContext<'_>) -> Json + Send + Sync>;

#[derive(Clone, Default)]
pub struct GeneratorRegistry {
    generators: HashMap<String, Generator>,
}

impl fmt::Debug for GeneratorRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut names: Vec<_> = self.generators.keys().collect();
        names.sort();
        f.debug_struct("GeneratorRegistry").field("names", &names).finish()
    }
}

impl GeneratorRegistry {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Registry preloaded with the generic and rare-letters generators.
    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register("schema_default", |cx| default_for_schema(cx.schema()));
        r.register("schema_invalid", |_| json!({}));
        r.register("rare_letters_correct", |cx| rare_letters(cx, 0));
        r.register("rare_letters_wrong", |cx| rare_letters(cx, 1));
        r.register("critique_max", |cx| critique(cx, |_, hi, _| hi));
        r.register("critique_min", |cx| critique(cx, |lo, _, _| lo));
        r.register("critique_hash", |cx| {
            critique(cx, |lo, hi, e| lo + (e % ((hi - lo + 1) as u64)) as i64)
        });
        r.register("critique_rare_letters", critique_rare_letters);
        r
    }

    pub fn register<F>(&mut self, name: &str, f: F)
    where
        F: Fn(&GenContext<'_>) -> Json + Send + Sync + 'static,
    {
        self.generators.insert(name.to_string(), Arc::new(f));
    }

    pub fn get(&self, name: &str) -> Option<&Generator> {
        self.generators.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.generators.contains_key(name)
    }
}

fn default_for_kind(kind: &FieldKind) -> Json {
    match kind {
        FieldKind::Text => json!("n/a"),
        FieldKind::Integer => json!(0),
        FieldKind::BoundedInteger { lo, .. } => json!(lo),
        FieldKind::Enumeration { values } => json!(values[0]),
        FieldKind::List { item, min_items } => {
            Json::Array((0..(*min_items).max(1)).map(|_| default_for_kind(item)).collect())
        }
        FieldKind::Record { fields } => default_for_fields(fields),
    }
}

fn default_for_fields(fields: &[FieldSpec]) -> Json {
    Json::Object(
        fields
            .iter()
            .map(|f| (f.name.clone(), default_for_kind(&f.kind)))
            .collect(),
    )
}

/// Smallest payload that satisfies `schema`.
pub fn default_for_schema(schema: &Schema) -> Json {
    default_for_fields(schema.fields())
}

/// Schema-valid payload with selected top-level fields overridden.
pub fn fill(schema: &Schema, overrides: Map<String, Json>) -> Json {
    let mut base = default_for_schema(schema);
    if let Json::Object(obj) = &mut base {
        for (k, v) in overrides {
            if obj.contains_key(&k) {
                obj.insert(k, v);
            }
        }
    }
    base
}

fn rare_letters(cx: &GenContext<'_>, offset: i64) -> Json {
    let text = cx.field("given_text").unwrap_or_default();
    let n = count_rare_words(text, &RARE_LETTERS) as i64 + offset;
    let mut o = Map::new();
    o.insert(
        "scratch_work".into(),
        json!(format!("Scanned {} words.", text.split_whitespace().count())),
    );
    o.insert("character_count".into(), json!(n));
    fill(cx.schema(), o)
}

/// Fill every bounded-integer output field with `pick(lo, hi, entropy)`.
fn critique(cx: &GenContext<'_>, pick: impl Fn(i64, i64, u64) -> i64) -> Json {
    let mut o = Map::new();
    for (i, f) in cx.schema().fields().iter().enumerate() {
        if let FieldKind::BoundedInteger { lo, hi } = f.kind {
            let e = cx.entropy.rotate_left(i as u32 * 7);
            o.insert(f.name.clone(), json!(pick(lo, hi, e)));
        }
    }
    o.insert("explanation".into(), json!("Scripted critique."));
    fill(cx.schema(), o)
}

fn critique_rare_letters(cx: &GenContext<'_>) -> Json {
    let text = cx.field("input_given_text").unwrap_or_default();
    let claimed = cx
        .field("output_character_count")
        .and_then(|s| s.trim().parse::<i64>().ok());
    let truth = count_rare_words(text, &RARE_LETTERS) as i64;
    let good = claimed == Some(truth);
    let mut o = Map::new();
    for f in cx.schema().fields() {
        if let FieldKind::BoundedInteger { lo, hi } = f.kind {
            o.insert(f.name.clone(), json!(if good { hi } else { lo }));
        }
    }
    let why = if good {
        format!("The count {truth} is correct.")
    } else {
        format!("Expected {truth}, got {claimed:?}.")
    };
    o.insert("explanation".into(), json!(why));
    fill(cx.schema(), o)
}
