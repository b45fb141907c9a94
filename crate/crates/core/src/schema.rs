//! Typed field and schema definitions for subroutine inputs and outputs.
//!
//! A [`Schema`] is an ordered list of [`FieldSpec`]s. It is rendered into a
//! constraint document (see [`emit_constraint_schema`]) that is sent to the
//! LM backend, and returned payloads are checked with [`validate_payload`].
//! Validation is strict: undeclared fields are rejected.

use std::collections::HashSet;
use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value as Json};
use sha2::{Digest, Sha256};

/// Maximum container nesting. The root object counts as level 1; every
/// record or list adds a level.
pub const MAX_DEPTH: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SchemaError {
    #[error("field name `{0}` is not a valid identifier")]
    InvalidName(String),
    #[error("duplicate field name `{0}`")]
    DuplicateField(String),
    #[error("field `{name}`: bounded integer has lo {lo} > hi {hi}")]
    InvertedBounds { name: String, lo: i64, hi: i64 },
    #[error("field `{0}`: enumeration needs at least one value")]
    EmptyEnumeration(String),
    #[error("field `{name}`: duplicate enumeration value `{value}`")]
    DuplicateEnumValue { name: String, value: String },
    #[error("schema nesting exceeds depth {MAX_DEPTH}")]
    TooDeep,
    #[error("subroutine name `{0}` is not a valid identifier")]
    InvalidSubroutineName(String),
    #[error("subroutine task description is empty")]
    EmptyTaskDoc,
}

/// True for nonempty names made of ASCII alphanumerics, `_` and `-`.
pub fn is_identifier(name: &str) -> bool {
    !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FieldKind {
    Text,
    Integer,
    BoundedInteger {
        lo: i64,
        hi: i64,
    },
    Enumeration {
        values: Vec<String>,
    },
    List {
        item: Box<FieldKind>,
        #[serde(default, skip_serializing_if = "is_zero")]
        min_items: usize,
    },
    Record {
        fields: Vec<FieldSpec>,
    },
}

fn is_zero(n: &usize) -> bool {
    *n == 0
}

impl FieldKind {
    pub fn list(item: FieldKind) -> Self {
        FieldKind::List {
            item: Box::new(item),
            min_items: 0,
        }
    }

    pub fn nonempty_list(item: FieldKind) -> Self {
        FieldKind::List {
            item: Box::new(item),
            min_items: 1,
        }
    }

    pub fn enumeration<I, S>(values: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        FieldKind::Enumeration {
            values: values.into_iter().map(Into::into).collect(),
        }
    }

    fn label(&self) -> String {
        match self {
            FieldKind::Text => "text".into(),
            FieldKind::Integer => "integer".into(),
            FieldKind::BoundedInteger { lo, hi } => format!("integer from {lo} to {hi}"),
            FieldKind::Enumeration { values } => format!("one of {}", values.join(" | ")),
            FieldKind::List { item, min_items } if *min_items > 0 => {
                format!("list of {} (at least {min_items})", item.label())
            }
            FieldKind::List { item, .. } => format!("list of {}", item.label()),
            FieldKind::Record { .. } => "record".into(),
        }
    }

    /// Levels of nesting below (and including) this kind.
    fn depth(&self) -> usize {
        match self {
            FieldKind::List { item, .. } => 1 + item.depth(),
            FieldKind::Record { fields } => {
                1 + fields.iter().map(|f| f.kind.depth()).max().unwrap_or(0)
            }
            _ => 0,
        }
    }

    fn check(&self, name: &str) -> Result<(), SchemaError> {
        match self {
            FieldKind::BoundedInteger { lo, hi } if lo > hi => Err(SchemaError::InvertedBounds {
                name: name.to_string(),
                lo: *lo,
                hi: *hi,
            }),
            FieldKind::Enumeration { values } => {
                if values.is_empty() {
                    return Err(SchemaError::EmptyEnumeration(name.to_string()));
                }
                let mut seen = HashSet::new();
                for v in values {
                    if !seen.insert(v.as_str()) {
                        return Err(SchemaError::DuplicateEnumValue {
                            name: name.to_string(),
                            value: v.clone(),
                        });
                    }
                }
                Ok(())
            }
            FieldKind::List { item, .. } => item.check(name),
            FieldKind::Record { fields } => check_fields(fields),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: FieldKind,
    #[serde(default)]
    pub doc: String,
}

impl FieldSpec {
    pub fn new(name: impl Into<String>, kind: FieldKind, doc: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind,
            doc: doc.into(),
        }
    }
}

fn check_fields(fields: &[FieldSpec]) -> Result<(), SchemaError> {
    let mut seen = HashSet::new();
    for f in fields {
        if !is_identifier(&f.name) {
            return Err(SchemaError::InvalidName(f.name.clone()));
        }
        if !seen.insert(f.name.as_str()) {
            return Err(SchemaError::DuplicateField(f.name.clone()));
        }
        f.kind.check(&f.name)?;
    }
    Ok(())
}

/// An ordered, validated list of fields.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "RawSchema", into = "RawSchema")]
pub struct Schema {
    fields: Vec<FieldSpec>,
}

#[derive(Serialize, Deserialize)]
struct RawSchema {
    fields: Vec<FieldSpec>,
}

impl TryFrom<RawSchema> for Schema {
    type Error = SchemaError;
    fn try_from(raw: RawSchema) -> Result<Self, SchemaError> {
        Schema::new(raw.fields)
    }
}

impl From<Schema> for RawSchema {
    fn from(s: Schema) -> Self {
        RawSchema { fields: s.fields }
    }
}

impl Schema {
    pub fn new(fields: Vec<FieldSpec>) -> Result<Self, SchemaError> {
        check_fields(&fields)?;
        let depth = 1 + fields.iter().map(|f| f.kind.depth()).max().unwrap_or(0);
        if depth > MAX_DEPTH {
            return Err(SchemaError::TooDeep);
        }
        Ok(Self { fields })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn fields(&self) -> &[FieldSpec] {
        &self.fields
    }

    pub fn field(&self, name: &str) -> Option<&FieldSpec> {
        self.fields.iter().find(|f| f.name == name)
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("schema serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

/// Declaration of an LM-powered subroutine: the task description together
/// with typed input and output schemas.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSpec", into = "RawSpec")]
pub struct SubroutineSpec {
    name: String,
    task_doc: String,
    input_schema: Schema,
    output_schema: Schema,
    context: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct RawSpec {
    name: String,
    task_doc: String,
    input_schema: Schema,
    output_schema: Schema,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    context: Option<String>,
}

impl TryFrom<RawSpec> for SubroutineSpec {
    type Error = SchemaError;
    fn try_from(r: RawSpec) -> Result<Self, SchemaError> {
        let mut spec = SubroutineSpec::new(r.name, r.task_doc, r.input_schema, r.output_schema)?;
        spec.context = r.context;
        Ok(spec)
    }
}

impl From<SubroutineSpec> for RawSpec {
    fn from(s: SubroutineSpec) -> Self {
        RawSpec {
            name: s.name,
            task_doc: s.task_doc,
            input_schema: s.input_schema,
            output_schema: s.output_schema,
            context: s.context,
        }
    }
}

impl SubroutineSpec {
    pub fn new(
        name: impl Into<String>,
        task_doc: impl Into<String>,
        input_schema: Schema,
        output_schema: Schema,
    ) -> Result<Self, SchemaError> {
        let name = name.into();
        let task_doc = task_doc.into();
        if !is_identifier(&name) {
            return Err(SchemaError::InvalidSubroutineName(name));
        }
        if task_doc.trim().is_empty() {
            return Err(SchemaError::EmptyTaskDoc);
        }
        Ok(Self {
            name,
            task_doc,
            input_schema,
            output_schema,
            context: None,
        })
    }

    pub fn with_context(mut self, context: impl Into<String>) -> Self {
        let context = context.into();
        self.context = if context.trim().is_empty() {
            None
        } else {
            Some(context)
        };
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn task_doc(&self) -> &str {
        &self.task_doc
    }

    pub fn input_schema(&self) -> &Schema {
        &self.input_schema
    }

    pub fn output_schema(&self) -> &Schema {
        &self.output_schema
    }

    pub fn context(&self) -> Option<&str> {
        self.context.as_deref()
    }

    /// Hex SHA-256 over the canonical serialization of the whole declaration.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("spec serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

// ---------------------------------------------------------------------------
// Constraint documents

fn kind_document(kind: &FieldKind, doc: Option<&str>) -> Json {
    let mut obj = Map::new();
    match kind {
        FieldKind::Text => {
            obj.insert("type".into(), json!("string"));
        }
        FieldKind::Integer => {
            obj.insert("type".into(), json!("integer"));
        }
        FieldKind::BoundedInteger { lo, hi } => {
            obj.insert("type".into(), json!("integer"));
            obj.insert("minimum".into(), json!(lo));
            obj.insert("maximum".into(), json!(hi));
        }
        FieldKind::Enumeration { values } => {
            obj.insert("type".into(), json!("string"));
            obj.insert("enum".into(), json!(values));
        }
        FieldKind::List { item, min_items } => {
            obj.insert("type".into(), json!("array"));
            obj.insert("items".into(), kind_document(item, None));
            if *min_items > 0 {
                obj.insert("minItems".into(), json!(min_items));
            }
        }
        FieldKind::Record { fields } => {
            object_document(fields, &mut obj);
        }
    }
    if let Some(doc) = doc {
        obj.insert("description".into(), json!(doc));
    }
    Json::Object(obj)
}

fn object_document(fields: &[FieldSpec], obj: &mut Map<String, Json>) {
    let mut props = Map::new();
    for f in fields {
        props.insert(f.name.clone(), kind_document(&f.kind, Some(&f.doc)));
    }
    let required: Vec<&str> = fields.iter().map(|f| f.name.as_str()).collect();
    obj.insert("type".into(), json!("object"));
    obj.insert("properties".into(), Json::Object(props));
    obj.insert("required".into(), json!(required));
    obj.insert("additionalProperties".into(), json!(false));
}

/// Render the schema as a compact JSON-Schema object document.
///
/// Properties appear in declaration order and every property is required.
/// The output is a pure function of the schema.
pub fn emit_constraint_schema(schema: &Schema) -> String {
    let mut obj = Map::new();
    object_document(&schema.fields, &mut obj);
    serde_json::to_string(&Json::Object(obj)).expect("constraint document serializes")
}

/// Human-readable field listing, one line per field, nested fields indented.
pub fn describe_fields(schema: &Schema) -> String {
    let mut out = String::new();
    describe_into(&schema.fields, 0, &mut out);
    out
}

fn describe_into(fields: &[FieldSpec], indent: usize, out: &mut String) {
    for f in fields {
        let pad = "  ".repeat(indent);
        if f.doc.is_empty() {
            out.push_str(&format!("{pad}- {} ({})\n", f.name, f.kind.label()));
        } else {
            out.push_str(&format!("{pad}- {} ({}): {}\n", f.name, f.kind.label(), f.doc));
        }
        let mut kind = &f.kind;
        while let FieldKind::List { item, .. } = kind {
            kind = item;
        }
        if let FieldKind::Record { fields } = kind {
            describe_into(fields, indent + 1, out);
        }
    }
}

// ---------------------------------------------------------------------------
// Typed payloads

/// A value that conforms to some [`FieldKind`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Value {
    Text(String),
    Integer(i64),
    List(Vec<Value>),
    Record(Record),
}

impl Value {
    pub fn to_json(&self) -> Json {
        match self {
            Value::Text(s) => Json::String(s.clone()),
            Value::Integer(n) => json!(n),
            Value::List(items) => Json::Array(items.iter().map(Value::to_json).collect()),
            Value::Record(r) => r.to_json(),
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            Value::Text(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_integer(&self) -> Option<i64> {
        match self {
            Value::Integer(n) => Some(*n),
            _ => None,
        }
    }

    pub fn as_list(&self) -> Option<&[Value]> {
        match self {
            Value::List(items) => Some(items),
            _ => None,
        }
    }

    pub fn as_record(&self) -> Option<&Record> {
        match self {
            Value::Record(r) => Some(r),
            _ => None,
        }
    }
}

impl From<&str> for Value {
    fn from(s: &str) -> Self {
        Value::Text(s.to_string())
    }
}

impl From<String> for Value {
    fn from(s: String) -> Self {
        Value::Text(s)
    }
}

impl From<i64> for Value {
    fn from(n: i64) -> Self {
        Value::Integer(n)
    }
}

impl From<Vec<Value>> for Value {
    fn from(items: Vec<Value>) -> Self {
        Value::List(items)
    }
}

impl From<Record> for Value {
    fn from(r: Record) -> Self {
        Value::Record(r)
    }
}

/// Ordered field-name → value map produced by validation.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Record {
    entries: IndexMap<String, Value>,
}

impl Record {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: impl Into<String>, value: impl Into<Value>) -> Self {
        self.entries.insert(name.into(), value.into());
        self
    }

    pub fn insert(&mut self, name: impl Into<String>, value: impl Into<Value>) {
        self.entries.insert(name.into(), value.into());
    }

    pub fn get(&self, name: &str) -> Option<&Value> {
        self.entries.get(name)
    }

    pub fn text(&self, name: &str) -> Option<&str> {
        self.get(name).and_then(Value::as_text)
    }

    pub fn integer(&self, name: &str) -> Option<i64> {
        self.get(name).and_then(Value::as_integer)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Value)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_json(&self) -> Json {
        Json::Object(
            self.entries
                .iter()
                .map(|(k, v)| (k.clone(), v.to_json()))
                .collect(),
        )
    }

    /// Compact JSON text in field order.
    pub fn to_canonical(&self) -> String {
        serde_json::to_string(&self.to_json()).expect("record serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ViolationReason {
    NotAnObject,
    MissingField,
    UnknownField,
    KindMismatch { expected: String },
    OutOfBounds { lo: i64, hi: i64, got: i64 },
    NotInEnumeration { got: String },
    TooFewItems { min: usize, got: usize },
}

/// First offending field of a payload and why it was rejected.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub struct Violation {
    pub field: String,
    pub reason: ViolationReason,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let field = if self.field.is_empty() {
            "<root>"
        } else {
            &self.field
        };
        match &self.reason {
            ViolationReason::NotAnObject => write!(f, "{field}: expected an object"),
            ViolationReason::MissingField => write!(f, "{field}: missing field"),
            ViolationReason::UnknownField => write!(f, "{field}: unknown field"),
            ViolationReason::KindMismatch { expected } => {
                write!(f, "{field}: expected {expected}")
            }
            ViolationReason::OutOfBounds { lo, hi, got } => {
                write!(f, "{field}: {got} out of bounds [{lo}, {hi}]")
            }
            ViolationReason::NotInEnumeration { got } => {
                write!(f, "{field}: `{got}` is not an allowed value")
            }
            ViolationReason::TooFewItems { min, got } => {
                write!(f, "{field}: {got} items, at least {min} required")
            }
        }
    }
}

fn join_path(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

fn violation(field: String, reason: ViolationReason) -> Violation {
    Violation { field, reason }
}

fn validate_object(fields: &[FieldSpec], payload: &Json, path: &str) -> Result<Record, Violation> {
    let obj = payload
        .as_object()
        .ok_or_else(|| violation(path.to_string(), ViolationReason::NotAnObject))?;
    let mut record = Record::new();
    for f in fields {
        let field_path = join_path(path, &f.name);
        let value = obj
            .get(&f.name)
            .ok_or_else(|| violation(field_path.clone(), ViolationReason::MissingField))?;
        record.insert(f.name.clone(), validate_kind(&f.kind, value, &field_path)?);
    }
    if let Some(extra) = obj.keys().find(|k| !fields.iter().any(|f| &f.name == *k)) {
        return Err(violation(
            join_path(path, extra),
            ViolationReason::UnknownField,
        ));
    }
    Ok(record)
}

fn validate_kind(kind: &FieldKind, value: &Json, path: &str) -> Result<Value, Violation> {
    let mismatch = |expected: &str| {
        violation(
            path.to_string(),
            ViolationReason::KindMismatch {
                expected: expected.to_string(),
            },
        )
    };
    match kind {
        FieldKind::Text => value
            .as_str()
            .map(|s| Value::Text(s.to_string()))
            .ok_or_else(|| mismatch("text")),
        FieldKind::Integer => value
            .as_i64()
            .map(Value::Integer)
            .ok_or_else(|| mismatch("integer")),
        FieldKind::BoundedInteger { lo, hi } => {
            let n = value.as_i64().ok_or_else(|| mismatch("integer"))?;
            if n < *lo || n > *hi {
                return Err(violation(
                    path.to_string(),
                    ViolationReason::OutOfBounds {
                        lo: *lo,
                        hi: *hi,
                        got: n,
                    },
                ));
            }
            Ok(Value::Integer(n))
        }
        FieldKind::Enumeration { values } => {
            let s = value.as_str().ok_or_else(|| mismatch("text"))?;
            if !values.iter().any(|v| v == s) {
                return Err(violation(
                    path.to_string(),
                    ViolationReason::NotInEnumeration { got: s.to_string() },
                ));
            }
            Ok(Value::Text(s.to_string()))
        }
        FieldKind::List { item, min_items } => {
            let items = value.as_array().ok_or_else(|| mismatch("list"))?;
            if items.len() < *min_items {
                return Err(violation(
                    path.to_string(),
                    ViolationReason::TooFewItems {
                        min: *min_items,
                        got: items.len(),
                    },
                ));
            }
            items
                .iter()
                .enumerate()
                .map(|(i, v)| validate_kind(item, v, &format!("{path}[{i}]")))
                .collect::<Result<Vec<_>, _>>()
                .map(Value::List)
        }
        FieldKind::Record { fields } => validate_object(fields, value, path).map(Value::Record),
    }
}

/// Check a structured payload against a schema.
///
/// Declared fields are checked in declaration order, then undeclared fields
/// are reported. The first problem found is returned.
pub fn validate_payload(schema: &Schema, payload: &Json) -> Result<Record, Violation> {
    validate_object(&schema.fields, payload, "")
}

/// Parse text as JSON and validate it.
pub fn validate_text(schema: &Schema, text: &str) -> Result<Record, Violation> {
    let payload: Json = serde_json::from_str(text).map_err(|e| {
        violation(
            String::new(),
            ViolationReason::KindMismatch {
                expected: format!("JSON object ({e})"),
            },
        )
    })?;
    validate_payload(schema, &payload)
}
