//! User-payload text format.
//!
//! Each input field becomes one section, in declaration order:
//!
//! ```text
//! <field_name>
//! field content
//! </field_name>
//! ```
//!
//! Sections are separated by a single blank line. Text fields are written
//! verbatim; every other kind is written as compact JSON. Extra sections
//! (e.g. revision context in a self-critique loop) follow the declared
//! fields in the same form.

use indexmap::IndexMap;

use crate::schema::{Record, Value};

fn section(name: &str, body: &str) -> String {
    format!("<{name}>\n{body}\n</{name}>")
}

fn body(value: &Value) -> String {
    match value {
        Value::Text(s) => s.clone(),
        other => serde_json::to_string(&other.to_json()).expect("value serializes"),
    }
}

/// Render a record plus extra `(name, body)` sections.
pub fn render(record: &Record, extra: &[(String, String)]) -> String {
    record
        .iter()
        .map(|(name, value)| section(name, &body(value)))
        .chain(extra.iter().map(|(name, text)| section(name, text)))
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Split rendered text back into `name → body`. Text outside sections is
/// ignored.
pub fn parse(text: &str) -> IndexMap<String, String> {
    let mut out = IndexMap::new();
    let lines: Vec<&str> = text.split('\n').collect();
    let mut i = 0;
    while i < lines.len() {
        let line = lines[i];
        let open = line
            .strip_prefix('<')
            .and_then(|l| l.strip_suffix('>'))
            .filter(|n| !n.starts_with('/') && crate::schema::is_identifier(n));
        if let Some(name) = open {
            let close = format!("</{name}>");
            if let Some(end) = (i + 1..lines.len()).find(|&j| lines[j] == close) {
                out.insert(name.to_string(), lines[i + 1..end].join("\n"));
                i = end + 1;
                continue;
            }
        }
        i += 1;
    }
    out
}
