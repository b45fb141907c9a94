//! Scripted generators for the pipeline stages, so a full run can execute
//! without a language model.

use auditlm::backend::{Behavior, GenContext, GeneratorRegistry, PoolPrompt, ScriptedBackend, ScriptedConfig};
use auditlm::schema::FieldKind;
use serde_json::{json, Map, Value as Json};

use crate::eval::sentences::sentence_texts;

/// Quotes that appear in no fixture letter.
pub const FABRICATED: &[&str] = &[
    "We demand that the whole facility be relocated to the open ocean at once.",
    "My grandmother's bakery will close if the highway is widened next spring.",
    "Nuclear fusion should replace every proposal in this document immediately.",
];

fn words(s: &str, n: usize) -> String {
    s.split_whitespace().take(n).collect::<Vec<_>>().join(" ")
}

fn substantive(letter: &str) -> Vec<String> {
    sentence_texts(letter)
        .into_iter()
        .filter(|s| s.split_whitespace().count() >= 4)
        .take(6)
        .collect()
}

fn statement(sentence: &str) -> String {
    format!("The writer is concerned that {}", words(sentence, 14).to_lowercase())
}

/// Replace one alphabetic character near the middle.
pub fn one_typo(s: &str) -> String {
    let mut chars: Vec<char> = s.chars().collect();
    let mid = chars.len() / 2;
    if let Some(i) = (mid..chars.len()).chain(0..mid).find(|&i| chars[i].is_ascii_alphabetic()) {
        chars[i] = if chars[i] == 'x' { 'y' } else { 'x' };
    }
    chars.into_iter().collect()
}

fn summary(cx: &GenContext<'_>) -> Json {
    let letter = cx.field("letter").unwrap_or_default();
    let first: Vec<String> = sentence_texts(letter).into_iter().take(2).collect();
    json!({"summary": format!("The letter raises: {}", first.join(" "))})
}

fn summary_verbose(cx: &GenContext<'_>) -> Json {
    json!({"summary": cx.field("letter").unwrap_or_default()})
}

fn extract(cx: &GenContext<'_>) -> Json {
    let concerns: Vec<Json> = substantive(cx.field("letter").unwrap_or_default())
        .iter()
        .map(|s| json!({"statement": statement(s), "quotes": [s]}))
        .collect();
    json!({"concerns": concerns})
}

/// Every third quote exact, every third with one typo, every third made up.
fn extract_noisy(cx: &GenContext<'_>) -> Json {
    let concerns: Vec<Json> = substantive(cx.field("letter").unwrap_or_default())
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let quote = match i % 3 {
                0 => s.clone(),
                1 => one_typo(s),
                _ => FABRICATED[(cx.entropy as usize + i) % FABRICATED.len()].to_string(),
            };
            json!({"statement": statement(s), "quotes": [quote]})
        })
        .collect();
    json!({"concerns": concerns})
}

fn parse_list(cx: &GenContext<'_>, name: &str) -> Vec<Json> {
    cx.field(name)
        .and_then(|s| serde_json::from_str::<Vec<Json>>(s).ok())
        .unwrap_or_default()
}

/// Allowed bin names per output key, read from the call's schema.
fn schema_bins(cx: &GenContext<'_>) -> Vec<(String, Vec<String>)> {
    cx.schema()
        .fields()
        .iter()
        .map(|f| {
            let bins = match &f.kind {
                FieldKind::List { item, .. } => match item.as_ref() {
                    FieldKind::Enumeration { values } => values.clone(),
                    _ => Vec::new(),
                },
                _ => Vec::new(),
            };
            (f.name.clone(), bins)
        })
        .collect()
}

fn bin_terms(name: &str, guidance: &str) -> Vec<String> {
    let mut terms: Vec<String> = name.split(['_', '-']).map(str::to_lowercase).collect();
    terms.extend(
        guidance
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| w.len() >= 5)
            .map(str::to_lowercase),
    );
    terms
}

/// Keyword binning: a concern goes to every bin whose name or guidance
/// words it mentions, else to `other` if defined, else the first bin.
fn bin(cx: &GenContext<'_>) -> Json {
    let statements: Vec<(String, String)> = parse_list(cx, "concerns")
        .iter()
        .map(|c| {
            (
                c["key"].as_str().unwrap_or_default().to_string(),
                c["statement"].as_str().unwrap_or_default().to_lowercase(),
            )
        })
        .collect();
    let guidance: Vec<(String, String)> = parse_list(cx, "bins")
        .iter()
        .map(|b| {
            (
                b["name"].as_str().unwrap_or_default().to_string(),
                b["guidance"].as_str().unwrap_or_default().to_string(),
            )
        })
        .collect();
    let mut out = Map::new();
    for (key, allowed) in schema_bins(cx) {
        let text = statements
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, s)| s.as_str())
            .unwrap_or_default();
        let mut chosen: Vec<String> = allowed
            .iter()
            .filter(|b| {
                let g = guidance.iter().find(|(n, _)| n == *b).map(|(_, g)| g.as_str()).unwrap_or("");
                bin_terms(b, g).iter().any(|t| t.len() >= 3 && text.contains(t.as_str()))
            })
            .cloned()
            .collect();
        if chosen.is_empty() {
            let fallback = allowed.iter().find(|b| *b == "other").or(allowed.first());
            chosen.extend(fallback.cloned());
        }
        out.insert(key, json!(chosen));
    }
    Json::Object(out)
}

fn bin_first(cx: &GenContext<'_>) -> Json {
    Json::Object(
        schema_bins(cx)
            .into_iter()
            .map(|(k, bins)| (k, json!(bins.first().cloned().into_iter().collect::<Vec<_>>())))
            .collect(),
    )
}

fn bin_unknown(cx: &GenContext<'_>) -> Json {
    Json::Object(
        schema_bins(cx)
            .into_iter()
            .map(|(k, _)| (k, json!(["not_a_bin"])))
            .collect(),
    )
}

fn bin_summary_with(cx: &GenContext<'_>, max_citations: usize, stray: bool) -> Json {
    let concerns = parse_list(cx, "concerns");
    let bin = cx.field("bin_name").unwrap_or_default();
    let statements: Vec<&str> = concerns.iter().filter_map(|c| c["statement"].as_str()).collect();
    let mut citations: Vec<Json> = concerns
        .iter()
        .filter_map(|c| {
            let quote = c["quotes"].as_array()?.first()?.as_str()?;
            Some(json!({"letter_id": c["letter_id"], "quote": quote}))
        })
        .take(max_citations)
        .collect();
    if stray || citations.is_empty() {
        citations.push(json!({"letter_id": "letter-not-in-bin", "quote": FABRICATED[0]}));
    }
    json!({
        "summary": format!("{} concern(s) about {bin}: {}", statements.len(), statements.join("; ")),
        "citations": citations,
    })
}

pub fn register_generators(reg: &mut GeneratorRegistry) {
    reg.register("nepa_summary", summary);
    reg.register("nepa_summary_verbose", summary_verbose);
    reg.register("nepa_extract", extract);
    reg.register("nepa_extract_noisy", extract_noisy);
    reg.register("nepa_bin", bin);
    reg.register("nepa_bin_first", bin_first);
    reg.register("nepa_bin_unknown", bin_unknown);
    reg.register("nepa_bin_summary", |cx| bin_summary_with(cx, usize::MAX, false));
    reg.register("nepa_bin_summary_terse", |cx| bin_summary_with(cx, 1, false));
    reg.register("nepa_bin_summary_stray", |cx| bin_summary_with(cx, usize::MAX, true));
}

/// Built-in generators plus the pipeline ones.
pub fn registry() -> GeneratorRegistry {
    let mut reg = GeneratorRegistry::builtin();
    register_generators(&mut reg);
    reg
}

fn pool(entries: &[(&str, f64, &str, &str)]) -> Vec<PoolPrompt> {
    entries
        .iter()
        .map(|(instr, rate, ok, bad)| PoolPrompt::new(instr, *rate, Behavior::new(ok, bad)))
        .collect()
}

/// Two prompts of different quality per stage and per critique.
pub fn pipeline_config() -> ScriptedConfig {
    let critiques = [
        ("Rate the output carefully against the task.", 0.0, "critique_hash", "critique_max"),
        ("Judge the output.", 0.5, "critique_hash", "critique_min"),
    ];
    let mut cfg = ScriptedConfig::strict()
        .with_finite_pool(
            "summarize_letter",
            pool(&[
                ("Summarize the letter's concerns in neutral language.", 0.0, "nepa_summary", "nepa_summary_verbose"),
                ("Write a summary of the letter.", 0.4, "nepa_summary", "nepa_summary_verbose"),
            ]),
        )
        .with_finite_pool(
            "extract_concerns",
            pool(&[
                ("List each concern with supporting verbatim quotes.", 0.0, "nepa_extract", "nepa_extract_noisy"),
                ("Extract concerns and quotes from the letter.", 0.4, "nepa_extract", "nepa_extract_noisy"),
            ]),
        )
        .with_finite_pool(
            "bin_concerns",
            pool(&[
                ("Assign each concern to the bins its subject matter belongs to.", 0.0, "nepa_bin", "nepa_bin_first"),
                ("Sort the concerns into bins.", 0.4, "nepa_bin", "nepa_bin_first"),
            ]),
        )
        .with_finite_pool(
            "summarize_bin",
            pool(&[
                ("Summarize the bin's concerns with citations.", 0.0, "nepa_bin_summary", "nepa_bin_summary_terse"),
                ("Write a bin summary.", 0.4, "nepa_bin_summary", "nepa_bin_summary_terse"),
            ]),
        );
    for name in ["summarize_letter", "extract_concerns", "bin_concerns", "summarize_bin"] {
        cfg = cfg.with_finite_pool(&format!("critique_{name}"), pool(&critiques));
    }
    cfg
}

pub fn pipeline_backend() -> ScriptedBackend {
    ScriptedBackend::new(pipeline_config(), registry()).expect("generators registered")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn typo_changes_one_character() {
        let s = "Protect the tortoise habitat.";
        let t = one_typo(s);
        let diff = s.chars().zip(t.chars()).filter(|(a, b)| a != b).count();
        assert_eq!(diff, 1);
        assert_eq!(s.chars().count(), t.chars().count());
    }

    #[test]
    fn pipeline_backend_builds() {
        pipeline_backend();
    }
}
