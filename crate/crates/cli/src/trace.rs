//! Plain-text rendering of an audit trace.

use std::fmt::Write;

use auditlm::store::{AuditTrace, TraceNode};
use serde_json::Value as Json;

const CLIP: usize = 240;

fn clip(s: &str, full: bool) -> String {
    let one_line = s.replace('\n', "\\n");
    if full || one_line.chars().count() <= CLIP {
        return one_line;
    }
    let head: String = one_line.chars().take(CLIP).collect();
    format!("{head}…")
}

fn json_line(v: &Json, full: bool) -> String {
    clip(&serde_json::to_string(v).unwrap_or_default(), full)
}

fn node(out: &mut String, n: &TraceNode, full: bool) {
    let inv = &n.invocation;
    let _ = writeln!(
        out,
        "{} [{}] {} stage={} status={}",
        inv.invocation_id,
        inv.created_at,
        inv.subroutine_id,
        inv.stage.as_deref().unwrap_or("-"),
        format!("{:?}", inv.status).to_lowercase(),
    );
    if let Some(arm) = &inv.arm_id {
        let _ = writeln!(out, "  arm: {arm}");
    }
    if !inv.parent_ids.is_empty() {
        let _ = writeln!(out, "  parents: {}", inv.parent_ids.join(", "));
    }
    if let Some(p) = &n.prompt {
        let _ = writeln!(out, "  prompt: {}", clip(p, full));
    }
    let _ = writeln!(out, "  input: {}", json_line(&inv.input, full));
    match (&inv.output, &inv.error) {
        (Some(o), _) => {
            let _ = writeln!(out, "  output: {}", json_line(o, full));
        }
        (None, Some(e)) => {
            let _ = writeln!(out, "  error: {}", clip(e, full));
        }
        (None, None) => {}
    }
    for f in &n.feedback {
        let _ = write!(out, "  feedback {} loss={:.4}", format!("{:?}", f.source).to_lowercase(), f.loss);
        if let Some(r) = &f.ratings {
            let parts: Vec<String> = r.iter().map(|(k, v)| format!("{k}={v}")).collect();
            let _ = write!(out, " ratings[{}]", parts.join(" "));
        }
        if f.late {
            out.push_str(" late");
        }
        if let Some(r) = &f.rationale {
            let _ = write!(out, " \"{}\"", clip(r, full));
        }
        out.push('\n');
    }
}

/// Nodes in topological order, ancestors first. Long fields are clipped
/// unless `full` is set.
pub fn render(trace: &AuditTrace, full: bool) -> String {
    let mut out = format!(
        "trace of {} ({} invocations, {} edges)\n\n",
        trace.root,
        trace.nodes.len(),
        trace.edges.len()
    );
    for n in &trace.nodes {
        node(&mut out, n, full);
        out.push('\n');
    }
    out
}
