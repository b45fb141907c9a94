//! Minimal SVG charts for the demonstration traces. Output depends only on
//! the data, so repeated runs produce identical files.

use std::fmt::Write as _;

const W: f64 = 640.0;
const H: f64 = 320.0;
const PAD: f64 = 40.0;

fn frame(title: &str, x_label: &str, y_label: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="16" text-anchor="middle" font-size="13">{title}</text>"#, W / 2.0);
    let _ = writeln!(
        s,
        r#"<line x1="{PAD}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{b}" stroke="black"/>"#,
        b = H - PAD,
        r = W - PAD / 2.0
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{x_label}</text>"#, W / 2.0, H - 8.0);
    let _ = writeln!(
        s,
        r#"<text x="12" y="{}" text-anchor="middle" transform="rotate(-90 12 {})">{y_label}</text>"#,
        H / 2.0,
        H / 2.0
    );
    s
}

fn px(i: usize, n: usize) -> f64 {
    let span = W - PAD * 1.5;
    PAD + span * i as f64 / (n.max(2) - 1) as f64
}

fn py(v: f64, lo: f64, hi: f64) -> f64 {
    let span = H - PAD * 2.0;
    H - PAD - span * (v - lo) / (hi - lo)
}

/// Raw losses as points with the smoothed curve on top.
pub fn loss_chart(losses: &[f64], smoothed: &[f64]) -> String {
    let mut s = frame("Loss per trial", "trial", "loss");
    let n = losses.len();
    for (i, &l) in losses.iter().enumerate() {
        let _ = writeln!(
            s,
            r##"<circle cx="{:.2}" cy="{:.2}" r="1.5" fill="#999"/>"##,
            px(i, n),
            py(l, 0.0, 1.0)
        );
    }
    let pts: Vec<String> = smoothed
        .iter()
        .enumerate()
        .map(|(i, &v)| format!("{:.2},{:.2}", px(i, n), py(v, 0.0, 1.0)))
        .collect();
    let _ = writeln!(
        s,
        r##"<polyline points="{}" fill="none" stroke="#c33" stroke-width="2"/>"##,
        pts.join(" ")
    );
    for (v, label) in [(0.0, "0"), (0.5, "0.5"), (1.0, "1")] {
        let _ = writeln!(s, r#"<text x="{}" y="{:.2}" text-anchor="end">{label}</text>"#, PAD - 4.0, py(v, 0.0, 1.0) + 4.0);
    }
    s.push_str("</svg>\n");
    s
}

/// One row per arm, one mark per trial that selected it.
pub fn arm_chart(selections: &[usize], labels: &[String]) -> String {
    let mut s = frame("Prompt selected per trial", "trial", "prompt");
    let n = selections.len();
    let rows = labels.len().max(1) as f64;
    let row_y = |a: usize| py(a as f64 + 0.5, 0.0, rows);
    for (a, label) in labels.iter().enumerate() {
        let _ = writeln!(s, r#"<text x="{}" y="{:.2}" text-anchor="end">{label}</text>"#, PAD - 4.0, row_y(a) + 4.0);
    }
    for (i, &a) in selections.iter().enumerate() {
        let _ = writeln!(
            s,
            r##"<rect x="{:.2}" y="{:.2}" width="1.2" height="8" fill="#36c"/>"##,
            px(i, n),
            row_y(a) - 4.0
        );
    }
    s.push_str("</svg>\n");
    s
}
