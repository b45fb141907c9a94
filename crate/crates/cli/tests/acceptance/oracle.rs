//! Brute-force reference implementations the acceptance checks compare
//! against. Nothing here calls the code under test.

use std::collections::{BTreeMap, BTreeSet};

/// Sampling probabilities over explored arms then the exploration arm.
/// Unscored arms take the exploration estimate.
pub fn boltzmann(means: &[Option<f64>], beta: f64, prior: f64) -> Vec<f64> {
    let scored: Vec<f64> = means.iter().flatten().copied().collect();
    let l0 = if scored.is_empty() { prior } else { scored.iter().sum::<f64>() / scored.len() as f64 };
    let mut losses: Vec<f64> = means.iter().map(|m| m.unwrap_or(l0)).collect();
    losses.push(l0);
    let lo = losses.iter().cloned().fold(f64::INFINITY, f64::min);
    let w: Vec<f64> = losses.iter().map(|l| (-beta * (l - lo)).exp()).collect();
    let z: f64 = w.iter().sum();
    w.iter().map(|x| x / z).collect()
}

/// Words containing any of `letters`, case-insensitively.
pub fn rare_words(text: &str, letters: &[char]) -> usize {
    text.split_whitespace()
        .filter(|w| w.chars().any(|c| letters.iter().any(|l| l.eq_ignore_ascii_case(&c))))
        .count()
}

pub fn similarity(a: &str, b: &str) -> f64 {
    let m = a.chars().count().max(b.chars().count());
    if m == 0 {
        return 1.0;
    }
    1.0 - strsim::levenshtein(a, b) as f64 / m as f64
}

pub fn mask(n: usize, spans: &[(usize, usize)]) -> Vec<bool> {
    let mut m = vec![false; n];
    for &(s, e) in spans {
        for c in m.iter_mut().take(e.min(n)).skip(s) {
            *c = true;
        }
    }
    m
}

pub fn member(s: (usize, usize), m: &[bool]) -> bool {
    let inside = (s.0..s.1).filter(|&i| m[i]).count();
    inside * 2 >= s.1 - s.0
}

/// (sentences, quoted, selected, both).
pub fn quote_counts(n: usize, sentences: &[(usize, usize)], quotes: &[(usize, usize)], sme: &[(usize, usize)]) -> [u64; 4] {
    let (qm, sm) = (mask(n, quotes), mask(n, sme));
    let mut c = [0u64; 4];
    for &s in sentences {
        let (q, m) = (member(s, &qm), member(s, &sm));
        c[0] += 1;
        c[1] += q as u64;
        c[2] += m as u64;
        c[3] += (q && m) as u64;
    }
    c
}

/// (reviewer bins, system bins, shared).
pub fn bin_counts(sme: &BTreeSet<String>, system: &BTreeSet<String>) -> [u64; 3] {
    let both = sme.iter().filter(|b| system.contains(*b)).count();
    [sme.len() as u64, system.len() as u64, both as u64]
}

/// Population standard deviation over the mean, in percent, computed in
/// integers until the final square root.
pub fn variability(lengths: &[usize]) -> Option<f64> {
    if lengths.len() < 2 {
        return None;
    }
    let n = lengths.len() as u128;
    let sum: u128 = lengths.iter().map(|&l| l as u128).sum();
    let sq: u128 = lengths.iter().map(|&l| (l * l) as u128).sum();
    if sum == 0 {
        return None;
    }
    Some(((n * sq - sum * sum) as f64).sqrt() / sum as f64 * 100.0)
}

pub struct Comment {
    pub span: (usize, usize),
    pub bin: String,
}

pub struct Concern {
    pub spans: Vec<(usize, usize)>,
    pub bins: Vec<String>,
}

pub fn confusion(
    n: usize,
    sentences: &[(usize, usize)],
    sme: &[Comment],
    concerns: &[Concern],
) -> BTreeMap<(String, String), u64> {
    let all_q: Vec<(usize, usize)> = concerns.iter().flat_map(|c| c.spans.clone()).collect();
    let all_s: Vec<(usize, usize)> = sme.iter().map(|c| c.span).collect();
    let (qm, sm) = (mask(n, &all_q), mask(n, &all_s));
    let mut out = BTreeMap::new();
    for &s in sentences {
        if !member(s, &qm) || !member(s, &sm) {
            continue;
        }
        let mut best: Option<(usize, &str)> = None;
        for c in sme {
            let o = (s.0..s.1).filter(|&i| i >= c.span.0 && i < c.span.1).count();
            if o > 0 && best.is_none_or(|(b, _)| o > b) {
                best = Some((o, &c.bin));
            }
        }
        let Some((_, bin)) = best else { continue };
        let mut sys = BTreeSet::new();
        for c in concerns {
            if member(s, &mask(n, &c.spans)) {
                sys.extend(c.bins.iter().cloned());
            }
        }
        for b in sys {
            *out.entry((bin.to_string(), b)).or_insert(0) += 1;
        }
    }
    out
}
