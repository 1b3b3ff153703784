//! Brute-force reference implementations of the text metrics.

use std::collections::BTreeMap;

/// Longest common subsequence by enumerating every subsequence of `a`.
pub fn lcs(a: &[String], b: &[String]) -> usize {
    let mut best = 0;
    for mask in 0u32..(1u32 << a.len()) {
        let sub: Vec<&String> = (0..a.len()).filter(|i| mask & (1 << i) != 0).map(|i| &a[i]).collect();
        if sub.len() <= best {
            continue;
        }
        let mut it = b.iter();
        if sub.iter().all(|s| it.any(|t| t == *s)) {
            best = sub.len();
        }
    }
    best
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p == 0.0 || r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn rouge_l(c: &[String], r: &[String]) -> f64 {
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let l = lcs(c, r) as f64;
    harmonic(l / c.len() as f64, l / r.len() as f64)
}

pub fn token_f1(p: &[String], g: &[String]) -> f64 {
    if p.is_empty() || g.is_empty() {
        return 0.0;
    }
    let count = |xs: &[String]| {
        let mut m: BTreeMap<String, usize> = BTreeMap::new();
        for x in xs {
            *m.entry(x.clone()).or_default() += 1;
        }
        m
    };
    let (cp, cg) = (count(p), count(g));
    let overlap: usize = cp.iter().map(|(k, v)| (*v).min(*cg.get(k).unwrap_or(&0))).sum();
    harmonic(overlap as f64 / p.len() as f64, overlap as f64 / g.len() as f64)
}

/// Edit distance by exhaustive recursion over the three operations.
pub fn levenshtein(a: &[char], b: &[char]) -> usize {
    match (a.split_first(), b.split_first()) {
        (None, _) => b.len(),
        (_, None) => a.len(),
        (Some((x, ra)), Some((y, rb))) => {
            let sub = levenshtein(ra, rb) + usize::from(x != y);
            sub.min(levenshtein(ra, b) + 1).min(levenshtein(a, rb) + 1)
        }
    }
}
