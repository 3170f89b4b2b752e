//! Reference arithmetic written straight from the definitions, sharing no
//! code with the library. Used to pin expected values.

use std::collections::BTreeSet;

pub const FRAGMENTS: [&str; 16] = [
    "C", "CC", "CCC", "c1ccccc1", "C(=O)O", "N", "O", "Cl", "F", "C#N", "S", "C1CCCCC1", "OC",
    "NC(=O)", "C=C", "Br",
];

pub fn fnv(data: &[u8]) -> u64 {
    let mut h: u64 = 14695981039346656037;
    for &b in data {
        h ^= b as u64;
        h = h.wrapping_mul(1099511628211);
    }
    h
}

pub struct SplitMix(pub u64);

impl SplitMix {
    pub fn next(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E3779B97F4A7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        z ^ (z >> 31)
    }
}

/// `-round(2e6 * u)` evaluated in floating point.
pub fn affinity(smiles: &str, target: &str) -> i64 {
    let h = fnv(format!("{smiles}:{target}").as_bytes());
    let u = h as f64 / 18446744073709551616.0;
    -((2_000_000.0 * u).round() as i64)
}

pub fn generate(
    seed: u64,
    iteration: u64,
    n: usize,
    seeds: &[String],
    seen: &BTreeSet<String>,
) -> Vec<String> {
    let mix = if seeds.is_empty() {
        0
    } else {
        fnv(seeds.concat().as_bytes())
    };
    let mut rng = SplitMix(seed ^ iteration ^ mix);
    let mut out: Vec<String> = Vec::new();
    let mut tries = 0;
    while out.len() < n {
        assert!(tries < 100 * n, "oracle generator exhausted");
        tries += 1;
        let k = 2 + rng.next() % 3;
        let mut s = String::new();
        for _ in 0..k {
            s.push_str(FRAGMENTS[(rng.next() % 16) as usize]);
        }
        if !seen.contains(&s) && !out.contains(&s) {
            out.push(s);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleRun {
    pub iterations: u32,
    pub met: bool,
    /// (smiles, affinity) for every hit, ascending by affinity then smiles.
    pub hits: Vec<(String, i64)>,
    pub cumulative: Vec<usize>,
}

/// The whole screening loop without any orchestration.
pub fn campaign(
    seed: u64,
    target: &str,
    batch: usize,
    threshold: i64,
    min_hits: usize,
    max_iter: u32,
    top_k: usize,
) -> OracleRun {
    let mut scored: Vec<(String, i64)> = Vec::new();
    let mut seen = BTreeSet::new();
    let mut cumulative = Vec::new();
    let mut iterations = 0;
    let mut met = false;
    for it in 1..=max_iter {
        iterations = it;
        let mut best = scored.clone();
        best.sort_by(|a, b| a.1.cmp(&b.1).then(a.0.cmp(&b.0)));
        let seeds: Vec<String> = best.iter().take(top_k).map(|s| s.0.clone()).collect();
        for m in generate(seed, it as u64, batch, &seeds, &seen) {
            seen.insert(m.clone());
            let a = affinity(&m, target);
            scored.push((m, a));
        }
        let hits = scored.iter().filter(|s| s.1 <= threshold).count();
        cumulative.push(hits);
        if hits >= min_hits {
            met = true;
            break;
        }
    }
    let mut hits: Vec<(String, i64)> = scored.into_iter().filter(|s| s.1 <= threshold).collect();
    hits.sort_by(|a, b| a.1.cmp(&b.1).then(a.0.cmp(&b.0)));
    OracleRun {
        iterations,
        met,
        hits,
        cumulative,
    }
}
