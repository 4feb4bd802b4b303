//! Fuzzed knowledge bases and a brute-force retrieval oracle that shares no
//! code with the phrase index.

use std::collections::BTreeSet;

use okt_core::kb::{KnowledgeBase, Templates};
use rand::seq::IndexedRandom;
use rand::Rng;

const WORDS: [&str; 18] = [
    "eats", "cake", "goes", "home", "the", "store", "gives", "a", "gift", "to", "runs", "fast",
    "loves", "reads", "book", "wins", "race", "helps",
];
const PLACEHOLDERS: [&str; 4] = ["PersonX", "PersonY", "personx", "PERSONY"];
const RELATIONS: [&str; 5] = ["xWant", "xAttr", "oReact", "xNeed", "Causes"];

fn head<R: Rng>(rng: &mut R) -> String {
    let n = rng.random_range(1..=4);
    (0..n)
        .map(|_| {
            if rng.random_bool(0.3) {
                PLACEHOLDERS.choose(rng).unwrap().to_string()
            } else {
                let w = WORDS.choose(rng).unwrap();
                if rng.random_bool(0.2) {
                    w.to_uppercase()
                } else {
                    w.to_string()
                }
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// TSV text of `n` fuzzed entries, some with variants.
pub fn fuzz_kb_tsv<R: Rng>(rng: &mut R, n: usize) -> String {
    let mut s = String::new();
    for _ in 0..n {
        let h = head(rng);
        let rel = RELATIONS.choose(rng).unwrap();
        s.push_str(&format!("{h}\t{rel}\tsomething nice"));
        if rng.random_bool(0.3) {
            let k = rng.random_range(1..=2);
            let vs: Vec<String> = (0..k).map(|_| head(rng)).collect();
            s.push('\t');
            s.push_str(&vs.join(","));
        }
        s.push('\n');
    }
    s
}

pub fn fuzz_kb<R: Rng>(rng: &mut R, n: usize) -> KnowledgeBase {
    KnowledgeBase::parse_tsv(&fuzz_kb_tsv(rng, n), &Templates::builtin(), "fuzz").unwrap()
}

/// Random text of up to 16 words from the same vocabulary, with noise words,
/// punctuation and mixed case.
pub fn fuzz_query<R: Rng>(rng: &mut R) -> String {
    let n = rng.random_range(0..=16);
    let mut s = String::new();
    for _ in 0..n {
        let w = match rng.random_range(0..10) {
            0 => "zebra".to_string(),
            1 => ["Alice", "bob", "Carol"].choose(rng).unwrap().to_string(),
            2 => "PersonX".to_string(),
            _ => WORDS.choose(rng).unwrap().to_string(),
        };
        s.push_str(&w);
        s.push_str([" ", " ", ", ", ". ", "  ", "-"].choose(rng).unwrap());
    }
    s
}

fn tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() {
            cur.extend(c.to_lowercase());
        } else if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Scans every entry head and variant against every text window directly.
pub fn brute_retrieve(kb: &KnowledgeBase, text: &str, window: usize, n_max: usize) -> Vec<usize> {
    let t = tokens(text);
    let mut hits = BTreeSet::new();
    for e in kb.entries() {
        for phrase in std::iter::once(&e.head).chain(&e.variants) {
            let p = tokens(phrase);
            if p.is_empty() || p.len() > window || p.len() > t.len() {
                continue;
            }
            let found = t.windows(p.len()).any(|seg| {
                p.iter()
                    .zip(seg)
                    .all(|(a, b)| a == "personx" || a == "persony" || a == b)
            });
            if found {
                hits.insert(e.id);
            }
        }
    }
    hits.into_iter().take(n_max).collect()
}
