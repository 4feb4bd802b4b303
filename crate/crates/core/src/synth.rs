//! Synthetic knowledge task: the label of a sentence is stored only in the
//! knowledge base.
//!
//! Every fact pairs a made-up verb with a reaction (`happy` or `sad`) drawn at
//! random, e.g. head `PersonX dovu PersonY`, tail `happy`. Sentences such as
//! `alice dovu bob at noon` mention the event; their label is the fact's
//! reaction. Test facts never occur in training sentences, so without the
//! knowledge base the test label is a coin flip.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::kb::{CommonsenseEntry, KnowledgeBase, Templates};
use crate::task::Example;

/// Tail words; the label is the index.
pub const LABEL_WORDS: [&str; 2] = ["sad", "happy"];
pub const RELATION: &str = "xReact";

const NAMES: [&str; 12] = [
    "alice", "bob", "carol", "dave", "erin", "frank", "grace", "heidi", "ivan", "judy", "mallory",
    "oscar",
];
const FILLERS: [&str; 8] = [
    "today",
    "at noon",
    "again",
    "in the park",
    "after lunch",
    "on monday",
    "at home",
    "quietly",
];
const ONSETS: [&str; 14] = [
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z",
];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

#[derive(Debug, Clone)]
pub struct SynthData {
    pub kb: KnowledgeBase,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
    /// Number of facts reserved for the test sentences (the last ids).
    pub test_facts: usize,
}

impl SynthData {
    /// The knowledge base as a `head<TAB>relation<TAB>tail` file.
    pub fn kb_tsv(&self) -> String {
        self.kb
            .entries()
            .iter()
            .map(|e| format!("{}\t{}\t{}\n", e.head, e.relation, e.tail))
            .collect()
    }
}

fn nonce_verbs(n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let reserved: HashSet<&str> = NAMES
        .iter()
        .chain(&FILLERS)
        .flat_map(|f| f.split(' '))
        .chain(LABEL_WORDS)
        .chain(["personx", "persony", "as", "a", "result", "feels"])
        .collect();
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    let mut syllables = 2;
    let mut misses = 0;
    while out.len() < n {
        let w: String = (0..syllables)
            .map(|_| {
                format!(
                    "{}{}",
                    ONSETS[rng.random_range(0..ONSETS.len())],
                    VOWELS[rng.random_range(0..VOWELS.len())]
                )
            })
            .collect();
        if reserved.contains(w.as_str()) || !seen.insert(w.clone()) {
            misses += 1;
            if misses > 64 {
                syllables += 1;
                misses = 0;
            }
            continue;
        }
        out.push(w);
    }
    out
}

fn sentence(verb: &str, rng: &mut ChaCha8Rng) -> String {
    let a = rng.random_range(0..NAMES.len());
    let mut b = rng.random_range(0..NAMES.len() - 1);
    if b >= a {
        b += 1;
    }
    let filler = FILLERS[rng.random_range(0..FILLERS.len())];
    format!("{} {verb} {} {filler}", NAMES[a], NAMES[b])
}

/// Generates `kb_size` facts; the last `test_n` facts get one test sentence
/// each, and `train_n` training sentences cycle over the remaining facts.
///
/// Panics if `kb_size <= test_n` or any size is zero.
pub fn synth_generate(seed: u64, kb_size: usize, train_n: usize, test_n: usize) -> SynthData {
    assert!(train_n > 0 && test_n > 0, "sizes must be positive");
    assert!(kb_size > test_n, "need at least one training fact");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let verbs = nonce_verbs(kb_size, &mut rng);
    let mut labels: Vec<usize> = (0..kb_size).map(|i| i % 2).collect();
    labels.shuffle(&mut rng);

    let templates = Templates::builtin();
    let entries: Vec<CommonsenseEntry> = verbs
        .iter()
        .zip(&labels)
        .enumerate()
        .map(|(id, (v, &y))| {
            let head = format!("PersonX {v} PersonY");
            let tail = LABEL_WORDS[y].to_string();
            let rendered = templates
                .render(&head, RELATION, &tail)
                .expect("builtin templates cover xReact");
            CommonsenseEntry {
                id,
                head,
                relation: RELATION.to_string(),
                tail,
                variants: Vec::new(),
                rendered,
            }
        })
        .collect();
    let kb = KnowledgeBase::from_entries(entries);

    let train_facts = kb_size - test_n;
    let mut train_ids: Vec<usize> = (0..train_n).map(|i| i % train_facts).collect();
    train_ids.shuffle(&mut rng);
    let train = train_ids
        .iter()
        .map(|&f| Example::classification(&sentence(&verbs[f], &mut rng), labels[f]))
        .collect();
    let test = (train_facts..kb_size)
        .map(|f| Example::classification(&sentence(&verbs[f], &mut rng), labels[f]))
        .collect();
    SynthData {
        kb,
        train,
        test,
        test_facts: test_n,
    }
}

/// Rule-based reader with knowledge-base access: the label word found in
/// the retrieved description, or `None` when nothing decisive is retrieved.
pub fn oracle_reader(text: &str, kb: &KnowledgeBase) -> Option<usize> {
    let cs = kb.retrieve(text, crate::kb::DEFAULT_WINDOW, usize::MAX);
    let mut found = None;
    for &id in cs.real() {
        let tail = &kb.entry(id)?.tail;
        let y = LABEL_WORDS.iter().position(|w| w == tail)?;
        if found.is_some_and(|f| f != y) {
            return None;
        }
        found = Some(y);
    }
    found
}
