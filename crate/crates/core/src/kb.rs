//! Commonsense knowledge base: ingestion, rendering, phrase index, window
//! retrieval and coverage statistics.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::KbError;
use crate::transformer::vocab::words;

/// Default window size for n-gram retrieval.
pub const DEFAULT_WINDOW: usize = 5;
/// Default cap on real candidates per text.
pub const DEFAULT_N_MAX: usize = 64;

/// The bundled miniature knowledge base, `head<TAB>relation<TAB>tail[<TAB>variants]`.
pub const MINI_KB_TSV: &str = include_str!("../data/mini_kb.tsv");

/// Placeholder tokens that match any single word.
const WILDCARDS: [&str; 2] = ["personx", "persony"];
const WILDCARD_KEY: &str = "*";

/// Relation → rendering pattern with `{head}` and `{tail}` slots.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Templates(pub BTreeMap<String, String>);

impl Templates {
    /// The bundled templates for the ATOMIC if-then relations.
    pub fn builtin() -> Self {
        Self::parse(include_str!("../data/templates.tsv")).expect("bundled templates are valid")
    }

    /// Parses `relation<TAB>pattern` lines; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self, KbError> {
        let mut map = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((rel, pattern)) = line.split_once('\t') else {
                return Err(KbError::Malformed {
                    path: "<templates>".into(),
                    line: i + 1,
                    message: "expected `relation<TAB>pattern`".into(),
                });
            };
            map.insert(rel.trim().to_string(), pattern.to_string());
        }
        Ok(Self(map))
    }

    pub fn load(path: &Path) -> Result<Self, KbError> {
        let text = fs::read_to_string(path).map_err(|source| KbError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text).map_err(|e| match e {
            KbError::Malformed { line, message, .. } => KbError::Malformed {
                path: path.display().to_string(),
                line,
                message,
            },
            other => other,
        })
    }

    /// Fills the pattern for `relation`; trailing periods of head and tail are
    /// dropped so the pattern controls punctuation.
    pub fn render(&self, head: &str, relation: &str, tail: &str) -> Option<String> {
        let pattern = self.0.get(relation)?;
        let clean = |s: &str| s.trim().trim_end_matches('.').to_string();
        Some(
            pattern
                .replace("{head}", &clean(head))
                .replace("{tail}", &clean(tail)),
        )
    }
}

/// A normalized phrase; `None` is a placeholder matching any single word.
pub type Pattern = Vec<Option<String>>;

/// Lowercased, punctuation-free words with placeholders turned into wildcards.
pub fn normalize_head(head: &str) -> Pattern {
    words(head)
        .into_iter()
        .map(|w| {
            if WILDCARDS.contains(&w.as_str()) {
                None
            } else {
                Some(w)
            }
        })
        .collect()
}

fn pattern_key(p: &Pattern) -> String {
    p.iter()
        .map(|t| t.as_deref().unwrap_or(WILDCARD_KEY))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Does a concrete segment match a pattern (wildcards match any one word)?
pub fn pattern_matches(pattern: &Pattern, segment: &[String]) -> bool {
    pattern.len() == segment.len()
        && pattern
            .iter()
            .zip(segment)
            .all(|(p, w)| p.as_deref().is_none_or(|p| p == w))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommonsenseEntry {
    pub id: usize,
    pub head: String,
    pub relation: String,
    pub tail: String,
    /// Surface variants of the head (e.g. inflections), matched like the head.
    #[serde(default)]
    pub variants: Vec<String>,
    pub rendered: String,
}

impl CommonsenseEntry {
    /// Normalized head followed by normalized variants.
    pub fn patterns(&self) -> Vec<Pattern> {
        std::iter::once(&self.head)
            .chain(&self.variants)
            .map(|h| normalize_head(h))
            .filter(|p| !p.is_empty())
            .collect()
    }

    pub fn word_count(&self) -> usize {
        self.rendered.split_whitespace().count()
    }
}

/// Normalized phrase (up to any length) → sorted entry ids.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PhraseIndex {
    map: HashMap<String, Vec<usize>>,
    longest: usize,
}

impl PhraseIndex {
    pub fn build(entries: &[CommonsenseEntry]) -> Self {
        let mut map: HashMap<String, BTreeSet<usize>> = HashMap::new();
        let mut longest = 0;
        for e in entries {
            for p in e.patterns() {
                longest = longest.max(p.len());
                map.entry(pattern_key(&p)).or_default().insert(e.id);
            }
        }
        Self {
            map: map
                .into_iter()
                .map(|(k, v)| (k, v.into_iter().collect()))
                .collect(),
            longest,
        }
    }

    /// Ids of entries whose (normalized) head or variant is exactly `pattern`.
    pub fn lookup_pattern(&self, pattern: &Pattern) -> &[usize] {
        self.map
            .get(&pattern_key(pattern))
            .map_or(&[], Vec::as_slice)
    }

    /// Ids of entries matching a concrete word segment, trying every way the
    /// segment's words could be covered by placeholders.
    pub fn lookup_segment(&self, segment: &[String]) -> BTreeSet<usize> {
        let mut out = BTreeSet::new();
        let n = segment.len();
        if n == 0 || n > self.longest || n >= usize::BITS as usize {
            return out;
        }
        for mask in 0u64..(1u64 << n) {
            let key: Vec<&str> = segment
                .iter()
                .enumerate()
                .map(|(i, w)| {
                    if mask >> i & 1 == 1 {
                        WILDCARD_KEY
                    } else {
                        w.as_str()
                    }
                })
                .collect();
            if let Some(ids) = self.map.get(&key.join(" ")) {
                out.extend(ids);
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Candidate commonsense of one text: the null slot plus real entry ids in
/// ascending order.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CandidateSet {
    ids: Vec<usize>,
}

impl CandidateSet {
    /// Only the null commonsense.
    pub fn null_only() -> Self {
        Self::default()
    }

    /// Sorts, deduplicates and keeps the `n_max` lowest ids.
    pub fn from_ids(ids: impl IntoIterator<Item = usize>, n_max: usize) -> Self {
        let set: BTreeSet<usize> = ids.into_iter().collect();
        Self {
            ids: set.into_iter().take(n_max).collect(),
        }
    }

    /// Real entry ids (null excluded).
    pub fn real(&self) -> &[usize] {
        &self.ids
    }

    /// Slots including the null at index 0 (`None`).
    pub fn slots(&self) -> impl Iterator<Item = Option<usize>> + '_ {
        std::iter::once(None).chain(self.ids.iter().copied().map(Some))
    }

    /// Number of slots, null included.
    pub fn len(&self) -> usize {
        self.ids.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn has_real(&self) -> bool {
        !self.ids.is_empty()
    }

    /// The set without entry `id`.
    pub fn without(&self, id: usize) -> Self {
        Self {
            ids: self.ids.iter().copied().filter(|&i| i != id).collect(),
        }
    }
}

/// Every contiguous word n-gram of `words` with `1 ≤ n ≤ window`.
pub fn segments(words: &[String], window: usize) -> Vec<&[String]> {
    let mut out = Vec::new();
    for start in 0..words.len() {
        for n in 1..=window.min(words.len() - start) {
            out.push(&words[start..start + n]);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeBase {
    entries: Vec<CommonsenseEntry>,
    index: PhraseIndex,
}

/// On-disk form of an ingested knowledge base.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IndexFile {
    pub version: u32,
    pub entries: Vec<CommonsenseEntry>,
}

impl KnowledgeBase {
    pub fn from_entries(entries: Vec<CommonsenseEntry>) -> Self {
        let index = PhraseIndex::build(&entries);
        Self { entries, index }
    }

    /// Parses `head<TAB>relation<TAB>tail[<TAB>variant,variant…]` lines. Ids
    /// follow line order; duplicates are kept.
    pub fn parse_tsv(text: &str, templates: &Templates, source: &str) -> Result<Self, KbError> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if !(3..=4).contains(&cols.len()) || cols[..3].iter().any(|c| c.trim().is_empty()) {
                return Err(KbError::Malformed {
                    path: source.to_string(),
                    line: i + 1,
                    message: format!("expected 3 or 4 tab-separated columns, got {}", cols.len()),
                });
            }
            let (head, relation, tail) = (cols[0].trim(), cols[1].trim(), cols[2].trim());
            let rendered =
                templates
                    .render(head, relation, tail)
                    .ok_or_else(|| KbError::UnknownRelation {
                        relation: relation.to_string(),
                        line: i + 1,
                    })?;
            let variants = cols
                .get(3)
                .map(|v| {
                    v.split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(String::from)
                        .collect()
                })
                .unwrap_or_default();
            entries.push(CommonsenseEntry {
                id: entries.len(),
                head: head.to_string(),
                relation: relation.to_string(),
                tail: tail.to_string(),
                variants,
                rendered,
            });
        }
        Ok(Self::from_entries(entries))
    }

    pub fn ingest(path: &Path, templates: &Templates) -> Result<Self, KbError> {
        let text = fs::read_to_string(path).map_err(|source| KbError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse_tsv(&text, templates, &path.display().to_string())
    }

    /// The bundled miniature knowledge base.
    pub fn mini() -> Self {
        Self::parse_tsv(MINI_KB_TSV, &Templates::builtin(), "mini_kb.tsv")
            .expect("bundled mini KB is valid")
    }

    pub fn entries(&self) -> &[CommonsenseEntry] {
        &self.entries
    }

    pub fn entry(&self, id: usize) -> Option<&CommonsenseEntry> {
        self.entries.get(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index(&self) -> &PhraseIndex {
        &self.index
    }

    pub fn rendered(&self, set: &CandidateSet) -> Vec<&str> {
        set.real()
            .iter()
            .filter_map(|&id| self.entry(id).map(|e| e.rendered.as_str()))
            .collect()
    }

    /// All entries matched by some word segment of `text` of length at most
    /// `window`, truncated to the `n_max` lowest ids. The null slot is implicit.
    pub fn retrieve(&self, text: &str, window: usize, n_max: usize) -> CandidateSet {
        let ws = words(text);
        let mut hits = BTreeSet::new();
        for seg in segments(&ws, window) {
            hits.extend(self.index.lookup_segment(seg));
        }
        CandidateSet::from_ids(hits, n_max)
    }

    pub fn to_index_file(&self) -> IndexFile {
        IndexFile {
            version: 1,
            entries: self.entries.clone(),
        }
    }

    pub fn from_index_file(file: IndexFile) -> Self {
        Self::from_entries(file.entries)
    }
}

/// Knowledge-coverage statistics of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KbStats {
    pub dataset_size: usize,
    pub matched: usize,
    /// Fraction of texts with at least one real candidate.
    pub matched_ratio: f64,
    /// Mean real-candidate count over matched texts.
    pub avg_candidates: f64,
    /// Mean word count of matched descriptions, over all (text, entry) matches.
    pub avg_description_length: f64,
    /// True when nothing matched and the averages are reported as 0.
    pub averages_undefined: bool,
}

/// Coverage statistics with uncapped retrieval at `window`.
pub fn kb_stats<S: AsRef<str>>(
    texts: &[S],
    kb: &KnowledgeBase,
    window: usize,
) -> Result<KbStats, KbError> {
    if texts.is_empty() {
        return Err(KbError::EmptyDataset);
    }
    let mut matched = 0usize;
    let mut total_candidates = 0usize;
    let mut total_words = 0usize;
    for t in texts {
        let cs = kb.retrieve(t.as_ref(), window, usize::MAX);
        if cs.has_real() {
            matched += 1;
            total_candidates += cs.real().len();
            total_words += cs
                .real()
                .iter()
                .map(|&id| kb.entries[id].word_count())
                .sum::<usize>();
        }
    }
    let undefined = matched == 0;
    Ok(KbStats {
        dataset_size: texts.len(),
        matched,
        matched_ratio: matched as f64 / texts.len() as f64,
        avg_candidates: if undefined {
            0.0
        } else {
            total_candidates as f64 / matched as f64
        },
        avg_description_length: if undefined {
            0.0
        } else {
            total_words as f64 / total_candidates as f64
        },
        averages_undefined: undefined,
    })
}

impl KbStats {
    /// Row-per-statistic TSV with one value column named after the dataset.
    pub fn to_tsv(&self, dataset: &str) -> String {
        let mut s = format!("statistic\t{dataset}\n");
        s.push_str(&format!("dataset_size\t{}\n", self.dataset_size));
        s.push_str(&format!("matched_ratio\t{:.4}\n", self.matched_ratio));
        s.push_str(&format!("avg_cs\t{:.2}\n", self.avg_candidates));
        s.push_str(&format!(
            "avg_description_length\t{:.2}\n",
            self.avg_description_length
        ));
        if self.averages_undefined {
            s.push_str("averages_undefined\ttrue\n");
        }
        s
    }
}
