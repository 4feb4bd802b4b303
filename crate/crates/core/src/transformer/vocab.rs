//! Word-level vocabulary and tokenizer.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use crate::error::ModelError;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const MASK: usize = 4;
pub const KNOWLEDGE: usize = 5;

pub const RESERVED: [&str; 6] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "[k]"];

/// Lowercased alphanumeric word tokens; everything else separates words.
pub fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Bijective token ↔ id map with the six reserved tokens at ids 0..5.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    /// Only the reserved tokens.
    pub fn new() -> Self {
        let tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }

    /// Collects every word of `texts`, sorted, after the reserved tokens.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let set: BTreeSet<String> = texts.into_iter().flat_map(words).collect();
        let mut v = Self::new();
        for w in set {
            v.insert(&w);
        }
        v
    }

    /// Adds `token` if absent and returns its id.
    pub fn insert(&mut self, token: &str) -> usize {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len();
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line, line number = id.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self, ModelError> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < RESERVED.len() || lines[..RESERVED.len()] != RESERVED {
            return Err(ModelError::Config(
                "vocabulary file must start with the reserved tokens".into(),
            ));
        }
        let mut v = Self::new();
        for (i, line) in lines.iter().enumerate().skip(RESERVED.len()) {
            if v.contains(line) || line.is_empty() {
                return Err(ModelError::Config(format!(
                    "vocabulary line {}: duplicate or empty token",
                    i + 1
                )));
            }
            v.insert(line);
        }
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        fs::write(path, self.to_text())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let text = fs::read_to_string(path)
            .map_err(|e| ModelError::Config(format!("{}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    pub fn encode_words(&self, text: &str) -> Vec<usize> {
        words(text).iter().map(|w| self.id(w)).collect()
    }
}

/// Token ids with attention and segment masks, padded to a fixed length.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub attention_mask: Vec<u8>,
    pub segment_ids: Vec<u8>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Positions that may be attended to.
    pub fn keep(&self) -> Vec<bool> {
        self.attention_mask.iter().map(|&m| m == 1).collect()
    }

    /// Drops trailing padding. Masked keys carry exactly zero attention, so
    /// activations of the kept positions are unchanged.
    pub fn trimmed(&self) -> Self {
        let n = self
            .attention_mask
            .iter()
            .rposition(|&m| m == 1)
            .map_or(0, |p| p + 1);
        Self {
            ids: self.ids[..n].to_vec(),
            attention_mask: self.attention_mask[..n].to_vec(),
            segment_ids: self.segment_ids[..n].to_vec(),
        }
    }

    /// Appends `extra` padding positions.
    pub fn padded(&self, extra: usize) -> Self {
        let mut s = self.clone();
        s.ids.extend(std::iter::repeat_n(PAD, extra));
        s.attention_mask.extend(std::iter::repeat_n(0, extra));
        s.segment_ids.extend(std::iter::repeat_n(0, extra));
        s
    }

    pub fn has_knowledge_token(&self) -> bool {
        self.ids.len() > 1 && self.ids[0] == CLS && self.ids[1] == KNOWLEDGE
    }

    /// Builds an unpadded sequence from raw parts, all positions attendable.
    pub fn from_ids(ids: Vec<usize>, segment_ids: Vec<u8>) -> Self {
        assert_eq!(ids.len(), segment_ids.len());
        Self {
            attention_mask: vec![1; ids.len()],
            ids,
            segment_ids,
        }
    }
}

/// Tokenizes a single sentence or a sentence pair into
/// `[CLS] ([k]) w… [SEP] (w… [SEP])`, truncating words (longest side first)
/// so the closing `[SEP]` always survives, then pads to `max_len`.
pub fn tokenize(
    vocab: &Vocabulary,
    text: &str,
    pair: Option<&str>,
    max_len: usize,
    insert_k: bool,
) -> Result<TokenSequence, ModelError> {
    if max_len < 4 {
        return Err(ModelError::Config(format!("max_len {max_len} < 4")));
    }
    let mut first = vocab.encode_words(text);
    let mut second = pair.map(|p| vocab.encode_words(p));
    let specials = 2 + usize::from(insert_k) + usize::from(second.is_some());
    let budget = max_len.saturating_sub(specials);
    match &mut second {
        None => first.truncate(budget),
        Some(second) => {
            while first.len() + second.len() > budget {
                if first.len() >= second.len() {
                    first.pop();
                } else {
                    second.pop();
                }
            }
        }
    }

    let mut ids = vec![CLS];
    if insert_k {
        ids.push(KNOWLEDGE);
    }
    ids.extend(&first);
    ids.push(SEP);
    let mut segment_ids = vec![0u8; ids.len()];
    if let Some(second) = second {
        ids.extend(&second);
        ids.push(SEP);
        segment_ids.resize(ids.len(), 1);
    }
    let used = ids.len();
    let mut attention_mask = vec![1u8; used];
    ids.resize(max_len, PAD);
    attention_mask.resize(max_len, 0);
    segment_ids.resize(max_len, 0);
    Ok(TokenSequence {
        ids,
        attention_mask,
        segment_ids,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::build(["John promised Bill to leave", "so an hour later John left"])
    }

    #[test]
    fn reserved_ids_are_fixed() {
        let v = vocab();
        for (i, t) in RESERVED.iter().enumerate() {
            assert_eq!(v.id(t), i);
        }
        assert_eq!(v.id("zebra"), UNK);
    }

    #[test]
    fn empty_text_with_k() {
        let s = tokenize(&vocab(), "", None, 6, true).unwrap();
        assert_eq!(s.ids, vec![CLS, KNOWLEDGE, SEP, PAD, PAD, PAD]);
        assert_eq!(s.attention_mask, vec![1, 1, 1, 0, 0, 0]);
    }

    #[test]
    fn sentence_word_count() {
        let v = vocab();
        let s = tokenize(&v, "John promised Bill to leave", None, 10, true).unwrap();
        let expect: Vec<usize> = ["john", "promised", "bill", "to", "leave"]
            .iter()
            .map(|w| v.id(w))
            .collect();
        assert_eq!(&s.ids[2..7], &expect[..]);
        assert_eq!(s.ids[7], SEP);
        assert_eq!(s.attention_mask.iter().filter(|&&m| m == 1).count(), 8);
        assert!(s.has_knowledge_token());
    }

    #[test]
    fn pair_layout_and_segments() {
        let v = vocab();
        let s = tokenize(&v, "John left", Some("Bill to leave"), 12, true).unwrap();
        let w = |t: &str| v.id(t);
        assert_eq!(
            &s.ids[..9],
            &[
                CLS,
                KNOWLEDGE,
                w("john"),
                w("left"),
                SEP,
                w("bill"),
                w("to"),
                w("leave"),
                SEP
            ]
        );
        assert_eq!(&s.segment_ids[..9], &[0, 0, 0, 0, 0, 1, 1, 1, 1]);
        assert_eq!(s.segment_ids[9], 0);
    }

    #[test]
    fn truncation_keeps_sep() {
        let s = tokenize(&vocab(), "John promised Bill to leave", None, 5, true).unwrap();
        assert_eq!(s.ids.len(), 5);
        assert_eq!(s.ids[4], SEP);
        let p = tokenize(&vocab(), "John promised Bill", Some("to leave"), 7, false).unwrap();
        assert_eq!(p.ids[6], SEP);
        assert_eq!(p.ids.iter().filter(|&&i| i == SEP).count(), 2);
        assert!(tokenize(&vocab(), "x", None, 3, false).is_err());
    }

    #[test]
    fn vocabulary_file_round_trip() {
        let v = vocab();
        let back = Vocabulary::from_text(&v.to_text()).unwrap();
        assert_eq!(v, back);
        assert!(Vocabulary::from_text("a\nb\n").is_err());
    }

    #[test]
    fn trimmed_drops_padding_only() {
        let s = tokenize(&vocab(), "John left", None, 8, true).unwrap();
        let t = s.trimmed();
        assert_eq!(t.len(), 5);
        assert_eq!(t.padded(3), s);
    }
}
