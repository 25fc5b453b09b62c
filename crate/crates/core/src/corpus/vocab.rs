use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type TokenId = u32;
pub type ItemId = String;

pub const PAD: &str = "[PAD]";
pub const EOS: &str = "[EOS]";
pub const SEP: &str = "[SEP]";
pub const REC_START: &str = "[RecS]";
pub const REC_END: &str = "[RecE]";
pub const UNK: &str = "[UNK]";

const GENERAL_SPECIALS: [&str; 4] = [PAD, EOS, SEP, REC_START];
const HEADER_PREFIX: &str = "#recindial-vocab item_start=";

/// True for `[PAD]`, `[EOS]`, `[SEP]`, `[RecS]` and `[RecE]`.
pub fn is_special_str(s: &str) -> bool {
    GENERAL_SPECIALS.contains(&s) || s == REC_END
}

/// String form of an item token.
pub fn item_token_string(item: &str) -> String {
    format!("<item:{item}>")
}

/// Item id of an `<item:ID>` string.
pub fn parse_item_token(s: &str) -> Option<&str> {
    s.strip_prefix("<item:").and_then(|rest| rest.strip_suffix('>'))
}

/// Token space split into a general partition `[0, n_general)` and an item
/// partition `[n_general, len)`. The item partition starts with `[RecE]`,
/// followed by one token per catalog item.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    n_general: usize,
    items: Vec<ItemId>,
    item_index: HashMap<ItemId, TokenId>,
    unk: Option<TokenId>,
}

/// Builds the partitioned vocabulary. General ids are the four specials
/// (`[PAD]`, `[EOS]`, `[SEP]`, `[RecS]`) followed by `base_tokens` in order;
/// item ids follow all general ids.
pub fn build_vocabulary(item_catalog: &[ItemId], base_tokens: &[String]) -> Result<Vocabulary> {
    let mut seen = HashSet::new();
    for item in item_catalog {
        if !seen.insert(item.as_str()) {
            return Err(Error::DuplicateItem(item.clone()));
        }
    }
    let mut tokens: Vec<String> = GENERAL_SPECIALS.iter().map(|s| s.to_string()).collect();
    let mut dedup: HashSet<String> = tokens.iter().cloned().collect();
    dedup.insert(REC_END.to_string());
    for t in base_tokens {
        if parse_item_token(t).is_none() && dedup.insert(t.clone()) {
            tokens.push(t.clone());
        }
    }
    Ok(Vocabulary::from_parts(tokens, item_catalog.to_vec()))
}

impl Vocabulary {
    fn from_parts(mut tokens: Vec<String>, items: Vec<ItemId>) -> Self {
        let n_general = tokens.len();
        tokens.push(REC_END.to_string());
        tokens.extend(items.iter().map(|i| item_token_string(i)));
        let index: HashMap<String, TokenId> =
            tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as TokenId)).collect();
        let item_index = items
            .iter()
            .enumerate()
            .map(|(k, item)| (item.clone(), (n_general + 1 + k) as TokenId))
            .collect();
        let unk = index.get(UNK).copied();
        Vocabulary { tokens, index, n_general, items, item_index, unk }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// |V_G|
    pub fn n_general(&self) -> usize {
        self.n_general
    }

    /// |V_R|, including `[RecE]`.
    pub fn n_item_partition(&self) -> usize {
        self.tokens.len() - self.n_general
    }

    pub fn general_range(&self) -> Range<usize> {
        0..self.n_general
    }

    pub fn item_range(&self) -> Range<usize> {
        self.n_general..self.tokens.len()
    }

    pub fn pad(&self) -> TokenId {
        0
    }

    pub fn eos(&self) -> TokenId {
        1
    }

    pub fn sep(&self) -> TokenId {
        2
    }

    pub fn rec_start(&self) -> TokenId {
        3
    }

    pub fn rec_end(&self) -> TokenId {
        self.n_general as TokenId
    }

    pub fn unk(&self) -> Option<TokenId> {
        self.unk
    }

    pub fn is_general(&self, t: TokenId) -> bool {
        (t as usize) < self.n_general
    }

    pub fn is_item_partition(&self, t: TokenId) -> bool {
        (t as usize) >= self.n_general && (t as usize) < self.tokens.len()
    }

    /// True for catalog item tokens (the item partition minus `[RecE]`).
    pub fn is_item(&self, t: TokenId) -> bool {
        self.is_item_partition(t) && t != self.rec_end()
    }

    pub fn is_special(&self, t: TokenId) -> bool {
        t <= self.rec_start() || t == self.rec_end()
    }

    pub fn items(&self) -> &[ItemId] {
        &self.items
    }

    pub fn item_token(&self, item: &str) -> Option<TokenId> {
        self.item_index.get(item).copied()
    }

    pub fn item_of(&self, t: TokenId) -> Option<&ItemId> {
        if self.is_item(t) {
            self.items.get(t as usize - self.n_general - 1)
        } else {
            None
        }
    }

    pub fn token(&self, s: &str) -> Option<TokenId> {
        self.index.get(s).copied()
    }

    /// Maps a word to its id, falling back to `[UNK]` when present.
    pub fn lookup_word(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied().filter(|&t| self.is_general(t)).or(self.unk)
    }

    pub fn token_str(&self, t: TokenId) -> &str {
        &self.tokens[t as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Vocabulary file body: a header with the first item-partition index,
    /// then one token per line.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{HEADER_PREFIX}{}", self.n_general);
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn from_file_string(s: &str) -> Result<Self> {
        let bad = |line: usize, message: String| Error::Parse { path: "<vocab>".into(), line, message };
        let mut lines = s.lines();
        let header = lines.next().ok_or_else(|| bad(1, "empty vocabulary file".into()))?;
        let n_general: usize = header
            .strip_prefix(HEADER_PREFIX)
            .and_then(|n| n.trim().parse().ok())
            .ok_or_else(|| bad(1, format!("bad header `{header}`")))?;
        let tokens: Vec<String> = lines.map(str::to_string).collect();
        if tokens.len() <= n_general || tokens[n_general] != REC_END {
            return Err(bad(n_general + 2, format!("expected {REC_END} at the item partition start")));
        }
        for (i, special) in GENERAL_SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*special) {
                return Err(bad(i + 2, format!("expected {special}")));
            }
        }
        let mut items = Vec::with_capacity(tokens.len() - n_general - 1);
        for (k, t) in tokens[n_general + 1..].iter().enumerate() {
            let item = parse_item_token(t).ok_or_else(|| bad(n_general + 3 + k, format!("`{t}` is not an item token")))?;
            items.push(item.to_string());
        }
        let general = tokens[..n_general].to_vec();
        let v = Vocabulary::from_parts(general, items);
        if v.index.len() != v.tokens.len() {
            return Err(bad(0, "duplicate tokens".into()));
        }
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_file_string(&s).map_err(|e| match e {
            Error::Parse { line, message, .. } => Error::Parse { path: path.into(), line, message },
            other => other,
        })
    }

    /// SHA-256 of the vocabulary file body, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_file_string().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strings(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn counting_layout_for_small_catalog() {
        let v = build_vocabulary(&strings(&["a", "b", "c"]), &strings(&["w1", "w2", "w3", "w4", "w5"])).unwrap();
        // 4 specials + 5 base tokens in V_G, [RecE] + 3 items in V_R
        assert_eq!(v.general_range(), 0..9);
        assert_eq!(v.item_range(), 9..13);
        assert_eq!(v.rec_end(), 9);
        assert_eq!(v.item_token("a"), Some(10));
        assert_eq!(v.item_token("c"), Some(12));
        assert_eq!(v.item_of(11).map(String::as_str), Some("b"));
        assert!(v.is_general(v.rec_start()));
        assert!(v.is_item_partition(v.rec_end()));
        assert!(!v.is_item(v.rec_end()));
    }

    #[test]
    fn empty_catalog_has_only_rec_end() {
        let v = build_vocabulary(&[], &strings(&["x"])).unwrap();
        assert_eq!(v.n_item_partition(), 1);
        assert_eq!(v.token_str(v.rec_end()), REC_END);
    }

    #[test]
    fn duplicate_item_is_rejected() {
        let err = build_vocabulary(&strings(&["a", "a"]), &[]).unwrap_err();
        assert!(matches!(err, Error::DuplicateItem(id) if id == "a"));
    }

    #[test]
    fn partitions_are_disjoint() {
        let v = build_vocabulary(&strings(&["1", "2"]), &strings(&["[RecE]", "[EOS]", "hi", "<item:1>"])).unwrap();
        for t in 0..v.len() as TokenId {
            assert_ne!(v.is_general(t), v.is_item_partition(t));
        }
        assert_eq!(v.n_general(), 5);
    }

    #[test]
    fn file_round_trip() {
        let v = build_vocabulary(&strings(&["100", "200"]), &strings(&[UNK, "hello"])).unwrap();
        let back = Vocabulary::from_file_string(&v.to_file_string()).unwrap();
        assert_eq!(v, back);
        assert_eq!(v.hash(), back.hash());
        assert_eq!(back.lookup_word("nope"), back.token(UNK));
    }

    #[test]
    fn malformed_header_is_rejected() {
        assert!(Vocabulary::from_file_string("garbage\n[PAD]\n").is_err());
    }
}
