//! Dialogue ingestion, item marking, the partitioned vocabulary, context /
//! response pair construction and dataset splitting.

pub mod redial;
pub mod text;
pub mod vocab;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use redial::{ItemMention, RawDialogue, RawTurn};
pub use vocab::{build_vocabulary, ItemId, TokenId, Vocabulary};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Seeker,
    Recommender,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ItemSpan {
    /// Index of the item token within `Utterance::tokens`.
    pub position: usize,
    pub item: ItemId,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Utterance {
    pub speaker: Speaker,
    pub tokens: Vec<TokenId>,
    pub item_spans: Vec<ItemSpan>,
    pub raw_text: String,
    /// Normalized word form of each token; used for surface-form entity linking.
    pub words: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dialogue {
    pub id: String,
    pub utterances: Vec<Utterance>,
}

impl Dialogue {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }
}

/// Encodes free text plus item mentions into tokens. Items outside the
/// catalog degrade to their surface words.
pub fn encode_text(text: &str, mentions: &[ItemMention], vocab: &Vocabulary) -> (Vec<TokenId>, Vec<String>, Vec<ItemSpan>) {
    let mut mentions: Vec<&ItemMention> = mentions.iter().collect();
    mentions.sort_by_key(|m| m.char_start);
    let chars: Vec<char> = text.chars().collect();
    let mut tokens = Vec::new();
    let mut words = Vec::new();
    let mut spans = Vec::new();
    let push_words = |segment: &str, tokens: &mut Vec<TokenId>, words: &mut Vec<String>| {
        for w in text::words(segment) {
            if let Some(t) = vocab.lookup_word(&w) {
                tokens.push(t);
                words.push(w);
            }
        }
    };
    let mut cursor = 0;
    for m in mentions {
        if m.char_start < cursor || m.char_end > chars.len() || m.char_start >= m.char_end {
            log::warn!("skipping overlapping or out-of-range mention of item {}", m.item_id);
            continue;
        }
        let before: String = chars[cursor..m.char_start].iter().collect();
        push_words(&before, &mut tokens, &mut words);
        let surface: String = chars[m.char_start..m.char_end].iter().collect();
        match vocab.item_token(&m.item_id) {
            Some(t) => {
                spans.push(ItemSpan { position: tokens.len(), item: m.item_id.clone() });
                tokens.push(t);
                words.push(vocab.token_str(t).to_string());
            }
            None => push_words(&surface, &mut tokens, &mut words),
        }
        cursor = m.char_end;
    }
    let rest: String = chars[cursor..].iter().collect();
    push_words(&rest, &mut tokens, &mut words);
    (tokens, words, spans)
}

pub fn encode_dialogue(raw: &RawDialogue, vocab: &Vocabulary) -> Result<Dialogue> {
    if raw.turns.is_empty() {
        return Err(Error::Empty(format!("dialogue {} has no turns", raw.id)));
    }
    let utterances = raw
        .turns
        .iter()
        .map(|turn| {
            let (tokens, words, item_spans) = encode_text(&turn.text, &turn.items, vocab);
            Utterance { speaker: turn.speaker, tokens, item_spans, raw_text: turn.text.clone(), words }
        })
        .collect();
    Ok(Dialogue { id: raw.id.clone(), utterances })
}

/// Encodes every non-empty dialogue, skipping (and logging) empty ones.
pub fn encode_corpus(raw: &[RawDialogue], vocab: &Vocabulary) -> Vec<Dialogue> {
    raw.iter()
        .filter_map(|d| match encode_dialogue(d, vocab) {
            Ok(d) => Some(d),
            Err(e) => {
                log::warn!("{e}");
                None
            }
        })
        .collect()
}

fn is_bracketed(tokens: &[TokenId], pos: usize, vocab: &Vocabulary) -> bool {
    pos > 0 && tokens[pos - 1] == vocab.rec_start() && tokens.get(pos + 1) == Some(&vocab.rec_end())
}

fn mark_utterance(u: &Utterance, vocab: &Vocabulary) -> Result<Utterance> {
    let mut tokens = Vec::with_capacity(u.tokens.len() + 2 * u.item_spans.len());
    let mut words = Vec::with_capacity(tokens.capacity());
    let mut spans = Vec::with_capacity(u.item_spans.len());
    let mut span_iter = u.item_spans.iter().peekable();
    for (pos, (&t, w)) in u.tokens.iter().zip(&u.words).enumerate() {
        let is_span = span_iter.peek().is_some_and(|s| s.position == pos);
        if !is_span {
            tokens.push(t);
            words.push(w.clone());
            continue;
        }
        let span = span_iter.next().expect("peeked");
        if !vocab.is_item(t) {
            return Err(Error::NotAnItem { token: t, position: pos });
        }
        if is_bracketed(&u.tokens, pos, vocab) {
            spans.push(ItemSpan { position: tokens.len(), item: span.item.clone() });
            tokens.push(t);
            words.push(w.clone());
            continue;
        }
        tokens.push(vocab.rec_start());
        words.push(vocab::REC_START.to_string());
        spans.push(ItemSpan { position: tokens.len(), item: span.item.clone() });
        tokens.push(t);
        words.push(w.clone());
        tokens.push(vocab.rec_end());
        words.push(vocab::REC_END.to_string());
    }
    Ok(Utterance { speaker: u.speaker, tokens, item_spans: spans, raw_text: u.raw_text.clone(), words })
}

/// Surrounds every item token with `[RecS]` … `[RecE]`. Items already
/// bracketed are left alone, so marking is idempotent.
pub fn mark_items(dialogue: &Dialogue, vocab: &Vocabulary) -> Result<Dialogue> {
    let utterances = dialogue.utterances.iter().map(|u| mark_utterance(u, vocab)).collect::<Result<_>>()?;
    Ok(Dialogue { id: dialogue.id.clone(), utterances })
}

/// Removes `[RecS]`/`[RecE]` markers, leaving bare item tokens.
pub fn unmark_utterance(u: &Utterance, vocab: &Vocabulary) -> Utterance {
    let mut tokens = Vec::with_capacity(u.tokens.len());
    let mut words = Vec::with_capacity(u.tokens.len());
    let mut spans = Vec::with_capacity(u.item_spans.len());
    let mut span_iter = u.item_spans.iter().peekable();
    for (pos, (&t, w)) in u.tokens.iter().zip(&u.words).enumerate() {
        let is_span = span_iter.peek().is_some_and(|s| s.position == pos);
        if is_span {
            let span = span_iter.next().expect("peeked");
            spans.push(ItemSpan { position: tokens.len(), item: span.item.clone() });
        } else if t == vocab.rec_start() || t == vocab.rec_end() {
            continue;
        }
        tokens.push(t);
        words.push(w.clone());
    }
    Utterance { speaker: u.speaker, tokens, item_spans: spans, raw_text: u.raw_text.clone(), words }
}

/// Item / surface-form → KG entity links. Keys that are catalog item ids link
/// item tokens; other keys are lowercase surface forms matched against words.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LinkMap {
    links: HashMap<String, String>,
    max_ngram: usize,
}

impl LinkMap {
    pub fn new(map: impl IntoIterator<Item = (String, String)>) -> Self {
        let links: HashMap<String, String> = map.into_iter().map(|(k, v)| (k.trim().to_string(), v)).collect();
        let max_ngram = links.keys().map(|k| text::words(k).len()).max().unwrap_or(1).clamp(1, 6);
        LinkMap { links, max_ngram }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let map: BTreeMap<String, String> = serde_json::from_str(&s)?;
        Ok(Self::new(map))
    }

    pub fn to_json(&self) -> String {
        let sorted: BTreeMap<&String, &String> = self.links.iter().collect();
        serde_json::to_string_pretty(&sorted).expect("string map serializes")
    }

    pub fn item_entity(&self, item: &str) -> Option<&str> {
        self.links.get(item).map(String::as_str)
    }

    pub fn surface_entity(&self, phrase: &str) -> Option<&str> {
        self.links.get(phrase).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.links.len()
    }

    /// Distinct linked entity ids, sorted.
    pub fn entities(&self) -> Vec<String> {
        let set: std::collections::BTreeSet<&String> = self.links.values().collect();
        set.into_iter().cloned().collect()
    }

    pub fn is_empty(&self) -> bool {
        self.links.is_empty()
    }

    /// Keeps only links whose entity satisfies `keep`.
    pub fn restrict(&self, keep: impl Fn(&str) -> bool) -> Self {
        let links: HashMap<String, String> =
            self.links.iter().filter(|(_, e)| keep(e)).map(|(k, v)| (k.clone(), v.clone())).collect();
        LinkMap { links, max_ngram: self.max_ngram }
    }

    /// Entities mentioned in a word sequence, in order of appearance.
    /// `item_positions` maps token positions holding items to their ids.
    pub fn extract(&self, words: &[String], item_positions: &HashMap<usize, &str>) -> Vec<String> {
        let mut out = Vec::new();
        let mut i = 0;
        while i < words.len() {
            if let Some(item) = item_positions.get(&i) {
                if let Some(e) = self.item_entity(item) {
                    out.push(e.to_string());
                }
                i += 1;
                continue;
            }
            let mut matched = 0;
            for n in (1..=self.max_ngram.min(words.len() - i)).rev() {
                if (i..i + n).any(|p| item_positions.contains_key(&p)) {
                    continue;
                }
                let phrase = words[i..i + n].join(" ");
                if let Some(e) = self.surface_entity(&phrase) {
                    out.push(e.to_string());
                    matched = n;
                    break;
                }
            }
            i += matched.max(1);
        }
        out
    }

    pub fn utterance_entities(&self, u: &Utterance) -> Vec<String> {
        let positions: HashMap<usize, &str> = u.item_spans.iter().map(|s| (s.position, s.item.as_str())).collect();
        self.extract(&u.words, &positions)
    }
}

/// One training / evaluation instance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContextResponsePair {
    pub pair_id: String,
    pub dialogue_id: String,
    /// 1-based position of the response utterance in its dialogue.
    pub turn_index: usize,
    pub context: Vec<TokenId>,
    /// Recommender utterance terminated by `[EOS]`.
    pub response: Vec<TokenId>,
    pub gold_items: Vec<ItemId>,
    pub entity_set: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairOptions {
    /// Context keeps at most this many of the most recent tokens.
    pub max_context: usize,
}

impl Default for PairOptions {
    fn default() -> Self {
        PairOptions { max_context: 256 }
    }
}

/// Drops tokens from the left until at most `max` remain, never cutting an
/// item slot in half.
pub fn truncate_context(context: &[TokenId], max: usize, vocab: &Vocabulary) -> Vec<TokenId> {
    if context.len() <= max {
        return context.to_vec();
    }
    let mut start = context.len() - max;
    // inside a slot iff the nearest marker to the left of `start` is [RecS]
    let opened = context[..start]
        .iter()
        .rev()
        .find(|&&t| t == vocab.rec_start() || t == vocab.rec_end())
        .is_some_and(|&t| t == vocab.rec_start());
    if opened {
        while start < context.len() && context[start] != vocab.rec_end() {
            start += 1;
        }
        start = (start + 1).min(context.len());
    }
    context[start..].to_vec()
}

fn dedup_in_order<T: Clone + Eq + std::hash::Hash>(items: impl IntoIterator<Item = T>) -> Vec<T> {
    let mut seen = HashSet::new();
    items.into_iter().filter(|x| seen.insert(x.clone())).collect()
}

/// One pair per recommender utterance; the context is every preceding
/// utterance, each terminated by `[SEP]`.
pub fn build_pairs(
    dialogues: &[Dialogue],
    link_map: &LinkMap,
    vocab: &Vocabulary,
    options: PairOptions,
) -> Vec<ContextResponsePair> {
    let mut pairs = Vec::new();
    for d in dialogues {
        let mut context: Vec<TokenId> = Vec::new();
        let mut entities: Vec<String> = Vec::new();
        for (i, u) in d.utterances.iter().enumerate() {
            if u.speaker == Speaker::Recommender {
                let mut response = u.tokens.clone();
                response.push(vocab.eos());
                pairs.push(ContextResponsePair {
                    pair_id: format!("{}:{}", d.id, i + 1),
                    dialogue_id: d.id.clone(),
                    turn_index: i + 1,
                    context: truncate_context(&context, options.max_context, vocab),
                    response,
                    gold_items: dedup_in_order(u.item_spans.iter().map(|s| s.item.clone())),
                    entity_set: dedup_in_order(entities.iter().cloned()),
                });
            }
            context.extend_from_slice(&u.tokens);
            context.push(vocab.sep());
            entities.extend(link_map.utterance_entities(u));
        }
    }
    pairs
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub valid: Vec<T>,
    pub test: Vec<T>,
}

impl<T> Default for Split<T> {
    fn default() -> Self {
        Split { train: Vec::new(), valid: Vec::new(), test: Vec::new() }
    }
}

/// Dialogue-level 80/10/10 split: `floor(0.8n)` train, `floor(0.1n)` valid,
/// the remainder test.
pub fn split_ids(ids: &[String], seed: u64) -> Result<Split<String>> {
    let mut unique = dedup_in_order(ids.iter().cloned());
    if unique.len() < 10 {
        return Err(Error::TooFewDialogues { needed: 10, got: unique.len() });
    }
    unique.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    unique.shuffle(&mut rng);
    let n = unique.len();
    let n_train = n * 8 / 10;
    let n_valid = n / 10;
    let test = unique.split_off(n_train + n_valid);
    let valid = unique.split_off(n_train);
    Ok(Split { train: unique, valid, test })
}

pub fn split_dataset(pairs: &[ContextResponsePair], seed: u64) -> Result<Split<ContextResponsePair>> {
    let ids: Vec<String> = pairs.iter().map(|p| p.dialogue_id.clone()).collect();
    let split = split_ids(&ids, seed)?;
    let valid: HashSet<&String> = split.valid.iter().collect();
    let test: HashSet<&String> = split.test.iter().collect();
    let mut out = Split::default();
    for p in pairs {
        if valid.contains(&p.dialogue_id) {
            out.valid.push(p.clone());
        } else if test.contains(&p.dialogue_id) {
            out.test.push(p.clone());
        } else {
            out.train.push(p.clone());
        }
    }
    Ok(out)
}

/// Item mention counts over every utterance of the given dialogues.
pub fn mention_counts(dialogues: &[Dialogue]) -> HashMap<ItemId, usize> {
    let mut counts = HashMap::new();
    for d in dialogues {
        for u in &d.utterances {
            for s in &u.item_spans {
                *counts.entry(s.item.clone()).or_insert(0) += 1;
            }
        }
    }
    counts
}

/// Item catalog (sorted, unique) of a raw corpus.
pub fn corpus_catalog(raw: &[RawDialogue]) -> Vec<ItemId> {
    let set: std::collections::BTreeSet<ItemId> =
        raw.iter().flat_map(|d| d.turns.iter().flat_map(|t| t.items.iter().map(|m| m.item_id.clone()))).collect();
    set.into_iter().collect()
}

/// Builds the vocabulary for a raw corpus: `[UNK]`, then words occurring at
/// least `min_count` times (most frequent first), then the item partition.
pub fn corpus_vocabulary(raw: &[RawDialogue], min_count: usize) -> Result<Vocabulary> {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for d in raw {
        for t in &d.turns {
            let chars: Vec<char> = t.text.chars().collect();
            let mut cursor = 0;
            let mut items: Vec<&ItemMention> = t.items.iter().collect();
            items.sort_by_key(|m| m.char_start);
            let mut segments = Vec::new();
            for m in items {
                if m.char_start >= cursor && m.char_end <= chars.len() {
                    segments.push(chars[cursor..m.char_start].iter().collect::<String>());
                    cursor = m.char_end;
                }
            }
            segments.push(chars[cursor.min(chars.len())..].iter().collect());
            for seg in segments {
                for w in text::words(&seg) {
                    *counts.entry(w).or_insert(0) += 1;
                }
            }
        }
    }
    let mut words: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_count.max(1)).collect();
    words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut base = vec![vocab::UNK.to_string()];
    base.extend(words.into_iter().map(|(w, _)| w));
    build_vocabulary(&corpus_catalog(raw), &base)
}

/// Serialized form of a pair (tokens as strings).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRecord {
    pub pair_id: String,
    pub dialogue_id: String,
    pub turn_index: usize,
    pub context: Vec<String>,
    pub response: Vec<String>,
    pub gold_items: Vec<ItemId>,
    pub entity_set: Vec<String>,
}

impl PairRecord {
    pub fn from_pair(p: &ContextResponsePair, vocab: &Vocabulary) -> Self {
        let strs = |ts: &[TokenId]| ts.iter().map(|&t| vocab.token_str(t).to_string()).collect();
        PairRecord {
            pair_id: p.pair_id.clone(),
            dialogue_id: p.dialogue_id.clone(),
            turn_index: p.turn_index,
            context: strs(&p.context),
            response: strs(&p.response),
            gold_items: p.gold_items.clone(),
            entity_set: p.entity_set.clone(),
        }
    }

    pub fn to_pair(&self, vocab: &Vocabulary) -> Result<ContextResponsePair> {
        let ids = |ts: &[String]| {
            ts.iter()
                .map(|s| vocab.token(s).ok_or_else(|| Error::Config(format!("token `{s}` of pair {} not in vocabulary", self.pair_id))))
                .collect::<Result<Vec<_>>>()
        };
        Ok(ContextResponsePair {
            pair_id: self.pair_id.clone(),
            dialogue_id: self.dialogue_id.clone(),
            turn_index: self.turn_index,
            context: ids(&self.context)?,
            response: ids(&self.response)?,
            gold_items: self.gold_items.clone(),
            entity_set: self.entity_set.clone(),
        })
    }
}

pub fn save_pairs(path: &Path, pairs: &[ContextResponsePair], vocab: &Vocabulary) -> Result<()> {
    let records: Vec<PairRecord> = pairs.iter().map(|p| PairRecord::from_pair(p, vocab)).collect();
    redial::write_jsonl(path, &records)
}

pub fn load_pairs(path: &Path, vocab: &Vocabulary) -> Result<Vec<ContextResponsePair>> {
    let records: Vec<PairRecord> = redial::read_jsonl(path)?;
    records.iter().map(|r| r.to_pair(vocab)).collect()
}
