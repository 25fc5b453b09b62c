//! Vocabulary-pointer constrained decoding.
//!
//! While the pointer is 0 only general tokens (including `[RecS]`) may be
//! emitted; emitting `[RecS]` sets it to 1, after which only the item
//! partition (items and `[RecE]`) is allowed until `[RecE]` resets it. The
//! knowledge bias is added to item-partition logits at every step.

use serde::{Deserialize, Serialize};

use crate::corpus::{ItemId, TokenId, Vocabulary};
use crate::error::{Error, Result};
use crate::seqmodel::LogitScorer;

/// Item-partition distribution captured at an item-slot step.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotDistribution {
    /// Index in `emitted` of the token drawn from this distribution.
    pub position: usize,
    /// Probability of each item-partition token (index 0 is `[RecE]`).
    pub probs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationState {
    pub pointer: bool,
    pub emitted: Vec<TokenId>,
    pub slot_distributions: Vec<SlotDistribution>,
    pub step: usize,
    pub n_max: usize,
    pub finished: bool,
    /// Set when generation hit `n_max` inside an open slot; the slot is
    /// treated as closed.
    pub truncated_slot: bool,
}

impl GenerationState {
    pub fn new(n_max: usize) -> Self {
        GenerationState {
            pointer: false,
            emitted: Vec::new(),
            slot_distributions: Vec::new(),
            step: 0,
            n_max,
            finished: n_max == 0,
            truncated_slot: false,
        }
    }
}

/// Additive mask over V: 0 on the active partition, `-inf` elsewhere.
pub fn step_mask(pointer: bool, vocab: &Vocabulary) -> Vec<f64> {
    let active = if pointer { vocab.item_range() } else { vocab.general_range() };
    (0..vocab.len()).map(|i| if active.contains(&i) { 0.0 } else { f64::NEG_INFINITY }).collect()
}

/// Applies one emitted token to the pointer automaton.
pub fn advance(state: &GenerationState, token: TokenId, vocab: &Vocabulary) -> Result<GenerationState> {
    let permitted = if state.pointer { vocab.is_item_partition(token) } else { vocab.is_general(token) };
    if !permitted {
        return Err(Error::Automaton { token, pointer: state.pointer as u8 });
    }
    Ok(advance_unchecked(state, token, vocab, true))
}

fn advance_unchecked(state: &GenerationState, token: TokenId, vocab: &Vocabulary, constrained: bool) -> GenerationState {
    let mut next = state.clone();
    next.emitted.push(token);
    next.step += 1;
    if constrained {
        if token == vocab.rec_start() {
            next.pointer = true;
        } else if token == vocab.rec_end() {
            next.pointer = false;
        }
    }
    if token == vocab.eos() || next.step >= next.n_max {
        next.finished = true;
        if next.pointer {
            next.truncated_slot = true;
        }
    }
    next
}

/// Log-probabilities for the next token: scorer logits plus the bias on the
/// item partition plus the pointer mask, then log-softmax.
pub fn step_log_probs(logits: &[f64], bias: &[f64], pointer: bool, vocab: &Vocabulary, constrained: bool) -> Vec<f64> {
    let n_general = vocab.n_general();
    let active = if !constrained {
        0..vocab.len()
    } else if pointer {
        vocab.item_range()
    } else {
        vocab.general_range()
    };
    let mut z: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            if !active.contains(&i) {
                f64::NEG_INFINITY
            } else if i >= n_general {
                l + bias.get(i - n_general).copied().unwrap_or(0.0)
            } else {
                l
            }
        })
        .collect();
    let max = z[active.clone()].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z[active.clone()].iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for (i, v) in z.iter_mut().enumerate() {
        if active.contains(&i) {
            *v -= lse;
        }
    }
    z
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub beam_width: usize,
    pub n_max: usize,
    /// Exponent on the token count when ranking finished hypotheses.
    pub length_norm: f64,
    pub top_k: usize,
    /// Apply the vocabulary pointer; off reproduces plain decoding over V.
    pub constrained: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig { beam_width: 10, n_max: 64, length_norm: 1.0, top_k: 50, constrained: true }
    }
}

struct Decoder<'a, S: LogitScorer + ?Sized> {
    prefix: Vec<TokenId>,
    scorer: &'a S,
    bias: &'a [f64],
    vocab: &'a Vocabulary,
    constrained: bool,
}

impl<S: LogitScorer + ?Sized> Decoder<'_, S> {
    fn log_probs(&self, state: &GenerationState) -> Result<Vec<f64>> {
        let mut prefix = self.prefix.clone();
        prefix.extend_from_slice(&state.emitted);
        let logits = self.scorer.score(&prefix)?;
        if logits.len() != self.vocab.len() {
            return Err(Error::Shape(format!("scorer returned {} logits for vocabulary of {}", logits.len(), self.vocab.len())));
        }
        Ok(step_log_probs(&logits, self.bias, state.pointer, self.vocab, self.constrained))
    }

    fn item_probs(&self, log_probs: &[f64]) -> Vec<f64> {
        log_probs[self.vocab.item_range()].iter().map(|l| l.exp()).collect()
    }

    /// Emits `token` (drawn from `log_probs`) and records the slot
    /// distribution when this step fills an item slot.
    fn emit(&self, state: &GenerationState, token: TokenId, log_probs: &[f64]) -> Result<GenerationState> {
        let fills_slot = if self.constrained {
            state.emitted.last() == Some(&self.vocab.rec_start())
        } else {
            self.vocab.is_item(token)
        };
        let position = state.emitted.len();
        let mut next = if self.constrained {
            advance(state, token, self.vocab)?
        } else {
            advance_unchecked(state, token, self.vocab, false)
        };
        if fills_slot {
            next.slot_distributions.push(SlotDistribution { position, probs: self.item_probs(log_probs) });
        }
        if next.finished && self.constrained && token == self.vocab.rec_start() {
            // slot opened at the length cap: record what it would have held
            let lp = self.log_probs(&next)?;
            next.slot_distributions.push(SlotDistribution { position: position + 1, probs: self.item_probs(&lp) });
        }
        Ok(next)
    }
}

/// Final output of a generation run.
#[derive(Clone, Debug, PartialEq)]
pub struct RecommendationResult {
    pub response_tokens: Vec<TokenId>,
    /// Ranked `(item, probability)`, at most `k` long.
    pub items: Vec<(ItemId, f64)>,
    pub log_prob: f64,
    pub state: GenerationState,
}

impl RecommendationResult {
    pub fn from_state(state: GenerationState, log_prob: f64, vocab: &Vocabulary, k: usize) -> Self {
        let items = extract_topk_items(&state, vocab, k);
        RecommendationResult { response_tokens: state.emitted.clone(), items, log_prob, state }
    }
}

/// Greedy decoding with the pointer automaton. Ties go to the lowest id.
pub fn greedy_generate<S: LogitScorer + ?Sized>(
    context_prefix: &[TokenId],
    scorer: &S,
    bias: &[f64],
    vocab: &Vocabulary,
    n_max: usize,
    constrained: bool,
) -> Result<(GenerationState, f64)> {
    let dec = Decoder { prefix: context_prefix.to_vec(), scorer, bias, vocab, constrained };
    let mut state = GenerationState::new(n_max);
    let mut total = 0.0;
    while !state.finished {
        let lp = dec.log_probs(&state)?;
        let t = argmax(&lp);
        total += lp[t];
        state = dec.emit(&state, t as TokenId, &lp)?;
    }
    Ok((state, total))
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamHypothesis {
    pub state: GenerationState,
    pub log_prob: f64,
    pub finished: bool,
}

impl BeamHypothesis {
    pub fn score(&self, length_norm: f64) -> f64 {
        let len = self.state.emitted.len().max(1) as f64;
        self.log_prob / len.powf(length_norm)
    }
}

/// Beam search over masked, biased log-probabilities. Each step keeps the
/// `width` best expansions by cumulative log-probability; finished ones are
/// retired to a pool, which is returned ranked by length-normalized score.
/// Ties are broken by lexicographic token order.
pub fn beam_generate<S: LogitScorer + ?Sized>(
    context_prefix: &[TokenId],
    scorer: &S,
    bias: &[f64],
    vocab: &Vocabulary,
    width: usize,
    n_max: usize,
    length_norm: f64,
    constrained: bool,
) -> Result<Vec<BeamHypothesis>> {
    if width == 0 {
        return Err(Error::Config("beam width must be at least 1".into()));
    }
    let dec = Decoder { prefix: context_prefix.to_vec(), scorer, bias, vocab, constrained };
    let start = GenerationState::new(n_max);
    let mut pool: Vec<BeamHypothesis> = Vec::new();
    let mut live: Vec<BeamHypothesis> = Vec::new();
    if start.finished {
        pool.push(BeamHypothesis { state: start, log_prob: 0.0, finished: true });
    } else {
        live.push(BeamHypothesis { state: start, log_prob: 0.0, finished: false });
    }
    while !live.is_empty() {
        let step_lp: Vec<Vec<f64>> = live.iter().map(|h| dec.log_probs(&h.state)).collect::<Result<_>>()?;
        let mut candidates: Vec<(usize, TokenId, f64)> = Vec::new();
        for (h, lp) in live.iter().zip(&step_lp).enumerate().map(|(i, (h, lp))| ((i, h), lp)) {
            let (i, hyp) = h;
            for (t, &l) in lp.iter().enumerate() {
                if l.is_finite() {
                    candidates.push((i, t as TokenId, hyp.log_prob + l));
                }
            }
        }
        candidates.sort_by(|a, b| {
            b.2.total_cmp(&a.2).then_with(|| {
                let sa = live[a.0].state.emitted.iter().chain(std::iter::once(&a.1));
                let sb = live[b.0].state.emitted.iter().chain(std::iter::once(&b.1));
                sa.cmp(sb)
            })
        });
        candidates.truncate(width);
        let mut next_live = Vec::with_capacity(candidates.len());
        for (i, t, cum) in candidates {
            let state = dec.emit(&live[i].state, t, &step_lp[i])?;
            let finished = state.finished;
            let hyp = BeamHypothesis { state, log_prob: cum, finished };
            if finished {
                pool.push(hyp);
            } else {
                next_live.push(hyp);
            }
        }
        live = next_live;
    }
    pool.sort_by(|a, b| {
        b.score(length_norm).total_cmp(&a.score(length_norm)).then_with(|| a.state.emitted.cmp(&b.state.emitted))
    });
    pool.truncate(width);
    Ok(pool)
}

/// The `k` most probable items of the first captured slot (excluding
/// `[RecE]`), highest first; empty when no slot was opened.
pub fn extract_topk_items(state: &GenerationState, vocab: &Vocabulary, k: usize) -> Vec<(ItemId, f64)> {
    let Some(slot) = state.slot_distributions.first() else { return Vec::new() };
    let base = vocab.n_general();
    let mut ranked: Vec<(TokenId, f64)> = slot
        .probs
        .iter()
        .enumerate()
        .map(|(j, &p)| ((base + j) as TokenId, p))
        .filter(|&(t, _)| vocab.is_item(t))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked
        .into_iter()
        .take(k)
        .map(|(t, p)| (vocab.item_of(t).expect("item token").clone(), p))
        .collect()
}

/// Char span of an item name inside a rendered response.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedSpan {
    pub item_id: ItemId,
    pub start: usize,
    pub end: usize,
}

/// Joins response tokens into text, replacing items by their display names
/// and dropping special tokens.
pub fn render_response(
    tokens: &[TokenId],
    vocab: &Vocabulary,
    name_of: impl Fn(&ItemId) -> String,
) -> (String, Vec<RenderedSpan>) {
    let mut text = String::new();
    let mut len = 0usize;
    let mut spans = Vec::new();
    for &t in tokens {
        if vocab.is_special(t) {
            continue;
        }
        let (piece, item) = match vocab.item_of(t) {
            Some(item) => (name_of(item), Some(item.clone())),
            None => (vocab.token_str(t).to_string(), None),
        };
        let attach = piece.len() == 1 && piece.chars().all(|c| matches!(c, '.' | ',' | '!' | '?' | ';' | ':'));
        if !text.is_empty() && !attach {
            text.push(' ');
            len += 1;
        }
        let n = piece.chars().count();
        if let Some(item_id) = item {
            spans.push(RenderedSpan { item_id, start: len, end: len + n });
        }
        text.push_str(&piece);
        len += n;
    }
    (text, spans)
}
