//! End-to-end recommendation recall, generation metrics and bucketed
//! analyses.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::hash::Hash;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::redial::{read_jsonl, write_jsonl};
use crate::corpus::{vocab, ContextResponsePair, ItemId, PairRecord, TokenId, Vocabulary};
use crate::error::{Error, Result};

/// One generated response with what evaluation needs to score it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalInstance {
    pub pair_id: String,
    pub turn_index: usize,
    pub gold_items: Vec<ItemId>,
    /// Ranked items extracted from the generated response; empty when the
    /// response has no item slot.
    pub items: Vec<ItemId>,
    /// Generated words (items as single words, markers dropped).
    pub generated: Vec<String>,
    pub reference: Vec<String>,
}

impl EvalInstance {
    pub fn eligible(&self) -> bool {
        !self.gold_items.is_empty()
    }

    pub fn hit_at(&self, k: usize) -> bool {
        self.items.iter().take(k).any(|i| self.gold_items.contains(i))
    }
}

/// Fraction of instances with gold items whose top-k extracted items
/// contain one of them. Internal rankings play no part: an instance whose
/// response has no item slot is a miss.
pub fn recall_at_k(instances: &[EvalInstance], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let eligible: Vec<&EvalInstance> = instances.iter().filter(|i| i.eligible()).collect();
    if eligible.is_empty() {
        return Err(Error::Empty("no instances with gold items".into()));
    }
    let hits = eligible.iter().filter(|i| i.hit_at(k)).count();
    Ok(hits as f64 / eligible.len() as f64)
}

fn ngrams<T: Clone>(tokens: &[T], n: usize) -> impl Iterator<Item = &[T]> {
    tokens.windows(n.max(1)).filter(move |_| n > 0)
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if n > 0 {
        for g in tokens.windows(n) {
            *counts.entry(g).or_insert(0) += 1;
        }
    }
    counts
}

/// Sentence-level Dist-n: mean over responses of distinct n-grams divided by
/// the response's token count. Empty responses contribute 0; an empty set
/// gives 0.
pub fn distinct_n<T: Eq + Hash + Clone>(responses: &[Vec<T>], n: usize) -> f64 {
    if responses.is_empty() {
        return 0.0;
    }
    let total: f64 = responses
        .iter()
        .map(|r| {
            if r.is_empty() {
                0.0
            } else {
                ngrams(r, n).collect::<HashSet<_>>().len() as f64 / r.len() as f64
            }
        })
        .sum();
    total / responses.len() as f64
}

/// Numerator used in place of zero clipped matches for orders above 1.
pub const BLEU_SMOOTHING: f64 = 0.1;

/// Single-reference BLEU-n: geometric mean of the clipped 1..n-gram
/// precisions times the brevity penalty. No unigram overlap gives 0; a zero
/// higher-order match count is replaced by `BLEU_SMOOTHING`.
pub fn bleu_n<T: Eq + Hash>(hypothesis: &[T], reference: &[T], n: usize) -> f64 {
    if hypothesis.is_empty() || n == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for k in 1..=n {
        let hyp = ngram_counts(hypothesis, k);
        let refc = ngram_counts(reference, k);
        let total: usize = hyp.values().sum();
        let matched: usize = hyp.iter().map(|(g, &c)| c.min(refc.get(g).copied().unwrap_or(0))).sum();
        if k == 1 && matched == 0 {
            return 0.0;
        }
        let num = if matched == 0 { BLEU_SMOOTHING } else { matched as f64 };
        log_sum += (num / total.max(1) as f64).ln();
    }
    let (c, r) = (hypothesis.len() as f64, reference.len() as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    bp * (log_sum / n as f64).exp()
}

fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub const ROUGE_BETA: f64 = 1.2;

/// LCS-based F-measure with β = 1.2. Callers lowercase string tokens.
pub fn rouge_l<T: Eq>(hypothesis: &[T], reference: &[T]) -> f64 {
    if hypothesis.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(hypothesis, reference) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / hypothesis.len() as f64;
    let r = lcs / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemRatioMode {
    /// Share of responses containing at least one item.
    #[default]
    Responses,
    /// Share of tokens that are items.
    Tokens,
}

/// Item Ratio as a percentage.
pub fn item_ratio(responses: &[Vec<String>], mode: ItemRatioMode) -> Result<f64> {
    if responses.is_empty() {
        return Err(Error::Empty("no responses for item ratio".into()));
    }
    let is_item = |w: &String| vocab::parse_item_token(w).is_some();
    Ok(match mode {
        ItemRatioMode::Responses => {
            100.0 * responses.iter().filter(|r| r.iter().any(is_item)).count() as f64 / responses.len() as f64
        }
        ItemRatioMode::Tokens => {
            let total: usize = responses.iter().map(Vec::len).sum();
            if total == 0 {
                0.0
            } else {
                100.0 * responses.iter().flatten().filter(|w| is_item(w)).count() as f64 / total as f64
            }
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BucketBy {
    /// Training-split mention count of the first gold item.
    Frequency,
    /// Turn index of the response.
    Turn,
}

pub const FREQUENCY_EDGES: [usize; 5] = [0, 1, 5, 10, 100];
pub const TURN_EDGES: [usize; 3] = [1, 6, 11];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketRow {
    pub label: String,
    /// Inclusive lower bound.
    pub lo: usize,
    /// Exclusive upper bound; `None` is unbounded.
    pub hi: Option<usize>,
    pub instances: usize,
    pub hits: usize,
    pub recall: f64,
}

fn bucket_label(lo: usize, hi: Option<usize>) -> String {
    match hi {
        Some(hi) => format!("[{lo},{hi})"),
        None => format!("[{lo},inf)"),
    }
}

/// Recall@k per bucket over eligible instances. `edges` are ascending lower
/// bounds; values below the first edge are dropped. Empty buckets are left
/// out of the table.
pub fn bucket_recall_with_edges(
    instances: &[EvalInstance],
    mention_counts: &HashMap<ItemId, usize>,
    by: BucketBy,
    k: usize,
    edges: &[usize],
) -> Vec<BucketRow> {
    let mut rows: Vec<BucketRow> = edges
        .iter()
        .enumerate()
        .map(|(i, &lo)| {
            let hi = edges.get(i + 1).copied();
            BucketRow { label: bucket_label(lo, hi), lo, hi, instances: 0, hits: 0, recall: 0.0 }
        })
        .collect();
    for inst in instances.iter().filter(|i| i.eligible()) {
        let key = match by {
            BucketBy::Frequency => mention_counts.get(&inst.gold_items[0]).copied().unwrap_or(0),
            BucketBy::Turn => inst.turn_index,
        };
        if let Some(row) = rows.iter_mut().rev().find(|r| key >= r.lo) {
            row.instances += 1;
            row.hits += inst.hit_at(k) as usize;
        }
    }
    rows.retain(|r| r.instances > 0);
    for r in &mut rows {
        r.recall = r.hits as f64 / r.instances as f64;
    }
    rows
}

/// Bucketed recall with the default edges: mention counts 0, [1,5), [5,10),
/// [10,100), [100,∞) and turns 1–5, 6–10, 11+.
pub fn bucket_recall(instances: &[EvalInstance], mention_counts: &HashMap<ItemId, usize>, by: BucketBy, k: usize) -> Vec<BucketRow> {
    let edges: &[usize] = match by {
        BucketBy::Frequency => &FREQUENCY_EDGES,
        BucketBy::Turn => &TURN_EDGES,
    };
    bucket_recall_with_edges(instances, mention_counts, by, k, edges)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketTable {
    pub by: BucketBy,
    pub k: usize,
    pub rows: Vec<BucketRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub instances: usize,
    pub recall_eligible: usize,
    pub recall_at_1: f64,
    pub recall_at_10: f64,
    pub recall_at_50: f64,
    pub dist_2: f64,
    pub dist_3: f64,
    pub dist_4: f64,
    pub bleu_2: f64,
    pub bleu_4: f64,
    pub rouge_l: f64,
    pub ppl: Option<f64>,
    pub item_ratio: f64,
    pub item_ratio_mode: ItemRatioMode,
    pub buckets: Vec<BucketTable>,
}

impl MetricsReport {
    pub fn compute(
        instances: &[EvalInstance],
        mention_counts: &HashMap<ItemId, usize>,
        ppl: Option<f64>,
        mode: ItemRatioMode,
    ) -> Result<Self> {
        if instances.is_empty() {
            return Err(Error::Empty("no instances to evaluate".into()));
        }
        let generated: Vec<Vec<String>> = instances.iter().map(|i| i.generated.clone()).collect();
        let mean = |f: &dyn Fn(&EvalInstance) -> f64| instances.iter().map(f).sum::<f64>() / instances.len() as f64;
        let eligible = instances.iter().filter(|i| i.eligible()).count();
        let recall = |k| if eligible == 0 { Ok(0.0) } else { recall_at_k(instances, k) };
        let mut buckets = Vec::new();
        for by in [BucketBy::Frequency, BucketBy::Turn] {
            for k in [30, 50] {
                buckets.push(BucketTable { by, k, rows: bucket_recall(instances, mention_counts, by, k) });
            }
        }
        Ok(MetricsReport {
            instances: instances.len(),
            recall_eligible: eligible,
            recall_at_1: recall(1)?,
            recall_at_10: recall(10)?,
            recall_at_50: recall(50)?,
            dist_2: distinct_n(&generated, 2),
            dist_3: distinct_n(&generated, 3),
            dist_4: distinct_n(&generated, 4),
            bleu_2: mean(&|i| bleu_n(&i.generated, &i.reference, 2)),
            bleu_4: mean(&|i| bleu_n(&i.generated, &i.reference, 4)),
            rouge_l: mean(&|i| rouge_l(&i.generated, &i.reference)),
            ppl,
            item_ratio: item_ratio(&generated, mode)?,
            item_ratio_mode: mode,
            buckets,
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "instances        {}", self.instances);
        let _ = writeln!(s, "recall eligible  {}", self.recall_eligible);
        let _ = writeln!(s, "recall@1         {:.4}", self.recall_at_1);
        let _ = writeln!(s, "recall@10        {:.4}", self.recall_at_10);
        let _ = writeln!(s, "recall@50        {:.4}", self.recall_at_50);
        let _ = writeln!(s, "dist-2           {:.4}", self.dist_2);
        let _ = writeln!(s, "dist-3           {:.4}", self.dist_3);
        let _ = writeln!(s, "dist-4           {:.4}", self.dist_4);
        let _ = writeln!(s, "bleu-2           {:.4}", self.bleu_2);
        let _ = writeln!(s, "bleu-4           {:.4}", self.bleu_4);
        let _ = writeln!(s, "rouge-l          {:.4}", self.rouge_l);
        match self.ppl {
            Some(p) => {
                let _ = writeln!(s, "ppl              {p:.3}");
            }
            None => {
                let _ = writeln!(s, "ppl              n/a");
            }
        }
        let _ = writeln!(s, "item ratio       {:.2}%", self.item_ratio);
        for t in &self.buckets {
            let by = match t.by {
                BucketBy::Frequency => "mention count",
                BucketBy::Turn => "turn",
            };
            let _ = writeln!(s, "recall@{} by {by}", t.k);
            for r in &t.rows {
                let _ = writeln!(s, "  {:<12} n={:<6} {:.4}", r.label, r.instances, r.recall);
            }
        }
        s
    }
}

/// Line format shared by generation and evaluation runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub pair_id: String,
    pub generated_text: String,
    pub generated_tokens: Vec<String>,
    pub items: Vec<(ItemId, f64)>,
    pub gold_items: Vec<ItemId>,
}

pub fn write_transcript(path: &Path, records: &[TranscriptRecord]) -> Result<()> {
    write_jsonl(path, records)
}

pub fn read_transcript(path: &Path) -> Result<Vec<TranscriptRecord>> {
    read_jsonl(path)
}

/// Words used by the text metrics: specials and slot markers dropped, items
/// kept as one word each.
pub fn metric_words(tokens: &[TokenId], vocab: &Vocabulary) -> Vec<String> {
    tokens
        .iter()
        .filter(|&&t| !vocab.is_special(t))
        .map(|&t| vocab.token_str(t).to_lowercase())
        .collect()
}

/// String-token variant of [`metric_words`].
pub fn metric_words_str(tokens: &[String]) -> Vec<String> {
    tokens
        .iter()
        .filter(|t| !vocab::is_special_str(t))
        .map(|t| if vocab::parse_item_token(t).is_some() { t.clone() } else { t.to_lowercase() })
        .collect()
}

/// Joins transcript records with their gold pairs by `pair_id`.
pub fn join_transcript(records: &[TranscriptRecord], gold: &[ContextResponsePair], vocab: &Vocabulary) -> Result<Vec<EvalInstance>> {
    let gold: Vec<PairRecord> = gold.iter().map(|p| PairRecord::from_pair(p, vocab)).collect();
    join_transcript_records(records, &gold)
}

/// [`join_transcript`] over serialized gold pairs; no vocabulary needed.
pub fn join_transcript_records(records: &[TranscriptRecord], gold: &[PairRecord]) -> Result<Vec<EvalInstance>> {
    let by_id: HashMap<&str, &PairRecord> = gold.iter().map(|p| (p.pair_id.as_str(), p)).collect();
    records
        .iter()
        .map(|r| {
            let pair = by_id
                .get(r.pair_id.as_str())
                .ok_or_else(|| Error::Config(format!("transcript pair {} not in gold file", r.pair_id)))?;
            Ok(EvalInstance {
                pair_id: r.pair_id.clone(),
                turn_index: pair.turn_index,
                gold_items: pair.gold_items.clone(),
                items: r.items.iter().map(|(i, _)| i.clone()).collect(),
                generated: metric_words_str(&r.generated_tokens),
                reference: metric_words_str(&pair.response),
            })
        })
        .collect()
}
