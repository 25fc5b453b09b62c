//! End-to-end plumbing shared by the CLI, the chat service and the tests:
//! preprocessed data directories, experiment configuration, model
//! construction, batch generation and evaluation.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::checkpoint::Checkpoint;
use crate::corpus::{self, ContextResponsePair, ItemId, LinkMap, PairOptions, RawDialogue, Split, TokenId, Vocabulary};
use crate::error::{Error, Result};
use crate::evalsuite::{self, ItemRatioMode, MetricsReport, TranscriptRecord};
use crate::kgraph::{EntityIdx, KgDims, KgParams, KnowledgeGraph};
use crate::seqmodel::{self, LanguageModel, ModelConfig, Variant};
use crate::training::{self, Example, RecModel, TrainConfig, TrainReport};
use crate::vpdecode::{self, DecodeConfig, RecommendationResult, RenderedSpan};

pub const VOCAB_FILE: &str = "vocab.txt";
pub const LINK_MAP_FILE: &str = "link_map.json";
pub const TRIPLES_FILE: &str = "triples.tsv";
pub const ITEMS_FILE: &str = "items.json";
pub const COUNTS_FILE: &str = "mention_counts.json";
pub const DIALOGUES_FILE: &str = "dialogues.jsonl";
pub const TRAIN_FILE: &str = "train.jsonl";
pub const VALID_FILE: &str = "valid.jsonl";
pub const TEST_FILE: &str = "test.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    /// Words rarer than this map to `[UNK]`.
    pub min_count: usize,
    pub max_context: usize,
    pub split_seed: u64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig { min_count: 1, max_context: 256, split_seed: 0 }
    }
}

/// Language-model shape; the vocabulary sizes come from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelShape {
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub ff_width: usize,
    pub max_position: usize,
    pub dropout: f64,
}

impl Default for ModelShape {
    fn default() -> Self {
        ModelShape { layers: 2, heads: 4, width: 128, ff_width: 512, max_position: 320, dropout: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KgConfig {
    pub entity_dim: usize,
    pub attention_dim: usize,
    pub layers: usize,
    /// Add a reversed copy of every relation.
    pub add_inverse: bool,
}

impl Default for KgConfig {
    fn default() -> Self {
        let d = KgDims::default();
        KgConfig { entity_dim: d.entity_dim, attention_dim: d.attention_dim, layers: d.layers, add_inverse: true }
    }
}

impl KgConfig {
    pub fn dims(&self) -> KgDims {
        KgDims { entity_dim: self.entity_dim, attention_dim: self.attention_dim, layers: self.layers }
    }
}

/// Everything needed to reproduce a run; read from TOML by the CLI.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub preprocess: PreprocessConfig,
    pub model: ModelShape,
    pub kg: KgConfig,
    pub variant: Variant,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub item_ratio: ItemRatioMode,
}

impl ExperimentConfig {
    /// Small model sized for the synthetic corpus.
    pub fn toy() -> Self {
        ExperimentConfig {
            model: ModelShape { layers: 2, heads: 4, width: 32, ff_width: 64, max_position: 96, dropout: 0.0 },
            kg: KgConfig { entity_dim: 16, attention_dim: 8, layers: 1, add_inverse: true },
            train: TrainConfig { epochs: 15, batch_size: 8, learning_rate: 3e-3, warmup_steps: 50, ..TrainConfig::default() },
            decode: DecodeConfig { beam_width: 5, n_max: 16, top_k: 50, ..DecodeConfig::default() },
            ..ExperimentConfig::default()
        }
    }

    pub fn model_config(&self, vocab: &Vocabulary) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            layers: m.layers,
            heads: m.heads,
            width: m.width,
            ff_width: m.ff_width,
            max_position: m.max_position,
            dropout: m.dropout,
            seed: self.train.seed,
            ..ModelConfig::for_vocab(vocab)
        }
    }
}

/// A preprocessed corpus: vocabulary, links, KG triples, split pairs.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub vocab: Vocabulary,
    pub link_map: LinkMap,
    pub triples: Vec<(String, String, String)>,
    pub item_names: BTreeMap<ItemId, String>,
    pub dialogues: Vec<RawDialogue>,
    /// Pairs with item slots marked; the pointer-free variant strips them.
    pub split: Split<ContextResponsePair>,
    /// Item mentions over the training dialogues.
    pub mention_counts: BTreeMap<ItemId, usize>,
}

pub fn build_dataset(
    raw: Vec<RawDialogue>,
    item_names: BTreeMap<ItemId, String>,
    triples: Vec<(String, String, String)>,
    link_map: LinkMap,
    config: &PreprocessConfig,
) -> Result<Dataset> {
    let vocab = corpus::corpus_vocabulary(&raw, config.min_count)?;
    let encoded = corpus::encode_corpus(&raw, &vocab);
    let marked: Vec<corpus::Dialogue> = encoded.iter().map(|d| corpus::mark_items(d, &vocab)).collect::<Result<_>>()?;
    let pairs = corpus::build_pairs(&marked, &link_map, &vocab, PairOptions { max_context: config.max_context });
    let ids: Vec<String> = marked.iter().map(|d| d.id.clone()).collect();
    let dialogue_split = corpus::split_ids(&ids, config.split_seed)?;
    let train_ids: HashSet<&String> = dialogue_split.train.iter().collect();
    let valid_ids: HashSet<&String> = dialogue_split.valid.iter().collect();
    let mut split = Split::default();
    for p in pairs {
        if train_ids.contains(&p.dialogue_id) {
            split.train.push(p);
        } else if valid_ids.contains(&p.dialogue_id) {
            split.valid.push(p);
        } else {
            split.test.push(p);
        }
    }
    let train_dialogues: Vec<corpus::Dialogue> = encoded.into_iter().filter(|d| train_ids.contains(&d.id)).collect();
    let mention_counts = corpus::mention_counts(&train_dialogues).into_iter().collect();
    Ok(Dataset { vocab, link_map, triples, item_names, dialogues: raw, split, mention_counts })
}

pub fn read_triples(path: &Path) -> Result<Vec<(String, String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').map(str::trim).collect();
        if cols.len() != 3 {
            return Err(Error::Parse { path: path.into(), line: i + 1, message: "expected head\\trelation\\ttail".into() });
        }
        out.push((cols[0].to_string(), cols[1].to_string(), cols[2].to_string()));
    }
    Ok(out)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

impl Dataset {
    /// Builds the KG over the triples plus every linked entity.
    pub fn knowledge_graph(&self, add_inverse: bool) -> Result<KnowledgeGraph> {
        let extra = self.link_map.entities();
        KnowledgeGraph::from_string_triples(
            self.triples.iter().map(|(h, r, t)| (h.as_str(), r.as_str(), t.as_str())),
            extra.iter().map(String::as_str),
            add_inverse,
        )
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.vocab.save(&dir.join(VOCAB_FILE))?;
        write_file(&dir.join(LINK_MAP_FILE), self.link_map.to_json())?;
        let triples: String = self.triples.iter().map(|(h, r, t)| format!("{h}\t{r}\t{t}\n")).collect();
        write_file(&dir.join(TRIPLES_FILE), triples)?;
        write_file(&dir.join(ITEMS_FILE), serde_json::to_string_pretty(&self.item_names)?)?;
        write_file(&dir.join(COUNTS_FILE), serde_json::to_string_pretty(&self.mention_counts)?)?;
        corpus::redial::write_normalized(&dir.join(DIALOGUES_FILE), &self.dialogues)?;
        corpus::save_pairs(&dir.join(TRAIN_FILE), &self.split.train, &self.vocab)?;
        corpus::save_pairs(&dir.join(VALID_FILE), &self.split.valid, &self.vocab)?;
        corpus::save_pairs(&dir.join(TEST_FILE), &self.split.test, &self.vocab)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let vocab = Vocabulary::load(&dir.join(VOCAB_FILE))?;
        let link_map = LinkMap::load(&dir.join(LINK_MAP_FILE))?;
        let triples = read_triples(&dir.join(TRIPLES_FILE))?;
        let item_names = serde_json::from_str(&read_file(&dir.join(ITEMS_FILE))?)?;
        let mention_counts = serde_json::from_str(&read_file(&dir.join(COUNTS_FILE))?)?;
        let dialogues = corpus::redial::read_normalized(&dir.join(DIALOGUES_FILE))?;
        let split = Split {
            train: corpus::load_pairs(&dir.join(TRAIN_FILE), &vocab)?,
            valid: corpus::load_pairs(&dir.join(VALID_FILE), &vocab)?,
            test: corpus::load_pairs(&dir.join(TEST_FILE), &vocab)?,
        };
        Ok(Dataset { vocab, link_map, triples, item_names, dialogues, split, mention_counts })
    }

    pub fn counts(&self) -> HashMap<ItemId, usize> {
        self.mention_counts.iter().map(|(k, v)| (k.clone(), *v)).collect()
    }
}

/// Fresh parameters for `config.variant`, seeded by `config.train.seed`.
pub fn init_model(vocab: &Vocabulary, kg: &KnowledgeGraph, config: &ExperimentConfig) -> Result<RecModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
    let lm = LanguageModel::new(config.model_config(vocab), &mut rng)?;
    let kg_params = if config.variant.knowledge {
        Some(KgParams::init(kg, config.kg.dims(), vocab.n_item_partition(), &mut rng)?)
    } else {
        None
    };
    RecModel::new(lm, kg_params, config.variant)
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub report: TrainReport,
}

/// Trains a model for `config.variant` on the dataset's train split,
/// selecting by valid perplexity.
pub fn train_on(data: &Dataset, config: &ExperimentConfig) -> Result<TrainOutcome> {
    let kg = data.knowledge_graph(config.kg.add_inverse)?;
    let model = init_model(&data.vocab, &kg, config)?;
    let kg_ref = config.variant.knowledge.then_some(&kg);
    let prep = |pairs: &[ContextResponsePair]| {
        training::prepare_examples(pairs, kg_ref, &data.link_map, &data.vocab, config.variant.pointer)
    };
    let train_set = prep(&data.split.train);
    let valid_set = prep(&data.split.valid);
    let (model, report) = training::train(model, kg_ref, &data.vocab, &train_set, &valid_set, &config.train)?;
    let meta = serde_json::json!({
        "best_epoch": report.best_epoch,
        "epochs": report.epochs.len(),
        "config": config,
    });
    let checkpoint = Checkpoint { model, vocab_hash: data.vocab.hash(), entity_ids: kg.entity_ids().to_vec(), meta };
    Ok(TrainOutcome { checkpoint, report })
}

/// A frozen model ready for decoding, with H computed once.
pub struct Recommender {
    pub model: RecModel,
    pub vocab: Vocabulary,
    pub kg: KnowledgeGraph,
    pub link_map: LinkMap,
    pub item_names: BTreeMap<ItemId, String>,
    h: Option<Mat>,
}

/// One decoded response.
#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub result: RecommendationResult,
    pub text: String,
    pub spans: Vec<RenderedSpan>,
}

impl Recommender {
    pub fn new(
        model: RecModel,
        vocab: Vocabulary,
        kg: KnowledgeGraph,
        link_map: LinkMap,
        item_names: BTreeMap<ItemId, String>,
    ) -> Result<Self> {
        if model.lm.config.vocab_size() != vocab.len() || model.lm.config.n_general != vocab.n_general() {
            return Err(Error::Checkpoint("model vocabulary does not match the data vocabulary".into()));
        }
        let h = model.entity_embeddings(&kg)?;
        Ok(Recommender { model, vocab, kg, link_map, item_names, h })
    }

    /// Loads a checkpoint against a preprocessed dataset, checking that the
    /// vocabulary and entity order agree.
    pub fn from_checkpoint(ck: Checkpoint, data: &Dataset, add_inverse: bool) -> Result<Self> {
        if ck.vocab_hash != data.vocab.hash() {
            return Err(Error::Checkpoint("vocabulary hash differs from the data directory".into()));
        }
        let kg = data.knowledge_graph(add_inverse)?;
        if ck.entity_ids != kg.entity_ids() {
            return Err(Error::Checkpoint("entity order differs from the data directory".into()));
        }
        Self::new(ck.model, data.vocab.clone(), kg, data.link_map.clone(), data.item_names.clone())
    }

    pub fn entity_embeddings(&self) -> Option<&Mat> {
        self.h.as_ref()
    }

    pub fn item_name(&self, item: &ItemId) -> String {
        self.item_names.get(item).cloned().unwrap_or_else(|| item.clone())
    }

    /// Context tokens in the form the model was trained on.
    pub fn model_context(&self, context: &[TokenId], n_max: usize) -> Vec<TokenId> {
        let context =
            if self.model.variant.pointer { context.to_vec() } else { training::strip_markers(context, &self.vocab) };
        let budget = self.model.lm.config.max_position.saturating_sub(n_max + 1).max(1);
        corpus::truncate_context(&context, budget, &self.vocab)
    }

    pub fn bias(&self, entities: &[EntityIdx]) -> Result<Vec<f64>> {
        self.model.user_bias(self.h.as_ref(), entities)
    }

    /// Beam search for one context; returns the best hypothesis with its
    /// top-k slot items and rendered text.
    pub fn recommend(&self, context: &[TokenId], entities: &[EntityIdx], decode: &DecodeConfig) -> Result<Generated> {
        let prefix = seqmodel::decoder_prefix(&self.model_context(context, decode.n_max), self.vocab.sep());
        let bias = self.bias(entities)?;
        let constrained = decode.constrained && self.model.variant.pointer;
        let beams = vpdecode::beam_generate(
            &prefix,
            &self.model.lm,
            &bias,
            &self.vocab,
            decode.beam_width,
            decode.n_max,
            decode.length_norm,
            constrained,
        )?;
        let best = beams.into_iter().next().ok_or_else(|| Error::Empty("beam search returned nothing".into()))?;
        let result = RecommendationResult::from_state(best.state, best.log_prob, &self.vocab, decode.top_k);
        let (text, spans) = vpdecode::render_response(&result.response_tokens, &self.vocab, |i| self.item_name(i));
        Ok(Generated { result, text, spans })
    }

    pub fn transcript_record(&self, pair: &ContextResponsePair, decode: &DecodeConfig) -> Result<TranscriptRecord> {
        let entities = self.kg.resolve(&pair.entity_set);
        let g = self.recommend(&pair.context, &entities, decode)?;
        Ok(TranscriptRecord {
            pair_id: pair.pair_id.clone(),
            generated_text: g.text,
            generated_tokens: g.result.response_tokens.iter().map(|&t| self.vocab.token_str(t).to_string()).collect(),
            items: g.result.items,
            gold_items: pair.gold_items.clone(),
        })
    }

    /// Decodes every pair, spreading work over `threads` workers. Output
    /// order follows input order and does not depend on the thread count.
    pub fn generate_all(&self, pairs: &[ContextResponsePair], decode: &DecodeConfig, threads: usize) -> Result<Vec<TranscriptRecord>> {
        let threads = threads.max(1).min(pairs.len().max(1));
        let chunk = pairs.len().div_ceil(threads).max(1);
        let parts: Vec<Result<Vec<TranscriptRecord>>> = std::thread::scope(|s| {
            let handles: Vec<_> = pairs
                .chunks(chunk)
                .map(|part| s.spawn(move || part.iter().map(|p| self.transcript_record(p, decode)).collect()))
                .collect();
            handles.into_iter().map(|h| h.join().expect("generation worker panicked")).collect()
        });
        let mut out = Vec::with_capacity(pairs.len());
        for part in parts {
            out.extend(part?);
        }
        Ok(out)
    }

    /// Masked perplexity of the model on `pairs`.
    pub fn perplexity(&self, pairs: &[ContextResponsePair]) -> Result<f64> {
        let kg = self.model.variant.knowledge.then_some(&self.kg);
        let examples: Vec<Example> =
            training::prepare_examples(pairs, kg, &self.link_map, &self.vocab, self.model.variant.pointer);
        Ok(training::evaluate_losses(&self.model, kg, &self.vocab, &examples)?.ppl)
    }
}

pub fn default_threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Scores a transcript against gold pairs.
pub fn evaluate(
    records: &[TranscriptRecord],
    gold: &[ContextResponsePair],
    vocab: &Vocabulary,
    mention_counts: &HashMap<ItemId, usize>,
    ppl: Option<f64>,
    mode: ItemRatioMode,
) -> Result<MetricsReport> {
    let instances = evalsuite::join_transcript(records, gold, vocab)?;
    MetricsReport::compute(&instances, mention_counts, ppl, mode)
}
