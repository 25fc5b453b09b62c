//! Fixtures for the benchmarks: untrained models over the synthetic corpus
//! and random graphs and responses at chosen sizes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use recindial::kgraph::{KgDims, KgParams, KnowledgeGraph};
use recindial::pipeline::{self, ExperimentConfig, PreprocessConfig, Recommender};
use recindial::synth::{self, SynthConfig};
use recindial::{ContextResponsePair, Dataset};

pub fn synthetic(dialogues: usize) -> Dataset {
    let c = synth::generate(&SynthConfig { dialogues, ..SynthConfig::default() }).expect("synthetic corpus");
    let names = c.item_names();
    pipeline::build_dataset(c.dialogues, names, c.triples, c.link_map, &PreprocessConfig::default()).expect("dataset")
}

/// A freshly initialized recommender with `config`'s shapes.
pub fn recommender(data: &Dataset, config: &ExperimentConfig) -> Recommender {
    let kg = data.knowledge_graph(config.kg.add_inverse).expect("kg");
    let model = pipeline::init_model(&data.vocab, &kg, config).expect("model");
    Recommender::new(model, data.vocab.clone(), kg, data.link_map.clone(), data.item_names.clone()).expect("recommender")
}

pub fn longest_test_pair(data: &Dataset) -> ContextResponsePair {
    data.split.test.iter().max_by_key(|p| p.context.len()).expect("test pairs").clone()
}

/// Random multigraph with `n` entities, `relations` relation types and
/// `degree · n` edges, plus parameters.
pub fn random_kg(n: usize, relations: usize, degree: usize, dims: KgDims, seed: u64) -> (KnowledgeGraph, KgParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = (0..n).map(|i| format!("e{i}")).collect();
    let rels: Vec<String> = (0..relations).map(|r| format!("r{r}")).collect();
    let triples: Vec<(usize, usize, usize)> =
        (0..n * degree).map(|_| (rng.gen_range(0..n), rng.gen_range(0..relations), rng.gen_range(0..n))).collect();
    let kg = KnowledgeGraph::from_string_triples(
        triples.iter().map(|&(h, r, t)| (names[h].as_str(), rels[r].as_str(), names[t].as_str())),
        names.iter().map(String::as_str),
        true,
    )
    .expect("kg");
    let params = KgParams::init(&kg, dims, 100, &mut rng).expect("kg params");
    (kg, params)
}

/// `count` responses of 5–30 words over a `words`-word Zipf-ish vocabulary.
pub fn random_responses(count: usize, words: usize, seed: u64) -> Vec<Vec<String>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let len = rng.gen_range(5..=30);
            (0..len)
                .map(|_| {
                    let r: f64 = rng.gen();
                    format!("w{}", ((words as f64).powf(r) as usize).min(words - 1))
                })
                .collect()
        })
        .collect()
}
