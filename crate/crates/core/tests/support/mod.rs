//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use recindial::autodiff::{Graph, Mat};
use recindial::corpus::build_vocabulary;
use recindial::kgraph::{self, KgDims, KgParams, KgVars, KnowledgeGraph};
use recindial::params::NamedParams;
use recindial::seqmodel::{self, LanguageModel, LmVars, LogitScorer, ModelConfig, SpecialIds};
use recindial::training::grad_check;
use recindial::{Result, TokenId, Vocabulary};

/// Logits drawn from a ChaCha stream keyed by (seed, prefix). Some prefixes
/// get extreme or tied logits.
pub struct RandomScorer {
    pub vocab_size: usize,
    pub seed: u64,
}

impl LogitScorer for RandomScorer {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn score(&self, prefix: &[TokenId]) -> Result<Vec<f64>> {
        let mut h = DefaultHasher::new();
        self.seed.hash(&mut h);
        prefix.hash(&mut h);
        let mut rng = ChaCha8Rng::seed_from_u64(h.finish());
        let style: u8 = rng.gen_range(0..10);
        Ok((0..self.vocab_size)
            .map(|_| match style {
                0 => rng.gen_range(-800.0..800.0),
                1 => 0.0,
                2 => rng.gen_range(0..3) as f64,
                _ => rng.gen_range(-4.0..4.0),
            })
            .collect())
    }
}

/// `[PAD] [EOS] [SEP] [RecS]`, `n_words` general words, `[RecE]`, `n_items` items.
pub fn vocab(n_words: usize, n_items: usize) -> Vocabulary {
    let words: Vec<String> = (0..n_words).map(|i| format!("w{i}")).collect();
    let items: Vec<String> = (0..n_items).map(|i| format!("{}", 100 + i)).collect();
    build_vocabulary(&items, &words).unwrap()
}

/// Replays a token sequence through a fresh pointer automaton and counts
/// tokens emitted from the wrong partition.
pub fn automaton_violations(tokens: &[TokenId], v: &Vocabulary) -> usize {
    let n_general = v.n_general() as TokenId;
    let mut inside = false;
    let mut bad = 0;
    for &t in tokens {
        let general = t < n_general;
        if general == inside {
            bad += 1;
        }
        if t == v.rec_start() {
            inside = true;
        } else if t == v.rec_end() {
            inside = false;
        }
    }
    bad
}

fn log_softmax_over(z: &[f64], allowed: &[usize]) -> Vec<(usize, f64)> {
    let m = allowed.iter().map(|&i| z[i]).fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = allowed.iter().map(|&i| (z[i] - m).exp()).sum();
    allowed.iter().map(|&i| (i, z[i] - m - s.ln())).collect()
}

/// Best complete sequence by exhaustive enumeration under the pointer
/// rules: `(tokens, cumulative log-prob, normalized score)`. Sequences end
/// at `[EOS]` or at `n_max` tokens. Ties go to the lexicographically
/// smaller sequence.
pub fn enumerate_best(
    prefix: &[TokenId],
    scorer: &dyn LogitScorer,
    bias: &[f64],
    v: &Vocabulary,
    n_max: usize,
    length_norm: f64,
) -> (Vec<TokenId>, f64, f64) {
    let mut best: Option<(Vec<TokenId>, f64, f64)> = None;
    let mut stack: Vec<(Vec<TokenId>, bool, f64)> = vec![(Vec::new(), false, 0.0)];
    let n_general = v.n_general();
    while let Some((seq, inside, lp)) = stack.pop() {
        let mut full = prefix.to_vec();
        full.extend_from_slice(&seq);
        let mut z = scorer.score(&full).unwrap();
        for (j, b) in bias.iter().enumerate() {
            z[n_general + j] += b;
        }
        let allowed: Vec<usize> = if inside { (n_general..v.len()).collect() } else { (0..n_general).collect() };
        for (t, l) in log_softmax_over(&z, &allowed) {
            let t = t as TokenId;
            let mut next = seq.clone();
            next.push(t);
            let cum = lp + l;
            if t == v.eos() || next.len() >= n_max {
                let score = cum / (next.len() as f64).powf(length_norm);
                let better = match &best {
                    None => true,
                    Some((bs, _, bscore)) => score > *bscore || (score == *bscore && next < *bs),
                };
                if better {
                    best = Some((next, cum, score));
                }
            } else {
                let inside = if t == v.rec_start() {
                    true
                } else if t == v.rec_end() {
                    false
                } else {
                    inside
                };
                stack.push((next, inside, cum));
            }
        }
    }
    best.expect("at least one sequence")
}

/// R-GCN with dense adjacency built straight from the triple list.
pub fn dense_rgcn(kg: &KnowledgeGraph, p: &KgParams) -> Mat {
    let n = kg.n_entities();
    let mut adj = vec![Array2::<f64>::zeros((n, n)); kg.n_relations()];
    for &(h, r, t) in kg.triples() {
        adj[r][[t, h]] = 1.0;
    }
    for a in &mut adj {
        for mut row in a.rows_mut() {
            let s: f64 = row.sum();
            if s > 0.0 {
                row.mapv_inplace(|x| x / s);
            }
        }
    }
    let mut h = p.base.clone();
    for (l, layer) in p.layers.iter().enumerate() {
        let mut next = h.dot(&layer.self_loop.t());
        for (r, w) in layer.relation.iter().enumerate() {
            next = next + adj[r].dot(&h).dot(&w.t());
        }
        if l + 1 < p.layers.len() {
            next.mapv_inplace(|x| x.max(0.0));
        }
        h = next;
    }
    h
}

/// Dist-n of one sentence by listing every window and comparing pairwise.
pub fn naive_distinct(s: &[u8], n: usize) -> f64 {
    if s.is_empty() {
        return 0.0;
    }
    let windows: Vec<&[u8]> = if n == 0 || n > s.len() { Vec::new() } else { (0..=s.len() - n).map(|i| &s[i..i + n]).collect() };
    let mut distinct = 0;
    for (i, w) in windows.iter().enumerate() {
        if !windows[..i].contains(w) {
            distinct += 1;
        }
    }
    distinct as f64 / s.len() as f64
}

fn count_occurrences(s: &[u8], g: &[u8]) -> usize {
    if g.len() > s.len() {
        return 0;
    }
    (0..=s.len() - g.len()).filter(|&i| &s[i..i + g.len()] == g).count()
}

/// BLEU-n by direct counting, with the same smoothing convention.
pub fn naive_bleu(hyp: &[u8], reference: &[u8], n: usize, smoothing: f64) -> f64 {
    if hyp.is_empty() {
        return 0.0;
    }
    let mut log_p = 0.0;
    for k in 1..=n {
        let mut matched = 0;
        let mut total = 0;
        if k <= hyp.len() {
            let mut seen: Vec<&[u8]> = Vec::new();
            for i in 0..=hyp.len() - k {
                let g = &hyp[i..i + k];
                total += 1;
                if !seen.contains(&g) {
                    seen.push(g);
                    matched += count_occurrences(hyp, g).min(count_occurrences(reference, g));
                }
            }
        }
        if k == 1 && matched == 0 {
            return 0.0;
        }
        let num = if matched == 0 { smoothing } else { matched as f64 };
        log_p += (num / total.max(1) as f64).ln();
    }
    let (c, r) = (hyp.len() as f64, reference.len() as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    bp * (log_p / n as f64).exp()
}

fn is_subsequence(sub: &[u8], s: &[u8]) -> bool {
    let mut it = s.iter();
    sub.iter().all(|x| it.any(|y| y == x))
}

/// Rouge-L with the LCS found by trying every subsequence of `hyp`.
pub fn naive_rouge_l(hyp: &[u8], reference: &[u8], beta: f64) -> f64 {
    if hyp.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let mut lcs = 0;
    for mask in 0u32..(1 << hyp.len()) {
        let sub: Vec<u8> = (0..hyp.len()).filter(|i| mask >> i & 1 == 1).map(|i| hyp[i]).collect();
        if sub.len() > lcs && is_subsequence(&sub, reference) {
            lcs = sub.len();
        }
    }
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / hyp.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    (1.0 + beta * beta) * p * r / (r + beta * beta * p)
}

/// Every string of length 0..=max_len over `alphabet` symbols.
pub fn all_strings(alphabet: u8, max_len: usize) -> Vec<Vec<u8>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for c in 0..alphabet {
                let mut t: Vec<u8> = s.clone();
                t.push(c);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Largest relative error of the analytic L_kg gradient on a 4-entity,
/// 2-relation graph with d_E = 4.
pub fn kg_loss_grad_error(seed: u64) -> f64 {
    let kg = KnowledgeGraph::from_string_triples([("a", "r0", "b"), ("b", "r1", "c"), ("c", "r0", "d"), ("a", "r1", "d")], [], false)
        .unwrap();
    assert_eq!((kg.n_entities(), kg.n_relations()), (4, 2));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = KgDims { entity_dim: 4, attention_dim: 3, layers: 2 };
    let params = KgParams::init(&kg, dims, 3, &mut rng).unwrap();
    let flat: Vec<Mat> = params.named().into_iter().map(|(_, m)| m.clone()).collect();
    let entities = [0usize, 2];
    let gold = 3;
    grad_check(&flat, 1e-5, |p| {
        let mut q = params.clone();
        for (dst, src) in q.params_mut().into_iter().zip(p) {
            *dst = src.clone();
        }
        let mut g = Graph::new();
        let vars = KgVars::bind(&mut g, &q);
        let h = kgraph::rgcn_graph(&mut g, &kg, &vars);
        let (_, t_u) = kgraph::attend_graph(&mut g, h, &entities, &vars);
        let loss = kgraph::kg_loss_graph(&mut g, t_u, h, gold)?;
        let mut grads = g.backward(loss);
        let out = vars.all().iter().map(|&v| grads.take(v).unwrap_or_else(|| Mat::zeros(g.value(v).dim()))).collect();
        Ok((g.scalar_value(loss), out))
    })
    .unwrap()
}

/// Largest relative error of the analytic L_gen gradient for a 2-layer,
/// width-8 decoder with a knowledge bias on the item partition.
pub fn gen_loss_grad_error(seed: u64) -> f64 {
    let v = vocab(3, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut config = ModelConfig::for_vocab(&v);
    config.layers = 2;
    config.width = 8;
    config.heads = 2;
    config.ff_width = 12;
    config.max_position = 16;
    let lm = LanguageModel::new(config.clone(), &mut rng).unwrap();
    let flat: Vec<Mat> = lm.params.named().into_iter().map(|(_, m)| m.clone()).collect();
    let bias: Vec<f64> = (0..v.n_item_partition()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let w = |s: &str| v.token(s).unwrap();
    let item = v.item_token("101").unwrap();
    let context = vec![w("w0"), w("w2"), v.sep(), w("w1")];
    let response = vec![w("w1"), v.rec_start(), item, v.rec_end(), w("w0"), v.eos()];
    let specials = SpecialIds::of(&v);
    grad_check(&flat, 1e-5, |p| {
        let mut m = lm.clone();
        for (dst, src) in m.params.params_mut().into_iter().zip(p) {
            *dst = src.clone();
        }
        let mut g = Graph::new();
        let vars = LmVars::bind(&mut g, &m.params);
        let b = g.leaf(Mat::from_shape_vec((1, bias.len()), bias.clone()).unwrap());
        let (loss, _) = seqmodel::gen_loss_graph::<ChaCha8Rng>(
            &mut g, &vars, &m.config, specials, &context, &response, Some(b), true, None,
        )?;
        let mut grads = g.backward(loss);
        let out = vars.all.iter().map(|&v| grads.take(v).unwrap_or_else(|| Mat::zeros(g.value(v).dim()))).collect();
        Ok((g.scalar_value(loss), out))
    })
    .unwrap()
}

/// Counts of how often each value occurs.
pub fn histogram<T: Hash + Eq + Clone>(xs: &[T]) -> HashMap<T, usize> {
    let mut m = HashMap::new();
    for x in xs {
        *m.entry(x.clone()).or_insert(0) += 1;
    }
    m
}

#[derive(Debug, Default)]
pub struct FuzzOutcome {
    pub decodes: usize,
    pub automaton_violations: usize,
    pub errors: usize,
    /// Steps where a disallowed token had non-zero probability.
    pub leaked_steps: usize,
    /// Largest |Σ allowed p − 1| seen.
    pub max_mass_error: f64,
}

fn check_step(lp: &[f64], pointer: bool, v: &Vocabulary, out: &mut FuzzOutcome) {
    let allowed = if pointer { v.item_range() } else { v.general_range() };
    let mut mass = 0.0;
    let mut leaked = false;
    for (i, l) in lp.iter().enumerate() {
        let p = l.exp();
        if allowed.contains(&i) {
            mass += p;
        } else if p != 0.0 {
            leaked = true;
        }
    }
    out.leaked_steps += leaked as usize;
    out.max_mass_error = out.max_mass_error.max((mass - 1.0).abs());
}

/// Runs `n` constrained decodes (alternating greedy and beam) over random
/// vocabularies, scorers and biases; every step distribution on the decoded
/// path is checked along with the emitted sequence.
pub fn fuzz_decodes(n: usize, seed: u64) -> FuzzOutcome {
    use recindial::vpdecode::{advance, beam_generate, greedy_generate, step_log_probs, GenerationState};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = FuzzOutcome::default();
    for i in 0..n {
        let v = vocab(rng.gen_range(1..6), rng.gen_range(1..6));
        let scorer = RandomScorer { vocab_size: v.len(), seed: rng.gen() };
        let bias: Vec<f64> = (0..v.n_item_partition())
            .map(|_| if rng.gen_bool(0.1) { rng.gen_range(-500.0..500.0) } else { rng.gen_range(-3.0..3.0) })
            .collect();
        let n_max = rng.gen_range(1..10);
        let prefix: Vec<TokenId> = (0..rng.gen_range(1..4)).map(|_| rng.gen_range(0..v.len() as TokenId)).collect();
        let tokens = if i % 2 == 0 {
            greedy_generate(&prefix, &scorer, &bias, &v, n_max, true).map(|(s, _)| vec![s.emitted])
        } else {
            let width = rng.gen_range(1..5);
            beam_generate(&prefix, &scorer, &bias, &v, width, n_max, rng.gen_range(0.0..1.5), true)
                .map(|hs| hs.into_iter().map(|h| h.state.emitted).collect())
        };
        out.decodes += 1;
        let Ok(seqs) = tokens else {
            out.errors += 1;
            continue;
        };
        for seq in seqs {
            out.automaton_violations += automaton_violations(&seq, &v);
            if seq.len() > n_max {
                out.automaton_violations += 1;
            }
            let mut state = GenerationState::new(n_max);
            for &t in &seq {
                let mut full = prefix.clone();
                full.extend_from_slice(&state.emitted);
                let lp = step_log_probs(&scorer.score(&full).unwrap(), &bias, state.pointer, &v, true);
                check_step(&lp, state.pointer, &v, &mut out);
                match advance(&state, t, &v) {
                    Ok(s) => state = s,
                    Err(_) => {
                        out.automaton_violations += 1;
                        break;
                    }
                }
            }
        }
    }
    out
}

/// Emits `script` then `[EOS]`, whatever the context.
pub struct ScriptScorer {
    pub vocab_size: usize,
    pub prefix_len: usize,
    pub script: Vec<TokenId>,
    pub eos: TokenId,
}

impl LogitScorer for ScriptScorer {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn score(&self, prefix: &[TokenId]) -> Result<Vec<f64>> {
        let step = prefix.len() - self.prefix_len;
        let mut z = vec![0.0; self.vocab_size];
        z[self.script.get(step).copied().unwrap_or(self.eos) as usize] = 30.0;
        Ok(z)
    }
}

#[derive(Debug)]
pub struct GapOutcome {
    /// Position of the gold item's entity in the KG-side ranking.
    pub module_rank: usize,
    /// Items the decoded response actually carried.
    pub response_items: usize,
    pub recall: Vec<(usize, f64)>,
}

/// A KG side that ranks the gold item's entity first, paired with a decoder
/// whose response never opens an item slot. Scored end to end.
pub fn module_vs_system_gap() -> GapOutcome {
    use recindial::evalsuite::{recall_at_k, EvalInstance};
    use recindial::vpdecode::{beam_generate, RecommendationResult};

    let v = vocab(3, 3);
    let kg = KnowledgeGraph::from_string_triples([("item/100", "genre", "genre/x")], ["item/101", "item/102"], false).unwrap();
    let gold_entity = kg.entity("item/100").unwrap();
    let seen = kg.entity("genre/x").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut p = KgParams::init(&kg, KgDims { entity_dim: 2, attention_dim: 2, layers: 1 }, v.n_item_partition(), &mut rng).unwrap();
    for layer in &mut p.layers {
        layer.self_loop = Array2::eye(2);
        for w in &mut layer.relation {
            w.fill(0.0);
        }
    }
    p.base.fill(0.0);
    p.base[[gold_entity, 0]] = 5.0;
    p.base[[seen, 0]] = 0.9;
    p.base[[seen, 1]] = 0.1;
    p.bias_map[[gold_entity, 1]] = 4.0; // gold entity → item token 100

    let h = kgraph::rgcn_forward(&kg, &p).unwrap();
    let ranking = kgraph::rank_entities(&[seen], &h, &p).unwrap();
    let module_rank = ranking.iter().position(|&e| e == gold_entity).unwrap();
    let bias = kgraph::knowledge_bias(&[seen], &h, &p).unwrap();

    let w = |s: &str| v.token(s).unwrap();
    let prefix = vec![v.sep(), w("w0"), v.sep()];
    let scorer = ScriptScorer { vocab_size: v.len(), prefix_len: prefix.len(), script: vec![w("w1"), w("w2")], eos: v.eos() };
    let best = beam_generate(&prefix, &scorer, &bias, &v, 4, 10, 1.0, true).unwrap().remove(0);
    let result = RecommendationResult::from_state(best.state, best.log_prob, &v, 50);
    let instance = EvalInstance {
        pair_id: "fixture:2".into(),
        turn_index: 2,
        gold_items: vec!["100".into()],
        items: result.items.iter().map(|(i, _)| i.clone()).collect(),
        generated: result.response_tokens.iter().map(|&t| v.token_str(t).to_string()).collect(),
        reference: vec![],
    };
    let recall = [1, 10, 50].iter().map(|&k| (k, recall_at_k(std::slice::from_ref(&instance), k).unwrap())).collect();
    GapOutcome { module_rank, response_items: result.items.len(), recall }
}

/// Synthetic dataset with default generator settings.
pub fn synthetic_dataset(dialogues: usize, seed: u64) -> recindial::Dataset {
    use recindial::pipeline::{build_dataset, PreprocessConfig};
    use recindial::synth::{generate, SynthConfig};
    let c = generate(&SynthConfig { dialogues, seed, ..SynthConfig::default() }).unwrap();
    let names = c.item_names();
    build_dataset(c.dialogues, names, c.triples, c.link_map, &PreprocessConfig::default()).unwrap()
}

/// A briefly trained toy recommender over a synthetic dataset.
pub fn toy_recommender(dialogues: usize, epochs: usize) -> (recindial::Dataset, recindial::Recommender) {
    use recindial::pipeline::{train_on, ExperimentConfig};
    let data = synthetic_dataset(dialogues, 0);
    let mut config = ExperimentConfig::toy();
    config.train.epochs = epochs;
    let out = train_on(&data, &config).unwrap();
    let rec = recindial::Recommender::from_checkpoint(out.checkpoint, &data, config.kg.add_inverse).unwrap();
    (data, rec)
}
