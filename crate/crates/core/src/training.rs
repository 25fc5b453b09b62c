//! Joint optimization of the generation and knowledge losses.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mat, Var};
use crate::corpus::{ContextResponsePair, LinkMap, TokenId, Vocabulary};
use crate::error::{Error, Result};
use crate::kgraph::{self, EntityIdx, KgParams, KgVars, KnowledgeGraph};
use crate::params::NamedParams;
use crate::seqmodel::{self, LanguageModel, LmVars, SpecialIds, Variant};

/// Language model plus (optionally) the knowledge-graph side.
#[derive(Clone, Debug, PartialEq)]
pub struct RecModel {
    pub lm: LanguageModel,
    pub kg: Option<KgParams>,
    pub variant: Variant,
}

impl NamedParams for RecModel {
    fn named(&self) -> Vec<(String, &Mat)> {
        let mut out = self.lm.params.named();
        if let Some(kg) = &self.kg {
            out.extend(kg.named());
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Mat> {
        let mut out = self.lm.params.params_mut();
        if let Some(kg) = &mut self.kg {
            out.extend(kg.params_mut());
        }
        out
    }
}

impl RecModel {
    pub fn new(lm: LanguageModel, kg: Option<KgParams>, variant: Variant) -> Result<Self> {
        if variant.knowledge && kg.is_none() {
            return Err(Error::Config("knowledge variant needs KG parameters".into()));
        }
        if let Some(p) = &kg {
            if p.bias_map.ncols() != lm.config.n_item_partition {
                return Err(Error::Shape(format!(
                    "bias map has {} columns for {} item tokens",
                    p.bias_map.ncols(),
                    lm.config.n_item_partition
                )));
            }
        }
        Ok(RecModel { lm, kg: if variant.knowledge { kg } else { None }, variant })
    }

    /// R-GCN output H, or `None` for the knowledge-free variant.
    pub fn entity_embeddings(&self, kg: &KnowledgeGraph) -> Result<Option<Mat>> {
        match &self.kg {
            Some(p) => Ok(Some(kgraph::rgcn_forward(kg, p)?)),
            None => Ok(None),
        }
    }

    /// b_u for the given entity set under precomputed H.
    pub fn user_bias(&self, h: Option<&Mat>, entities: &[EntityIdx]) -> Result<Vec<f64>> {
        match (&self.kg, h) {
            (Some(p), Some(h)) => kgraph::knowledge_bias(entities, h, p),
            _ => Ok(vec![0.0; self.lm.config.n_item_partition]),
        }
    }
}

/// A pair prepared for a model variant: entity ids resolved, markers removed
/// when the pointer is off.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub pair: ContextResponsePair,
    pub entities: Vec<EntityIdx>,
    /// Entities of gold items; one L_kg term each when `entities` is non-empty.
    pub gold_entities: Vec<EntityIdx>,
}

pub fn strip_markers(tokens: &[TokenId], vocab: &Vocabulary) -> Vec<TokenId> {
    tokens.iter().copied().filter(|&t| t != vocab.rec_start() && t != vocab.rec_end()).collect()
}

pub fn prepare_examples(
    pairs: &[ContextResponsePair],
    kg: Option<&KnowledgeGraph>,
    link_map: &LinkMap,
    vocab: &Vocabulary,
    pointer: bool,
) -> Vec<Example> {
    pairs
        .iter()
        .map(|p| {
            let mut pair = p.clone();
            if !pointer {
                pair.context = strip_markers(&p.context, vocab);
                pair.response = strip_markers(&p.response, vocab);
            }
            let (entities, gold_entities) = match kg {
                Some(kg) => {
                    let entities = kg.resolve(&p.entity_set);
                    let mut gold = Vec::new();
                    if !entities.is_empty() {
                        for item in &p.gold_items {
                            if let Some(e) = link_map.item_entity(item).and_then(|id| kg.entity(id)) {
                                gold.push(e);
                            }
                        }
                    }
                    (entities, gold)
                }
                None => (Vec::new(), Vec::new()),
            };
            Example { pair, entities, gold_entities }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub gen: f64,
    pub kg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { gen: 1.0, kg: 1.0 }
    }
}

/// Summed losses over a set of examples.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub joint: f64,
    pub gen: f64,
    pub kg: f64,
    pub gen_tokens: usize,
    pub kg_terms: usize,
}

struct Bound {
    lm: LmVars,
    kg: Option<KgVars>,
}

impl Bound {
    fn new(g: &mut Graph, model: &RecModel) -> Self {
        let lm = LmVars::bind(g, &model.lm.params);
        let kg = model.kg.as_ref().map(|p| KgVars::bind(g, p));
        Bound { lm, kg }
    }

    fn all(&self) -> Vec<Var> {
        let mut out = self.lm.all.clone();
        if let Some(kg) = &self.kg {
            out.extend(kg.all());
        }
        out
    }
}

/// Builds the weighted joint loss of `examples` on `g`. Returns the loss node
/// (`None` when there are no terms) and the unweighted breakdown.
fn loss_graph<R: Rng>(
    g: &mut Graph,
    bound: &Bound,
    model: &RecModel,
    kg: Option<&KnowledgeGraph>,
    examples: &[&Example],
    specials: SpecialIds,
    weights: LossWeights,
    mut rng: Option<&mut R>,
) -> Result<(Option<Var>, LossBreakdown)> {
    let mut terms = Vec::new();
    let mut parts = LossBreakdown::default();
    let kg_side = match (&bound.kg, kg) {
        (Some(vars), Some(kg)) if examples.iter().any(|e| !e.entities.is_empty()) => {
            Some((vars, kgraph::rgcn_graph(g, kg, vars)))
        }
        _ => None,
    };
    for ex in examples {
        let mut bias = None;
        if let (Some((vars, h)), false) = (&kg_side, ex.entities.is_empty()) {
            let (_, t_u) = kgraph::attend_graph(g, *h, &ex.entities, vars);
            bias = Some(kgraph::bias_graph(g, t_u, *h, vars));
            for &gold in &ex.gold_entities {
                let l = kgraph::kg_loss_graph(g, t_u, *h, gold)?;
                parts.kg += g.scalar_value(l);
                parts.kg_terms += 1;
                if weights.kg != 0.0 {
                    terms.push(g.scale(l, weights.kg));
                }
            }
        }
        let (l, n) = seqmodel::gen_loss_graph(
            g,
            &bound.lm,
            &model.lm.config,
            specials,
            &ex.pair.context,
            &ex.pair.response,
            bias,
            model.variant.pointer,
            rng.as_deref_mut(),
        )?;
        parts.gen += g.scalar_value(l);
        parts.gen_tokens += n;
        if weights.gen != 0.0 {
            terms.push(g.scale(l, weights.gen));
        }
    }
    parts.joint = weights.gen * parts.gen + weights.kg * parts.kg;
    let total = match terms.len() {
        0 => None,
        1 => Some(terms[0]),
        _ => Some(g.add_all(&terms)),
    };
    Ok((total, parts))
}

/// Weighted joint loss and its gradient for every parameter of `model`, in
/// `NamedParams` order.
pub fn loss_and_grads(
    model: &RecModel,
    kg: Option<&KnowledgeGraph>,
    vocab: &Vocabulary,
    examples: &[Example],
    weights: LossWeights,
) -> Result<(LossBreakdown, Vec<Mat>)> {
    let refs: Vec<&Example> = examples.iter().collect();
    batch_grads::<ChaCha8Rng>(model, kg, SpecialIds::of(vocab), &refs, weights, None)
}

fn batch_grads<R: Rng>(
    model: &RecModel,
    kg: Option<&KnowledgeGraph>,
    specials: SpecialIds,
    examples: &[&Example],
    weights: LossWeights,
    rng: Option<&mut R>,
) -> Result<(LossBreakdown, Vec<Mat>)> {
    let mut g = Graph::new();
    let bound = Bound::new(&mut g, model);
    let (total, parts) = loss_graph(&mut g, &bound, model, kg, examples, specials, weights, rng)?;
    let vars = bound.all();
    let grads = match total {
        Some(root) => {
            let mut grads = g.backward(root);
            vars.iter().map(|&v| grads.take(v).unwrap_or_else(|| Mat::zeros(g.value(v).dim()))).collect()
        }
        None => vars.iter().map(|&v| Mat::zeros(g.value(v).dim())).collect(),
    };
    Ok((parts, grads))
}

/// Joint loss value only.
pub fn joint_loss(
    model: &RecModel,
    kg: Option<&KnowledgeGraph>,
    vocab: &Vocabulary,
    examples: &[Example],
    weights: LossWeights,
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let bound = Bound::new(&mut g, model);
    let refs: Vec<&Example> = examples.iter().collect();
    let (_, parts) = loss_graph::<ChaCha8Rng>(&mut g, &bound, model, kg, &refs, SpecialIds::of(vocab), weights, None)?;
    Ok(parts)
}

/// Generation and knowledge losses computed independently through the
/// inference-time path (cached H, plain bias), plus perplexity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalLosses {
    pub gen: f64,
    pub kg: f64,
    pub gen_tokens: usize,
    pub kg_terms: usize,
    pub ppl: f64,
}

pub fn evaluate_losses(model: &RecModel, kg: Option<&KnowledgeGraph>, vocab: &Vocabulary, examples: &[Example]) -> Result<EvalLosses> {
    if examples.is_empty() {
        return Err(Error::Empty("evaluation examples".into()));
    }
    let h = match kg {
        Some(kg) => model.entity_embeddings(kg)?,
        None => None,
    };
    let specials = SpecialIds::of(vocab);
    let mut out = EvalLosses::default();
    for ex in examples {
        let bias = model.user_bias(h.as_ref(), &ex.entities)?;
        let (l, n) =
            seqmodel::gen_loss_with_count(&model.lm, specials, &ex.pair.context, &ex.pair.response, &bias, model.variant.pointer)?;
        out.gen += l;
        out.gen_tokens += n;
        if let (Some(p), Some(h)) = (&model.kg, &h) {
            if !ex.entities.is_empty() {
                for &gold in &ex.gold_entities {
                    out.kg += kgraph::kg_loss(&ex.entities, h, p, gold)?;
                    out.kg_terms += 1;
                }
            }
        }
    }
    out.ppl = (out.gen / out.gen_tokens as f64).exp();
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub warmup_steps: usize,
    pub epochs: usize,
    pub seed: u64,
    pub gen_weight: f64,
    pub kg_weight: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 8,
            grad_accum: 1,
            warmup_steps: 100,
            epochs: 10,
            seed: 0,
            gen_weight: 1.0,
            kg_weight: 1.0,
            clip_norm: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 || self.grad_accum == 0 || self.epochs == 0 {
            return bad("batch_size, grad_accum and epochs must be positive");
        }
        if !(self.gen_weight >= 0.0 && self.kg_weight >= 0.0) || self.gen_weight + self.kg_weight == 0.0 {
            return bad("loss weights must be non-negative and not both zero");
        }
        if !(self.clip_norm >= 0.0) {
            return bad("clip_norm must be non-negative");
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights { gen: self.gen_weight, kg: self.kg_weight }
    }

    /// Learning rate after `step` completed updates.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 {
            self.learning_rate
        } else {
            self.learning_rate * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Mat>,
    v: Vec<Mat>,
    t: i32,
}

impl Adam {
    pub fn new(shapes: &[(usize, usize)]) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: shapes.iter().map(|&s| Mat::zeros(s)).collect(),
            v: shapes.iter().map(|&s| Mat::zeros(s)).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: Vec<&mut Mat>, grads: &[Mat], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            });
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Per-token generation NLL.
    pub train_gen: f64,
    /// Mean knowledge loss per term (0 when there are none).
    pub train_kg: f64,
    pub train_ppl: f64,
    pub valid_gen: f64,
    pub valid_kg: f64,
    pub valid_ppl: f64,
    pub steps: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    /// Epoch (0-based) with the lowest valid perplexity; its parameters are
    /// the ones returned.
    pub best_epoch: usize,
}

fn mean(total: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

/// Trains `model` and returns the parameters of the best epoch by valid
/// perplexity. With no validation examples the training set is used.
pub fn train(
    mut model: RecModel,
    kg: Option<&KnowledgeGraph>,
    vocab: &Vocabulary,
    train_set: &[Example],
    valid_set: &[Example],
    config: &TrainConfig,
) -> Result<(RecModel, TrainReport)> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty("training examples".into()));
    }
    let valid_set = if valid_set.is_empty() { train_set } else { valid_set };
    let specials = SpecialIds::of(vocab);
    let weights = config.weights();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let shapes: Vec<(usize, usize)> = model.named().iter().map(|(_, m)| m.dim()).collect();
    let mut adam = Adam::new(&shapes);
    let mut step = 0usize;
    let mut report = TrainReport::default();
    let mut best: Option<(f64, RecModel)> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..config.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let batches: Vec<&[usize]> = order.chunks(config.batch_size).collect();
        let mut acc: Option<Vec<Mat>> = None;
        let mut acc_count = 0usize;
        let mut totals = LossBreakdown::default();
        for (b, batch) in batches.iter().enumerate() {
            let examples: Vec<&Example> = batch.iter().map(|&i| &train_set[i]).collect();
            let (parts, grads) = match batch_grads(&model, kg, specials, &examples, weights, Some(&mut rng)) {
                Err(Error::NonFinite(what)) => {
                    return Err(Error::Diverged { epoch, step, message: format!("{what} on batch {b}") });
                }
                other => other?,
            };
            if !parts.joint.is_finite() || grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    message: format!("non-finite loss (gen {}, kg {}) on batch {b}", parts.gen, parts.kg),
                });
            }
            totals.gen += parts.gen;
            totals.kg += parts.kg;
            totals.gen_tokens += parts.gen_tokens;
            totals.kg_terms += parts.kg_terms;
            let scale = 1.0 / examples.len() as f64;
            match &mut acc {
                None => acc = Some(grads.into_iter().map(|g| g * scale).collect()),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(grads) {
                        a.scaled_add(scale, &g);
                    }
                }
            }
            acc_count += 1;
            if acc_count == config.grad_accum || b + 1 == batches.len() {
                let mut grads = acc.take().expect("accumulated gradients");
                for g in &mut grads {
                    *g /= acc_count as f64;
                }
                if config.clip_norm > 0.0 {
                    let norm = grads.iter().map(|g| g.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
                    if norm > config.clip_norm {
                        let s = config.clip_norm / norm;
                        grads.iter_mut().for_each(|g| *g *= s);
                    }
                }
                adam.step(model.params_mut(), &grads, config.lr_at(step));
                step += 1;
                acc_count = 0;
            }
        }
        let valid = evaluate_losses(&model, kg, vocab, valid_set)?;
        if !valid.ppl.is_finite() {
            return Err(Error::Diverged { epoch, step, message: "non-finite validation perplexity".into() });
        }
        let stats = EpochStats {
            epoch,
            train_gen: mean(totals.gen, totals.gen_tokens),
            train_kg: mean(totals.kg, totals.kg_terms),
            train_ppl: mean(totals.gen, totals.gen_tokens).exp(),
            valid_gen: mean(valid.gen, valid.gen_tokens),
            valid_kg: mean(valid.kg, valid.kg_terms),
            valid_ppl: valid.ppl,
            steps: step,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: train ppl {:.3} kg {:.3} | valid ppl {:.3} kg {:.3} ({:.1}s)",
            stats.train_ppl,
            stats.train_kg,
            stats.valid_ppl,
            stats.valid_kg,
            stats.seconds
        );
        if best.as_ref().is_none_or(|(ppl, _)| valid.ppl < *ppl) {
            best = Some((valid.ppl, model.clone()));
            report.best_epoch = epoch;
        }
        report.epochs.push(stats);
    }
    let (_, best_model) = best.expect("at least one epoch");
    Ok((best_model, report))
}

/// Largest elementwise relative error between `analytic` gradients and
/// central finite differences `(f(θ+eps) − f(θ−eps)) / 2eps`. The
/// denominator is `max(|analytic|, |numeric|, 1e-6)`.
pub fn grad_check(params: &[Mat], eps: f64, loss: impl Fn(&[Mat]) -> Result<(f64, Vec<Mat>)>) -> Result<f64> {
    let (_, analytic) = loss(params)?;
    if analytic.len() != params.len() {
        return Err(Error::Shape("gradient count differs from parameter count".into()));
    }
    let mut work: Vec<Mat> = params.to_vec();
    let mut worst = 0.0f64;
    for (p, grad) in analytic.iter().enumerate() {
        for idx in 0..work[p].len() {
            let (r, c) = (idx / work[p].ncols(), idx % work[p].ncols());
            let orig = work[p][[r, c]];
            work[p][[r, c]] = orig + eps;
            let (up, _) = loss(&work)?;
            work[p][[r, c]] = orig - eps;
            let (down, _) = loss(&work)?;
            work[p][[r, c]] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = grad[[r, c]];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::build_vocabulary;
    use crate::kgraph::KgDims;
    use crate::params::{assign, snapshot};
    use crate::seqmodel::ModelConfig;

    fn vocab() -> Vocabulary {
        build_vocabulary(&["m1".into(), "m2".into()], &["a".into(), "b".into()]).unwrap()
    }

    fn graph() -> KnowledgeGraph {
        KnowledgeGraph::from_string_triples(
            [("e_m1", "genre", "e_g"), ("e_m2", "genre", "e_g"), ("e_m1", "actor", "e_a")],
            [],
            false,
        )
        .unwrap()
    }

    fn model(v: &Vocabulary, kg: &KnowledgeGraph, seed: u64) -> RecModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut config = ModelConfig::for_vocab(v);
        config.width = 8;
        config.heads = 2;
        config.ff_width = 16;
        config.max_position = 32;
        let lm = LanguageModel::new(config, &mut rng).unwrap();
        let dims = KgDims { entity_dim: 4, attention_dim: 3, layers: 1 };
        let mut kp = KgParams::init(kg, dims, v.n_item_partition(), &mut rng).unwrap();
        kp.bias_map.mapv_inplace(|_| rng.gen_range(-0.5..0.5));
        RecModel::new(lm, Some(kp), Variant::default()).unwrap()
    }

    fn examples(v: &Vocabulary, kg: &KnowledgeGraph) -> Vec<Example> {
        let links = LinkMap::new([("m1".to_string(), "e_m1".to_string()), ("m2".to_string(), "e_m2".to_string())]);
        let (a, b) = (v.token("a").unwrap(), v.token("b").unwrap());
        let m1 = v.item_token("m1").unwrap();
        let pairs: Vec<ContextResponsePair> = (0..10)
            .map(|i| ContextResponsePair {
                pair_id: format!("d{i}:2"),
                dialogue_id: format!("d{i}"),
                turn_index: 2,
                context: vec![a, b, v.sep()],
                response: if i % 2 == 0 { vec![a, v.rec_start(), m1, v.rec_end(), v.eos()] } else { vec![b, a, v.eos()] },
                gold_items: if i % 2 == 0 { vec!["m1".into()] } else { vec![] },
                entity_set: if i % 3 == 0 { vec![] } else { vec!["e_g".into(), "e_a".into()] },
            })
            .collect();
        prepare_examples(&pairs, Some(kg), &links, v, true)
    }

    #[test]
    fn joint_loss_is_sum_of_separate_losses() {
        let v = vocab();
        let kg = graph();
        let m = model(&v, &kg, 3);
        let ex = examples(&v, &kg);
        let joint = joint_loss(&m, Some(&kg), &v, &ex, LossWeights::default()).unwrap();
        let sep = evaluate_losses(&m, Some(&kg), &v, &ex).unwrap();
        assert!(sep.kg_terms > 0);
        assert!((joint.joint - (sep.gen + sep.kg)).abs() < 1e-9);
        assert!((joint.gen - sep.gen).abs() < 1e-9);
        assert!((joint.kg - sep.kg).abs() < 1e-9);
    }

    #[test]
    fn zero_kg_weight_removes_kg_path_gradients() {
        let v = vocab();
        let kg = graph();
        let m = model(&v, &kg, 4);
        let ex = examples(&v, &kg);
        let (_, gen_only) = loss_and_grads(&m, Some(&kg), &v, &ex, LossWeights { gen: 1.0, kg: 0.0 }).unwrap();
        let (_, kg_only) = loss_and_grads(&m, Some(&kg), &v, &ex, LossWeights { gen: 0.0, kg: 1.0 }).unwrap();
        let (_, both) = loss_and_grads(&m, Some(&kg), &v, &ex, LossWeights::default()).unwrap();
        let names: Vec<String> = m.named().into_iter().map(|(n, _)| n).collect();
        // M_b is off the L_kg path; LM weights are off it too
        for (name, g) in names.iter().zip(&kg_only) {
            if name == "kg.bias_map" || name.starts_with("lm.") {
                assert!(g.iter().all(|&x| x == 0.0), "{name}");
            }
        }
        for ((a, b), c) in gen_only.iter().zip(&kg_only).zip(&both) {
            assert!(((a + b) - c).iter().all(|d| d.abs() < 1e-10));
        }
    }

    #[test]
    fn training_is_reproducible() {
        let v = vocab();
        let kg = graph();
        let ex = examples(&v, &kg);
        let config = TrainConfig { epochs: 1, batch_size: 3, seed: 7, warmup_steps: 2, ..TrainConfig::default() };
        let (m1, r1) = train(model(&v, &kg, 1), Some(&kg), &v, &ex, &[], &config).unwrap();
        let (m2, r2) = train(model(&v, &kg, 1), Some(&kg), &v, &ex, &[], &config).unwrap();
        assert_eq!(snapshot(&m1), snapshot(&m2));
        assert_eq!(r1.epochs[0].train_gen.to_bits(), r2.epochs[0].train_gen.to_bits());
        assert_eq!(r1.epochs[0].valid_ppl.to_bits(), r2.epochs[0].valid_ppl.to_bits());
    }

    #[test]
    fn training_lowers_loss_on_fixture() {
        let v = vocab();
        let kg = graph();
        let ex = examples(&v, &kg);
        let before = evaluate_losses(&model(&v, &kg, 2), Some(&kg), &v, &ex).unwrap();
        let config = TrainConfig { epochs: 20, batch_size: 5, learning_rate: 1e-2, warmup_steps: 1, ..TrainConfig::default() };
        let (m, report) = train(model(&v, &kg, 2), Some(&kg), &v, &ex, &[], &config).unwrap();
        let after = evaluate_losses(&m, Some(&kg), &v, &ex).unwrap();
        assert!(after.ppl < before.ppl * 0.7, "{} vs {}", after.ppl, before.ppl);
        assert!(after.kg < before.kg);
        assert_eq!(report.epochs.len(), 20);
        assert_eq!(report.epochs[report.best_epoch].valid_ppl, after.ppl);
    }

    #[test]
    fn divergence_is_reported() {
        let v = vocab();
        let kg = graph();
        let ex = examples(&v, &kg);
        let mut m = model(&v, &kg, 5);
        m.lm.params.token_emb[[4, 0]] = f64::NAN;
        let err = train(m, Some(&kg), &v, &ex, &[], &TrainConfig { epochs: 1, ..TrainConfig::default() }).unwrap_err();
        assert!(matches!(err, Error::Diverged { epoch: 0, step: 0, .. }), "{err}");
    }

    #[test]
    fn warmup_is_linear_then_flat() {
        let c = TrainConfig { learning_rate: 1.0, warmup_steps: 4, ..TrainConfig::default() };
        let lrs: Vec<f64> = (0..6).map(|s| c.lr_at(s)).collect();
        assert_eq!(lrs, vec![0.25, 0.5, 0.75, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut p = Mat::from_elem((1, 2), 1.0);
        let g = ndarray::array![[0.5, -2.0]];
        let mut adam = Adam::new(&[(1, 2)]);
        adam.step(vec![&mut p], &[g], 0.1);
        assert!((p[[0, 0]] - 0.9).abs() < 1e-6);
        assert!((p[[0, 1]] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let params = vec![Mat::from_elem((2, 2), 0.3)];
        let err = grad_check(&params, 1e-5, |p| Ok((4.0, vec![Mat::zeros(p[0].dim())]))).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn joint_gradient_passes_finite_differences() {
        let v = vocab();
        let kg = graph();
        let base = model(&v, &kg, 9);
        let ex = examples(&v, &kg)[..4].to_vec();
        let err = grad_check(&snapshot(&base), 1e-5, |p| {
            let mut m = base.clone();
            assign(&mut m, p);
            let (parts, grads) = loss_and_grads(&m, Some(&kg), &v, &ex, LossWeights::default())?;
            Ok((parts.joint, grads))
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn unmarked_examples_drop_markers() {
        let v = vocab();
        let kg = graph();
        let links = LinkMap::default();
        let m1 = v.item_token("m1").unwrap();
        let pair = ContextResponsePair {
            pair_id: "d:1".into(),
            dialogue_id: "d".into(),
            turn_index: 1,
            context: vec![v.rec_start(), m1, v.rec_end(), v.sep()],
            response: vec![v.rec_start(), m1, v.rec_end(), v.eos()],
            gold_items: vec!["m1".into()],
            entity_set: vec![],
        };
        let ex = prepare_examples(&[pair], Some(&kg), &links, &v, false);
        assert_eq!(ex[0].pair.response, vec![m1, v.eos()]);
        assert_eq!(ex[0].pair.context, vec![m1, v.sep()]);
        assert!(ex[0].gold_entities.is_empty());
    }
}
