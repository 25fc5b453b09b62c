//! Decoder-only self-attention language model over the partitioned
//! vocabulary, with the masked, knowledge-biased generation loss.

use std::ops::Range;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mat, Var};
use crate::corpus::{ContextResponsePair, TokenId, Vocabulary};
use crate::error::{Error, Result};
use crate::params::{normal, xavier, NamedParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub ff_width: usize,
    pub max_position: usize,
    pub n_general: usize,
    pub n_item_partition: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale defaults for a given vocabulary.
    pub fn for_vocab(vocab: &Vocabulary) -> Self {
        ModelConfig {
            layers: 2,
            heads: 4,
            width: 128,
            ff_width: 512,
            max_position: 320,
            n_general: vocab.n_general(),
            n_item_partition: vocab.n_item_partition(),
            dropout: 0.0,
            seed: 0,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.n_general + self.n_item_partition
    }

    pub fn general_range(&self) -> Range<usize> {
        0..self.n_general
    }

    pub fn item_range(&self) -> Range<usize> {
        self.n_general..self.vocab_size()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.layers == 0 || self.heads == 0 || self.width == 0 || self.ff_width == 0 {
            return bad("layers, heads, width and ff_width must be positive");
        }
        if self.width % self.heads != 0 {
            return bad("width must be divisible by heads");
        }
        if self.max_position == 0 {
            return bad("max_position must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.n_general == 0 || self.n_item_partition == 0 {
            return bad("both vocabulary partitions must be non-empty");
        }
        Ok(())
    }
}

/// Whether the vocabulary pointer is active. Without it, item tokens appear
/// bare in the data and every step softmaxes over the whole vocabulary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Variant {
    pub pointer: bool,
    pub knowledge: bool,
}

impl Default for Variant {
    fn default() -> Self {
        Variant { pointer: true, knowledge: true }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub ln1_gain: Mat,
    pub ln1_bias: Mat,
    pub query: Mat,
    pub key: Mat,
    pub value: Mat,
    pub out: Mat,
    pub ln2_gain: Mat,
    pub ln2_bias: Mat,
    pub ff_in: Mat,
    pub ff_in_bias: Mat,
    pub ff_out: Mat,
    pub ff_out_bias: Mat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LmParams {
    /// W_e, |V| × width; also the output projection.
    pub token_emb: Mat,
    pub pos_emb: Mat,
    pub blocks: Vec<BlockParams>,
    pub lnf_gain: Mat,
    pub lnf_bias: Mat,
}

impl NamedParams for LmParams {
    fn named(&self) -> Vec<(String, &Mat)> {
        let mut out = vec![("lm.token_emb".to_string(), &self.token_emb), ("lm.pos_emb".to_string(), &self.pos_emb)];
        for (l, b) in self.blocks.iter().enumerate() {
            for (name, m) in [
                ("ln1_gain", &b.ln1_gain),
                ("ln1_bias", &b.ln1_bias),
                ("query", &b.query),
                ("key", &b.key),
                ("value", &b.value),
                ("out", &b.out),
                ("ln2_gain", &b.ln2_gain),
                ("ln2_bias", &b.ln2_bias),
                ("ff_in", &b.ff_in),
                ("ff_in_bias", &b.ff_in_bias),
                ("ff_out", &b.ff_out),
                ("ff_out_bias", &b.ff_out_bias),
            ] {
                out.push((format!("lm.block{l}.{name}"), m));
            }
        }
        out.push(("lm.lnf_gain".into(), &self.lnf_gain));
        out.push(("lm.lnf_bias".into(), &self.lnf_bias));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Mat> {
        let mut out = vec![&mut self.token_emb, &mut self.pos_emb];
        for b in &mut self.blocks {
            out.extend([
                &mut b.ln1_gain,
                &mut b.ln1_bias,
                &mut b.query,
                &mut b.key,
                &mut b.value,
                &mut b.out,
                &mut b.ln2_gain,
                &mut b.ln2_bias,
                &mut b.ff_in,
                &mut b.ff_in_bias,
                &mut b.ff_out,
                &mut b.ff_out_bias,
            ]);
        }
        out.push(&mut self.lnf_gain);
        out.push(&mut self.lnf_bias);
        out
    }
}

impl LmParams {
    pub fn init<R: Rng>(config: &ModelConfig, rng: &mut R) -> Self {
        let w = config.width;
        let emb_std = 1.0 / (w as f64).sqrt();
        let ones = || Mat::ones((1, w));
        let zeros = |n| Mat::zeros((1, n));
        let blocks = (0..config.layers)
            .map(|_| BlockParams {
                ln1_gain: ones(),
                ln1_bias: zeros(w),
                query: xavier(w, w, rng),
                key: xavier(w, w, rng),
                value: xavier(w, w, rng),
                out: xavier(w, w, rng),
                ln2_gain: ones(),
                ln2_bias: zeros(w),
                ff_in: xavier(w, config.ff_width, rng),
                ff_in_bias: zeros(config.ff_width),
                ff_out: xavier(config.ff_width, w, rng),
                ff_out_bias: zeros(w),
            })
            .collect();
        LmParams {
            token_emb: normal(config.vocab_size(), w, emb_std, rng),
            pos_emb: normal(config.max_position, w, 0.1 * emb_std, rng),
            blocks,
            lnf_gain: ones(),
            lnf_bias: zeros(w),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LanguageModel {
    pub config: ModelConfig,
    pub params: LmParams,
}

impl LanguageModel {
    pub fn new<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let params = LmParams::init(&config, rng);
        Ok(LanguageModel { config, params })
    }

    /// Overwrites general-token embedding rows from `word v1 … v_width` lines.
    /// Returns how many rows were seeded.
    pub fn seed_general_embeddings(&mut self, vocab: &Vocabulary, text: &str) -> Result<usize> {
        let mut seeded = 0;
        for (lineno, line) in text.lines().enumerate() {
            let mut parts = line.split_whitespace();
            let Some(word) = parts.next() else { continue };
            let values: Vec<f64> = parts
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse { path: "<embeddings>".into(), line: lineno + 1, message: format!("{e}") })?;
            if values.len() != self.config.width {
                return Err(Error::Parse {
                    path: "<embeddings>".into(),
                    line: lineno + 1,
                    message: format!("expected {} values, got {}", self.config.width, values.len()),
                });
            }
            if let Some(t) = vocab.token(word).filter(|&t| vocab.is_general(t)) {
                for (dst, v) in self.params.token_emb.row_mut(t as usize).iter_mut().zip(values) {
                    *dst = v;
                }
                seeded += 1;
            }
        }
        Ok(seeded)
    }
}

/// Graph leaves for every LM parameter, in `NamedParams` order.
pub struct LmVars {
    pub all: Vec<Var>,
}

impl LmVars {
    pub fn bind(g: &mut Graph, p: &LmParams) -> Self {
        LmVars { all: p.named().into_iter().map(|(_, m)| g.leaf(m.clone())).collect() }
    }

    fn token_emb(&self) -> Var {
        self.all[0]
    }

    fn pos_emb(&self) -> Var {
        self.all[1]
    }

    fn block(&self, l: usize) -> &[Var] {
        &self.all[2 + 12 * l..2 + 12 * (l + 1)]
    }

    fn final_norm(&self) -> (Var, Var) {
        let n = self.all.len();
        (self.all[n - 2], self.all[n - 1])
    }
}

const LN_EPS: f64 = 1e-5;

fn dropout<R: Rng>(g: &mut Graph, x: Var, p: f64, rng: Option<&mut R>) -> Var {
    match rng {
        Some(rng) if p > 0.0 => {
            let keep = 1.0 / (1.0 - p);
            let mask = Mat::from_shape_fn(g.value(x).dim(), |_| if rng.gen::<f64>() < p { 0.0 } else { keep });
            g.mul_const(x, Arc::new(mask))
        }
        _ => x,
    }
}

/// Final hidden states (after the last layer norm) for `tokens`.
pub fn hidden_graph<R: Rng>(
    g: &mut Graph,
    vars: &LmVars,
    config: &ModelConfig,
    tokens: &[TokenId],
    mut rng: Option<&mut R>,
) -> Result<Var> {
    let n = tokens.len();
    if n == 0 {
        return Err(Error::Empty("token sequence".into()));
    }
    if n > config.max_position {
        return Err(Error::PrefixTooLong { len: n, max: config.max_position });
    }
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= config.vocab_size()) {
        return Err(Error::Shape(format!("token {t} outside vocabulary of {}", config.vocab_size())));
    }
    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let positions: Vec<usize> = (0..n).collect();
    let tok = g.gather(vars.token_emb(), &ids);
    let pos = g.gather(vars.pos_emb(), &positions);
    let mut x = g.add(tok, pos);
    let head_dim = config.width / config.heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    for l in 0..config.layers {
        let b = vars.block(l);
        let (ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, ff1, ff1_b, ff2, ff2_b) =
            (b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7], b[8], b[9], b[10], b[11]);
        let h = g.layer_norm(x, ln1_g, ln1_b, LN_EPS);
        let q = g.matmul(h, wq);
        let k = g.matmul(h, wk);
        let v = g.matmul(h, wv);
        let mut heads = Vec::with_capacity(config.heads);
        for hd in 0..config.heads {
            let cols = hd * head_dim..(hd + 1) * head_dim;
            let qh = g.slice_cols(q, cols.clone());
            let kh = g.slice_cols(k, cols.clone());
            let vh = g.slice_cols(v, cols);
            let scores = g.matmul_t(qh, kh);
            let scores = g.scale(scores, scale);
            let probs = g.causal_softmax(scores);
            heads.push(g.matmul(probs, vh));
        }
        let attn = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads) };
        let attn = g.matmul(attn, wo);
        let attn = dropout(g, attn, config.dropout, rng.as_deref_mut());
        x = g.add(x, attn);

        let h = g.layer_norm(x, ln2_g, ln2_b, LN_EPS);
        let f = g.matmul(h, ff1);
        let f = g.add_row(f, ff1_b);
        let f = g.gelu(f);
        let f = g.matmul(f, ff2);
        let f = g.add_row(f, ff2_b);
        let f = dropout(g, f, config.dropout, rng.as_deref_mut());
        x = g.add(x, f);
    }
    let (gf, bf) = vars.final_norm();
    Ok(g.layer_norm(x, gf, bf, LN_EPS))
}

/// Tied output projection `h W_eᵀ` for the selected rows of `hidden`.
pub fn project_rows(g: &mut Graph, vars: &LmVars, hidden: Var, rows: &[usize]) -> Var {
    let h = if rows.len() == g.value(hidden).nrows() && rows.iter().enumerate().all(|(i, &r)| i == r) {
        hidden
    } else {
        g.gather(hidden, rows)
    };
    g.matmul_t(h, vars.token_emb())
}

/// Logits at every position of `tokens` (row i depends only on tokens ≤ i).
pub fn forward_logits(model: &LanguageModel, tokens: &[TokenId]) -> Result<Mat> {
    let mut g = Graph::new();
    let vars = LmVars::bind(&mut g, &model.params);
    let h = hidden_graph::<rand::rngs::ThreadRng>(&mut g, &vars, &model.config, tokens, None)?;
    let rows: Vec<usize> = (0..tokens.len()).collect();
    let logits = project_rows(&mut g, &vars, h, &rows);
    Ok(g.value(logits).clone())
}

/// Produces next-token logits over the full vocabulary (pre-mask, pre-bias).
pub trait LogitScorer {
    fn vocab_size(&self) -> usize;
    fn score(&self, prefix: &[TokenId]) -> Result<Vec<f64>>;
}

impl LogitScorer for LanguageModel {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size()
    }

    /// Prefixes longer than `max_position` keep their most recent tokens.
    fn score(&self, prefix: &[TokenId]) -> Result<Vec<f64>> {
        let start = prefix.len().saturating_sub(self.config.max_position);
        let prefix = &prefix[start..];
        let mut g = Graph::new();
        let vars = LmVars::bind(&mut g, &self.params);
        let h = hidden_graph::<rand::rngs::ThreadRng>(&mut g, &vars, &self.config, prefix, None)?;
        let logits = project_rows(&mut g, &vars, h, &[prefix.len() - 1]);
        Ok(g.value(logits).iter().copied().collect())
    }
}

/// Model input for a context: a leading `[SEP]` followed by the context.
pub fn decoder_prefix(context: &[TokenId], sep: TokenId) -> Vec<TokenId> {
    let mut out = Vec::with_capacity(context.len() + 1);
    out.push(sep);
    out.extend_from_slice(context);
    out
}

/// Per-token allowed column ranges for a gold response under the vocabulary
/// pointer: `I_vp` flips to 1 after `[RecS]` and back to 0 after `[RecE]`.
pub fn pointer_ranges(response: &[TokenId], config: &ModelConfig, rec_start: TokenId, rec_end: TokenId) -> Result<Vec<Range<usize>>> {
    let mut inside = false;
    let mut out = Vec::with_capacity(response.len());
    for &t in response {
        out.push(if inside { config.item_range() } else { config.general_range() });
        if t == rec_start {
            if inside {
                return Err(Error::UnbalancedMarkers("nested [RecS]".into()));
            }
            inside = true;
        } else if t == rec_end {
            if !inside {
                return Err(Error::UnbalancedMarkers("[RecE] without [RecS]".into()));
            }
            inside = false;
        }
    }
    if inside {
        return Err(Error::UnbalancedMarkers("unclosed [RecS]".into()));
    }
    Ok(out)
}

/// Response tokens up to and including the first `[EOS]`.
pub fn trim_response(response: &[TokenId], eos: TokenId) -> &[TokenId] {
    match response.iter().position(|&t| t == eos) {
        Some(i) => &response[..=i],
        None => response,
    }
}

/// Token ids needed for the generation loss.
#[derive(Clone, Copy, Debug)]
pub struct SpecialIds {
    pub sep: TokenId,
    pub eos: TokenId,
    pub rec_start: TokenId,
    pub rec_end: TokenId,
}

impl SpecialIds {
    pub fn of(vocab: &Vocabulary) -> Self {
        SpecialIds { sep: vocab.sep(), eos: vocab.eos(), rec_start: vocab.rec_start(), rec_end: vocab.rec_end() }
    }
}

/// Teacher-forced summed NLL of the response. `bias`, a 1 × |V_R| node, is
/// added to the item-partition logits at every step. Returns the loss node
/// and the number of scored tokens.
pub fn gen_loss_graph<R: Rng>(
    g: &mut Graph,
    vars: &LmVars,
    config: &ModelConfig,
    specials: SpecialIds,
    context: &[TokenId],
    response: &[TokenId],
    bias: Option<Var>,
    pointer: bool,
    rng: Option<&mut R>,
) -> Result<(Var, usize)> {
    let response = trim_response(response, specials.eos);
    if response.is_empty() {
        return Err(Error::Empty("response".into()));
    }
    let ranges = if pointer {
        pointer_ranges(response, config, specials.rec_start, specials.rec_end)?
    } else {
        vec![0..config.vocab_size(); response.len()]
    };
    // [SEP] + context + response minus its last token must fit max_position
    if response.len() > config.max_position {
        return Err(Error::PrefixTooLong { len: response.len(), max: config.max_position });
    }
    let room = config.max_position - response.len();
    let context = &context[context.len().saturating_sub(room)..];
    let mut input = decoder_prefix(context, specials.sep);
    input.extend_from_slice(&response[..response.len() - 1]);
    let hidden = hidden_graph(g, vars, config, &input, rng)?;
    let rows: Vec<usize> = (context.len()..context.len() + response.len()).collect();
    let mut logits = project_rows(g, vars, hidden, &rows);
    if let Some(b) = bias {
        let padded = g.pad_cols(b, config.n_general, config.vocab_size());
        logits = g.add_row(logits, padded);
    }
    let targets: Vec<usize> = response.iter().map(|&t| t as usize).collect();
    let loss = g.masked_xent(logits, ranges, targets)?;
    Ok((loss, response.len()))
}

/// Summed generation loss of one pair under a fixed bias vector.
pub fn gen_loss(model: &LanguageModel, vocab: &Vocabulary, pair: &ContextResponsePair, bias: &[f64], pointer: bool) -> Result<f64> {
    gen_loss_with_count(model, SpecialIds::of(vocab), &pair.context, &pair.response, bias, pointer).map(|(l, _)| l)
}

pub fn gen_loss_with_count(
    model: &LanguageModel,
    specials: SpecialIds,
    context: &[TokenId],
    response: &[TokenId],
    bias: &[f64],
    pointer: bool,
) -> Result<(f64, usize)> {
    if bias.len() != model.config.n_item_partition {
        return Err(Error::Shape(format!("bias has {} entries for {} item tokens", bias.len(), model.config.n_item_partition)));
    }
    let mut g = Graph::new();
    let vars = LmVars::bind(&mut g, &model.params);
    let b = if bias.iter().all(|&v| v == 0.0) {
        None
    } else {
        Some(g.leaf(Mat::from_shape_vec((1, bias.len()), bias.to_vec()).expect("row shape")))
    };
    let (loss, n) =
        gen_loss_graph::<rand::rngs::ThreadRng>(&mut g, &vars, &model.config, specials, context, response, b, pointer, None)?;
    Ok((g.scalar_value(loss), n))
}

/// exp(total masked NLL / total response tokens); `bias_of` supplies b_u per pair.
pub fn perplexity(
    model: &LanguageModel,
    vocab: &Vocabulary,
    pairs: &[ContextResponsePair],
    pointer: bool,
    mut bias_of: impl FnMut(&ContextResponsePair) -> Result<Vec<f64>>,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Empty("pair set for perplexity".into()));
    }
    let specials = SpecialIds::of(vocab);
    let (mut nll, mut count) = (0.0, 0usize);
    for p in pairs {
        let bias = bias_of(p)?;
        let (l, n) = gen_loss_with_count(model, specials, &p.context, &p.response, &bias, pointer)?;
        nll += l;
        count += n;
    }
    Ok((nll / count as f64).exp())
}
