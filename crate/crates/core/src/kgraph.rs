//! Item-oriented knowledge graph: relational graph convolution, entity
//! self-attention over a user's context entities, the knowledge-aware item
//! bias, and the entity-prediction loss.

use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;

use crate::autodiff::{Csr, Graph, Mat, Var};
use crate::error::{Error, Result};
use crate::params::{xavier, NamedParams};

pub type EntityIdx = usize;

#[derive(Clone, Debug)]
pub struct KnowledgeGraph {
    entity_ids: Vec<String>,
    entity_index: HashMap<String, EntityIdx>,
    relation_names: Vec<String>,
    triples: Vec<(EntityIdx, usize, EntityIdx)>,
    /// `in_neighbors[r][e]` = E_e^r, sorted.
    in_neighbors: Vec<Vec<Vec<EntityIdx>>>,
    /// Row-normalized in-neighbor matrices, one per relation.
    adjacency: Vec<Arc<Csr>>,
}

impl KnowledgeGraph {
    /// Builds a graph over dense ids. A triple `(e1, r, e2)` makes `e1` an
    /// in-neighbor of `e2` under `r`. Duplicate triples are collapsed.
    pub fn new(
        entity_ids: Vec<String>,
        relation_names: Vec<String>,
        triples: impl IntoIterator<Item = (EntityIdx, usize, EntityIdx)>,
    ) -> Result<Self> {
        let n = entity_ids.len();
        let n_rel = relation_names.len();
        let set: BTreeSet<(EntityIdx, usize, EntityIdx)> = triples.into_iter().collect();
        let mut in_neighbors = vec![vec![Vec::new(); n]; n_rel];
        for &(h, r, t) in &set {
            if h >= n || t >= n {
                return Err(Error::Shape(format!("triple ({h}, {r}, {t}) references an entity outside 0..{n}")));
            }
            if r >= n_rel {
                return Err(Error::Shape(format!("triple ({h}, {r}, {t}) references relation outside 0..{n_rel}")));
            }
            in_neighbors[r][t].push(h);
        }
        let adjacency = in_neighbors
            .iter()
            .map(|per_entity| {
                let entries = per_entity
                    .iter()
                    .enumerate()
                    .flat_map(|(e, nbrs)| {
                        let z = nbrs.len() as f64;
                        nbrs.iter().map(move |&src| (e, src, 1.0 / z))
                    })
                    .collect();
                Arc::new(Csr::from_triplets(n, n, entries))
            })
            .collect();
        let entity_index = entity_ids.iter().enumerate().map(|(i, e)| (e.clone(), i)).collect();
        Ok(KnowledgeGraph {
            entity_ids,
            entity_index,
            relation_names,
            triples: set.into_iter().collect(),
            in_neighbors,
            adjacency,
        })
    }

    /// Builds a graph from string triples. Entities and relations get dense
    /// ids in order of first appearance; `extra_entities` that appear in no
    /// triple are appended. With `add_inverse`, every relation `r` gets a
    /// companion `r^-1` carrying messages in the opposite direction.
    pub fn from_string_triples<'a>(
        triples: impl IntoIterator<Item = (&'a str, &'a str, &'a str)>,
        extra_entities: impl IntoIterator<Item = &'a str>,
        add_inverse: bool,
    ) -> Result<Self> {
        let mut entities: Vec<String> = Vec::new();
        let mut e_index: HashMap<String, usize> = HashMap::new();
        let mut relations: Vec<String> = Vec::new();
        let mut r_index: HashMap<String, usize> = HashMap::new();
        let intern = |s: &str, list: &mut Vec<String>, index: &mut HashMap<String, usize>| {
            *index.entry(s.to_string()).or_insert_with(|| {
                list.push(s.to_string());
                list.len() - 1
            })
        };
        let mut dense = Vec::new();
        for (h, r, t) in triples {
            let hi = intern(h, &mut entities, &mut e_index);
            let ri = intern(r, &mut relations, &mut r_index);
            let ti = intern(t, &mut entities, &mut e_index);
            dense.push((hi, ri, ti));
        }
        for e in extra_entities {
            intern(e, &mut entities, &mut e_index);
        }
        if add_inverse {
            let base = relations.len();
            let inverse: Vec<String> = relations.iter().map(|r| format!("{r}^-1")).collect();
            relations.extend(inverse);
            let inv: Vec<_> = dense.iter().map(|&(h, r, t)| (t, r + base, h)).collect();
            dense.extend(inv);
        }
        Self::new(entities, relations, dense)
    }

    /// Reads a tab-separated `head\trelation\ttail` file.
    pub fn load_triples(path: &Path, extra_entities: &[String], add_inverse: bool) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut rows: Vec<(String, String, String)> = Vec::new();
        for (idx, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(Error::Parse {
                    path: path.into(),
                    line: idx + 1,
                    message: format!("expected 3 tab-separated fields, got {}", cols.len()),
                });
            }
            rows.push((cols[0].trim().into(), cols[1].trim().into(), cols[2].trim().into()));
        }
        Self::from_string_triples(
            rows.iter().map(|(h, r, t)| (h.as_str(), r.as_str(), t.as_str())),
            extra_entities.iter().map(String::as_str),
            add_inverse,
        )
    }

    pub fn n_entities(&self) -> usize {
        self.entity_ids.len()
    }

    pub fn n_relations(&self) -> usize {
        self.relation_names.len()
    }

    pub fn entity_ids(&self) -> &[String] {
        &self.entity_ids
    }

    pub fn relation_names(&self) -> &[String] {
        &self.relation_names
    }

    pub fn entity(&self, id: &str) -> Option<EntityIdx> {
        self.entity_index.get(id).copied()
    }

    pub fn triples(&self) -> &[(EntityIdx, usize, EntityIdx)] {
        &self.triples
    }

    pub fn in_neighbors(&self, e: EntityIdx, r: usize) -> &[EntityIdx] {
        &self.in_neighbors[r][e]
    }

    pub fn adjacency(&self, r: usize) -> &Arc<Csr> {
        &self.adjacency[r]
    }

    /// Resolves entity ids, dropping unknown ones.
    pub fn resolve(&self, ids: &[String]) -> Vec<EntityIdx> {
        ids.iter().filter_map(|id| self.entity(id)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct KgDims {
    pub entity_dim: usize,
    pub attention_dim: usize,
    pub layers: usize,
}

impl Default for KgDims {
    fn default() -> Self {
        KgDims { entity_dim: 128, attention_dim: 64, layers: 1 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RgcnLayer {
    /// W_r, one d_E × d_E matrix per relation.
    pub relation: Vec<Mat>,
    /// W, applied to the node's own representation.
    pub self_loop: Mat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KgParams {
    /// h^(0), |E| × d_E.
    pub base: Mat,
    pub layers: Vec<RgcnLayer>,
    /// W_a1, d_a × d_E.
    pub attn_proj: Mat,
    /// w_a2, 1 × d_a.
    pub attn_vec: Mat,
    /// M_b, |E| × |V_R|.
    pub bias_map: Mat,
}

impl KgParams {
    pub fn init<R: Rng>(kg: &KnowledgeGraph, dims: KgDims, n_item_partition: usize, rng: &mut R) -> Result<Self> {
        if dims.layers == 0 || dims.entity_dim == 0 || dims.attention_dim == 0 {
            return Err(Error::Config(format!("invalid KG dimensions {dims:?}")));
        }
        let d = dims.entity_dim;
        let base = xavier(kg.n_entities(), d, rng);
        let layers = (0..dims.layers)
            .map(|_| RgcnLayer {
                relation: (0..kg.n_relations()).map(|_| xavier(d, d, rng)).collect(),
                self_loop: xavier(d, d, rng),
            })
            .collect();
        Ok(KgParams {
            base,
            layers,
            attn_proj: xavier(dims.attention_dim, d, rng),
            attn_vec: xavier(1, dims.attention_dim, rng),
            bias_map: Array2::zeros((kg.n_entities(), n_item_partition)),
        })
    }

    pub fn entity_dim(&self) -> usize {
        self.base.ncols()
    }

    fn check(&self, kg: &KnowledgeGraph) -> Result<()> {
        let d = self.entity_dim();
        let fail = |m: String| Err(Error::Shape(m));
        if self.base.nrows() != kg.n_entities() {
            return fail(format!("base embeddings have {} rows for {} entities", self.base.nrows(), kg.n_entities()));
        }
        if self.layers.is_empty() {
            return fail("no R-GCN layers".into());
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.relation.len() != kg.n_relations() {
                return fail(format!("layer {l}: {} relation matrices for {} relations", layer.relation.len(), kg.n_relations()));
            }
            if layer.relation.iter().chain(std::iter::once(&layer.self_loop)).any(|w| w.dim() != (d, d)) {
                return fail(format!("layer {l}: weight matrices must be {d}×{d}"));
            }
        }
        if self.attn_proj.ncols() != d || self.attn_vec.dim() != (1, self.attn_proj.nrows()) {
            return fail("attention matrices do not match the entity dimension".into());
        }
        if self.bias_map.nrows() != kg.n_entities() {
            return fail(format!("bias map has {} rows for {} entities", self.bias_map.nrows(), kg.n_entities()));
        }
        Ok(())
    }
}

impl NamedParams for KgParams {
    fn named(&self) -> Vec<(String, &Mat)> {
        let mut out = vec![("kg.base".to_string(), &self.base)];
        for (l, layer) in self.layers.iter().enumerate() {
            for (r, w) in layer.relation.iter().enumerate() {
                out.push((format!("kg.layer{l}.relation{r}"), w));
            }
            out.push((format!("kg.layer{l}.self"), &layer.self_loop));
        }
        out.push(("kg.attn_proj".into(), &self.attn_proj));
        out.push(("kg.attn_vec".into(), &self.attn_vec));
        out.push(("kg.bias_map".into(), &self.bias_map));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Mat> {
        let mut out = vec![&mut self.base];
        for layer in &mut self.layers {
            out.extend(layer.relation.iter_mut());
            out.push(&mut layer.self_loop);
        }
        out.push(&mut self.attn_proj);
        out.push(&mut self.attn_vec);
        out.push(&mut self.bias_map);
        out
    }
}

/// Graph leaves for every KG parameter, in `NamedParams` order.
pub struct KgVars {
    pub base: Var,
    pub layers: Vec<(Vec<Var>, Var)>,
    pub attn_proj: Var,
    pub attn_vec: Var,
    pub bias_map: Var,
}

impl KgVars {
    pub fn bind(g: &mut Graph, p: &KgParams) -> Self {
        let base = g.leaf(p.base.clone());
        let layers = p
            .layers
            .iter()
            .map(|l| (l.relation.iter().map(|w| g.leaf(w.clone())).collect(), g.leaf(l.self_loop.clone())))
            .collect();
        KgVars {
            base,
            layers,
            attn_proj: g.leaf(p.attn_proj.clone()),
            attn_vec: g.leaf(p.attn_vec.clone()),
            bias_map: g.leaf(p.bias_map.clone()),
        }
    }

    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.base];
        for (rels, self_loop) in &self.layers {
            out.extend(rels.iter().copied());
            out.push(*self_loop);
        }
        out.extend([self.attn_proj, self.attn_vec, self.bias_map]);
        out
    }
}

/// h^(l+1) = σ(Σ_r A_r h^(l) W_rᵀ + h^(l) Wᵀ) with A_r the row-normalized
/// in-neighbor matrix; σ is ReLU between layers and identity on the last.
pub fn rgcn_graph(g: &mut Graph, kg: &KnowledgeGraph, vars: &KgVars) -> Var {
    let mut h = vars.base;
    let n_layers = vars.layers.len();
    for (l, (rels, self_loop)) in vars.layers.iter().enumerate() {
        let mut acc = g.matmul_t(h, *self_loop);
        for (r, w) in rels.iter().enumerate() {
            if kg.adjacency(r).nnz() == 0 {
                continue;
            }
            let msg = g.matmul_t(h, *w);
            let agg = g.spmm(kg.adjacency(r).clone(), msg);
            acc = g.add(acc, agg);
        }
        h = if l + 1 < n_layers { g.relu(acc) } else { acc };
    }
    h
}

/// Returns `(α_u, t_u)` for a non-empty entity list.
pub fn attend_graph(g: &mut Graph, h: Var, entities: &[EntityIdx], vars: &KgVars) -> (Var, Var) {
    debug_assert!(!entities.is_empty());
    let hu = g.gather(h, entities);
    let proj = g.matmul_t(hu, vars.attn_proj);
    let act = g.tanh(proj);
    let scores = g.matmul_t(vars.attn_vec, act); // 1 × |T_u|
    let alpha = g.softmax(scores);
    let t_u = g.matmul(alpha, hu);
    (alpha, t_u)
}

/// b_u = t_u Hᵀ M_b
pub fn bias_graph(g: &mut Graph, t_u: Var, h: Var, vars: &KgVars) -> Var {
    let scores = g.matmul_t(t_u, h);
    g.matmul(scores, vars.bias_map)
}

/// −log softmax(t_u Hᵀ)_gold
pub fn kg_loss_graph(g: &mut Graph, t_u: Var, h: Var, gold: EntityIdx) -> Result<Var> {
    let scores = g.matmul_t(t_u, h);
    let n = g.value(scores).ncols();
    g.masked_xent(scores, vec![0..n], vec![gold])
}

#[derive(Clone, Debug, PartialEq)]
pub struct UserEncoding {
    pub attention: Vec<f64>,
    pub vector: Vec<f64>,
    pub bias: Vec<f64>,
}

fn check_entities(kg_n: usize, entities: &[EntityIdx]) -> Result<()> {
    match entities.iter().find(|&&e| e >= kg_n) {
        Some(e) => Err(Error::UnknownEntity(e.to_string())),
        None => Ok(()),
    }
}

pub fn rgcn_forward(kg: &KnowledgeGraph, params: &KgParams) -> Result<Mat> {
    params.check(kg)?;
    let mut g = Graph::new();
    let vars = KgVars::bind(&mut g, params);
    let h = rgcn_graph(&mut g, kg, &vars);
    Ok(g.value(h).clone())
}

fn with_h<T>(h: &Mat, params: &KgParams, f: impl FnOnce(&mut Graph, Var, &KgVars) -> T) -> T {
    let mut g = Graph::new();
    let vars = KgVars::bind(&mut g, params);
    let hv = g.leaf(h.clone());
    f(&mut g, hv, &vars)
}

/// Attention and pooled vector for a non-empty `entities`; `bias` is filled in.
pub fn attend_user(entities: &[EntityIdx], h: &Mat, params: &KgParams) -> Result<UserEncoding> {
    if entities.is_empty() {
        return Err(Error::Empty("user entity set".into()));
    }
    check_entities(h.nrows(), entities)?;
    Ok(with_h(h, params, |g, hv, vars| {
        let (alpha, t_u) = attend_graph(g, hv, entities, vars);
        let b = bias_graph(g, t_u, hv, vars);
        UserEncoding {
            attention: g.value(alpha).iter().copied().collect(),
            vector: g.value(t_u).iter().copied().collect(),
            bias: g.value(b).iter().copied().collect(),
        }
    }))
}

/// Knowledge-aware item bias; all zeros for an empty entity set.
pub fn knowledge_bias(entities: &[EntityIdx], h: &Mat, params: &KgParams) -> Result<Vec<f64>> {
    if entities.is_empty() {
        return Ok(vec![0.0; params.bias_map.ncols()]);
    }
    Ok(attend_user(entities, h, params)?.bias)
}

/// t_u Hᵀ M_b for an explicit user vector.
pub fn bias_from_vector(t_u: &[f64], h: &Mat, bias_map: &Mat) -> Vec<f64> {
    let t = ndarray::ArrayView1::from(t_u);
    h.dot(&t).dot(bias_map).to_vec()
}

pub fn kg_loss(entities: &[EntityIdx], h: &Mat, params: &KgParams, gold: EntityIdx) -> Result<f64> {
    if entities.is_empty() {
        return Err(Error::Empty("user entity set".into()));
    }
    check_entities(h.nrows(), entities)?;
    check_entities(h.nrows(), &[gold])?;
    with_h(h, params, |g, hv, vars| {
        let (_, t_u) = attend_graph(g, hv, entities, vars);
        let l = kg_loss_graph(g, t_u, hv, gold)?;
        Ok(g.scalar_value(l))
    })
}

/// Entities ordered by t_u · h_e descending, ties by ascending id.
pub fn rank_entities(entities: &[EntityIdx], h: &Mat, params: &KgParams) -> Result<Vec<EntityIdx>> {
    let enc = attend_user(entities, h, params)?;
    let t = ndarray::ArrayView1::from(&enc.vector[..]);
    let scores = h.dot(&t);
    Ok(rank_by_score(scores.as_slice().expect("contiguous")))
}

pub fn rank_by_score(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn chain() -> KnowledgeGraph {
        KnowledgeGraph::new(vec!["a".into(), "b".into(), "c".into()], vec!["r".into()], [(0, 0, 1), (1, 0, 2)]).unwrap()
    }

    fn params_2d(kg: &KnowledgeGraph, n_items: usize) -> KgParams {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        KgParams::init(kg, KgDims { entity_dim: 2, attention_dim: 2, layers: 1 }, n_items, &mut rng).unwrap()
    }

    #[test]
    fn isolated_entity_with_identity_self_loop_keeps_base() {
        let kg = KnowledgeGraph::new(vec!["x".into(), "y".into()], vec!["r".into()], [(0, 0, 0)]).unwrap();
        let mut p = params_2d(&kg, 1);
        p.layers[0].self_loop = Mat::eye(2);
        let h = rgcn_forward(&kg, &p).unwrap();
        assert_eq!(h.row(1), p.base.row(1));
    }

    #[test]
    fn two_neighbors_are_averaged() {
        let kg = KnowledgeGraph::new(vec!["a".into(), "b".into(), "c".into()], vec!["r".into()], [(0, 0, 2), (1, 0, 2)]).unwrap();
        let mut p = params_2d(&kg, 1);
        p.base = array![[1.0, 0.0], [3.0, 2.0], [0.0, 0.0]];
        p.layers[0].relation[0] = Mat::eye(2);
        p.layers[0].self_loop = Mat::zeros((2, 2));
        let h = rgcn_forward(&kg, &p).unwrap();
        assert_eq!(h.row(2).to_vec(), vec![2.0, 1.0]);
        assert_eq!(kg.in_neighbors(2, 0), &[0, 1]);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let kg = chain();
        let mut p = params_2d(&kg, 1);
        p.layers[0].relation.pop();
        assert!(matches!(rgcn_forward(&kg, &p), Err(Error::Shape(_))));
    }

    #[test]
    fn single_entity_attention_is_one() {
        let kg = chain();
        let p = params_2d(&kg, 1);
        let h = rgcn_forward(&kg, &p).unwrap();
        let enc = attend_user(&[1], &h, &p).unwrap();
        assert_eq!(enc.attention, vec![1.0]);
        assert_eq!(enc.vector, h.row(1).to_vec());
    }

    #[test]
    fn duplicate_entities_split_attention_evenly() {
        let kg = chain();
        let p = params_2d(&kg, 1);
        let h = rgcn_forward(&kg, &p).unwrap();
        let enc = attend_user(&[2, 2], &h, &p).unwrap();
        assert_eq!(enc.attention, vec![0.5, 0.5]);
    }

    #[test]
    fn attention_matches_hand_computation() {
        let kg = chain();
        let mut p = params_2d(&kg, 1);
        let h = array![[0.5, -1.0], [2.0, 0.25], [0.0, 0.0]];
        p.attn_proj = array![[1.0, 0.5], [-0.5, 2.0]];
        p.attn_vec = array![[0.7, -1.2]];
        let score = |row: [f64; 2]| {
            let a = (1.0 * row[0] + 0.5 * row[1]).tanh();
            let b = (-0.5 * row[0] + 2.0 * row[1]).tanh();
            0.7 * a - 1.2 * b
        };
        let (s0, s1) = (score([0.5, -1.0]), score([2.0, 0.25]));
        let a0 = s0.exp() / (s0.exp() + s1.exp());
        let a1 = 1.0 - a0;
        let enc = attend_user(&[0, 1], &h, &p).unwrap();
        assert!((enc.attention[0] - a0).abs() < 1e-12);
        assert!((enc.attention[1] - a1).abs() < 1e-12);
        assert!((enc.vector[0] - (a0 * 0.5 + a1 * 2.0)).abs() < 1e-12);
        assert!((enc.vector[1] - (a0 * -1.0 + a1 * 0.25)).abs() < 1e-12);
    }

    #[test]
    fn bias_matches_dense_product() {
        let h = Mat::eye(2);
        let m = array![[1.0, 2.0], [3.0, 4.0]];
        assert_eq!(bias_from_vector(&[1.0, 0.0], &h, &m), vec![1.0, 2.0]);
        assert_eq!(bias_from_vector(&[0.0, 0.0], &h, &m), vec![0.0, 0.0]);
    }

    #[test]
    fn empty_user_gets_zero_bias() {
        let kg = chain();
        let p = params_2d(&kg, 4);
        let h = rgcn_forward(&kg, &p).unwrap();
        assert_eq!(knowledge_bias(&[], &h, &p).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn uniform_scores_give_log_entity_count() {
        let kg = KnowledgeGraph::new((0..4).map(|i| i.to_string()).collect(), vec!["r".into()], []).unwrap();
        let p = params_2d(&kg, 1);
        let h = Mat::zeros((4, 2));
        let l = kg_loss(&[0], &h, &p, 3).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn dominant_gold_score_drives_loss_to_zero() {
        let kg = chain();
        let p = params_2d(&kg, 1);
        let h = array![[50.0, 0.0], [0.0, 0.0], [-50.0, 0.0]];
        assert!(kg_loss(&[0], &h, &p, 0).unwrap() < 1e-12);
    }

    #[test]
    fn rank_sorts_descending_with_id_tiebreak() {
        assert_eq!(rank_by_score(&[0.1, 0.9, 0.5]), vec![1, 2, 0]);
        assert_eq!(rank_by_score(&[0.3, 0.3, 0.3]), vec![0, 1, 2]);
    }

    #[test]
    fn string_triples_get_inverse_relations() {
        let kg = KnowledgeGraph::from_string_triples([("m1", "genre", "horror")], ["lonely"], true).unwrap();
        assert_eq!(kg.entity_ids(), &["m1", "horror", "lonely"]);
        assert_eq!(kg.relation_names(), &["genre", "genre^-1"]);
        assert_eq!(kg.in_neighbors(1, 0), &[0]);
        assert_eq!(kg.in_neighbors(0, 1), &[1]);
    }

    #[test]
    fn out_of_range_triple_is_rejected() {
        assert!(KnowledgeGraph::new(vec!["a".into()], vec!["r".into()], [(0, 0, 1)]).is_err());
    }
}
