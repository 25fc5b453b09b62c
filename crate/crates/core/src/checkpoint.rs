//! Binary checkpoint container.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic     8 bytes   "RCNDCKPT"
//! version   u32       1
//! hlen      u64       length of the JSON header
//! header    hlen bytes UTF-8 JSON (see `Header`)
//! tensors   f64 × Σ rows·cols, row-major, in header order
//! digest    32 bytes  SHA-256 of every preceding byte
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Mat;
use crate::error::{Error, Result};
use crate::kgraph::{KgDims, KgParams, RgcnLayer};
use crate::params::NamedParams;
use crate::seqmodel::{LanguageModel, LmParams, ModelConfig, Variant};
use crate::training::RecModel;

const MAGIC: &[u8; 8] = b"RCNDCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KgShape {
    pub dims: KgDims,
    pub n_relations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub model: ModelConfig,
    pub variant: Variant,
    /// SHA-256 of the vocabulary file the model was trained with.
    pub vocab_hash: String,
    /// Dense entity order used by every KG tensor.
    pub entity_ids: Vec<String>,
    pub kg: Option<KgShape>,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: RecModel,
    pub vocab_hash: String,
    pub entity_ids: Vec<String>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn header(&self) -> Header {
        let kg = self.model.kg.as_ref().map(|p| KgShape {
            dims: KgDims { entity_dim: p.entity_dim(), attention_dim: p.attn_proj.nrows(), layers: p.layers.len() },
            n_relations: p.layers.first().map_or(0, |l| l.relation.len()),
        });
        Header {
            model: self.model.lm.config.clone(),
            variant: self.model.variant,
            vocab_hash: self.vocab_hash.clone(),
            entity_ids: self.entity_ids.clone(),
            kg,
            tensors: self
                .model
                .named()
                .into_iter()
                .map(|(name, m)| TensorEntry { name, rows: m.nrows(), cols: m.ncols() })
                .collect(),
            meta: self.meta.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header())?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, m) in self.model.named() {
            for v in m.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 8 + 4 + 8 + 32 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch"));
        }
        let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let hlen = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = 20usize.checked_add(hlen).filter(|&e| e <= body.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&body[20..header_end])?;
        let mut data = &body[header_end..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for t in &header.tensors {
            let n = t.rows * t.cols;
            if data.len() < n * 8 {
                return Err(Error::Checkpoint(format!("truncated tensor {}", t.name)));
            }
            let values: Vec<f64> =
                data[..n * 8].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            data = &data[n * 8..];
            tensors.push(Mat::from_shape_vec((t.rows, t.cols), values).map_err(|e| Error::Checkpoint(e.to_string()))?);
        }
        if !data.is_empty() {
            return Err(bad("trailing bytes after tensors"));
        }
        let model = rebuild(&header, tensors)?;
        Ok(Checkpoint {
            model,
            vocab_hash: header.vocab_hash,
            entity_ids: header.entity_ids,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// SHA-256 (hex) of a checkpoint file's bytes.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn rebuild(header: &Header, tensors: Vec<Mat>) -> Result<RecModel> {
    header.model.validate()?;
    let c = &header.model;
    let zeros = |r, k| Mat::zeros((r, k));
    let block = || crate::seqmodel::BlockParams {
        ln1_gain: zeros(1, c.width),
        ln1_bias: zeros(1, c.width),
        query: zeros(c.width, c.width),
        key: zeros(c.width, c.width),
        value: zeros(c.width, c.width),
        out: zeros(c.width, c.width),
        ln2_gain: zeros(1, c.width),
        ln2_bias: zeros(1, c.width),
        ff_in: zeros(c.width, c.ff_width),
        ff_in_bias: zeros(1, c.ff_width),
        ff_out: zeros(c.ff_width, c.width),
        ff_out_bias: zeros(1, c.width),
    };
    let lm = LmParams {
        token_emb: zeros(c.vocab_size(), c.width),
        pos_emb: zeros(c.max_position, c.width),
        blocks: (0..c.layers).map(|_| block()).collect(),
        lnf_gain: zeros(1, c.width),
        lnf_bias: zeros(1, c.width),
    };
    let kg = header.kg.as_ref().map(|k| {
        let d = k.dims.entity_dim;
        KgParams {
            base: zeros(header.entity_ids.len(), d),
            layers: (0..k.dims.layers)
                .map(|_| RgcnLayer { relation: (0..k.n_relations).map(|_| zeros(d, d)).collect(), self_loop: zeros(d, d) })
                .collect(),
            attn_proj: zeros(k.dims.attention_dim, d),
            attn_vec: zeros(1, k.dims.attention_dim),
            bias_map: zeros(header.entity_ids.len(), c.n_item_partition),
        }
    });
    let mut model = RecModel { lm: LanguageModel { config: c.clone(), params: lm }, kg, variant: header.variant };
    let expected: Vec<(String, (usize, usize))> = model.named().into_iter().map(|(n, m)| (n, m.dim())).collect();
    if expected.len() != tensors.len() {
        return Err(Error::Checkpoint(format!("expected {} tensors, found {}", expected.len(), tensors.len())));
    }
    for ((name, dim), (entry, t)) in expected.iter().zip(header.tensors.iter().zip(&tensors)) {
        if *name != entry.name || *dim != t.dim() {
            return Err(Error::Checkpoint(format!("tensor {} does not match expected {name} {dim:?}", entry.name)));
        }
    }
    crate::params::assign(&mut model, &tensors);
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::build_vocabulary;
    use crate::kgraph::{rgcn_forward, KnowledgeGraph};
    use crate::seqmodel::forward_logits;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn checkpoint(knowledge: bool) -> (Checkpoint, KnowledgeGraph) {
        let v = build_vocabulary(&["m1".into(), "m2".into()], &["a".into()]).unwrap();
        let kg = KnowledgeGraph::from_string_triples([("x", "r", "y"), ("y", "s", "z")], [], true).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut config = ModelConfig::for_vocab(&v);
        config.width = 8;
        config.heads = 2;
        config.ff_width = 12;
        config.max_position = 16;
        let lm = LanguageModel::new(config, &mut rng).unwrap();
        let kp = KgParams::init(&kg, KgDims { entity_dim: 4, attention_dim: 2, layers: 2 }, v.n_item_partition(), &mut rng).unwrap();
        let variant = Variant { pointer: true, knowledge };
        let model = RecModel::new(lm, Some(kp), variant).unwrap();
        let ck = Checkpoint {
            model,
            vocab_hash: v.hash(),
            entity_ids: kg.entity_ids().to_vec(),
            meta: serde_json::json!({"epochs": 1}),
        };
        (ck, kg)
    }

    #[test]
    fn round_trip_reproduces_forward_outputs() {
        let (ck, kg) = checkpoint(true);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        let probe = [2u32, 4, 3, 5, 1];
        assert_eq!(forward_logits(&back.model.lm, &probe).unwrap(), forward_logits(&ck.model.lm, &probe).unwrap());
        let p0 = ck.model.kg.as_ref().unwrap();
        let p1 = back.model.kg.as_ref().unwrap();
        assert_eq!(rgcn_forward(&kg, p1).unwrap(), rgcn_forward(&kg, p0).unwrap());
    }

    #[test]
    fn knowledge_free_model_round_trips() {
        let (ck, _) = checkpoint(false);
        assert!(ck.model.kg.is_none());
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn corruption_is_detected() {
        let (ck, _) = checkpoint(true);
        let mut bytes = ck.to_bytes().unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(_))));
        assert!(Checkpoint::from_bytes(b"not a checkpoint").is_err());
    }
}
