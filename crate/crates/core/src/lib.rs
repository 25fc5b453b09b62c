//! Conversational recommendation with a vocabulary-pointer decoder and a
//! knowledge-graph bias.

pub mod autodiff;
pub mod chat;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod evalsuite;
pub mod kgraph;
pub mod params;
pub mod pipeline;
pub mod seqmodel;
pub mod synth;
pub mod training;
pub mod vpdecode;

pub use corpus::{ContextResponsePair, Dialogue, ItemId, LinkMap, Speaker, TokenId, Utterance, Vocabulary};
pub use chat::{ChatEngine, ChatItem, ChatTurn, Session};
pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use evalsuite::{EvalInstance, ItemRatioMode, MetricsReport, TranscriptRecord};
pub use kgraph::{KgDims, KgParams, KnowledgeGraph};
pub use pipeline::{Dataset, ExperimentConfig, Recommender};
pub use seqmodel::{LanguageModel, ModelConfig, Variant};
pub use training::{RecModel, TrainConfig, TrainReport};
pub use vpdecode::{DecodeConfig, GenerationState, RecommendationResult};
