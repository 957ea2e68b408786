//! Seed model, tokenizer, synthetic corpus and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod pretrain;
pub mod tokenizer;
pub mod transformer;

pub use checkpoint::Checkpoint;
pub use config::{LayerId, LayerKind, TinyTransformerConfig};
pub use data::{CorpusConfig, Domain, Example, Splits, SyntheticTask};
pub use pretrain::{full_finetune, pretrain, train_dense, DenseReport, DenseTrainConfig};
pub use tokenizer::Tokenizer;
pub use transformer::{forward, DenseBinding, PackedBatch, TinyTransformer, WeightSource};
