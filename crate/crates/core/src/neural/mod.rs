//! Desk-scale autoregressive and masked transformer language models.

pub mod backend;
pub mod checkpoint;
pub mod config;
pub mod model;
pub mod optim;
pub mod train;
pub mod vocab;

pub use backend::{Backend, Real};
pub use checkpoint::{random_init_model, sentence_ids, Checkpoint, LayerStates};
pub use config::{Arch, ModelConfig, TrainConfig};
pub use model::{Batch, Transformer};
pub use train::{load_corpus_ids, train_alm, train_mlm, train_model, TrainReport};
