//! Knowledge-enhanced Transformer encoder built on a small reverse-mode
//! autodiff engine, with commonsense retrieval, training and analysis tools.

pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod kb;
pub mod model;
pub mod module;
pub mod optim;
pub mod scalar;
pub mod synth;
pub mod task;
pub mod tensor;
pub mod train;
pub mod transformer;

pub use autodiff::{Gradients, Tape, Var};
pub use checkpoint::Checkpoint;
pub use config::ModelConfig;
pub use kb::{CandidateSet, KnowledgeBase, Templates};
pub use model::OkEncoder;
pub use module::Module;
pub use scalar::Scalar;
pub use task::{Example, Featurized, Featurizer, TaskKind, TaskModel, TaskSpec};
pub use train::{train, TrainConfig};

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Encoder64 = transformer::Encoder<f64>;
pub type OkEncoder64 = model::OkEncoder<f64>;
pub type OkEncoder32 = model::OkEncoder<f32>;
pub type TaskModel64 = task::TaskModel<f64>;
