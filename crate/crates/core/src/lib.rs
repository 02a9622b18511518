//! Landmark-guided lip reading with max–min mutual-information regularisation.

pub mod ablation;
pub mod attention;
pub mod backend;
pub mod corpus;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod frontend;
pub mod mi;
pub mod model;
pub mod nn;
pub mod rng;
pub mod selftest;
pub mod speaker;
pub mod tensor;
pub mod trainer;
pub mod vocab;

pub use corpus::{Corpus, CorpusConfig, Sample, SplitMode};
pub use error::{Error, Result};
pub use eval::{EvalReport, ModelRecognizer, Recognizer};
pub use model::{LipModel, ModelConfig};
pub use nn::{Checkpoint, ParamStore, Session};
pub use tensor::{Grads, Graph, Tensor, Var};
pub use trainer::{DataPlan, TrainConfig, Trainer};
