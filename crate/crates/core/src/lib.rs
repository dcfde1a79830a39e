//! Few-shot visual recognition without forgetting: a cosine-similarity
//! classifier over learned features plus a weight generator that turns a
//! handful of examples into classifier weights for new categories.

pub mod classifier;
pub mod cli;
pub mod config;
pub mod container;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod extractor;
pub mod generator;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use classifier::{ClassifierState, HeadKind};
pub use config::RunConfig;
pub use dataset::{Dataset, SplitKind, SynthConfig};
pub use error::{Error, Result};
pub use eval::{EvalConfig, MetricsReport};
pub use extractor::{Extractor, ExtractorConfig};
pub use generator::{GeneratorMode, GeneratorParams, SupportSet};
pub use model::{Checkpoint, FewShotModel};
pub use tape::{OpKind, Tape, Var};
pub use tensor::{Param, Tensor};
pub use trainer::TrainConfig;
