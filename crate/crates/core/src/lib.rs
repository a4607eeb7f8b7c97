//! Weighted unimodal-ensemble distillation for three-head multimodal fusion
//! networks: a small reverse-mode autodiff engine, the models, losses,
//! synthetic data, training loops and evaluation metrics.

pub mod checkpoint;
pub mod data;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use losses::{BaselineRegime, Divergence, LossBreakdown, LossWeights};
pub use metrics::{MetricValue, MetricsReport, Utilization};
pub use nn::{EncoderSpec, FusionModel, Modality, TaskKind, TeacherEnsemble, UnimodalModel};
pub use tape::{Tape, Var};
pub use tensor::{Tensor, TensorError};
pub use data::{Dataset, GeneratorConfig, Preset, Split};
pub use trainer::{Regime, TrainConfig, TrainLog};
