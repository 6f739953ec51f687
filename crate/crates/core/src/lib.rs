//! Tape-based autodiff engine, U-Net with a dilated residual bottleneck,
//! and the training, evaluation and data tooling around it for
//! multi-organ segmentation of thoracic CT volumes.

pub mod losses;
pub mod metrics;
pub mod model;
pub mod phantom;
pub mod postprocess;
pub mod preprocess;
pub mod tensor;
pub mod trainer;
pub mod volume;

pub use losses::{LossConfig, LossKind};
pub use metrics::{evaluate_volume, MetricsReport};
pub use model::{build_model, Model, ModelConfig, ResidualMode};
pub use phantom::{generate_dataset, generate_phantom, PhantomSpec};
pub use postprocess::largest_component_filter;
pub use preprocess::{AugmentRanges, PreprocessConfig};
pub use tensor::{Tape, Tensor, Var};
pub use trainer::{Checkpoint, TrainConfig, TrainError, TrainOutcome};
pub use volume::{Dims, LabelMap, Mask, Spacing, Volume};
