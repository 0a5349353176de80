//! Cross-modality matching of 1D spectra with a modality-agnostic embedding.
//!
//! Two modality-specific encoder/decoder networks with skip connections are
//! trained to reconstruct their own modality and translate into the other,
//! while discriminators push the two bottleneck distributions together. A
//! shared Siamese network maps bottlenecks to embeddings trained with a
//! cross-modality triplet loss. At inference only the encoders and the
//! Siamese network are kept.

pub mod autograd;
pub mod data;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use data::{Grid, Modality, SplitPlan, Spectrum};
pub use eval::{Direction, Embedder, MetricsReport, OcclusionConfig, OcclusionCurve};
pub use experiment::{DatasetSource, ExperimentConfig, ExperimentError};
pub use losses::{LossReport, LossWeights};
pub use model::{ArchConfig, Checkpoint, InferenceParams, ModelParams};
pub use synth::SynthConfig;
pub use tensor::Tensor;
pub use train::{TrainConfig, TrainState};
