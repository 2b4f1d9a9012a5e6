//! Compound facial expression recognition.
//!
//! Encoders turn face images into embeddings, which are concatenated and fed
//! to a dual-head classifier (basic and compound expressions). Several
//! trained models can be late-fused by probability averaging, and results
//! are scored with the macro-averaged F1 over the seven compound classes.

pub mod dataset;
pub mod encoders;
pub mod ensemble;
pub mod error;
pub mod fusion_model;
pub mod losses;
pub mod metrics_report;
pub mod objective;
pub mod pipeline;
pub mod synthetic;
pub mod taxonomy;
pub mod trainer;

pub use encoders::{EncoderRegistry, EncoderSpec, FeatureBatch, ImageBatch};
pub use error::{Error, Result};
pub use fusion_model::{FusionConfig, FusionModel, ModelOutput};
pub use losses::LossWeights;
pub use metrics_report::{ConfusionMatrix, EvalReport};
pub use taxonomy::{BasicExpression, CompoundExpression, Label, LabelKind};
pub use trainer::{FeatureSet, TrainConfig, TrainState};
