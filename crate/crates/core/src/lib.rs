//! Task residual tuning in embedding space.
//!
//! A frozen, text-derived base classifier `t` (K×D) is adapted to a
//! downstream task by learning a residual `x` of the same shape, initialized
//! at zero, and classifying with `t' = t + α·x` under cosine-similarity
//! softmax. The crate also provides the compared constructions (adapter on
//! the classifier, adapter-style mixing, image-side residuals, an enhanced
//! base from a tuned projection), an exact-gradient trainer, a synthetic
//! bundle generator and analysis tools.

pub mod analysis;
pub mod classifier;
pub mod cli;
pub mod embedding_io;
pub mod error;
pub mod gradients;
pub mod matrix;
pub mod optimizer;
pub mod params;
pub mod rng;
pub mod synth;
pub mod trainer;

pub use classifier::{
    build_target_classifier, predict_labels, predict_probs, Alpha, Construction,
    TargetClassifierSpec, TaskResidual,
};
pub use embedding_io::{
    read_bundle, write_bundle, Bundle, BundleManifest, EmbeddingMatrix, LabeledEmbeddings,
};
pub use error::{Error, Result};
pub use matrix::Matrix;
pub use trainer::{train, RunReport, TrainConfig, Variant};
