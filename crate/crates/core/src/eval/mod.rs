//! Evaluation: closed-form oracles and the coherence / latent-accuracy metrics.

pub mod classifier;
pub mod metrics;
pub mod oracle;
pub mod sandwich;

pub use classifier::OracleClassifier;
pub use metrics::{evaluate, EvalConfig, EvalSet, Metrics};
pub use oracle::{EncoderChoice, LinearGaussianOracle};
