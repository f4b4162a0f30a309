//! Differentiable projective dependency parsing.
//!
//! The centerpiece is a continuous relaxation of Eisner's chart parser:
//! every one-hot argmax over split points is replaced by a temperature-scaled
//! softmax, which turns the parser into a smooth map from arc weights to a
//! soft arc-selection matrix. Explicit forward and backward passes make the
//! whole pipeline differentiable without an autodiff framework.
//!
//! On top of the chart machinery the crate provides:
//!
//! - exact argmax parsing and the log-partition function over projective
//!   trees, with arc marginals and tree entropy derived from it,
//! - Gumbel perturb-and-parse sampling (hard and relaxed),
//! - ELBO-style loss composition for semi-supervised latent-tree training,
//!   with analytic gradients validated against finite differences,
//! - brute-force enumeration oracles for small sentences,
//! - CoNLL-U ingestion, weight-file IO and a benchmark harness.

pub mod bench;
pub mod chart;
pub mod elbo;
pub mod grad;
pub mod io;
pub mod oracle;
pub mod sampling;
pub mod tree;

pub use chart::{
    hard_eisner, inside_relaxed, log_partition, relaxed_eisner, tree_log_prob, Chart, ChartMode,
    ContribChart, ItemKind,
};
pub use elbo::{
    gaussian_kl, recover_tree_by_gradient, semi_supervised_loss, soft_gcn_layer, sup_elbo_estimate,
    tree_entropy, tree_kl_to_uniform, unsup_elbo_estimate, Decoder, DecoderEval, GaussianGrad,
    LabeledExample, LinearDecoder, LossBundle, RecoverReport, UnlabeledExample,
};
pub use grad::{backward_relaxed, grad_check, marginals, tree_kl_grad, GradCheckReport};
pub use sampling::{
    gumbel_max_categorical, perturb_and_parse_hard, perturb_and_parse_relaxed, reparam_gaussian,
    sample_gumbel, GaussianParams, Seed,
};
pub use tree::{
    is_projective, is_valid_tree, tree_score, uas, ArcWeights, HardTree, Mat, SoftTree,
    Temperature,
};

/// Errors shared across the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Dimension or shape disagreement between inputs.
    #[error("shape error: {0}")]
    Shape(String),
    /// Input outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),
    /// Malformed input file.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
