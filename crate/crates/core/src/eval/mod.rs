//! Code-completion metrics and significance testing.

mod completion;
mod metrics;
mod stats;

pub use completion::{
    evaluate_completion, overall, predict_next, score_document, token_accuracy, DocScore, EvalResult, Frame,
};
pub use metrics::{edit_similarity, levenshtein};
pub use stats::{paired_t_test, regularized_incomplete_beta, TTest};
