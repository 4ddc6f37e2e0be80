//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("column `{0}` not found in input")]
    MissingColumn(String),

    #[error("non-finite value at row {row}, column `{column}`")]
    NonFinite { row: usize, column: String },

    #[error("instrument matrix is rank deficient: column {index} (`{name}`) is linearly dependent on earlier columns")]
    RankDeficient { index: usize, name: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("underidentified: {valid} valid instruments for {regressors} endogenous regressors")]
    Underidentified { valid: usize, regressors: usize },

    #[error("collinear design: column {index} (`{name}`) of the second-stage regressor matrix")]
    Collinear { index: usize, name: String },

    #[error("overidentification test undefined: need |valid| > P, got |valid| = {valid}, P = {regressors}")]
    TestUndefined { valid: usize, regressors: usize },

    #[error("numerical failure in {context}: {detail}")]
    Numerical { context: String, detail: String },

    #[error("{method} selection exhausted the path without a passing model (last p-value {last_p:.4} at threshold {threshold:.4}); {advice}")]
    SelectorExhausted {
        method: String,
        last_p: f64,
        threshold: f64,
        advice: String,
    },

    #[error("valid set is empty")]
    EmptyValidSet,

    #[error("shift table has no entry for class `{class}`, period `{period}`")]
    MissingShift { class: String, period: String },

    #[error("panel has gaps in the time index for units: {}", units.join(", "))]
    PanelGaps { units: Vec<String> },

    #[error("combination count {count} exceeds cap {cap}; raise the cap explicitly to proceed")]
    CombinationCap { count: u128, cap: u128 },

    #[error("{dropped} of {total} just-identified combinations had a rank-deficient first stage (more than half)")]
    TooManyDegenerate { dropped: usize, total: usize },

    #[error("the confidence interval method requires a single endogenous regressor (P = 1), got P = {0}")]
    CimMultipleRegressors(usize),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}
