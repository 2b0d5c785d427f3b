use thiserror::Error;

/// Errors raised while building models or integrating a scenario.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid topology: {0}")]
    Topology(String),

    #[error("matrix `{name}` is not symmetric positive definite: {detail}")]
    NotPositiveDefinite { name: String, detail: String },

    #[error("invalid parameter `{name}`: {detail}")]
    Parameter { name: String, detail: String },

    #[error("RBF grid with {requested} neurons exceeds the memory cap of {cap}")]
    GridTooLarge { requested: u128, cap: usize },

    #[error("plant `{0}` needs the reference acceleration to evaluate its forces")]
    MissingReferenceAcceleration(String),

    #[error("window [{start}, {end}] has too few samples")]
    EmptyWindow { start: f64, end: f64 },

    #[error("non-finite value in {component} at t = {t}")]
    NonFinite { component: String, t: f64 },

    #[error("run log: {0}")]
    Log(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::Dimension {
            context,
            expected,
            actual,
        })
    }
}
