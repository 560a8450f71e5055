use thiserror::Error;

/// Errors produced by the splitting, compression and IO layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid index: {0}")]
    Index(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("calibration is empty: no tokens have been accumulated")]
    EmptyCalibration,

    #[error("degenerate ablation: fraction {frac} of {d_ff} neurons removes nothing")]
    DegenerateAblation { frac: f64, d_ff: usize },

    #[error("nothing to compress: the split has an empty tail")]
    NothingToCompress,

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("measurement error: {0}")]
    Measurement(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
