use thiserror::Error;

/// Errors raised anywhere in the selection pipeline.
#[derive(Debug, Error)]
pub enum SurfError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid response: {0}")]
    InvalidResponse(String),

    #[error("degenerate response: {0}")]
    DegenerateResponse(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("stratum too small: {0}")]
    StratumTooSmall(String),

    #[error("inconsistent taxonomy rank counts for OTUs: {}", .0.join(", "))]
    InconsistentRanks(Vec<String>),

    #[error("taxonomy error: {0}")]
    Taxonomy(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("target SNR {target} unattainable; maximum attainable is {max_attainable}")]
    UnattainableSnr { target: f64, max_attainable: f64 },

    #[error("too many failures: {0}")]
    TooManyFailures(String),

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<SurfError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("config file: {0}")]
    Config(String),
}

impl SurfError {
    /// Wraps an error with the pipeline stage it came from.
    pub fn at_stage(self, stage: &'static str) -> SurfError {
        SurfError::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// True for errors caused by bad user input rather than numerical trouble.
    pub fn is_input_error(&self) -> bool {
        match self {
            SurfError::Stage { source, .. } => source.is_input_error(),
            SurfError::Numerical(_)
            | SurfError::UnattainableSnr { .. }
            | SurfError::TooManyFailures(_)
            | SurfError::DegenerateResponse(_) => false,
            _ => true,
        }
    }
}

pub type Result<T> = std::result::Result<T, SurfError>;
