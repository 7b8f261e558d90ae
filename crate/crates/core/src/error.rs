use thiserror::Error;

/// Errors raised anywhere in the learning pipeline.
#[derive(Debug, Error)]
pub enum OcnError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("mode error: {0}")]
    Mode(String),

    #[error("numeric input error: {0}")]
    NumericInput(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    /// The step controller gave up (step budget exhausted or step below `h_min`).
    #[error("solver diverged at t = {t}: {reason}")]
    Divergence { t: f64, reason: String },

    /// The integrated state became non-finite.
    #[error("solution blew up at t = {t}")]
    BlowUp { t: f64 },

    /// A failure inside a particular trajectory/batch of a dataset sweep.
    #[error("trajectory {trajectory}, batch {batch}: {source}")]
    InBatch {
        trajectory: usize,
        batch: usize,
        #[source]
        source: Box<OcnError>,
    },

    /// A failure while generating one trajectory of a dataset.
    #[error("generating trajectory {trajectory}: {source}")]
    Generation {
        trajectory: usize,
        #[source]
        source: Box<OcnError>,
    },

    /// A failure while integrating one side of a comparison.
    #[error("integrating {side} dynamics: {source}")]
    Evaluation {
        side: &'static str,
        #[source]
        source: Box<OcnError>,
    },

    /// A failure during a given training iteration.
    #[error("iteration {iteration}: {source}")]
    AtIteration {
        iteration: usize,
        #[source]
        source: Box<OcnError>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl OcnError {
    /// True for errors caused by bad configuration or inputs rather than numerics.
    pub fn is_config(&self) -> bool {
        match self {
            OcnError::Config(_)
            | OcnError::Mode(_)
            | OcnError::Unsupported(_)
            | OcnError::Json(_)
            | OcnError::Csv(_)
            | OcnError::Io(_) => true,
            OcnError::InBatch { source, .. }
            | OcnError::AtIteration { source, .. }
            | OcnError::Generation { source, .. }
            | OcnError::Evaluation { source, .. } => source.is_config(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, OcnError>;

pub(crate) fn config<T>(msg: impl Into<String>) -> Result<T> {
    Err(OcnError::Config(msg.into()))
}
