use thiserror::Error;

pub type Result<T, E = QtError> = std::result::Result<T, E>;

/// Errors raised across the laboratory.
#[derive(Debug, Error)]
pub enum QtError {
    /// Shapes that do not line up (matmul inner dims, label/logit shapes, ...).
    #[error("dimension error: {0}")]
    Dimension(String),

    /// An argument outside its mathematical domain (empty tensor, p outside [0,1], ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Input data that cannot be used (non-finite values, empty datasets, bad payloads).
    #[error("data error: {0}")]
    Data(String),

    /// Inconsistent configuration (missing quant spec, unknown weight name, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Statistics that collapse to a zero range and cannot define a quantizer.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Zero spread at an observer site, so the outlier term is undefined.
    #[error("degenerate activation at site `{site}`: standard deviation is zero")]
    DegenerateActivation { site: String },

    /// Operation invoked on an object in the wrong state (e.g. uncalibrated model).
    #[error("state error: {0}")]
    State(String),

    /// Training produced a non-finite loss. Carries the last finite checkpoint.
    #[error("training diverged at step {step}")]
    Diverged {
        step: usize,
        last_good: Box<crate::checkpoint::ModelCheckpoint>,
    },

    /// A pipeline stage failed; `stage` names it.
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<QtError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl QtError {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        QtError::Dimension(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        QtError::Domain(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        QtError::Data(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        QtError::Config(msg.into())
    }

    /// Wrap an error with the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        QtError::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
