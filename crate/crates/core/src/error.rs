use std::fmt;

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes do not conform.
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A precondition of an operation was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A value outside the mathematical domain of an operation.
    #[error("{op}: domain error ({detail})")]
    Domain { op: &'static str, detail: String },

    /// Non-finite values appeared while training.
    #[error("training fault in {component}{}: {detail}", StepSuffix(*.step))]
    TrainingFault {
        component: String,
        step: Option<u64>,
        detail: String,
    },

    /// A metric tensor is too close to singular for the requested quantity.
    #[error("degenerate metric: {0}")]
    DegenerateMetric(String),

    /// The geodesic graph is not connected, or a query cannot be routed.
    #[error("graph connectivity: {detail} ({components} components)")]
    GraphConnectivity { components: usize, detail: String },

    /// An operation defined only for a particular latent dimension.
    #[error("unsupported latent dimension {found} (expected {expected})")]
    UnsupportedDimension { expected: usize, found: usize },

    /// Malformed input file.
    #[error("format error at {location}: {detail}")]
    Format { location: String, detail: String },

    /// Invalid configuration value or key.
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

struct StepSuffix(Option<u64>);

impl fmt::Display for StepSuffix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Some(step) => write!(f, " at step {step}"),
            None => Ok(()),
        }
    }
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn format_at_offset(offset: u64, detail: impl Into<String>) -> Self {
        Error::Format {
            location: format!("byte offset {offset}"),
            detail: detail.into(),
        }
    }

    pub(crate) fn format_at_line(line: u64, detail: impl Into<String>) -> Self {
        Error::Format {
            location: format!("line {line}"),
            detail: detail.into(),
        }
    }

    /// Attach a step index to a training fault; other errors pass through.
    pub fn at_step(self, t: u64) -> Self {
        match self {
            Error::TrainingFault {
                component, detail, ..
            } => Error::TrainingFault {
                component,
                step: Some(t),
                detail,
            },
            other => other,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
