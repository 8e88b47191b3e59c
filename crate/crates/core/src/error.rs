use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = SosError> = std::result::Result<T, E>;

/// Every failure a fit, a data load, or a CLI command can report.
#[derive(Debug, Error)]
pub enum SosError {
    #[error("class {0} has no members")]
    EmptyClass(usize),

    #[error("label {label} outside 1..={classes}")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value encountered in {0}")]
    NonFiniteEncountered(&'static str),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid generator spec: {0}")]
    SpecInvalid(String),

    #[error("scoring update produced no usable direction (w'Dw = {0:e})")]
    DegenerateDirection(f64),

    #[error("iteration cap of {iterations} reached before convergence")]
    MaxIterExceeded { iterations: usize },

    #[error("fit stopped after {iterations} outer iterations without converging")]
    NotConverged { iterations: usize },

    #[error("Gram-Schmidt collapsed after {0} resamples")]
    RankCollapse(usize),

    #[error("factorization failed: {0}")]
    FactorizationFailure(&'static str),

    #[error("ridge solution is identically zero; any lambda is admissible")]
    ZeroBeta,

    #[error("{path}:{line}: expected {expected} fields, found {found}")]
    RaggedRows {
        path: PathBuf,
        line: usize,
        expected: usize,
        found: usize,
    },

    #[error("{path}:{line}: field {col} is not numeric: {field:?}")]
    NonNumericField {
        path: PathBuf,
        line: usize,
        col: usize,
        field: String,
    },

    #[error("label {0:?} does not occur in the training label map")]
    UnknownLabel(String),

    #[error("class {class} has {count} members, fewer than {folds} folds")]
    TooFewSamples {
        class: usize,
        count: usize,
        folds: usize,
    },

    #[error("every cross-validation cell failed")]
    AllCellsFailed,

    #[error("malformed model file: {0}")]
    ModelFormat(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl SosError {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        SosError::Io {
            context: context.into(),
            source,
        }
    }

    /// True for errors caused by the input data rather than by the numerics.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            SosError::EmptyClass(_)
                | SosError::LabelOutOfRange { .. }
                | SosError::ShapeMismatch(_)
                | SosError::InvalidInput(_)
                | SosError::SpecInvalid(_)
                | SosError::RaggedRows { .. }
                | SosError::NonNumericField { .. }
                | SosError::UnknownLabel(_)
                | SosError::TooFewSamples { .. }
                | SosError::ModelFormat(_)
                | SosError::Io { .. }
        )
    }
}
