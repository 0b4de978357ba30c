use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("{field}: {message}")]
    Invalid {
        field: &'static str,
        message: String,
    },
    #[error("step {step} outside 1..={steps}")]
    StepOutOfRange { step: usize, steps: usize },
    #[error(transparent)]
    Core(#[from] ttamon_core::Error),
}

impl SimError {
    pub(crate) fn invalid(field: &'static str, message: impl Into<String>) -> Self {
        SimError::Invalid {
            field,
            message: message.into(),
        }
    }
}
