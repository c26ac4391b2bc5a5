use scatterfield_core::features::FeatureError;
use scatterfield_core::image::ImageError;
use scatterfield_core::predictor::PredictorError;
use scatterfield_core::rte::RteError;
use scatterfield_core::template::TemplateError;
use scatterfield_core::volume::GridError;
use std::io;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("provenance mismatch: {0}")]
    Provenance(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("workspace {0} is locked by another command")]
    Locked(String),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

impl CliError {
    /// Process exit status for this failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Provenance(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Locked(_) | CliError::Io(_) => 1,
        }
    }
}

impl From<GridError> for CliError {
    fn from(e: GridError) -> Self {
        match e {
            GridError::Io(e) => CliError::Io(e),
            e => CliError::Validation(e.to_string()),
        }
    }
}

impl From<TemplateError> for CliError {
    fn from(e: TemplateError) -> Self {
        match e {
            TemplateError::Io(e) => CliError::Io(e),
            e => CliError::Validation(e.to_string()),
        }
    }
}

impl From<FeatureError> for CliError {
    fn from(e: FeatureError) -> Self {
        match e {
            FeatureError::Io(e) => CliError::Io(e),
            e => CliError::Validation(e.to_string()),
        }
    }
}

impl From<RteError> for CliError {
    fn from(e: RteError) -> Self {
        match e {
            RteError::Io(e) => CliError::Io(e),
            e => CliError::Validation(e.to_string()),
        }
    }
}

impl From<PredictorError> for CliError {
    fn from(e: PredictorError) -> Self {
        match e {
            PredictorError::Io(e) => CliError::Io(e),
            PredictorError::Diverged { .. } => CliError::Numeric(e.to_string()),
            PredictorError::Architecture { .. } => CliError::Provenance(e.to_string()),
            PredictorError::Feature(e) => e.into(),
            PredictorError::Rte(e) => e.into(),
            e => CliError::Validation(e.to_string()),
        }
    }
}

impl From<ImageError> for CliError {
    fn from(e: ImageError) -> Self {
        match e {
            ImageError::Io(e) => CliError::Io(e),
            e => CliError::Validation(e.to_string()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Validation("x".into()).exit_code(), 2);
        assert_eq!(CliError::Provenance("x".into()).exit_code(), 3);
        assert_eq!(CliError::Numeric("x".into()).exit_code(), 4);
        let diverged = PredictorError::Diverged {
            step: 3,
            detail: "nan".into(),
        };
        assert_eq!(CliError::from(diverged).exit_code(), 4);
        assert_eq!(
            CliError::from(GridError::NonPowerOfTwo([3; 3])).exit_code(),
            2
        );
    }
}
