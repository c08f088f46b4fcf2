use dualflow_core::Error as CoreError;

/// Failures the CLI reports with a dedicated exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
}

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

fn core_code(e: &CoreError) -> i32 {
    match e {
        CoreError::Config(_) | CoreError::OddEmbedding { .. } | CoreError::TraceDimension { .. } => {
            EXIT_CONFIG
        }
        CoreError::Shape { .. }
        | CoreError::BadLength { .. }
        | CoreError::EmptySeries
        | CoreError::LabelLength { .. }
        | CoreError::DegenerateLabels
        | CoreError::NotScalar { .. } => EXIT_DATA,
        CoreError::NonFinite { .. }
        | CoreError::NonFiniteLoss { .. }
        | CoreError::FieldNotFinite { .. }
        | CoreError::MaxStepsExceeded { .. }
        | CoreError::DegenerateSigma { .. }
        | CoreError::TimeOutOfRange { .. } => EXIT_NUMERICAL,
        _ => 1,
    }
}

/// Maps an error chain to the process exit code: 2 config, 3 data,
/// 4 numerical, 1 anything else.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CliError>() {
            return match e {
                CliError::Config(_) => EXIT_CONFIG,
                CliError::Data(_) => EXIT_DATA,
            };
        }
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            return core_code(e);
        }
        if cause.downcast_ref::<std::io::Error>().is_some()
            || cause.downcast_ref::<serde_json::Error>().is_some()
            || cause.downcast_ref::<csv::Error>().is_some()
        {
            return EXIT_DATA;
        }
    }
    1
}
