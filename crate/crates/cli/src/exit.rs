//! Exit codes and the single-line error report.

use std::fmt;
use std::process::ExitCode;

use iprior_core::Error;

/// Stable process exit codes. Usage errors from argument parsing exit with 2.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Code {
    Config = 3,
    Schema = 4,
    Data = 5,
    DataMismatch = 6,
    Fit = 7,
    Io = 8,
    Model = 9,
}

impl Code {
    pub fn name(self) -> &'static str {
        match self {
            Code::Config => "CONFIG_ERROR",
            Code::Schema => "SCHEMA_ERROR",
            Code::Data => "DATA_ERROR",
            Code::DataMismatch => "DATA_MISMATCH",
            Code::Fit => "FIT_ERROR",
            Code::Io => "IO_ERROR",
            Code::Model => "MODEL_ERROR",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub code: Code,
    pub message: String,
}

impl CliError {
    pub fn new(code: Code, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(self.code as u8)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // Keep the report on one line whatever the underlying message holds.
        let msg = self.message.split_whitespace().collect::<Vec<_>>().join(" ");
        write!(f, "{}: {msg}", self.code.name())
    }
}

/// What the command was doing when a core error surfaced; the same error
/// means different things at different stages.
#[derive(Clone, Copy, Debug)]
pub enum Stage {
    /// Reading the training data named by a config.
    TrainData,
    /// Reading new points for an existing model.
    PredictData,
    Fit,
    Write,
}

pub fn classify(stage: Stage, err: Error) -> CliError {
    let code = match (&err, stage) {
        (Error::Config(_), _) => Code::Config,
        (Error::Io(_), Stage::TrainData | Stage::PredictData) => Code::Io,
        (Error::Io(_) | Error::Csv(_) | Error::Json(_), Stage::Write) => Code::Io,
        (Error::MissingColumn(_), Stage::TrainData) => Code::Config,
        (Error::MissingColumn(_) | Error::NonNumeric { .. } | Error::Dimension(_), Stage::PredictData) => {
            Code::Schema
        }
        (
            Error::NonNumeric { .. } | Error::RaggedRow { .. } | Error::GridNotAscending(_) | Error::InvalidData(_),
            _,
        ) => Code::Data,
        (Error::Csv(e), _) if e.is_io_error() => Code::Io,
        (Error::Csv(_), _) => Code::Data,
        (Error::Spec(_), Stage::TrainData) => Code::Config,
        _ => Code::Fit,
    };
    CliError::new(code, err.to_string())
}
