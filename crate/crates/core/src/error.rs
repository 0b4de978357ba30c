use alloc::string::String;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A probability vector left the simplex.
    InvalidProbVector(&'static str),
    LabelOutOfRange {
        label: usize,
        classes: usize,
    },
    EmptyInput(&'static str),
    DimensionMismatch {
        expected: usize,
        found: usize,
    },
    /// An observation fell outside the declared loss range `[0, bound]`.
    OutOfRange {
        value: f64,
        bound: f64,
    },
    InvalidParameter {
        name: &'static str,
        value: f64,
    },
    /// An operation was called in a state that does not allow it.
    State(&'static str),
    DegenerateCalibration(String),
    /// Every alarm fed by this path has already fired.
    MonitorStopped,
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidProbVector(why) => write!(f, "invalid probability vector: {why}"),
            Error::LabelOutOfRange { label, classes } => {
                write!(f, "label {label} out of range for {classes} classes")
            }
            Error::EmptyInput(what) => write!(f, "empty input: {what}"),
            Error::DimensionMismatch { expected, found } => {
                write!(f, "dimension mismatch: expected {expected}, found {found}")
            }
            Error::OutOfRange { value, bound } => {
                write!(f, "observation {value} outside [0, {bound}]")
            }
            Error::InvalidParameter { name, value } => write!(f, "invalid {name}: {value}"),
            Error::State(why) => write!(f, "invalid state: {why}"),
            Error::DegenerateCalibration(msg) => write!(f, "degenerate calibration: {msg}"),
            Error::MonitorStopped => f.write_str("monitor stopped: alarm already latched"),
        }
    }
}

impl core::error::Error for Error {}
