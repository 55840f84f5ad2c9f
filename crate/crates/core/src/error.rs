use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: non-finite value")]
    NumericFault { op: &'static str },

    #[error("backward: {0}")]
    Backward(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("bad magic bytes {found:?} (expected {expected:?})")]
    Magic { found: [u8; 4], expected: [u8; 4] },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// True for malformed files and inputs (as opposed to numeric faults or
    /// configuration mistakes).
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Format(_) | Error::Version { .. } | Error::Magic { .. } | Error::Io(_)
        )
    }

    pub fn is_numeric_fault(&self) -> bool {
        matches!(self, Error::NumericFault { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
