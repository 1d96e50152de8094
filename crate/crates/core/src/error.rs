use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("molecule has {atoms} atoms but capacity is {capacity}")]
    Capacity { atoms: usize, capacity: usize },

    #[error("atom `{0}` is not in the vocabulary")]
    Vocabulary(String),

    #[error("SMILES syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },

    #[error("unmatched ring closure {digit} opened at byte {offset}")]
    UnmatchedRing { digit: u8, offset: usize },

    #[error("unsupported SMILES feature at byte {offset}: {feature}")]
    Unsupported { offset: usize, feature: String },

    #[error("molecule is disconnected ({components} components)")]
    Disconnected { components: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("index {index} out of range for {len} atoms")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("singular matrix in {0} (|det| below threshold)")]
    Singular(String),

    #[error("non-finite value in {location}")]
    NonFinite { location: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }
}
