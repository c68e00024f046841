use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("backward called on a tape with no recorded forward pass")]
    EmptyTape,

    #[error("loss node must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("layer `{layer}` cannot be applied: {detail}")]
    Layer { layer: String, detail: String },

    #[error("bad magic in trial container")]
    BadMagic,

    #[error("unsupported trial container version {0}")]
    UnsupportedVersion(u16),

    #[error("container label {label} out of range for {classes} classes")]
    ContainerLabel { label: i64, classes: usize },

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("{file}: {detail}")]
    Csv { file: String, detail: String },

    #[error("unknown session tag {0}")]
    UnknownSession(u16),

    #[error("class {0} has no trials in the labeled source set")]
    MissingClass(usize),

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
