use thiserror::Error;

/// Errors shared across the tensor engine, model code, and I/O paths.
#[derive(Debug, Error)]
pub enum FamError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}{}", match at { Some(i) => format!(" at step {i}"), None => String::new() })]
    NonFinite { op: &'static str, at: Option<usize> },

    #[error("invalid argument for {op}: {detail}")]
    Invalid { op: &'static str, detail: String },

    #[error("backward already ran on this tape; build a fresh tape or call reset")]
    BackwardTwice,

    #[error("function passed to gradcheck is not deterministic: two forward passes differ")]
    NonDeterministic,

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint incompatible: {0}")]
    Incompatible(String),

    #[error("training diverged: loss non-finite at epoch {epoch} (phase {phase})")]
    Diverged { epoch: usize, phase: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, FamError>;

impl FamError {
    /// Process exit code taxonomy used by the command-line front end:
    /// 0 ok, 2 config, 3 data, 4 numeric, 5 incompatibility, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            FamError::Config(_) | FamError::Invalid { .. } => 2,
            FamError::Data(_) | FamError::Io(_) | FamError::Image(_) => 3,
            FamError::NonFinite { .. } | FamError::Diverged { .. } | FamError::NonDeterministic => 4,
            FamError::Incompatible(_) => 5,
            _ => 1,
        }
    }
}
