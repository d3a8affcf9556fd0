use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the numeric core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("channel mismatch: expected {expected}, found {found}")]
    ChannelMismatch { expected: usize, found: usize },

    #[error("invalid {name}: {reason}")]
    InvalidArgument { name: &'static str, reason: String },

    #[error("patch {patch:?} does not fit image {image:?}")]
    PatchTooLarge {
        patch: (usize, usize),
        image: (usize, usize),
    },

    #[error("label must be 0 or 1, got {0}")]
    InvalidLabel(u8),

    #[error("training set must contain both classes")]
    SingleClass,

    #[error("{0} is empty")]
    Empty(&'static str),

    #[error("non-finite loss at epoch {epoch}, batch {batch}: {value}")]
    NonFiniteLoss { epoch: usize, batch: usize, value: f64 },

    #[error("no class-1 feature patches (b = 0); p1 is unconstrained and p0 only bounded by 1/2")]
    NoClassOneFeatures,

    #[error("recall undefined: mask has no positive pixels; exclude image")]
    RecallUndefined,

    #[error("AUROC undefined: mask is single-class; exclude image")]
    AurocUndefined,

    #[error("value {value} outside [0, 1] in {what}")]
    OutOfRange { what: &'static str, value: f64 },
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidArgument {
        name,
        reason: reason.into(),
    }
}
