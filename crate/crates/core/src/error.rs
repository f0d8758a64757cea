//! Error type shared by the core operations.

use alloc::string::String;

/// Errors produced by core operations.
///
/// Invariant checking is deliberately *not* routed through this type:
/// [`crate::domain::Validate`] returns a report instead, so callers can
/// inspect every violation at once.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Two arrays that must agree on shape do not.
    #[error("shape mismatch: {left:?} vs {right:?} ({context})")]
    ShapeMismatch {
        left: (usize, usize),
        right: (usize, usize),
        context: &'static str,
    },

    /// A buffer length does not match the declared grid shape.
    #[error("buffer of length {len} cannot form a {h}x{w} grid")]
    BadLength { h: usize, w: usize, len: usize },

    /// A scalar argument is outside its admissible range.
    #[error("invalid argument `{name}`: {message}")]
    InvalidArgument { name: &'static str, message: String },

    /// A diffusion timestep outside `[0, num_steps)`.
    #[error("timestep {t} out of range (schedule has {num_steps} steps)")]
    TimestepOutOfRange { t: usize, num_steps: usize },

    /// An annotation-driven operation received an empty mask.
    #[error("no annotation: mask has no foreground pixels")]
    NoAnnotation,

    /// Surface distance is undefined because a mask has no boundary.
    #[error("undefined surface distance: {which} mask is empty")]
    UndefinedSurface { which: &'static str },

    /// A numeric input was NaN or infinite where finiteness is required.
    #[error("non-finite value encountered in {context}")]
    NonFinite { context: &'static str },

    /// A selection grid is missing entries.
    #[error("incomplete generation grid: {message}")]
    IncompleteGrid { message: String },
}

impl Error {
    pub(crate) fn invalid(name: &'static str, message: impl Into<String>) -> Self {
        Error::InvalidArgument {
            name,
            message: message.into(),
        }
    }
}
