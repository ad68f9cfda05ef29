//! Crate-wide error type.

use thiserror::Error;

/// Everything that can go wrong when building, running, or (de)serializing a
/// model. Archive errors get their own variants so callers can distinguish a
/// checksum failure from a structural one.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A configuration violates one of its invariants.
    #[error("configuration error: {0}")]
    Config(String),

    /// A VJP was requested from an op whose forward has not run.
    #[error("vjp requested before forward")]
    VjpBeforeForward,

    /// A class label outside `[0, classes)`.
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    /// A value became NaN or infinite where finite math was expected.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Archive does not start with the expected magic bytes.
    #[error("bad archive magic")]
    BadMagic,

    /// Archive version this build does not understand.
    #[error("unsupported archive version {0}")]
    BadVersion(u32),

    /// Stored CRC-32 does not match the recomputed one.
    #[error("archive crc mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },

    /// Archive is truncated or structurally invalid.
    #[error("malformed archive: {0}")]
    Malformed(String),

    /// Archive record dtype differs from the requested model dtype.
    #[error("dtype mismatch: archive holds {got}, requested {want}")]
    DtypeMismatch { got: String, want: String },

    /// Archive carries a tensor the model does not know about.
    #[error("unknown tensor name: {0}")]
    UnknownTensor(String),

    /// Model expects a tensor the archive does not carry.
    #[error("missing tensor: {0}")]
    MissingTensor(String),

    /// Archive tensor shape differs from what the config implies.
    #[error("tensor {name}: shape mismatch (archive {got:?}, model {want:?})")]
    TensorShape {
        name: String,
        got: Vec<usize>,
        want: Vec<usize>,
    },

    /// The embedded config blob failed to parse or round-trip.
    #[error("config blob: {0}")]
    ConfigBlob(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
