use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("invalid geometry: patch {patch_height}x{patch_width} does not fit image {height}x{width}")]
    InvalidGeometry {
        patch_height: usize,
        patch_width: usize,
        height: usize,
        width: usize,
    },

    #[error("patches do not tile the image: {0}")]
    Tiling(String),

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("unsupported bit width {0}")]
    BitWidth(u8),

    #[error("invalid group count {groups} for {patches} patches")]
    InvalidGroupCount { groups: usize, patches: usize },

    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error("feature network: {0}")]
    FeatureSpec(String),

    #[error("refinement diverged on image {image}")]
    Divergence { image: usize },

    #[error("symbol {symbol} out of range for alphabet of {alphabet}")]
    SymbolRange { symbol: u32, alphabet: usize },

    #[error("corrupt data: {0}")]
    Corrupt(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated input: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u16, expected: u16 },

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("budget of {budget_bits} bits is infeasible: smallest encoding needs {required_bits} bits ({} over)", required_bits - budget_bits)]
    InfeasibleBudget { budget_bits: u64, required_bits: u64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl Error {
    /// True for errors caused by damaged or malformed encoded data.
    pub fn is_corruption(&self) -> bool {
        matches!(
            self,
            Error::Corrupt(_)
                | Error::Format(_)
                | Error::Truncated { .. }
                | Error::Version { .. }
                | Error::Checksum { .. }
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
