//! On-disk formats.
//!
//! Binary artifacts (clouds, masks, motion fields, category maps) are
//! little-endian with 32-bit floats; everything else is line-oriented text
//! whose numbers use Rust's shortest round-trip formatting, so reading a text
//! file back reproduces the in-memory `f64` exactly.
//!
//! | file | magic | payload |
//! |------|-------|---------|
//! | cloud | `BMLPC1` | flags u8 (bit 0 labels, bit 1 gt), 0u8, count u64, xyz f32 x count, labels u8 x count, gt f32 x 3 x count |
//! | mask | `BMLMK1` | 0u8 0u8, count u64, one byte 0/1 per point |
//! | field | `BMLMF1` | 0u8 0u8, h u32, w u32, horizon f32, (dx, dy) f32 per cell |
//! | category map | `BMLCM1` | 0u8 0u8, h u32, w u32, (fg, bg) f32 per cell |
//!
//! Label bytes: 0 background, 1 foreground, 255 unlabeled. Cells are
//! row-major with `i` over x and `j` over y.

mod binary;
mod config;
mod records;
mod text;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use binary::{
    decode_category_map, decode_cloud, decode_field, decode_mask, encode_category_map,
    encode_cloud, encode_field, encode_mask, read_category_map, read_cloud, read_field, read_mask,
    write_category_map, write_cloud, write_field, write_mask,
};
pub use config::{parse_config, parse_config_str, OutlierConfig, RunConfig, WeakLabelConfig};
pub use records::{format_f64, read_records, write_records, Record};
pub use text::{
    decode_model, decode_sequence, encode_model, encode_sequence, read_model, read_sequence,
    write_model, write_sequence,
};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Fs {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic at byte offset {offset}: expected {expected:?}")]
    BadMagic {
        offset: usize,
        expected: &'static str,
    },
    #[error("truncated payload: need {needed} bytes, file ends at byte offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("count mismatch: header declares {declared} entries but {trailing} bytes follow the payload at byte offset {offset}")]
    CountMismatch {
        declared: usize,
        offset: usize,
        trailing: usize,
    },
    #[error("invalid value at byte offset {offset}: {msg}")]
    InvalidByte { offset: usize, msg: String },
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: bad value for {key}: {msg}")]
    BadValue {
        line: usize,
        key: String,
        msg: String,
    },
    #[error("invalid {section} config: {msg}")]
    Validation { section: &'static str, msg: String },
    #[error("{0}")]
    Content(String),
}

impl IoError {
    /// True for errors caused by configuration content rather than data files.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            IoError::UnknownKey { .. } | IoError::BadValue { .. } | IoError::Validation { .. }
        )
    }
}

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>, IoError> {
    std::fs::read(path).map_err(|source| IoError::Fs {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    std::fs::write(path, bytes).map_err(|source| IoError::Fs {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn read_text(path: &Path) -> Result<String, IoError> {
    std::fs::read_to_string(path).map_err(|source| IoError::Fs {
        path: path.to_path_buf(),
        source,
    })
}
