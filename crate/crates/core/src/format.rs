//! Error type shared by the on-disk format readers and writers.

use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("row {row}: {message}")]
    Row { row: usize, message: String },
    #[error("{0}")]
    Invalid(String),
}

impl FormatError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Self::Invalid(msg.into())
    }

    pub fn line(line: usize, msg: impl Into<String>) -> Self {
        Self::Line {
            line,
            message: msg.into(),
        }
    }

    pub fn row(row: usize, msg: impl Into<String>) -> Self {
        Self::Row {
            row,
            message: msg.into(),
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>, FormatError> {
    std::fs::read(path).map_err(|e| FormatError::io(path, e))
}

pub fn read_string(path: &Path) -> Result<String, FormatError> {
    std::fs::read_to_string(path).map_err(|e| FormatError::io(path, e))
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), FormatError> {
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = parent {
        std::fs::create_dir_all(dir).map_err(|e| FormatError::io(dir, e))?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| FormatError::invalid(format!("{} has no file name", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    std::fs::write(&tmp, bytes).map_err(|e| FormatError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| FormatError::io(path, e))
}

/// Parses a comma-separated list of `expected` floats.
pub(crate) fn parse_floats(
    line: &str,
    expected: usize,
    row: usize,
) -> Result<Vec<f64>, FormatError> {
    let vals: Vec<f64> = line
        .split(',')
        .map(|t| {
            t.trim().parse::<f64>().map_err(|_| {
                FormatError::row(row, format!("cannot parse {:?} as a number", t.trim()))
            })
        })
        .collect::<Result<_, _>>()?;
    if vals.len() != expected {
        return Err(FormatError::row(
            row,
            format!("expected {expected} columns, found {}", vals.len()),
        ));
    }
    Ok(vals)
}

/// Little-endian cursor over a byte slice.
pub(crate) struct LeReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> LeReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| FormatError::invalid(format!("truncated input at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64, FormatError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}
