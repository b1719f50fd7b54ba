//! Versioned headers shared by every file the toolkit reads or writes.
//!
//! Line-oriented files start with a JSON header line of the form
//! `{"format":"tgraph-corpus","version":1}`; binary checkpoints start with
//! an 8-byte magic followed by a little-endian `u32` version.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CORPUS_FORMAT: &str = "tgraph-corpus";
pub const WINDOWS_FORMAT: &str = "tgraph-windows";
pub const PREDICTIONS_FORMAT: &str = "tgraph-predictions";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: expected `{expected}` v{version} header, found {found}")]
    Header {
        path: PathBuf,
        expected: &'static str,
        version: u32,
        found: String,
    },
}

impl FormatError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        FormatError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format: String,
    pub version: u32,
}

impl Header {
    pub fn new(format: &str) -> Self {
        Header {
            format: format.to_string(),
            version: FORMAT_VERSION,
        }
    }
}

/// Writes a header line followed by one compact JSON record per line.
pub fn write_records<'a, T, I>(path: &Path, format: &str, records: I) -> Result<(), FormatError>
where
    T: Serialize + 'a,
    I: IntoIterator<Item = &'a T>,
{
    let file = File::create(path).map_err(|e| FormatError::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_records_to(&mut out, format, records).map_err(|e| FormatError::io(path, e))?;
    out.flush().map_err(|e| FormatError::io(path, e))
}

pub fn write_records_to<'a, T, I, W>(out: &mut W, format: &str, records: I) -> std::io::Result<()>
where
    T: Serialize + 'a,
    I: IntoIterator<Item = &'a T>,
    W: Write,
{
    serde_json::to_writer(&mut *out, &Header::new(format))?;
    out.write_all(b"\n")?;
    for r in records {
        serde_json::to_writer(&mut *out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads a header-prefixed record file, returning each record with its
/// 1-based line number. Blank lines are skipped.
pub fn read_records<T: DeserializeOwned>(
    path: &Path,
    format: &'static str,
) -> Result<Vec<(usize, T)>, FormatError> {
    let file = File::open(path).map_err(|e| FormatError::io(path, e))?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    let mut saw_header = false;
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| FormatError::io(path, e))?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        if !saw_header {
            let header: Result<Header, _> = serde_json::from_str(&line);
            match header {
                Ok(h) if h.format == format && h.version == FORMAT_VERSION => {
                    saw_header = true;
                    continue;
                }
                _ => {
                    return Err(FormatError::Header {
                        path: path.to_path_buf(),
                        expected: format,
                        version: FORMAT_VERSION,
                        found: truncate(&line, 80),
                    })
                }
            }
        }
        let record = serde_json::from_str(&line).map_err(|e| FormatError::Parse {
            path: path.to_path_buf(),
            line: lineno,
            message: e.to_string(),
        })?;
        records.push((lineno, record));
    }
    if !saw_header {
        return Err(FormatError::Header {
            path: path.to_path_buf(),
            expected: format,
            version: FORMAT_VERSION,
            found: "empty file".to_string(),
        });
    }
    Ok(records)
}

fn truncate(s: &str, max: usize) -> String {
    if s.chars().count() <= max {
        s.to_string()
    } else {
        let mut t: String = s.chars().take(max).collect();
        t.push_str("...");
        t
    }
}
