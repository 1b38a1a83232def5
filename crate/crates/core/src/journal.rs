//! Append-only JSONL journals. Each append is flushed and fsynced before it
//! returns, so an acknowledged entry survives a crash.

use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum JournalError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("journal {path}: line {line}: {source}")]
    Corrupt { path: String, line: usize, source: serde_json::Error },
}

pub fn append<T: Serialize>(path: &Path, entry: &T) -> Result<(), JournalError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut line = serde_json::to_vec(entry).map_err(io::Error::other)?;
    line.push(b'\n');
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(&line)?;
    f.sync_data()?;
    Ok(())
}

/// Reads every entry. A final line without its newline is a torn write and
/// is dropped; a malformed line anywhere else is an error. A missing file
/// reads as empty.
pub fn read<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, JournalError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let mut reader = BufReader::new(file);
    let mut out = Vec::new();
    let mut buf = String::new();
    let mut line_no = 0;
    loop {
        buf.clear();
        if reader.read_line(&mut buf)? == 0 {
            break;
        }
        line_no += 1;
        let complete = buf.ends_with('\n');
        let text = buf.trim();
        if text.is_empty() {
            continue;
        }
        match serde_json::from_str(text) {
            Ok(v) => out.push(v),
            Err(_) if !complete => {
                tracing::warn!(path = %path.display(), "dropping torn final journal line");
                break;
            }
            Err(source) => return Err(JournalError::Corrupt { path: path.display().to_string(), line: line_no, source }),
        }
    }
    Ok(out)
}
