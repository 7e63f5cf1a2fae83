//! JSON-lines record files and the byte-string text encoding they use.
//!
//! Corpora, fingerprint datasets, and training logs are JSON-lines files.
//! Byte strings (prompts, completions, triggers, responses) are stored as
//! JSON strings under a one-char-per-byte convention: byte `b` maps to the
//! code point `U+00{b}`. Every file stays valid UTF-8 — bytes outside ASCII
//! appear as escape sequences — and the mapping is lossless in both
//! directions. Strings containing code points above `U+00FF` are rejected
//! on read.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

/// Encode raw bytes as a JSON-safe string (byte `b` -> `U+00{b}`).
pub fn bytes_to_text(bytes: &[u8]) -> String {
    bytes.iter().map(|&b| b as char).collect()
}

/// Decode a string produced by [`bytes_to_text`] back into raw bytes.
pub fn text_to_bytes(text: &str) -> Result<Vec<u8>> {
    text.chars()
        .map(|c| {
            u8::try_from(c as u32).map_err(|_| {
                Error::Parse(format!(
                    "byte-string field contains code point U+{:04X} above U+00FF",
                    c as u32
                ))
            })
        })
        .collect()
}

/// Read one record per line, skipping blank lines.
pub fn read_records<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path)?;
    let mut records = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| {
            Error::Parse(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        records.push(record);
    }
    Ok(records)
}

/// Write one record per line.
pub fn write_records<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let file = File::create(path)?;
    let mut out = BufWriter::new(file);
    for record in records {
        serde_json::to_writer(&mut out, record)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}
