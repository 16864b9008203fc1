//! JSONL reading and writing: one JSON object per line, UTF-8, LF.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{JsonlError, ParseError};
use crate::model::{parse_record, serialize_record, Record};

/// Reads a whole JSONL file of typed records, attaching line numbers to
/// parse errors.
pub fn read_records<T: Record>(path: &Path) -> Result<Vec<T>, JsonlError> {
    let file = File::open(path).map_err(|source| JsonlError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| JsonlError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record = parse_record::<T>(&line).map_err(|e| JsonlError::Parse {
            path: path.to_path_buf(),
            source: e.at_line(i + 1),
        })?;
        records.push(record);
    }
    Ok(records)
}

/// Reads a JSONL file as loose JSON values.
pub fn read_values(path: &Path) -> Result<Vec<serde_json::Value>, JsonlError> {
    let file = File::open(path).map_err(|source| JsonlError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut values = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| JsonlError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| JsonlError::Parse {
            path: path.to_path_buf(),
            source: ParseError::MalformedJson {
                line: Some(i + 1),
                message: e.to_string(),
            },
        })?;
        values.push(value);
    }
    Ok(values)
}

/// Writes records to a fresh file.
pub fn write_records<T: Record>(path: &Path, records: &[T]) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut writer = BufWriter::new(File::create(path)?);
    for record in records {
        writeln!(writer, "{}", serialize_record(record))?;
    }
    writer.flush()
}

/// Line-oriented appender that can flush after every record, so a killed
/// process leaves a valid JSONL prefix behind.
pub struct JsonlWriter {
    path: PathBuf,
    writer: BufWriter<File>,
}

impl JsonlWriter {
    pub fn create(path: &Path) -> std::io::Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        Ok(JsonlWriter {
            path: path.to_path_buf(),
            writer: BufWriter::new(File::create(path)?),
        })
    }

    pub fn append(path: &Path) -> std::io::Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(JsonlWriter {
            path: path.to_path_buf(),
            writer: BufWriter::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn write<T: Record>(&mut self, record: &T) -> std::io::Result<()> {
        writeln!(self.writer, "{}", serialize_record(record))
    }

    pub fn write_value(&mut self, value: &serde_json::Value) -> std::io::Result<()> {
        writeln!(self.writer, "{value}")
    }

    pub fn flush(&mut self) -> std::io::Result<()> {
        self.writer.flush()
    }
}

/// Truncates a JSONL file to its first `lines` lines.
pub fn truncate_to_lines(path: &Path, lines: usize) -> std::io::Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let content = std::fs::read_to_string(path)?;
    let kept: Vec<&str> = content.lines().take(lines).collect();
    let mut out = kept.join("\n");
    if !out.is_empty() {
        out.push('\n');
    }
    std::fs::write(path, out)
}

pub fn count_lines(path: &Path) -> std::io::Result<usize> {
    if !path.exists() {
        return Ok(0);
    }
    let file = File::open(path)?;
    Ok(BufReader::new(file).lines().count())
}
