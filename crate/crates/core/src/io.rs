//! JSONL checkpoint files: append with flush, tolerant reads, atomic rewrites.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use crate::domain::AbundanceVector;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io { path: path.to_path_buf(), source }
}

/// Reads every record of a JSONL file. A missing file reads as empty. An
/// unterminated last line (an interrupted append) is skipped; any other
/// malformed line is an error.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, IoError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path)(e)),
    };
    let mut reader = BufReader::new(file);
    let mut out = Vec::new();
    let mut line = String::new();
    let mut number = 0;
    loop {
        line.clear();
        if reader.read_line(&mut line).map_err(io_err(path))? == 0 {
            break;
        }
        number += 1;
        let terminated = line.ends_with('\n');
        let body = line.trim();
        if body.is_empty() {
            continue;
        }
        match serde_json::from_str(body) {
            Ok(v) => out.push(v),
            Err(_) if !terminated => {
                log::warn!("{}: ignoring unterminated trailing line {number}", path.display());
            }
            Err(e) => {
                return Err(IoError::Parse { path: path.to_path_buf(), line: number, message: e.to_string() })
            }
        }
    }
    Ok(out)
}

/// Append-only writer that flushes after every record so an interrupted
/// run loses at most the record being written.
pub struct JsonlAppender {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonlAppender {
    /// Opens `path` for appending, first cutting off any unterminated tail
    /// left by an earlier interruption.
    pub fn open(path: &Path) -> Result<Self, IoError> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let mut file =
            OpenOptions::new().create(true).read(true).append(true).open(path).map_err(io_err(path))?;
        let len = file.metadata().map_err(io_err(path))?.len();
        if len > 0 {
            let mut content = Vec::new();
            file.seek(SeekFrom::Start(0)).map_err(io_err(path))?;
            file.read_to_end(&mut content).map_err(io_err(path))?;
            if content.last() != Some(&b'\n') {
                let keep = content.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
                file.set_len(keep as u64).map_err(io_err(path))?;
            }
        }
        Ok(JsonlAppender { path: path.to_path_buf(), out: BufWriter::new(file) })
    }

    pub fn append<T: Serialize>(&mut self, record: &T) -> Result<(), IoError> {
        let line = serde_json::to_string(record).expect("records serialize");
        writeln!(self.out, "{line}").and_then(|_| self.out.flush()).map_err(io_err(&self.path))
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Replaces `path` with exactly `records`, one per line.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), IoError> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).expect("records serialize");
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut buf = serde_json::to_vec_pretty(value).expect("values serialize");
    buf.push(b'\n');
    write_atomic(path, &buf)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| IoError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

pub fn write_text(path: &Path, text: &str) -> Result<(), IoError> {
    write_atomic(path, text.as_bytes())
}

/// Rewrites a JSONL file in canonical form: one record per key (first
/// occurrence wins), sorted by key. Makes interrupted-and-resumed runs
/// byte-identical to uninterrupted ones.
pub fn normalize_jsonl<T, K, F>(path: &Path, key: F) -> Result<Vec<T>, IoError>
where
    T: Serialize + DeserializeOwned,
    K: Ord,
    F: Fn(&T) -> K,
{
    let records: Vec<T> = read_jsonl(path)?;
    let mut keyed: Vec<(K, usize, T)> = records.into_iter().enumerate().map(|(i, r)| (key(&r), i, r)).collect();
    keyed.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)));
    keyed.dedup_by(|b, a| a.0 == b.0);
    let out: Vec<T> = keyed.into_iter().map(|(_, _, r)| r).collect();
    write_jsonl(path, &out)?;
    Ok(out)
}

/// Reads class counts from a CSV of `sample,count` rows (one row per
/// class, an optional header row). Zero counts are dropped.
pub fn read_counts_csv(path: &Path) -> Result<BTreeMap<String, AbundanceVector>, IoError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let mut counts: BTreeMap<String, Vec<u64>> = BTreeMap::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(|e| csv_err(path, e))?;
        let line = i + 1;
        let bad = |message: String| IoError::Parse { path: path.to_path_buf(), line, message };
        if row.len() != 2 {
            return Err(bad(format!("expected `sample,count`, found {} fields", row.len())));
        }
        match row[1].parse::<u64>() {
            Ok(c) => counts.entry(row[0].to_string()).or_default().push(c),
            Err(_) if line == 1 => continue,
            Err(_) => return Err(bad(format!("count `{}` is not a non-negative integer", &row[1]))),
        }
    }
    Ok(counts.into_iter().map(|(k, v)| (k, AbundanceVector::from_counts_lossy(v))).collect())
}

fn csv_err(path: &Path, e: csv::Error) -> IoError {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(source) => IoError::Io { path: path.to_path_buf(), source },
        other => IoError::Parse { path: path.to_path_buf(), line, message: format!("{other:?}") },
    }
}
