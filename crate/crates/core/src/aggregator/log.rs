use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::events::EventRecord;

#[derive(Debug, Error)]
pub enum LogError {
    #[error("SequenceGap at line {line}: expected seq {expected}, found {found}")]
    SequenceGap { line: usize, expected: u64, found: u64 },
    #[error("CorruptRecord at line {line} (after seq {after_seq}): {message}")]
    CorruptRecord { line: usize, after_seq: u64, message: String },
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
}

impl LogError {
    pub fn line(&self) -> Option<usize> {
        match self {
            LogError::SequenceGap { line, .. } | LogError::CorruptRecord { line, .. } => Some(*line),
            LogError::Io { .. } => None,
        }
    }
}

/// Parses a log, one JSON record per line, checking that sequence numbers
/// start at 1 and increase without gaps. Blank lines are ignored.
pub fn read_records<R: BufRead>(reader: R) -> Result<Vec<EventRecord>, LogError> {
    let mut out = Vec::new();
    let mut expected = 1;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| LogError::CorruptRecord { line: line_no, after_seq: expected - 1, message: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: EventRecord = serde_json::from_str(&line).map_err(|e| LogError::CorruptRecord {
            line: line_no,
            after_seq: expected - 1,
            message: e.to_string(),
        })?;
        if record.seq != expected {
            return Err(LogError::SequenceGap { line: line_no, expected, found: record.seq });
        }
        expected += 1;
        out.push(record);
    }
    Ok(out)
}

pub fn read_log_file(path: &Path) -> Result<Vec<EventRecord>, LogError> {
    let file = File::open(path).map_err(|source| LogError::Io { path: path.display().to_string(), source })?;
    read_records(BufReader::new(file))
}

/// What [`repair_tail`] did to a log whose last line lacked its newline.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TailRepair {
    Clean,
    /// The final record was complete; only the newline was missing.
    NewlineAdded,
    /// The final line did not parse and was cut off.
    Truncated { line: usize, bytes: u64 },
}

/// Fixes the one kind of damage an interrupted append can leave: a final
/// line without its newline. Anything else is left for [`read_records`]
/// to report.
pub fn repair_tail(path: &Path) -> io::Result<TailRepair> {
    let data = std::fs::read(path)?;
    if data.is_empty() || data.ends_with(b"\n") {
        return Ok(TailRepair::Clean);
    }
    let start = data.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    let file = OpenOptions::new().append(true).open(path)?;
    if serde_json::from_slice::<EventRecord>(&data[start..]).is_ok() {
        (&file).write_all(b"\n")?;
        file.sync_data()?;
        return Ok(TailRepair::NewlineAdded);
    }
    let line = data[..start].iter().filter(|&&b| b == b'\n').count() + 1;
    file.set_len(start as u64)?;
    file.sync_data()?;
    Ok(TailRepair::Truncated { line, bytes: (data.len() - start) as u64 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FsyncPolicy {
    PerEvent,
    #[default]
    PerSecond,
}

/// Destination for committed records.
pub trait EventLog: Send {
    fn append(&mut self, record: &EventRecord) -> io::Result<()>;
    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

/// Discards records.
#[derive(Debug, Default)]
pub struct NullLog;

impl EventLog for NullLog {
    fn append(&mut self, _: &EventRecord) -> io::Result<()> {
        Ok(())
    }
}

/// Keeps records in memory. Clones share the same buffer, so a handle can
/// be kept after the log is handed to an aggregator.
#[derive(Debug, Default, Clone)]
pub struct MemoryLog {
    records: Arc<Mutex<Vec<EventRecord>>>,
}

impl EventLog for MemoryLog {
    fn append(&mut self, record: &EventRecord) -> io::Result<()> {
        self.records.lock().map_err(|_| io::Error::other("memory log poisoned"))?.push(record.clone());
        Ok(())
    }
}

impl MemoryLog {
    pub fn records(&self) -> Vec<EventRecord> {
        self.records.lock().map(|r| r.clone()).unwrap_or_default()
    }

    pub fn len(&self) -> usize {
        self.records.lock().map(|r| r.len()).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The log as it would appear on disk.
    pub fn to_text(&self) -> String {
        self.records().iter().map(|r| r.to_json_line() + "\n").collect()
    }
}

/// Append-only JSON-lines file.
#[derive(Debug)]
pub struct FileLog {
    path: PathBuf,
    writer: BufWriter<File>,
    policy: FsyncPolicy,
    last_sync: Instant,
    dirty: bool,
}

impl FileLog {
    /// Opens `path` for appending, creating it if needed.
    pub fn append_to(path: &Path, policy: FsyncPolicy) -> io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(FileLog { path: path.to_path_buf(), writer: BufWriter::new(file), policy, last_sync: Instant::now(), dirty: false })
    }

    /// Creates or truncates `path`.
    pub fn create(path: &Path, policy: FsyncPolicy) -> io::Result<Self> {
        let file = File::create(path)?;
        Ok(FileLog { path: path.to_path_buf(), writer: BufWriter::new(file), policy, last_sync: Instant::now(), dirty: false })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn sync(&mut self) -> io::Result<()> {
        self.writer.flush()?;
        self.writer.get_ref().sync_data()?;
        self.last_sync = Instant::now();
        self.dirty = false;
        Ok(())
    }
}

impl EventLog for FileLog {
    fn append(&mut self, record: &EventRecord) -> io::Result<()> {
        // one write per line, so a crash can only tear the final record
        let mut line = serde_json::to_vec(record)?;
        line.push(b'\n');
        self.writer.write_all(&line)?;
        self.dirty = true;
        match self.policy {
            FsyncPolicy::PerEvent => self.sync(),
            FsyncPolicy::PerSecond if self.last_sync.elapsed() >= Duration::from_secs(1) => self.sync(),
            FsyncPolicy::PerSecond => Ok(()),
        }
    }

    fn flush(&mut self) -> io::Result<()> {
        if self.dirty {
            self.sync()
        } else {
            Ok(())
        }
    }
}

impl Drop for FileLog {
    fn drop(&mut self) {
        let _ = self.writer.flush();
    }
}
