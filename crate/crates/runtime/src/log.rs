//! Structured `<epoch_ms> <state> <event> <detail>` log lines.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use crate::error::RuntimeError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogRecord {
    pub epoch_ms: u64,
    pub state: String,
    pub event: String,
    pub detail: String,
}

impl fmt::Display for LogRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.epoch_ms, self.state, self.event)?;
        if !self.detail.is_empty() {
            write!(f, " {}", self.detail)?;
        }
        Ok(())
    }
}

impl FromStr for LogRecord {
    type Err = RuntimeError;

    fn from_str(line: &str) -> Result<Self, RuntimeError> {
        let mut parts = line.trim_end().splitn(4, ' ');
        let bad = || RuntimeError::Invalid(format!("malformed log line {line:?}"));
        let epoch_ms = parts.next().and_then(|t| t.parse().ok()).ok_or_else(bad)?;
        let state = parts.next().filter(|s| !s.is_empty()).ok_or_else(bad)?.to_owned();
        let event = parts.next().filter(|s| !s.is_empty()).ok_or_else(bad)?.to_owned();
        let detail = parts.next().unwrap_or("").to_owned();
        Ok(Self {
            epoch_ms,
            state,
            event,
            detail,
        })
    }
}

pub fn now_epoch_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Shared log: records are kept in memory and optionally echoed to a writer.
#[derive(Clone, Default)]
pub struct EventLog {
    records: Arc<Mutex<Vec<LogRecord>>>,
    echo: Option<Arc<Mutex<Box<dyn Write + Send>>>>,
}

impl fmt::Debug for EventLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EventLog").field("records", &self.len()).finish()
    }
}

impl EventLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_echo(w: Box<dyn Write + Send>) -> Self {
        Self {
            records: Default::default(),
            echo: Some(Arc::new(Mutex::new(w))),
        }
    }

    /// `-` echoes to stderr, an empty string keeps records in memory only,
    /// anything else is a file appended to.
    pub fn from_target(target: &str) -> std::io::Result<Self> {
        Ok(match target {
            "" => Self::new(),
            "-" => Self::with_echo(Box::new(std::io::stderr())),
            path => Self::with_echo(Box::new(
                std::fs::OpenOptions::new().create(true).append(true).open(path)?,
            )),
        })
    }

    pub fn record(&self, state: impl fmt::Display, event: &str, detail: impl Into<String>) {
        self.push(LogRecord {
            epoch_ms: now_epoch_ms(),
            state: state.to_string(),
            event: event.to_owned(),
            detail: detail.into(),
        });
    }

    pub fn push(&self, rec: LogRecord) {
        if let Some(w) = &self.echo {
            let mut w = w.lock().expect("log writer poisoned");
            let _ = writeln!(w, "{rec}");
            let _ = w.flush();
        }
        self.records.lock().expect("log poisoned").push(rec);
    }

    pub fn snapshot(&self) -> Vec<LogRecord> {
        self.records.lock().expect("log poisoned").clone()
    }

    pub fn len(&self) -> usize {
        self.records.lock().expect("log poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
