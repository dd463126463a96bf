//! `key = value` configuration files.

use std::path::PathBuf;
use std::time::Duration;

use crate::error::{Result, RuntimeError};
use crate::failover::Policy;
use crate::latency::LatencyModel;
use crate::wire::Mode;

/// One `key = value` entry with its 1-based line number.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

/// Splits a config file into entries. Blank lines and `#` comments are skipped.
pub fn parse_entries(text: &str) -> Result<Vec<Entry>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| RuntimeError::Config {
            line: i + 1,
            message: format!("expected `key = value`, got {line:?}"),
        })?;
        let key = k.trim();
        if key.is_empty() {
            return Err(RuntimeError::Config {
                line: i + 1,
                message: "empty key".into(),
            });
        }
        out.push(Entry {
            line: i + 1,
            key: key.to_owned(),
            value: v.trim().to_owned(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RuntimeConfig {
    /// Master: address accepting the worker and clients.
    pub listen: String,
    /// Worker: master address to connect to.
    pub connect: String,
    /// Worker: address accepting clients after the master is lost.
    pub client_listen: String,
    pub checkpoint: Option<PathBuf>,
    pub policy: Policy,
    pub mode: Mode,
    pub heartbeat: Duration,
    /// Defaults to three heartbeat intervals.
    pub timeout: Option<Duration>,
    pub latency: LatencyModel,
    /// Structured log destination; `-` for stderr, empty for none.
    pub log: String,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:7070".into(),
            connect: "127.0.0.1:7070".into(),
            client_listen: "127.0.0.1:7071".into(),
            checkpoint: None,
            policy: Policy::Fluid,
            mode: Mode::Ha,
            heartbeat: Duration::from_millis(100),
            timeout: None,
            latency: LatencyModel::zero(),
            log: "-".into(),
        }
    }
}

fn millis(v: &str) -> std::result::Result<Duration, String> {
    v.parse::<u64>()
        .ok()
        .filter(|&ms| ms > 0)
        .map(Duration::from_millis)
        .ok_or_else(|| format!("expected a positive number of milliseconds, got {v:?}"))
}

fn non_negative(v: &str) -> std::result::Result<f64, String> {
    v.parse::<f64>()
        .ok()
        .filter(|x| x.is_finite() && *x >= 0.0)
        .ok_or_else(|| format!("expected a non-negative number, got {v:?}"))
}

impl RuntimeConfig {
    pub const KEYS: [&'static str; 11] = [
        "listen",
        "connect",
        "client_listen",
        "checkpoint",
        "policy",
        "mode",
        "heartbeat_ms",
        "timeout_ms",
        "latency_per_message_us",
        "latency_per_byte_us",
        "log",
    ];

    pub fn timeout(&self) -> Duration {
        self.timeout.unwrap_or(self.heartbeat * 3)
    }

    /// Applies one setting; `Ok(false)` if the key is not a runtime key.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<bool, String> {
        match key {
            "listen" => self.listen = value.to_owned(),
            "connect" => self.connect = value.to_owned(),
            "client_listen" => self.client_listen = value.to_owned(),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "policy" => self.policy = value.parse().map_err(|e: RuntimeError| e.to_string())?,
            "mode" => self.mode = value.parse().map_err(|e: RuntimeError| e.to_string())?,
            "heartbeat_ms" => self.heartbeat = millis(value)?,
            "timeout_ms" => self.timeout = Some(millis(value)?),
            "latency_per_message_us" => self.latency.per_message_us = non_negative(value)?,
            "latency_per_byte_us" => self.latency.per_byte_us = non_negative(value)?,
            "log" => self.log = value.to_owned(),
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Parses a whole file; unknown keys are errors.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for e in parse_entries(text)? {
            match cfg.set(&e.key, &e.value) {
                Ok(true) => {}
                Ok(false) => {
                    return Err(RuntimeError::Config {
                        line: e.line,
                        message: format!("unknown key {:?}", e.key),
                    })
                }
                Err(message) => return Err(RuntimeError::Config { line: e.line, message }),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.latency.validate()?;
        if self.timeout() <= self.heartbeat {
            return Err(RuntimeError::Invalid(format!(
                "timeout {:?} must exceed the heartbeat interval {:?}",
                self.timeout(),
                self.heartbeat
            )));
        }
        if !self.policy.allows(self.mode) {
            return Err(RuntimeError::Invalid(format!(
                "{} policy cannot start in {} mode",
                self.policy, self.mode
            )));
        }
        Ok(())
    }
}
