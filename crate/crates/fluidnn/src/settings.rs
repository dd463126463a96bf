//! Harness settings: runtime keys plus training, data and report keys, read
//! from a `key = value` file and then overridden by command-line flags.

use std::path::{Path, PathBuf};
use std::time::Duration;

use fluidnn_core::train::TrainSchedule;
use fluidnn_runtime::config::parse_entries;
use fluidnn_runtime::emulated::EmuConfig;
use fluidnn_runtime::RuntimeConfig;

use crate::error::{HarnessError, Result};
use crate::report::Format;
use crate::run::{SocketSettings, Transport};

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub runtime: RuntimeConfig,
    pub mnist_dir: PathBuf,
    pub schedule: TrainSchedule,
    /// Train on the first N training images only.
    pub train_limit: Option<usize>,
    pub train_log: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub format: Format,
    pub socket: bool,
    pub images: Option<usize>,
    pub ns_per_mac: f64,
    pub window: usize,
    pub client_timeout: Duration,
    pub backoff: Duration,
    /// Whether a latency key was given; the emulator has its own default.
    pub latency_configured: bool,
}

impl Default for Settings {
    fn default() -> Self {
        let emu = EmuConfig::default();
        Self {
            runtime: RuntimeConfig::default(),
            mnist_dir: PathBuf::from("data/mnist"),
            schedule: TrainSchedule::default(),
            train_limit: None,
            train_log: None,
            out: None,
            format: Format::Csv,
            socket: false,
            images: None,
            ns_per_mac: emu.ns_per_mac,
            window: emu.window,
            client_timeout: emu.client_timeout,
            backoff: emu.backoff,
            latency_configured: false,
        }
    }
}

fn num<T: std::str::FromStr>(v: &str, what: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("{what} expects a number, got {v:?}"))
}

fn positive(v: &str) -> std::result::Result<usize, String> {
    num::<usize>(v, "key").ok().filter(|&n| n > 0).ok_or_else(|| format!("expected a positive integer, got {v:?}"))
}

fn millis(v: &str) -> std::result::Result<Duration, String> {
    num::<u64>(v, "key").map(Duration::from_millis)
}

impl Settings {
    /// Applies one setting; `Ok(false)` for an unknown key.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<bool, String> {
        if self.runtime.set(key, value)? {
            self.latency_configured |= key.starts_with("latency_");
            return Ok(true);
        }
        let s = &mut self.schedule;
        match key {
            "mnist_dir" => self.mnist_dir = PathBuf::from(value),
            "n_iters" => s.n_iters = positive(value)?,
            "learning_rate" => s.hyper.learning_rate = num(value, key)?,
            "lr_decay" => s.lr_decay = num(value, key)?,
            "momentum" => s.hyper.momentum = num(value, key)?,
            "batch_size" => s.hyper.batch_size = positive(value)?,
            "epochs_per_step" => s.hyper.epochs_per_step = positive(value)?,
            "seed" => s.seed = num(value, key)?,
            "train_limit" => self.train_limit = Some(positive(value)?),
            "train_log" => self.train_log = Some(PathBuf::from(value)),
            "out" => self.out = Some(PathBuf::from(value)),
            "format" => self.format = value.parse().map_err(|e: HarnessError| e.to_string())?,
            "transport" => {
                self.socket = match value {
                    "emulated" => false,
                    "socket" => true,
                    _ => return Err(format!("transport is emulated or socket, got {value:?}")),
                }
            }
            "images" => self.images = Some(positive(value)?),
            "ns_per_mac" => {
                self.ns_per_mac = num::<f64>(value, key)?;
                if !(self.ns_per_mac.is_finite() && self.ns_per_mac >= 0.0) {
                    return Err(format!("ns_per_mac must be non-negative, got {value:?}"));
                }
            }
            "window" => self.window = positive(value)?,
            "client_timeout_ms" => self.client_timeout = millis(value)?,
            "backoff_ms" => self.backoff = millis(value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        self.apply_text(&text)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for e in parse_entries(text)? {
            match self.set(&e.key, &e.value) {
                Ok(true) => {}
                Ok(false) => {
                    return Err(HarnessError::Config {
                        line: e.line,
                        message: format!("unknown key {:?}", e.key),
                    })
                }
                Err(message) => return Err(HarnessError::Config { line: e.line, message }),
            }
        }
        Ok(())
    }

    /// Applies `key=value` overrides from the command line.
    pub fn apply_overrides<'a>(&mut self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
        for (k, v) in pairs {
            match self.set(k, v) {
                Ok(true) => {}
                Ok(false) => return Err(HarnessError::Usage(format!("unknown setting {k:?}"))),
                Err(m) => return Err(HarnessError::Usage(format!("{k}: {m}"))),
            }
        }
        Ok(())
    }

    pub fn emu_config(&self) -> EmuConfig {
        EmuConfig {
            policy: self.runtime.policy,
            mode: self.runtime.mode,
            latency: if self.latency_configured {
                self.runtime.latency
            } else {
                EmuConfig::default().latency
            },
            heartbeat: self.runtime.heartbeat,
            timeout: self.runtime.timeout(),
            ns_per_mac: self.ns_per_mac,
            window: self.window,
            client_timeout: self.client_timeout,
            backoff: self.backoff,
            ..EmuConfig::default()
        }
    }

    pub fn transport(&self) -> Transport {
        if self.socket {
            Transport::Socket(SocketSettings {
                heartbeat: self.runtime.heartbeat,
                timeout: self.runtime.timeout,
                latency: self.runtime.latency,
                window: self.window,
                client_timeout: self.client_timeout,
                backoff: self.backoff,
            })
        } else {
            Transport::Emulated(self.emu_config())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use fluidnn_runtime::failover::Policy;

    #[test]
    fn file_then_overrides() {
        let mut s = Settings::default();
        s.apply_text("policy = dynamic\nn_iters = 2\nmnist_dir = /data\nformat = json-lines\n").unwrap();
        s.apply_overrides([("n_iters", "5"), ("transport", "socket")]).unwrap();
        assert_eq!(s.runtime.policy, Policy::Dynamic);
        assert_eq!(s.schedule.n_iters, 5);
        assert_eq!(s.mnist_dir, PathBuf::from("/data"));
        assert_eq!(s.format, Format::JsonLines);
        assert!(matches!(s.transport(), Transport::Socket(_)));
    }

    #[test]
    fn errors() {
        let mut s = Settings::default();
        assert!(matches!(s.apply_text("n_iters = 2\nwat = 1"), Err(HarnessError::Config { line: 2, .. })));
        assert!(matches!(s.apply_text("n_iters = 0"), Err(HarnessError::Config { line: 1, .. })));
        assert!(matches!(s.apply_overrides([("wat", "1")]), Err(HarnessError::Usage(_))));
    }

    #[test]
    fn emulated_latency_defaults_unless_configured() {
        let s = Settings::default();
        assert_eq!(s.emu_config().latency, EmuConfig::default().latency);
        let mut s = Settings::default();
        s.apply_text("latency_per_message_us = 0").unwrap();
        assert_eq!(s.emu_config().latency.per_message_us, 0.0);
    }
}
