//! Fault-injection scripts.
//!
//! ```text
//! # worker dies at 5 s and comes back at 9 s
//! duration_ms 12000
//! batch 64
//! rate closed
//! images 10000
//! source mnist
//! 5000 kill worker
//! 9000 restore worker
//! ```
//!
//! Event lines are `<t_ms> <kill|restore|set_mode> <target>`; the target is
//! `master` or `worker` for kill and restore, `HA` or `HT` for set_mode.
//! Times count from the moment the cluster has formed.

use std::fmt;
use std::path::PathBuf;
use std::time::Duration;

use fluidnn_runtime::emulated::{Action, Device, Injection};
use fluidnn_runtime::Mode;

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScenarioEvent {
    pub t_ms: u64,
    pub action: Action,
}

/// Where labeled images come from.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum Source {
    /// The MNIST test split from the configured data directory.
    #[default]
    Mnist,
    /// The MNIST test split from this directory.
    Dir(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioScript {
    pub events: Vec<ScenarioEvent>,
    pub duration_ms: u64,
    pub batch: usize,
    /// Offered load in images/s; `None` keeps the client window full.
    pub rate: Option<f64>,
    /// Use only the first `images` inputs of the source.
    pub images: Option<usize>,
    pub source: Source,
}

impl Default for ScenarioScript {
    fn default() -> Self {
        Self {
            events: Vec::new(),
            duration_ms: 120_000,
            batch: 64,
            rate: None,
            images: None,
            source: Source::Mnist,
        }
    }
}

impl ScenarioScript {
    pub fn injections(&self) -> Vec<Injection> {
        self.events
            .iter()
            .map(|e| Injection {
                at: Duration::from_millis(e.t_ms),
                action: e.action,
            })
            .collect()
    }

    pub fn duration(&self) -> Duration {
        Duration::from_millis(self.duration_ms)
    }
}

pub(crate) fn action_words(a: Action) -> (&'static str, String) {
    match a {
        Action::Kill(d) => ("kill", d.to_string()),
        Action::Restore(d) => ("restore", d.to_string()),
        Action::SetMode(m) => ("set_mode", m.to_string()),
    }
}

impl fmt::Display for ScenarioScript {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "duration_ms {}", self.duration_ms)?;
        writeln!(f, "batch {}", self.batch)?;
        match self.rate {
            Some(r) => writeln!(f, "rate {r}")?,
            None => writeln!(f, "rate closed")?,
        }
        if let Some(n) = self.images {
            writeln!(f, "images {n}")?;
        }
        match &self.source {
            Source::Mnist => writeln!(f, "source mnist")?,
            Source::Dir(p) => writeln!(f, "source {}", p.display())?,
        }
        for e in &self.events {
            let (verb, target) = action_words(e.action);
            writeln!(f, "{} {verb} {target}", e.t_ms)?;
        }
        Ok(())
    }
}

pub fn parse_scenario(text: &str) -> Result<ScenarioScript> {
    let mut script = ScenarioScript::default();
    let mut seen: Vec<&str> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let err = |message: String| HarnessError::Scenario { line, message };
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let words: Vec<&str> = content.split_whitespace().collect();
        let first = words[0];
        if first.bytes().all(|b| b.is_ascii_digit()) {
            let [t, verb, target] = words[..] else {
                return Err(err(format!("expected `<t_ms> <action> <target>`, got {content:?}")));
            };
            let t_ms: u64 = t.parse().map_err(|_| err(format!("bad time {t:?}")))?;
            let action = match verb {
                "kill" | "restore" => {
                    let d: Device = target
                        .parse()
                        .map_err(|_| err(format!("{verb} takes master or worker, got {target:?}")))?;
                    if verb == "kill" {
                        Action::Kill(d)
                    } else {
                        Action::Restore(d)
                    }
                }
                "set_mode" => Action::SetMode(
                    target
                        .parse::<Mode>()
                        .map_err(|_| err(format!("set_mode takes HA or HT, got {target:?}")))?,
                ),
                _ => return Err(err(format!("unknown action {verb:?}"))),
            };
            if let Some(prev) = script.events.last() {
                if t_ms < prev.t_ms {
                    return Err(err(format!("time {t_ms} ms is earlier than the previous event at {} ms", prev.t_ms)));
                }
            }
            script.events.push(ScenarioEvent { t_ms, action });
            continue;
        }
        let [key, value] = words[..] else {
            return Err(err(format!("expected `<directive> <value>`, got {content:?}")));
        };
        if seen.contains(&key) {
            return Err(err(format!("{key} given twice")));
        }
        let positive = |v: &str| -> Result<u64> {
            v.parse::<u64>()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| err(format!("{key} must be a positive integer, got {v:?}")))
        };
        match key {
            "duration_ms" => script.duration_ms = positive(value)?,
            "batch" => {
                let b = positive(value)?;
                if b > u64::from(u16::MAX) {
                    return Err(err(format!("batch {b} exceeds {}", u16::MAX)));
                }
                script.batch = b as usize;
            }
            "rate" => {
                script.rate = match value {
                    "closed" => None,
                    v => Some(
                        v.parse::<f64>()
                            .ok()
                            .filter(|r| r.is_finite() && *r > 0.0)
                            .ok_or_else(|| err(format!("rate must be positive or `closed`, got {v:?}")))?,
                    ),
                }
            }
            "images" => script.images = Some(positive(value)? as usize),
            "source" => {
                script.source = match value {
                    "mnist" => Source::Mnist,
                    dir => Source::Dir(PathBuf::from(dir)),
                }
            }
            _ => return Err(err(format!("unknown directive {key:?}"))),
        }
        seen.push(key);
    }
    if let Some(e) = script.events.iter().find(|e| e.t_ms > script.duration_ms) {
        return Err(HarnessError::Scenario {
            line: 0,
            message: format!("event at {} ms is after the {} ms duration", e.t_ms, script.duration_ms),
        });
    }
    Ok(script)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_of(text: &str) -> usize {
        match parse_scenario(text) {
            Err(HarnessError::Scenario { line, .. }) => line,
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn spec_examples() {
        let s = parse_scenario("5000 kill worker").unwrap();
        assert_eq!(
            s.events,
            vec![ScenarioEvent {
                t_ms: 5000,
                action: Action::Kill(Device::Worker)
            }]
        );
        assert_eq!(s.injections()[0].at, Duration::from_secs(5));
        let s = parse_scenario("1000 set_mode HT").unwrap();
        assert_eq!(s.events[0].action, Action::SetMode(Mode::Ht));
        assert_eq!(line_of("# header\n2000 kill worker\n1000 restore worker\n"), 3);
    }

    #[test]
    fn directives_and_comments() {
        let s = parse_scenario("duration_ms 9000  # short\nbatch 32\nrate 250.5\nimages 640\nsource /tmp/x\n\n0 kill master\n0 restore master").unwrap();
        assert_eq!(s.duration_ms, 9000);
        assert_eq!(s.batch, 32);
        assert_eq!(s.rate, Some(250.5));
        assert_eq!(s.images, Some(640));
        assert_eq!(s.source, Source::Dir("/tmp/x".into()));
        assert_eq!(s.events.len(), 2);
        assert_eq!(parse_scenario(&s.to_string()).unwrap(), s);
    }

    #[test]
    fn malformed_lines_report_their_number() {
        assert_eq!(line_of("\n\n100 explode worker"), 3);
        assert_eq!(line_of("100 kill HA"), 1);
        assert_eq!(line_of("100 set_mode worker"), 1);
        assert_eq!(line_of("batch 0"), 1);
        assert_eq!(line_of("batch 70000"), 1);
        assert_eq!(line_of("rate -3"), 1);
        assert_eq!(line_of("batch 4\nbatch 8"), 2);
        assert_eq!(line_of("speed 3"), 1);
        assert_eq!(line_of("100 kill"), 1);
        assert_eq!(line_of("-5 kill worker"), 1);
        assert!(parse_scenario("duration_ms 100\n200 kill worker").is_err());
    }
}
