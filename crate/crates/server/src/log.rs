//! Session log: one JSON header line, then one JSON record per line.

use std::fmt::Write as _;
use std::hash::Hasher;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use seldinger_core::mechanism::DeviceConfig;
use seldinger_core::procedure::{EventKind, Phase};
use seldinger_core::PhantomModel;

use crate::protocol::ClientMessage;

pub const LOG_FORMAT: u32 = 1;

#[derive(Debug, Error)]
pub enum LogError {
    #[error("empty log")]
    Empty,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unsupported log format {0}")]
    Format(u32),
}

/// 64-bit FNV-1a of `bytes`.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

pub fn hash_hex(bytes: &[u8]) -> String {
    format!("{:016x}", fnv1a(bytes))
}

pub fn phantom_hash(phantom: &PhantomModel) -> String {
    hash_hex(phantom.to_json().as_bytes())
}

pub fn config_hash(cfg: &DeviceConfig) -> String {
    hash_hex(serde_json::to_string(cfg).expect("config serializes").as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub format: u32,
    pub seed: u64,
    pub phantom_hash: String,
    pub config_hash: String,
    pub phantom: PhantomModel,
    pub config: DeviceConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Record {
    /// An operator message applied at the start of `tick`; `hash` is the state at the end of that tick.
    Command {
        tick: u64,
        message: ClientMessage,
        accepted: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reason: Option<String>,
        hash: String,
    },
    Snapshot {
        tick: u64,
        hash: String,
        phase: Phase,
        axial_force: f64,
    },
    Event {
        tick: u64,
        event: EventKind,
    },
    /// Sidecar PGM frame file.
    Frame {
        tick: u64,
        file: String,
    },
    /// Free-form note, e.g. how a scripted click was resolved.
    Note {
        tick: u64,
        text: String,
    },
}

impl Record {
    pub fn tick(&self) -> u64 {
        match self {
            Record::Command { tick, .. }
            | Record::Snapshot { tick, .. }
            | Record::Event { tick, .. }
            | Record::Frame { tick, .. }
            | Record::Note { tick, .. } => *tick,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionLog {
    pub header: LogHeader,
    pub records: Vec<Record>,
}

impl SessionLog {
    pub fn new(seed: u64, phantom: PhantomModel, config: DeviceConfig) -> Self {
        SessionLog {
            header: LogHeader {
                format: LOG_FORMAT,
                seed,
                phantom_hash: phantom_hash(&phantom),
                config_hash: config_hash(&config),
                phantom,
                config,
            },
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, record: Record) {
        debug_assert!(self.records.last().is_none_or(|r| r.tick() <= record.tick()), "ticks must not decrease");
        self.records.push(record);
    }

    pub fn header_line(&self) -> String {
        serde_json::to_string(&self.header).expect("header serializes")
    }

    pub fn record_line(record: &Record) -> String {
        serde_json::to_string(record).expect("record serializes")
    }

    pub fn to_text(&self) -> String {
        let mut out = self.header_line();
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(out, "{}", Self::record_line(r));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, LogError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines.next().ok_or(LogError::Empty)?;
        let header: LogHeader =
            serde_json::from_str(first).map_err(|e| LogError::Parse { line: 1, message: e.to_string() })?;
        if header.format != LOG_FORMAT {
            return Err(LogError::Format(header.format));
        }
        let mut records = Vec::new();
        let mut last = 0;
        for (i, line) in lines {
            let r: Record =
                serde_json::from_str(line).map_err(|e| LogError::Parse { line: i + 1, message: e.to_string() })?;
            if r.tick() < last {
                return Err(LogError::Parse { line: i + 1, message: "tick decreases".into() });
            }
            last = r.tick();
            records.push(r);
        }
        Ok(SessionLog { header, records })
    }

    /// Hash of the serialized log, used to compare whole runs.
    pub fn digest(&self) -> String {
        hash_hex(self.to_text().as_bytes())
    }

    pub fn commands(&self) -> impl Iterator<Item = (u64, &ClientMessage)> {
        self.records.iter().filter_map(|r| match r {
            Record::Command { tick, message, .. } => Some((*tick, message)),
            _ => None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn text_roundtrip() {
        let mut log = SessionLog::new(7, PhantomModel::human(), DeviceConfig::human());
        log.push(Record::Command {
            tick: 1,
            message: ClientMessage::Hello { client: None },
            accepted: true,
            reason: None,
            hash: "00".into(),
        });
        log.push(Record::Snapshot { tick: 10, hash: "ab".into(), phase: Phase::Idle, axial_force: 0.1 + 0.2 });
        let back = SessionLog::parse(&log.to_text()).unwrap();
        assert_eq!(back, log);
        assert_eq!(back.digest(), log.digest());
    }

    #[test]
    fn decreasing_ticks_rejected() {
        let log = SessionLog::new(7, PhantomModel::human(), DeviceConfig::human());
        let mut text = log.header_line();
        text.push_str("\n{\"kind\":\"note\",\"tick\":5,\"text\":\"a\"}\n{\"kind\":\"note\",\"tick\":4,\"text\":\"b\"}\n");
        assert!(matches!(SessionLog::parse(&text), Err(LogError::Parse { line: 3, .. })));
    }
}
