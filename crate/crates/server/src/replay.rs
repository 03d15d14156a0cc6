//! Re-runs a recorded command stream and checks every logged hash.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use seldinger_core::mechanism::DeviceConfig;
use seldinger_core::PhantomModel;

use crate::log::{config_hash, phantom_hash, Record, SessionLog};
use crate::protocol::ClientMessage;
use crate::session::{Session, SessionError};

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("{what} hash mismatch: header {header}, actual {actual}")]
    HeaderMismatch { what: &'static str, header: String, actual: String },
    #[error(transparent)]
    Session(#[from] SessionError),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Divergence {
    pub tick: u64,
    /// Which record disagreed: `command` or `snapshot`.
    pub record: &'static str,
    pub expected: String,
    pub actual: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplayReport {
    pub ticks: u64,
    pub commands_checked: usize,
    pub snapshots_checked: usize,
    pub divergence: Option<Divergence>,
}

impl ReplayReport {
    pub fn matches(&self) -> bool {
        self.divergence.is_none()
    }
}

fn checked(r: &Record) -> Option<(&'static str, u64, &str)> {
    match r {
        Record::Command { tick, hash, .. } => Some(("command", *tick, hash)),
        Record::Snapshot { tick, hash, .. } => Some(("snapshot", *tick, hash)),
        _ => None,
    }
}

/// Replays `log`. The embedded phantom and config must match the header
/// hashes, and so must `phantom` / `config` when given.
pub fn replay(log: &SessionLog, phantom: Option<&PhantomModel>, config: Option<&DeviceConfig>) -> Result<ReplayReport, ReplayError> {
    let h = &log.header;
    let check = |what, header: &String, actual: String| {
        if *header == actual {
            Ok(())
        } else {
            Err(ReplayError::HeaderMismatch { what, header: header.clone(), actual })
        }
    };
    check("phantom", &h.phantom_hash, phantom_hash(&h.phantom))?;
    check("config", &h.config_hash, config_hash(&h.config))?;
    if let Some(p) = phantom {
        check("phantom", &h.phantom_hash, phantom_hash(p))?;
    }
    if let Some(c) = config {
        check("config", &h.config_hash, config_hash(c))?;
    }

    let mut commands: BTreeMap<u64, Vec<ClientMessage>> = BTreeMap::new();
    for (tick, msg) in log.commands() {
        commands.entry(tick).or_default().push(msg.clone());
    }
    let expected: Vec<(&'static str, u64, &str)> = log.records.iter().filter_map(checked).collect();
    let last = log.records.iter().map(Record::tick).max().unwrap_or(0);

    let mut session = Session::new(h.phantom.clone(), h.config.clone(), h.seed)?;
    let mut report = ReplayReport { ticks: 0, commands_checked: 0, snapshots_checked: 0, divergence: None };
    let (mut seen, mut next) = (0, 0);
    for t in 1..=last {
        for m in commands.remove(&t).unwrap_or_default() {
            session.submit(m);
        }
        session.tick();
        report.ticks = t;
        let produced: Vec<_> = session.log().records[seen..].iter().filter_map(checked).collect();
        seen = session.log().records.len();
        let want: Vec<_> = expected[next..].iter().take_while(|e| e.1 <= t).copied().collect();
        next += want.len();
        for i in 0..produced.len().max(want.len()) {
            match (want.get(i), produced.get(i)) {
                (Some(w), Some(p)) if w == p => {
                    if w.0 == "command" {
                        report.commands_checked += 1;
                    } else {
                        report.snapshots_checked += 1;
                    }
                }
                (w, p) => {
                    report.divergence = Some(Divergence {
                        tick: t,
                        record: w.or(p).map(|x| x.0).unwrap_or("snapshot"),
                        expected: w.map(|x| x.2.to_owned()).unwrap_or_default(),
                        actual: p.map(|x| x.2.to_owned()).unwrap_or_default(),
                    });
                    return Ok(report);
                }
            }
        }
    }
    Ok(report)
}
