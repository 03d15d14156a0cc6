//! Wire messages. Text messages are UTF-8 JSON objects tagged by `type`;
//! frames travel as binary messages holding PGM bytes, or base64 inside a
//! JSON `Frame` when a text-only channel is used.

use base64::Engine as _;
use serde::{Deserialize, Serialize};

use seldinger_core::control::RotateDirection;
use seldinger_core::imaging::ProbePose;
use seldinger_core::procedure::{EventKind, Outcome, Phase};

/// Default rotation increment for `RotateNudge`, degrees.
pub const DEFAULT_ROTATE_DEG: f64 = 2.0;
/// Largest accepted `Nudge` distance, mm.
pub const MAX_NUDGE_MM: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NudgeAxis {
    /// Along the probe's in-plane lateral axis.
    Lateral,
    /// Along the image-plane normal (the non-planar direction).
    Elevational,
    Vertical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum ClientMessage {
    Hello {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        client: Option<String>,
    },
    StartScan {
        waypoints: Vec<[f64; 2]>,
    },
    ClickCenter {
        u: f64,
        v: f64,
    },
    RotateNudge {
        dir: RotateDirection,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        deg: Option<f64>,
    },
    Nudge {
        axis: NudgeAxis,
        mm: f64,
    },
    SaveMark,
    GotoMark {
        index: usize,
    },
    NeedleTarget {
        u: f64,
        v: f64,
    },
    NeedleTweak {
        u: f64,
        v: f64,
    },
    SetAngle {
        deg: f64,
    },
    InsertGuidewire,
    RetractNeedle,
    Abort,
}

impl ClientMessage {
    pub fn name(&self) -> &'static str {
        match self {
            ClientMessage::Hello { .. } => "Hello",
            ClientMessage::StartScan { .. } => "StartScan",
            ClientMessage::ClickCenter { .. } => "ClickCenter",
            ClientMessage::RotateNudge { .. } => "RotateNudge",
            ClientMessage::Nudge { .. } => "Nudge",
            ClientMessage::SaveMark => "SaveMark",
            ClientMessage::GotoMark { .. } => "GotoMark",
            ClientMessage::NeedleTarget { .. } => "NeedleTarget",
            ClientMessage::NeedleTweak { .. } => "NeedleTweak",
            ClientMessage::SetAngle { .. } => "SetAngle",
            ClientMessage::InsertGuidewire => "InsertGuidewire",
            ClientMessage::RetractNeedle => "RetractNeedle",
            ClientMessage::Abort => "Abort",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateUpdate {
    pub tick: u64,
    pub phase: Phase,
    /// Workflow step 1–8 (0 before start).
    pub step: u8,
    pub probe: ProbePose,
    pub axial_force: f64,
    /// Calibrated needle-tip estimate, px.
    pub needle_estimate_px: [f64; 2],
    pub workspace_polygon: Vec<[f64; 2]>,
    pub flash: bool,
    /// Simulated session time, s.
    pub timer_s: f64,
    /// Actuator or probe motion still in progress.
    pub pending: bool,
    pub marks: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<Outcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum ServerMessage {
    StateUpdate(StateUpdate),
    Frame {
        tick: u64,
        encoding: String,
        /// Base64 PGM bytes.
        bytes: String,
    },
    Event {
        kind: String,
        tick: u64,
        detail: EventKind,
    },
    Rejection {
        reason: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        command: Option<String>,
    },
}

impl ServerMessage {
    pub fn rejection(reason: impl Into<String>, command: Option<&str>) -> Self {
        ServerMessage::Rejection { reason: reason.into(), command: command.map(str::to_owned) }
    }

    pub fn event(tick: u64, detail: EventKind) -> Self {
        ServerMessage::Event { kind: detail.name().to_owned(), tick, detail }
    }

    /// Text-channel frame carrying base64 PGM bytes.
    pub fn frame(tick: u64, pgm: &[u8]) -> Self {
        ServerMessage::Frame {
            tick,
            encoding: "pgm-base64".into(),
            bytes: base64::engine::general_purpose::STANDARD.encode(pgm),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("message serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn client_messages_use_type_tag() {
        let m: ClientMessage = serde_json::from_str(r#"{"type":"ClickCenter","u":320,"v":100}"#).unwrap();
        assert_eq!(m, ClientMessage::ClickCenter { u: 320.0, v: 100.0 });
        let m: ClientMessage = serde_json::from_str(r#"{"type":"RotateNudge","dir":"ccw"}"#).unwrap();
        assert_eq!(m, ClientMessage::RotateNudge { dir: RotateDirection::Ccw, deg: None });
        assert_eq!(serde_json::to_string(&ClientMessage::SaveMark).unwrap(), r#"{"type":"SaveMark"}"#);
        assert!(serde_json::from_str::<ClientMessage>(r#"{"type":"Teleport"}"#).is_err());
    }

    #[test]
    fn frame_is_base64_pgm() {
        let ServerMessage::Frame { bytes, encoding, .. } = ServerMessage::frame(3, b"P5\n1 1\n255\n\x7f") else {
            unreachable!()
        };
        assert_eq!(encoding, "pgm-base64");
        assert_eq!(bytes, "UDUKMSAxCjI1NQp/");
    }

    #[test]
    fn rejection_roundtrip() {
        let m = ServerMessage::rejection("nope", Some("ClickCenter"));
        let back: ServerMessage = serde_json::from_str(&m.to_json()).unwrap();
        assert_eq!(back, m);
    }
}
