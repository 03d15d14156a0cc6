//! The Seldinger workflow as a state machine, plus guidewire grading against
//! ground-truth geometry.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{arc_lengths, distance_to_polyline, project_onto_polyline, ray_tube_intervals, Vec3};
use crate::imaging::ProbePose;
use crate::mechanism::{GuidewireConfig, MechanismEvent, NeedleRay};
use crate::phantom::Vessel;

/// Smallest major/minor ratio of the target vessel section that counts as a longitudinal view.
pub const LONGITUDINAL_ASPECT: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    Idle,
    WaypointSelection,
    Scanning,
    MarkReview,
    Centering,
    NeedleAligning,
    Inserting,
    Tweaking,
    GuidewireInserting,
    Retracting,
    Complete,
    Aborted,
}

impl Phase {
    pub fn is_terminal(self) -> bool {
        matches!(self, Phase::Complete | Phase::Aborted)
    }

    /// Workflow step (1–8) the phase belongs to; 0 before the procedure starts.
    pub fn step(self) -> u8 {
        match self {
            Phase::Idle | Phase::Aborted => 0,
            Phase::WaypointSelection => 1,
            Phase::Scanning => 2,
            Phase::MarkReview => 3,
            Phase::Centering => 4,
            Phase::NeedleAligning | Phase::Inserting => 5,
            Phase::Tweaking => 6,
            Phase::GuidewireInserting => 7,
            Phase::Retracting | Phase::Complete => 8,
        }
    }

    /// Whether the vertical axis is owned by the force controller.
    pub fn force_controlled(self) -> bool {
        !matches!(self, Phase::Idle | Phase::WaypointSelection | Phase::Aborted)
    }

    pub fn all() -> [Phase; 12] {
        use Phase::*;
        [
            Idle,
            WaypointSelection,
            Scanning,
            MarkReview,
            Centering,
            NeedleAligning,
            Inserting,
            Tweaking,
            GuidewireInserting,
            Retracting,
            Complete,
            Aborted,
        ]
    }
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

/// Inputs that can move the workflow, from the operator or from the simulation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "input")]
pub enum ProcedureInput {
    StartWaypointSelection,
    Nudge { vertical: bool },
    StartScan,
    ScanComplete,
    SaveMark,
    GotoMark,
    ClickCenter,
    RotateNudge,
    SetAngle,
    /// `aspect_ratio` of the targeted vessel's section in the current image plane.
    NeedleTarget { aspect_ratio: f64 },
    NeedleTweak,
    InsertGuidewire,
    RetractNeedle,
    NeedleRetracted,
    Abort,
}

impl ProcedureInput {
    pub fn name(&self) -> &'static str {
        match self {
            ProcedureInput::StartWaypointSelection => "StartWaypointSelection",
            ProcedureInput::Nudge { .. } => "Nudge",
            ProcedureInput::StartScan => "StartScan",
            ProcedureInput::ScanComplete => "ScanComplete",
            ProcedureInput::SaveMark => "SaveMark",
            ProcedureInput::GotoMark => "GotoMark",
            ProcedureInput::ClickCenter => "ClickCenter",
            ProcedureInput::RotateNudge => "RotateNudge",
            ProcedureInput::SetAngle => "SetAngle",
            ProcedureInput::NeedleTarget { .. } => "NeedleTarget",
            ProcedureInput::NeedleTweak => "NeedleTweak",
            ProcedureInput::InsertGuidewire => "InsertGuidewire",
            ProcedureInput::RetractNeedle => "RetractNeedle",
            ProcedureInput::NeedleRetracted => "NeedleRetracted",
            ProcedureInput::Abort => "Abort",
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("{input} rejected in phase {phase}: {reason}")]
pub struct TransitionError {
    pub phase: Phase,
    pub input: &'static str,
    pub reason: String,
}

/// The allowed edge set. Returns the next phase or a rejection naming the current one.
pub fn transition(phase: Phase, input: &ProcedureInput) -> Result<Phase, TransitionError> {
    use Phase::*;
    use ProcedureInput as I;
    let reject = |reason: &str| Err(TransitionError { phase, input: input.name(), reason: reason.into() });
    if let I::Abort = input {
        return if phase.is_terminal() { reject("procedure already finished") } else { Ok(Aborted) };
    }
    if let I::Nudge { vertical: true } = input {
        if phase.force_controlled() {
            return reject("vertical motion is owned by the force controller");
        }
    }
    match (phase, input) {
        (Idle, I::StartWaypointSelection | I::Nudge { .. }) => Ok(WaypointSelection),
        (WaypointSelection, I::Nudge { .. } | I::SaveMark) => Ok(WaypointSelection),
        (WaypointSelection, I::StartScan) => Ok(Scanning),
        (Scanning, I::SaveMark) => Ok(Scanning),
        (Scanning, I::ScanComplete) => Ok(MarkReview),
        (MarkReview, I::SaveMark | I::GotoMark | I::RotateNudge | I::Nudge { .. }) => Ok(MarkReview),
        (MarkReview | Centering, I::ClickCenter) => Ok(Centering),
        (Centering, I::RotateNudge | I::Nudge { .. } | I::GotoMark | I::SaveMark) => Ok(Centering),
        (Centering | NeedleAligning, I::SetAngle) => Ok(NeedleAligning),
        (NeedleAligning, I::ClickCenter | I::RotateNudge | I::Nudge { .. }) => Ok(NeedleAligning),
        (NeedleAligning, I::NeedleTarget { aspect_ratio }) => {
            if *aspect_ratio >= LONGITUDINAL_ASPECT {
                Ok(Inserting)
            } else {
                reject(&format!(
                    "target vessel section aspect ratio {aspect_ratio:.2} < {LONGITUDINAL_ASPECT}: rotate the probe parallel to the vessel"
                ))
            }
        }
        (Inserting | Tweaking, I::NeedleTarget { .. }) => Ok(Inserting),
        (Inserting | Tweaking, I::NeedleTweak) => Ok(Tweaking),
        (Inserting | Tweaking, I::InsertGuidewire) => Ok(GuidewireInserting),
        (GuidewireInserting, I::RetractNeedle) => Ok(Retracting),
        (Retracting, I::NeedleRetracted) => Ok(Complete),
        _ => reject("not allowed in this phase"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FailureMode {
    WallCatch,
    BackWallPuncture,
    OutOfWorkspace,
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub success: bool,
    pub failure_mode: Option<FailureMode>,
    /// Tip distance from the nearest lumen centreline over its radius; absent without a vessel.
    pub tip_offset_fraction: Option<f64>,
    /// Needle angle from the skin plane, rad; absent for an operator abort.
    pub insertion_angle: Option<f64>,
    pub vessel: Option<String>,
    /// How far the wire advanced along the vessel, mm.
    pub wire_advance_mm: f64,
}

impl Outcome {
    pub fn aborted() -> Self {
        Outcome {
            success: false,
            failure_mode: Some(FailureMode::Aborted),
            tip_offset_fraction: None,
            insertion_angle: None,
            vessel: None,
            wire_advance_mm: 0.0,
        }
    }
}

/// Grades a guidewire pass from ground truth.
///
/// In order: a back-wall event, or a shaft that leaves a lumen before its
/// tip, is a back-wall puncture; a tip in no lumen is a miss; a tip too far
/// off-centre or a needle too steep catches the wall; otherwise the wire
/// advances along the vessel.
pub fn guidewire_attempt(
    needle: &NeedleRay,
    vessels: &[Vessel<f64>],
    skin_normal: Vec3<f64>,
    back_wall_event: bool,
    cfg: &GuidewireConfig,
) -> Outcome {
    let tip = needle.tip();
    let insertion_angle = needle.angle_from(skin_normal);
    let offsets: Vec<f64> = vessels.iter().map(|v| distance_to_polyline(tip, &v.centerline) / v.radius).collect();
    let nearest = offsets
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).expect("finite offsets"))
        .map(|(i, _)| i);
    let fail = |mode: FailureMode, idx: Option<usize>| Outcome {
        success: false,
        failure_mode: Some(mode),
        tip_offset_fraction: idx.map(|i| offsets[i]),
        insertion_angle: Some(insertion_angle),
        vessel: idx.map(|i| vessels[i].id.clone()),
        wire_advance_mm: 0.0,
    };

    let exited = vessels.iter().zip(&offsets).position(|(v, &frac)| {
        let inside = frac < 1.0;
        ray_tube_intervals(needle.pivot, needle.dir, needle.length, &v.centerline, v.radius)
            .iter()
            .any(|&(a, b)| b > a && !(inside && b >= needle.length))
    });
    if back_wall_event || exited.is_some() {
        return fail(FailureMode::BackWallPuncture, exited.or(nearest));
    }
    let Some(idx) = (0..vessels.len()).find(|&i| offsets[i] < 1.0) else {
        return fail(FailureMode::OutOfWorkspace, nearest);
    };
    if offsets[idx] > cfg.alpha || insertion_angle > cfg.max_angle_deg.to_radians() {
        return fail(FailureMode::WallCatch, Some(idx));
    }

    let v = &vessels[idx];
    let proj = project_onto_polyline(tip, &v.centerline);
    let total = *arc_lengths(&v.centerline).last().expect("validated centerline");
    let seg = proj.segment;
    let tangent = v.centerline[seg + 1] - v.centerline[seg];
    let remaining = if tangent.dot(needle.dir) >= 0.0 { total - proj.arc_length } else { proj.arc_length };
    Outcome {
        success: true,
        failure_mode: None,
        tip_offset_fraction: Some(offsets[idx]),
        insertion_angle: Some(insertion_angle),
        vessel: Some(v.id.clone()),
        wire_advance_mm: cfg.advance_mm.min(remaining.max(0.0)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum EventKind {
    PhaseChanged { from: Phase, to: Phase },
    Mechanism { event: MechanismEvent },
    MarkSaved { index: usize },
    ScanAborted { reason: String },
    Guidewire { outcome: Outcome },
}

impl EventKind {
    /// Short name of the event, the innermost kind for mechanism events.
    pub fn name(&self) -> &'static str {
        match self {
            EventKind::PhaseChanged { .. } => "PhaseChanged",
            EventKind::Mechanism { event } => match event {
                MechanismEvent::SkinPuncture => "SkinPuncture",
                MechanismEvent::VesselWallContact { .. } => "VesselWallContact",
                MechanismEvent::LumenEntry { .. } => "LumenEntry",
                MechanismEvent::BackWallPuncture { .. } => "BackWallPuncture",
                MechanismEvent::Clamped { .. } => "Clamped",
            },
            EventKind::MarkSaved { .. } => "MarkSaved",
            EventKind::ScanAborted { .. } => "ScanAborted",
            EventKind::Guidewire { .. } => "Guidewire",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcedureEvent {
    pub tick: u64,
    pub event: EventKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcedureState {
    pub phase: Phase,
    pub marks: Vec<ProbePose>,
    pub events: Vec<ProcedureEvent>,
    pub outcome: Option<Outcome>,
}

impl Default for ProcedureState {
    fn default() -> Self {
        ProcedureState { phase: Phase::Idle, marks: Vec::new(), events: Vec::new(), outcome: None }
    }
}

impl ProcedureState {
    /// Applies `input` at `tick`, recording a phase change when one happens.
    pub fn apply(&mut self, input: &ProcedureInput, tick: u64) -> Result<Phase, TransitionError> {
        let next = transition(self.phase, input)?;
        if next != self.phase {
            self.record(tick, EventKind::PhaseChanged { from: self.phase, to: next });
            self.phase = next;
            if next == Phase::Aborted {
                self.outcome = Some(Outcome::aborted());
            }
        }
        Ok(next)
    }

    /// Appends an event; ticks must not go backwards.
    pub fn record(&mut self, tick: u64, event: EventKind) {
        debug_assert!(self.events.last().is_none_or(|e| e.tick <= tick));
        self.events.push(ProcedureEvent { tick, event });
    }

    pub fn flash(&self) -> bool {
        lumen_entry_monitor(&self.events)
    }
}

/// Blood-flash indicator: on from the first lumen entry until retraction starts.
pub fn lumen_entry_monitor(events: &[ProcedureEvent]) -> bool {
    let mut on = false;
    for e in events {
        match &e.event {
            EventKind::Mechanism { event: MechanismEvent::LumenEntry { .. } } => on = true,
            EventKind::PhaseChanged { to: Phase::Retracting, .. } => on = false,
            _ => {}
        }
    }
    on
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::PhantomModel;

    fn artery() -> Vessel<f64> {
        PhantomModel::<f64>::human().vessels[0].clone()
    }

    fn cfg() -> GuidewireConfig {
        crate::mechanism::DeviceConfig::human().guidewire
    }

    /// Needle in the x = 0 plane at `deg` below horizontal, tip at `tip`.
    fn needle_to(tip: Vec3<f64>, deg: f64, length: f64) -> NeedleRay {
        let a = deg.to_radians();
        let dir = Vec3::new(0.0, a.cos(), -a.sin());
        NeedleRay { pivot: tip - dir * length, dir, length }
    }

    #[test]
    fn first_edge_and_guard() {
        assert_eq!(transition(Phase::Idle, &ProcedureInput::StartWaypointSelection), Ok(Phase::WaypointSelection));
        let err = transition(Phase::Scanning, &ProcedureInput::ClickCenter).unwrap_err();
        assert_eq!(err.phase, Phase::Scanning);
        assert!(err.to_string().contains("Scanning"));
        assert!(transition(Phase::NeedleAligning, &ProcedureInput::NeedleTarget { aspect_ratio: 1.0 }).is_err());
        assert!(transition(Phase::Complete, &ProcedureInput::Abort).is_err());
    }

    #[test]
    fn ideal_placement_succeeds() {
        let c = artery().centerline[0];
        let tip = Vec3::new(0.0, 0.0, c.z);
        let o = guidewire_attempt(&needle_to(tip, 30.0, 25.0), &[artery()], Vec3::unit_z(), false, &cfg());
        assert!(o.success);
        assert_eq!(o.tip_offset_fraction, Some(0.0));
        assert!(o.wire_advance_mm == 150.0);
    }

    #[test]
    fn off_centre_tip_catches() {
        let c = artery().centerline[0];
        let tip = Vec3::new(0.0, 0.0, c.z + 0.9 * 3.5);
        let o = guidewire_attempt(&needle_to(tip, 30.0, 25.0), &[artery()], Vec3::unit_z(), false, &cfg());
        assert_eq!(o.failure_mode, Some(FailureMode::WallCatch));
    }

    #[test]
    fn steep_needle_catches() {
        let c = artery().centerline[0];
        let o = guidewire_attempt(&needle_to(Vec3::new(0.0, 0.0, c.z), 60.0, 25.0), &[artery()], Vec3::unit_z(), false, &cfg());
        assert_eq!(o.failure_mode, Some(FailureMode::WallCatch));
    }

    #[test]
    fn through_and_through_is_back_wall() {
        // Vertical needle through the centre, tip 2r past the near wall.
        let c = artery().centerline[0];
        let dir = Vec3::new(0.0, 0.0, -1.0);
        let near = Vec3::new(0.0, 0.0, c.z + 3.5);
        let pivot = near + Vec3::new(0.0, 0.0, 15.0);
        let n = NeedleRay { pivot, dir, length: 15.0 + 7.0 };
        let o = guidewire_attempt(&n, &[artery()], Vec3::unit_z(), false, &cfg());
        assert_eq!(o.failure_mode, Some(FailureMode::BackWallPuncture));
        let n = NeedleRay { length: 15.0 + 9.0, ..n };
        assert_eq!(guidewire_attempt(&n, &[artery()], Vec3::unit_z(), false, &cfg()).failure_mode, Some(FailureMode::BackWallPuncture));
    }

    #[test]
    fn miss_is_out_of_workspace() {
        let n = needle_to(Vec3::new(0.0, 0.0, 0.0), 30.0, 10.0);
        assert_eq!(guidewire_attempt(&n, &[artery()], Vec3::unit_z(), false, &cfg()).failure_mode, Some(FailureMode::OutOfWorkspace));
    }

    #[test]
    fn flash_follows_entry_until_retraction() {
        let mut s = ProcedureState::default();
        assert!(!s.flash());
        s.record(5, EventKind::Mechanism { event: MechanismEvent::LumenEntry { vessel: "artery".into() } });
        assert!(s.flash());
        s.phase = Phase::GuidewireInserting;
        s.apply(&ProcedureInput::RetractNeedle, 9).unwrap();
        assert!(!s.flash());
    }
}
