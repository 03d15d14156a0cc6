//! Headless scripted operator.
//!
//! A script is a list of steps: protocol messages to send, clicks whose
//! pixel is resolved from the scene at the moment they are issued, and
//! wait-until conditions. Everything runs through the same [`Session`] as the
//! server, with simulated time only.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use seldinger_core::geometry::{distance_to_polyline, Vec3};
use seldinger_core::kinematics::needle_fk;
use seldinger_core::mechanism::{displaced_vessels, true_needle, DeviceConfig, DT};
use seldinger_core::procedure::{Outcome, Phase};
use seldinger_core::{PhantomModel, Vessel};

use crate::log::SessionLog;
use crate::protocol::{ClientMessage, ServerMessage};
use crate::session::{Session, SessionError};

pub const SCRIPT_FORMAT: u32 = 1;
/// Wait timeout when a step does not give one, simulated seconds.
pub const DEFAULT_TIMEOUT_S: f64 = 30.0;

/// Canonical femoral-access script shipped with the crate.
pub const CANONICAL: &str = include_str!("../../../data/scripts/canonical.json");

#[derive(Debug, Error)]
pub enum ScriptError {
    #[error("script parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unsupported script format {0}")]
    Format(u32),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClickMode {
    Center,
    Needle,
    Tweak,
}

/// Where a scripted click lands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClickTarget {
    Pixel { u: f64, v: f64 },
    /// Centre of the vessel's section in the current image.
    VesselCenter { vessel: String },
    /// Point of the displayed needle axis closest to the vessel centreline.
    VesselOnNeedleAxis { vessel: String },
    /// Tweak click: shifts the displayed tip estimate by the visible offset
    /// between the needle tip and the vessel centreline.
    TweakToVesselCenter { vessel: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Click {
    pub mode: ClickMode,
    pub target: ClickTarget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "until", rename_all = "snake_case")]
pub enum WaitCondition {
    Phase { phase: Phase },
    /// An event of this kind since the previous wait finished.
    Event { event: String },
    ForceSettled,
    ProbeIdle,
    NeedleIdle,
    /// The vessel section centre is within `tolerance_px` of the centre
    /// column and the probe is coupled.
    VesselCentered { vessel: String, tolerance_px: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Wait {
    #[serde(flatten)]
    pub until: WaitCondition,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeout_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Step {
    Send(ClientMessage),
    Click(Click),
    Wait(Wait),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Script {
    pub format: u32,
    pub name: String,
    pub steps: Vec<Step>,
}

impl Script {
    pub fn from_json(text: &str) -> Result<Self, ScriptError> {
        let s: Script = serde_json::from_str(text)?;
        if s.format != SCRIPT_FORMAT {
            return Err(ScriptError::Format(s.format));
        }
        Ok(s)
    }

    pub fn canonical() -> Self {
        Self::from_json(CANONICAL).expect("canonical script parses")
    }

    /// The same script with every tweak click removed.
    pub fn without_tweak(&self) -> Self {
        let steps = self
            .steps
            .iter()
            .filter(|s| !matches!(s, Step::Click(Click { mode: ClickMode::Tweak, .. })))
            .cloned()
            .collect();
        Script { format: self.format, name: format!("{} (no tweak)", self.name), steps }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Directory for sidecar PGM frames; none are written when unset.
    pub frames_dir: Option<PathBuf>,
    /// Ticks between saved frames.
    pub frame_every: u64,
}

#[derive(Debug, Clone)]
pub struct ScriptRun {
    pub outcome: Option<Outcome>,
    pub final_phase: Phase,
    /// Rejections received, with the step index that caused them.
    pub rejections: Vec<(usize, String)>,
    /// Wait that timed out, if any.
    pub timed_out: Option<usize>,
    pub ticks: u64,
    pub log: SessionLog,
}

pub fn run_script(
    script: &Script,
    phantom: PhantomModel,
    cfg: DeviceConfig,
    seed: u64,
    opts: &RunOptions,
) -> Result<ScriptRun, ScriptError> {
    let mut runner = Runner { session: Session::new(phantom, cfg, seed)?, opts, rejections: Vec::new(), seen_from: 0 };
    if let Some(dir) = &opts.frames_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut timed_out = None;
    for (i, step) in script.steps.iter().enumerate() {
        match step {
            Step::Send(msg) => runner.send(i, msg.clone())?,
            Step::Click(click) => {
                let msg = runner.resolve(click);
                runner.send(i, msg)?;
            }
            Step::Wait(w) => {
                if !runner.wait(w)? {
                    timed_out = Some(i);
                    let s = &mut runner.session;
                    s.note(format!("wait {i} timed out: {:?}", w.until));
                    if !s.procedure().phase.is_terminal() {
                        runner.send(i, ClientMessage::Abort)?;
                    }
                    break;
                }
            }
        }
    }
    let Runner { session, rejections, .. } = runner;
    Ok(ScriptRun {
        outcome: session.procedure().outcome.clone(),
        final_phase: session.procedure().phase,
        rejections,
        timed_out,
        ticks: session.tick_count(),
        log: session.into_log(),
    })
}

struct Runner<'a> {
    session: Session,
    opts: &'a RunOptions,
    rejections: Vec<(usize, String)>,
    seen_from: usize,
}

impl Runner<'_> {
    fn tick(&mut self, step: usize) -> Result<(), ScriptError> {
        for m in self.session.tick() {
            if let ServerMessage::Rejection { reason, .. } = m {
                self.rejections.push((step, reason));
            }
        }
        if let Some(dir) = &self.opts.frames_dir {
            let t = self.session.tick_count();
            if self.opts.frame_every > 0 && t % self.opts.frame_every == 0 {
                let name = format!("frame_{t:08}.pgm");
                std::fs::write(dir.join(&name), self.session.render_frame().to_pgm())?;
                self.session.record_frame(t, name);
            }
        }
        Ok(())
    }

    fn send(&mut self, step: usize, msg: ClientMessage) -> Result<(), ScriptError> {
        self.session.submit(msg);
        self.tick(step)
    }

    /// Ticks until the condition holds; false on timeout.
    fn wait(&mut self, w: &Wait) -> Result<bool, ScriptError> {
        let limit = (w.timeout_s.unwrap_or(DEFAULT_TIMEOUT_S) / DT).round() as u64;
        let start = self.session.tick_count();
        loop {
            if !self.session.has_queued() && self.holds(&w.until) {
                self.seen_from = self.session.procedure().events.len();
                return Ok(true);
            }
            if self.session.tick_count() - start >= limit {
                return Ok(false);
            }
            if self.session.procedure().phase.is_terminal() {
                if let WaitCondition::Phase { phase } = &w.until {
                    if *phase != self.session.procedure().phase {
                        return Ok(false);
                    }
                }
            }
            self.tick(usize::MAX)?;
        }
    }

    fn holds(&self, c: &WaitCondition) -> bool {
        let s = &self.session;
        match c {
            WaitCondition::Phase { phase } => s.procedure().phase == *phase,
            WaitCondition::Event { event } => {
                s.procedure().events[self.seen_from..].iter().any(|e| e.event.name() == event)
            }
            WaitCondition::ForceSettled => s.force_settled(),
            WaitCondition::ProbeIdle => s.probe_idle(),
            WaitCondition::NeedleIdle => s.needle_idle(),
            WaitCondition::VesselCentered { vessel, tolerance_px } => {
                let coupled = s.mechanism().axial_force >= s.config().imaging.f_couple / 2.0;
                let centre = self.vessel_center_px(vessel);
                coupled
                    && centre.is_some_and(|(u, _)| (u - s.config().imaging.frame.center_column()).abs() <= *tolerance_px)
            }
        }
    }

    fn vessel(&self, id: &str) -> Option<Vessel> {
        let s = &self.session;
        displaced_vessels(s.config(), s.phantom(), s.mechanism()).into_iter().find(|v| v.id == id)
    }

    fn world_to_px(&self, p: Vec3<f64>) -> (f64, f64) {
        let plane = self.session.mechanism().probe_pose().plane();
        let q = plane.project(p);
        self.session.config().imaging.frame.plane_to_pixel(q.x, q.y)
    }

    fn vessel_center_px(&self, id: &str) -> Option<(f64, f64)> {
        let v = self.vessel(id)?;
        let plane = self.session.mechanism().probe_pose().plane();
        let e = v.cross_section(&plane)?;
        if !e.semi_axes.0.is_finite() {
            return None;
        }
        Some(self.session.config().imaging.frame.plane_to_pixel(e.center.x, e.center.y))
    }

    /// Pixel of the displayed needle axis whose image point is nearest the
    /// vessel centreline: 0.05 mm sampling, then golden-section refinement.
    fn vessel_on_needle_axis(&self, id: &str) -> Option<(f64, f64)> {
        let v = self.vessel(id)?;
        let s = &self.session;
        let p = s.calibrated();
        let lim = &s.config().limits;
        let frame = s.config().imaging.frame;
        let plane = s.mechanism().probe_pose().plane();
        let theta = s.mechanism().theta_act;
        let at = |mm: f64| {
            let (u, px_v) = needle_fk(p, (mm - p.l_off) / p.p_l, theta);
            let lat = (u - frame.center_column()) * frame.sx;
            let depth = px_v * frame.sy;
            ((u, px_v), distance_to_polyline(plane.point(lat, depth), &v.centerline))
        };
        let (lo, hi) = (p.length_mm(lim.l_min), p.length_mm(lim.l_max));
        let n = ((hi - lo) / 0.05).ceil() as usize;
        let best = (0..=n).map(|i| lo + (hi - lo) * i as f64 / n as f64).min_by(|a, b| at(*a).1.total_cmp(&at(*b).1))?;
        let step = (hi - lo) / n as f64;
        let (mut a, mut b) = ((best - step).max(lo), (best + step).min(hi));
        let g = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..60 {
            let c = b - g * (b - a);
            let d = a + g * (b - a);
            if at(c).1 < at(d).1 {
                b = d;
            } else {
                a = c;
            }
        }
        Some(at((a + b) / 2.0).0)
    }

    /// Estimate plus the on-screen offset from the true tip to the point of
    /// the true needle line nearest the vessel centreline.
    fn tweak_to_vessel_center(&self, id: &str) -> Option<(f64, f64)> {
        let v = self.vessel(id)?;
        let needle = true_needle(self.session.config(), self.session.mechanism());
        let dist = |t: f64| distance_to_polyline(needle.pivot + needle.dir * t, &v.centerline);
        let (mut a, mut b) = (0.0, needle.length + self.session.config().tweak_limit_mm);
        let n = ((b - a) / 0.05).ceil() as usize;
        let best = (0..=n).map(|i| b * i as f64 / n as f64).min_by(|x, y| dist(*x).total_cmp(&dist(*y)))?;
        let step = b / n as f64;
        (a, b) = ((best - step).max(0.0), best + step);
        let g = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..60 {
            let c = b - g * (b - a);
            let d = a + g * (b - a);
            if dist(c) < dist(d) {
                b = d;
            } else {
                a = c;
            }
        }
        let c = needle.pivot + needle.dir * ((a + b) / 2.0);
        let (cu, cv) = self.world_to_px(c);
        let (tu, tv) = self.world_to_px(needle.tip());
        let [eu, ev] = self.session.needle_estimate_px();
        Some((eu + cu - tu, ev + cv - tv))
    }

    fn resolve(&mut self, click: &Click) -> ClientMessage {
        let (u, v) = match &click.target {
            ClickTarget::Pixel { u, v } => Some((*u, *v)),
            ClickTarget::VesselCenter { vessel } => self.vessel_center_px(vessel),
            ClickTarget::VesselOnNeedleAxis { vessel } => self.vessel_on_needle_axis(vessel),
            ClickTarget::TweakToVesselCenter { vessel } => self.tweak_to_vessel_center(vessel),
        }
        .unwrap_or((f64::NAN, f64::NAN));
        // Unresolvable targets become an off-frame click and are rejected by the session.
        let (u, v) = if u.is_finite() && v.is_finite() { (u, v) } else { (-1.0, -1.0) };
        self.session.note(format!("{:?} click {:?} resolved to ({u}, {v})", click.mode, click.target));
        match click.mode {
            ClickMode::Center => ClientMessage::ClickCenter { u, v },
            ClickMode::Needle => ClientMessage::NeedleTarget { u, v },
            ClickMode::Tweak => ClientMessage::NeedleTweak { u, v },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_encoding() {
        let s: Step = serde_json::from_str(r#"{"wait":{"until":"phase","phase":"MarkReview","timeout_s":60}}"#).unwrap();
        assert_eq!(s, Step::Wait(Wait { until: WaitCondition::Phase { phase: Phase::MarkReview }, timeout_s: Some(60.0) }));
        let s: Step = serde_json::from_str(r#"{"send":{"type":"SaveMark"}}"#).unwrap();
        assert_eq!(s, Step::Send(ClientMessage::SaveMark));
        let s: Step =
            serde_json::from_str(r#"{"click":{"mode":"needle","target":{"kind":"pixel","u":1,"v":2}}}"#).unwrap();
        assert_eq!(s, Step::Click(Click { mode: ClickMode::Needle, target: ClickTarget::Pixel { u: 1.0, v: 2.0 } }));
    }

    #[test]
    fn canonical_parses_and_drops_tweak() {
        let s = Script::canonical();
        let tweaks = |s: &Script| s.steps.iter().filter(|x| matches!(x, Step::Click(Click { mode: ClickMode::Tweak, .. }))).count();
        assert_eq!(tweaks(&s), 1);
        assert_eq!(tweaks(&s.without_tweak()), 0);
    }

    #[test]
    fn wait_timeout_aborts() {
        let script = Script {
            format: 1,
            name: "t".into(),
            steps: vec![Step::Send(ClientMessage::Nudge { axis: crate::protocol::NudgeAxis::Lateral, mm: 1.0 }),
                Step::Wait(Wait { until: WaitCondition::Phase { phase: Phase::Complete }, timeout_s: Some(0.5) })],
        };
        let run = run_script(&script, PhantomModel::human(), DeviceConfig::human(), 3, &RunOptions::default()).unwrap();
        assert_eq!(run.timed_out, Some(1));
        assert_eq!(run.final_phase, Phase::Aborted);
        assert_eq!(run.outcome, Some(Outcome::aborted()));
    }
}
