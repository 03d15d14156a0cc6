//! The single-writer session: queued operator commands, controllers, the
//! 100 Hz mechanism tick, the procedure state machine and the log.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use seldinger_core::control::{
    self, admittance, reposition_velocity, scan_step, ControllerGains, NeedleStage, ScanPlan, ScanStage, ScanState,
    StageKind,
};
use seldinger_core::geometry::{project_onto_polyline, Vec3};
use seldinger_core::imaging::{render, RenderInput, UltrasoundFrame};
use seldinger_core::kinematics::{needle_fk, workspace_mask};
use seldinger_core::CalibrationParams;
use seldinger_core::mechanism::{self, displaced_vessels, true_needle, DeviceConfig, MechanismCommand, MechanismState, DT};
use seldinger_core::procedure::{guidewire_attempt, EventKind, Phase, ProcedureInput, ProcedureState};
use seldinger_core::PhantomModel;

use crate::log::{hash_hex, Record, SessionLog};
use crate::protocol::{ClientMessage, NudgeAxis, ServerMessage, StateUpdate, DEFAULT_ROTATE_DEG, MAX_NUDGE_MM};

/// Ticks between logged state snapshots (10 Hz).
pub const SNAPSHOT_EVERY: u64 = 10;
const POSITION_TOL: f64 = 1e-6;
const ACTUATOR_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("invalid phantom: {0}")]
    Phantom(String),
    #[error("invalid device config: {0}")]
    Config(String),
}

/// Controller memory carried between ticks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlState {
    pub scan: Option<(ScanPlan, ScanState)>,
    /// Vertical axis under admittance control.
    pub force_engaged: bool,
    pub integral: f64,
    /// Probe position target; only `x, y` are used while the force loop is engaged.
    pub probe_target: Vec3<f64>,
    pub yaw_target: f64,
    pub stages: VecDeque<NeedleStage>,
    pub l_target: f64,
    pub theta_target: f64,
    /// Consecutive in-tolerance force ticks.
    pub settled_ticks: u32,
}

pub struct Session {
    phantom: PhantomModel,
    cfg: DeviceConfig,
    seed: u64,
    calibrated: CalibrationParams,
    gains: ControllerGains,
    workspace: Vec<[f64; 2]>,
    mech: MechanismState,
    procedure: ProcedureState,
    control: ControlState,
    queue: VecDeque<ClientMessage>,
    log: SessionLog,
}

impl Session {
    pub fn new(phantom: PhantomModel, cfg: DeviceConfig, seed: u64) -> Result<Self, SessionError> {
        phantom.validate().map_err(|e| SessionError::Phantom(e.to_string()))?;
        cfg.validate().map_err(|e| SessionError::Config(e.to_string()))?;
        let calibrated = cfg.calibrated_params();
        let workspace = workspace_mask(&calibrated, &cfg.limits, &cfg.imaging.frame)
            .vertices
            .iter()
            .map(|&(u, v)| [u, v])
            .collect();
        let mech = MechanismState::at_home(&cfg, &phantom);
        let control = ControlState {
            scan: None,
            force_engaged: false,
            integral: 0.0,
            probe_target: mech.probe_position,
            yaw_target: mech.probe_yaw,
            stages: VecDeque::new(),
            l_target: mech.l_act,
            theta_target: mech.theta_act,
            settled_ticks: 0,
        };
        let log = SessionLog::new(seed, phantom.clone(), cfg.clone());
        Ok(Session {
            gains: ControllerGains::from(&cfg.control),
            phantom,
            cfg,
            seed,
            calibrated,
            workspace,
            mech,
            procedure: ProcedureState::default(),
            control,
            queue: VecDeque::new(),
            log,
        })
    }

    pub fn phantom(&self) -> &PhantomModel {
        &self.phantom
    }

    pub fn config(&self) -> &DeviceConfig {
        &self.cfg
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn mechanism(&self) -> &MechanismState {
        &self.mech
    }

    pub fn procedure(&self) -> &ProcedureState {
        &self.procedure
    }

    pub fn control(&self) -> &ControlState {
        &self.control
    }

    pub fn calibrated(&self) -> &CalibrationParams {
        &self.calibrated
    }

    pub fn log(&self) -> &SessionLog {
        &self.log
    }

    pub fn into_log(self) -> SessionLog {
        self.log
    }

    pub fn tick_count(&self) -> u64 {
        self.mech.tick
    }

    pub fn has_queued(&self) -> bool {
        !self.queue.is_empty()
    }

    /// Queues a command for the next tick boundary.
    pub fn submit(&mut self, msg: ClientMessage) {
        self.queue.push_back(msg);
    }

    pub fn note(&mut self, text: impl Into<String>) {
        let tick = self.mech.tick;
        self.log.push(Record::Note { tick, text: text.into() });
    }

    pub fn record_frame(&mut self, tick: u64, file: String) {
        self.log.push(Record::Frame { tick, file });
    }

    /// FNV-1a over the canonical serialization of the mechanism, procedure and controller state.
    pub fn state_hash(&self) -> String {
        let s = serde_json::to_string(&(&self.mech, &self.procedure, &self.control)).expect("state serializes");
        hash_hex(s.as_bytes())
    }

    pub fn force_settled(&self) -> bool {
        let window = (self.cfg.control.settle_window / DT).round() as u32;
        self.control.force_engaged && self.control.settled_ticks >= window
    }

    pub fn probe_idle(&self) -> bool {
        let c = &self.control;
        let p = self.mech.probe_position;
        let mut d = c.probe_target - p;
        if c.force_engaged {
            d.z = 0.0;
        }
        c.scan.is_none() && d.norm() <= POSITION_TOL && (c.yaw_target - self.mech.probe_yaw).abs() <= ACTUATOR_TOL
    }

    pub fn needle_idle(&self) -> bool {
        self.control.stages.is_empty()
            && (self.mech.l_act - self.control.l_target).abs() <= ACTUATOR_TOL
            && (self.mech.theta_act - self.control.theta_target).abs() <= ACTUATOR_TOL
    }

    pub fn needle_estimate_px(&self) -> [f64; 2] {
        let (u, v) = needle_fk(&self.calibrated, self.mech.l_act, self.mech.theta_act);
        [u, v]
    }

    pub fn workspace_polygon(&self) -> &[[f64; 2]] {
        &self.workspace
    }

    pub fn state_update(&self) -> StateUpdate {
        let pending = !self.queue.is_empty() || !self.probe_idle() || !self.needle_idle();
        StateUpdate {
            tick: self.mech.tick,
            phase: self.procedure.phase,
            step: self.procedure.phase.step(),
            probe: self.mech.probe_pose(),
            axial_force: self.mech.axial_force,
            needle_estimate_px: self.needle_estimate_px(),
            workspace_polygon: self.workspace.clone(),
            flash: self.procedure.flash(),
            timer_s: self.mech.tick as f64 * DT,
            pending,
            marks: self.procedure.marks.len(),
            outcome: self.procedure.outcome.clone(),
        }
    }

    /// Renders the current frame against the contact-displaced anatomy.
    pub fn render_frame(&self) -> UltrasoundFrame {
        let vessels = displaced_vessels(&self.cfg, &self.phantom, &self.mech);
        let needle = true_needle(&self.cfg, &self.mech);
        let input = RenderInput {
            probe: self.mech.probe_pose(),
            needle: (needle.length > 0.0).then(|| needle.segment()),
            axial_force: self.mech.axial_force,
            vessels: &vessels,
        };
        render(&self.phantom, &input, self.seed, self.mech.tick, &self.cfg.imaging)
    }

    /// Runs one 100 Hz tick: applies queued commands, steps controllers and
    /// the mechanism, and returns the messages for the operator.
    pub fn tick(&mut self) -> Vec<ServerMessage> {
        let tick = self.mech.tick + 1;
        let first_event = self.procedure.events.len();
        let mut answered = Vec::new();
        while let Some(msg) = self.queue.pop_front() {
            let result = self.apply(&msg, tick);
            answered.push((msg, result));
        }

        let cmd = self.controller_command();
        let (next, events) = mechanism::step(&self.mech, &cmd, &self.cfg, &self.phantom, DT);
        self.mech = next;
        for e in events {
            self.procedure.record(tick, EventKind::Mechanism { event: e });
        }
        self.after_step(tick);

        let mut out = Vec::new();
        let new_events: Vec<_> = self.procedure.events[first_event..].to_vec();
        for e in new_events {
            out.push(ServerMessage::event(e.tick, e.event.clone()));
            self.log.push(Record::Event { tick: e.tick, event: e.event });
        }
        let hash = self.state_hash();
        for (msg, result) in answered {
            let (accepted, reason) = match &result {
                Ok(()) => (true, None),
                Err(r) => (false, Some(r.clone())),
            };
            out.push(match result {
                Ok(()) => ServerMessage::StateUpdate(self.state_update()),
                Err(r) => ServerMessage::rejection(r, Some(msg.name())),
            });
            self.log.push(Record::Command { tick, message: msg, accepted, reason, hash: hash.clone() });
        }
        if tick % SNAPSHOT_EVERY == 0 {
            self.log.push(Record::Snapshot {
                tick,
                hash,
                phase: self.procedure.phase,
                axial_force: self.mech.axial_force,
            });
        }
        out
    }

    /// Phase-only validation used by the server before queueing. The full
    /// check (geometry, limits, view aspect) runs again at the tick.
    pub fn precheck(&self, msg: &ClientMessage) -> Result<(), String> {
        let input = match msg {
            ClientMessage::Hello { .. } => return Ok(()),
            ClientMessage::StartScan { .. } if self.procedure.phase == Phase::Idle => ProcedureInput::StartWaypointSelection,
            ClientMessage::StartScan { .. } => ProcedureInput::StartScan,
            ClientMessage::ClickCenter { .. } => ProcedureInput::ClickCenter,
            ClientMessage::RotateNudge { .. } => ProcedureInput::RotateNudge,
            ClientMessage::Nudge { axis, .. } => ProcedureInput::Nudge { vertical: *axis == NudgeAxis::Vertical },
            ClientMessage::SaveMark => ProcedureInput::SaveMark,
            ClientMessage::GotoMark { .. } => ProcedureInput::GotoMark,
            ClientMessage::NeedleTarget { .. } => ProcedureInput::NeedleTarget { aspect_ratio: f64::INFINITY },
            ClientMessage::NeedleTweak { .. } => ProcedureInput::NeedleTweak,
            ClientMessage::SetAngle { .. } => ProcedureInput::SetAngle,
            ClientMessage::InsertGuidewire => ProcedureInput::InsertGuidewire,
            ClientMessage::RetractNeedle => ProcedureInput::RetractNeedle,
            ClientMessage::Abort => ProcedureInput::Abort,
        };
        self.check(&input)
    }

    fn check(&self, input: &ProcedureInput) -> Result<(), String> {
        seldinger_core::procedure::transition(self.procedure.phase, input).map(|_| ()).map_err(|e| e.to_string())
    }

    fn advance(&mut self, input: ProcedureInput, tick: u64) {
        self.procedure.apply(&input, tick).expect("transition checked before mutation");
    }

    fn apply(&mut self, msg: &ClientMessage, tick: u64) -> Result<(), String> {
        let frame = self.cfg.imaging.frame;
        let lockout = self.cfg.angle_lockout_mm;
        match msg {
            ClientMessage::Hello { .. } => Ok(()),
            ClientMessage::StartScan { waypoints } => {
                let plan = ScanPlan {
                    waypoints: waypoints.clone(),
                    f_ref: self.cfg.control.f_ref,
                    lateral_speed: self.cfg.control.lateral_speed,
                };
                if self.procedure.phase == Phase::Idle {
                    self.check(&ProcedureInput::StartWaypointSelection)?;
                } else {
                    self.check(&ProcedureInput::StartScan)?;
                }
                if let Err(e) = plan.validate(&self.phantom) {
                    self.procedure.record(tick, EventKind::ScanAborted { reason: e.to_string() });
                    return Err(e.to_string());
                }
                if self.procedure.phase == Phase::Idle {
                    self.advance(ProcedureInput::StartWaypointSelection, tick);
                }
                self.advance(ProcedureInput::StartScan, tick);
                self.control.scan = Some((plan, ScanState::start()));
                self.control.force_engaged = true;
                self.control.integral = 0.0;
                self.control.settled_ticks = 0;
                self.control.yaw_target = self.mech.probe_yaw;
                Ok(())
            }
            ClientMessage::ClickCenter { u, v } => {
                self.check(&ProcedureInput::ClickCenter)?;
                let c = control::click_to_center(*u, *v, &frame, &self.mech.probe_pose()).map_err(|e| e.to_string())?;
                self.advance(ProcedureInput::ClickCenter, tick);
                self.control.probe_target.x = c.target.x;
                self.control.probe_target.y = c.target.y;
                Ok(())
            }
            ClientMessage::RotateNudge { dir, deg } => {
                self.check(&ProcedureInput::RotateNudge)?;
                let inc = deg.unwrap_or(DEFAULT_ROTATE_DEG).to_radians();
                let yaw = control::rotate_nudge(self.control.yaw_target, *dir, inc).map_err(|e| e.to_string())?;
                self.advance(ProcedureInput::RotateNudge, tick);
                self.control.yaw_target = yaw;
                Ok(())
            }
            ClientMessage::Nudge { axis, mm } => {
                let input = ProcedureInput::Nudge { vertical: *axis == NudgeAxis::Vertical };
                self.check(&input)?;
                if !(mm.is_finite() && mm.abs() <= MAX_NUDGE_MM) {
                    return Err(format!("nudge must be within ±{MAX_NUDGE_MM} mm"));
                }
                let plane = self.mech.probe_pose().plane();
                let delta = match axis {
                    NudgeAxis::Lateral => plane.lateral * *mm,
                    NudgeAxis::Elevational => plane.normal() * *mm,
                    NudgeAxis::Vertical => Vec3::new(0.0, 0.0, *mm),
                };
                let target = self.control.probe_target + delta;
                if !self.phantom.surface.contains(target.x, target.y) {
                    return Err("nudge would leave the phantom surface domain".into());
                }
                self.advance(input, tick);
                self.control.probe_target = target;
                Ok(())
            }
            ClientMessage::SaveMark => {
                self.check(&ProcedureInput::SaveMark)?;
                self.advance(ProcedureInput::SaveMark, tick);
                self.procedure.marks.push(self.mech.probe_pose());
                let index = self.procedure.marks.len() - 1;
                self.procedure.record(tick, EventKind::MarkSaved { index });
                Ok(())
            }
            ClientMessage::GotoMark { index } => {
                self.check(&ProcedureInput::GotoMark)?;
                let mark = *self.procedure.marks.get(*index).ok_or_else(|| format!("no mark {index}"))?;
                self.advance(ProcedureInput::GotoMark, tick);
                self.control.probe_target.x = mark.position.x;
                self.control.probe_target.y = mark.position.y;
                self.control.yaw_target = mark.yaw;
                Ok(())
            }
            ClientMessage::SetAngle { deg } => {
                self.check(&ProcedureInput::SetAngle)?;
                let stages = control::set_angle(deg.to_radians(), &self.calibrated, &self.cfg.limits, &self.mech, lockout)
                    .map_err(|e| e.to_string())?;
                self.advance(ProcedureInput::SetAngle, tick);
                self.control.stages = stages.into();
                Ok(())
            }
            ClientMessage::NeedleTarget { u, v } => {
                let aspect = self.target_aspect_ratio(*u, *v)?;
                let input = ProcedureInput::NeedleTarget { aspect_ratio: aspect };
                self.check(&input)?;
                let stages = control::needle_target(*u, *v, &self.calibrated, &self.cfg.limits, &self.mech, lockout)
                    .map_err(|e| e.to_string())?;
                self.advance(input, tick);
                self.control.stages = stages.into();
                Ok(())
            }
            ClientMessage::NeedleTweak { u, v } => {
                self.check(&ProcedureInput::NeedleTweak)?;
                let t = control::needle_tweak(
                    *u,
                    *v,
                    &self.calibrated,
                    &self.cfg.limits,
                    &frame,
                    &self.mech,
                    self.cfg.tweak_limit_mm,
                )
                .map_err(|e| e.to_string())?;
                self.advance(ProcedureInput::NeedleTweak, tick);
                self.control.stages =
                    [NeedleStage { kind: StageKind::Extend, l_target: t.l_target, theta_target: self.mech.theta_act }].into();
                Ok(())
            }
            ClientMessage::InsertGuidewire => {
                self.check(&ProcedureInput::InsertGuidewire)?;
                self.advance(ProcedureInput::InsertGuidewire, tick);
                let needle = true_needle(&self.cfg, &self.mech);
                let vessels = displaced_vessels(&self.cfg, &self.phantom, &self.mech);
                let normal = self.phantom.surface_normal(needle.pivot.x, needle.pivot.y).unwrap_or(Vec3::unit_z());
                let outcome =
                    guidewire_attempt(&needle, &vessels, normal, self.mech.back_wall_punctured, &self.cfg.guidewire);
                self.procedure.record(tick, EventKind::Guidewire { outcome: outcome.clone() });
                self.procedure.outcome = Some(outcome);
                Ok(())
            }
            ClientMessage::RetractNeedle => {
                self.check(&ProcedureInput::RetractNeedle)?;
                self.advance(ProcedureInput::RetractNeedle, tick);
                self.control.stages = [NeedleStage {
                    kind: StageKind::Retract,
                    l_target: self.cfg.limits.l_min,
                    theta_target: self.mech.theta_act,
                }]
                .into();
                Ok(())
            }
            ClientMessage::Abort => {
                self.check(&ProcedureInput::Abort)?;
                self.advance(ProcedureInput::Abort, tick);
                self.control.scan = None;
                self.control.stages.clear();
                self.control.l_target = self.mech.l_act;
                self.control.theta_target = self.mech.theta_act;
                self.control.probe_target = self.mech.probe_position;
                self.control.yaw_target = self.mech.probe_yaw;
                Ok(())
            }
        }
    }

    /// Major/minor ratio of the section of the vessel nearest the clicked
    /// point, `1/|n·d|` for plane normal `n` and local vessel direction `d`.
    fn target_aspect_ratio(&self, u: f64, v: f64) -> Result<f64, String> {
        let frame = self.cfg.imaging.frame;
        let (lat, depth) = frame.pixel_to_plane(u, v).map_err(|e| e.to_string())?;
        let plane = self.mech.probe_pose().plane();
        let p = plane.point(lat, depth);
        let nearest = self
            .phantom
            .vessels
            .iter()
            .map(|vs| (vs, project_onto_polyline(p, &vs.centerline)))
            .min_by(|a, b| a.1.distance.partial_cmp(&b.1.distance).expect("finite distance"))
            .ok_or("phantom has no vessels")?;
        let (vs, proj) = nearest;
        let d = (vs.centerline[proj.segment + 1] - vs.centerline[proj.segment]).normalized().ok_or("degenerate vessel")?;
        let c = plane.normal().dot(d).abs();
        Ok(if c > 0.0 { 1.0 / c } else { f64::MAX })
    }

    fn controller_command(&mut self) -> MechanismCommand {
        let (l_target, theta_target) = match self.control.stages.front() {
            Some(s) => (s.l_target, s.theta_target),
            None => (self.control.l_target, self.control.theta_target),
        };
        let rates = &self.cfg.rates;
        let pos = self.mech.probe_position;
        let velocity = if let Some((plan, scan)) = &self.control.scan {
            let approach = (self.cfg.control.approach_height, rates.probe_mm_s);
            let (pc, next) = scan_step(&self.mech, plan, &self.gains, scan, &self.phantom, approach, DT);
            self.control.scan = Some((plan.clone(), next));
            pc.velocity
        } else if self.control.force_engaged {
            let flat = Vec3::new(pos.x, pos.y, 0.0);
            let target = Vec3::new(self.control.probe_target.x, self.control.probe_target.y, 0.0);
            let mut v = reposition_velocity(flat, target, rates.reposition_mm_s, DT);
            let (vz, integral) = admittance(
                self.mech.axial_force,
                self.cfg.control.f_ref,
                &self.gains,
                self.control.integral,
                self.mech.axial_force > 0.0,
                DT,
            );
            self.control.integral = integral;
            v.z = vz;
            v
        } else {
            reposition_velocity(pos, self.control.probe_target, rates.reposition_mm_s, DT)
        };
        MechanismCommand {
            probe_velocity: velocity,
            yaw_rate: (self.control.yaw_target - self.mech.probe_yaw) / DT,
            l_target,
            theta_target,
        }
    }

    fn after_step(&mut self, tick: u64) {
        if let Some((_, scan)) = &self.control.scan {
            if scan.stage == ScanStage::Done {
                self.control.integral = scan.integral;
                self.control.scan = None;
                self.control.probe_target = self.mech.probe_position;
                self.advance(ProcedureInput::ScanComplete, tick);
            } else if !matches!(scan.stage, ScanStage::Transit) {
                self.control.integral = scan.integral;
            }
        }
        if let Some(stage) = self.control.stages.front().copied() {
            let reached = (self.mech.l_act - stage.l_target).abs() <= ACTUATOR_TOL
                && (self.mech.theta_act - stage.theta_target).abs() <= ACTUATOR_TOL;
            if reached {
                self.control.stages.pop_front();
                self.control.l_target = stage.l_target;
                self.control.theta_target = stage.theta_target;
            }
        }
        let e = (self.cfg.control.f_ref - self.mech.axial_force).abs();
        self.control.settled_ticks = if self.control.force_engaged && self.mech.axial_force > 0.0 && e <= self.cfg.control.settle_tolerance
        {
            self.control.settled_ticks.saturating_add(1)
        } else {
            0
        };
        if self.procedure.phase == Phase::Retracting && self.needle_idle() && self.mech.l_act <= self.cfg.limits.l_min + ACTUATOR_TOL {
            self.advance(ProcedureInput::NeedleRetracted, tick);
        }
    }
}
