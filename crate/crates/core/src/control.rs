//! Scanning force controller, click-to-center and the needle target/tweak
//! controllers. Everything here is a pure function of its inputs; the caller
//! owns the controller state between ticks.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Vec3;
use crate::imaging::{FrameGeometry, ImagingError, ProbePose};
use crate::kinematics::{needle_fk, needle_ik, ActuatorLimits, CalibrationParams, KinematicsError};
use crate::mechanism::{ControlConfig, MechanismState};
use crate::phantom::PhantomModel;

/// Actuator tolerance below which a stage counts as a no-op, feedback units.
const STAGE_EPS: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error("angle change locked: needle is {inserted_mm:.2} mm past the skin")]
    AngleLockout { inserted_mm: f64 },
    #[error("implausible tweak of {mm:.2} mm exceeds the {limit} mm bound")]
    ImplausibleTweak { mm: f64, limit: f64 },
    #[error("needle is not inserted")]
    NotInserted,
    #[error("rotation increment must lie in (0, 15] degrees")]
    InvalidIncrement,
    #[error("scan plan needs at least two waypoints")]
    TooFewWaypoints,
    #[error("waypoint {index} lies outside the surface domain")]
    WaypointOutsideDomain { index: usize },
    #[error("scan plan needs positive f_ref and lateral speed")]
    InvalidPlan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanPlan {
    pub waypoints: Vec<[f64; 2]>,
    pub f_ref: f64,
    pub lateral_speed: f64,
}

impl ScanPlan {
    pub fn validate(&self, phantom: &PhantomModel<f64>) -> Result<(), ControlError> {
        if self.waypoints.len() < 2 {
            return Err(ControlError::TooFewWaypoints);
        }
        if !(self.f_ref > 0.0 && self.lateral_speed > 0.0) {
            return Err(ControlError::InvalidPlan);
        }
        match self.waypoints.iter().position(|w| !phantom.surface.contains(w[0], w[1])) {
            Some(index) => Err(ControlError::WaypointOutsideDomain { index }),
            None => Ok(()),
        }
    }

    pub fn length(&self) -> f64 {
        self.waypoints.windows(2).map(|w| seg_len(w[0], w[1])).sum()
    }
}

fn seg_len(a: [f64; 2], b: [f64; 2]) -> f64 {
    (b[0] - a[0]).hypot(b[1] - a[1])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerGains {
    pub k_p: f64,
    pub k_i: f64,
    pub settle_tolerance: f64,
    pub settle_window: f64,
    pub integral_limit: f64,
}

impl From<&ControlConfig> for ControllerGains {
    fn from(c: &ControlConfig) -> Self {
        ControllerGains {
            k_p: c.k_p,
            k_i: c.k_i,
            settle_tolerance: c.settle_tolerance,
            settle_window: c.settle_window,
            integral_limit: c.integral_limit,
        }
    }
}

/// Vertical admittance law. Returns the world `z` velocity (negative is
/// downward, into the skin) and the updated force-error integral.
///
/// The integral only accumulates while in contact, and is bounded so its
/// contribution stays within `±integral_limit` mm/s.
pub fn admittance(force: f64, f_ref: f64, gains: &ControllerGains, integral: f64, in_contact: bool, dt: f64) -> (f64, f64) {
    let e = f_ref - force;
    let mut integral = integral;
    if in_contact {
        integral += e * dt;
    }
    if gains.k_i > 0.0 {
        let bound = gains.integral_limit / gains.k_i;
        integral = integral.clamp(-bound, bound);
    }
    let rate = gains.k_p * e + gains.k_i * integral;
    (-rate, integral)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "stage", rename_all = "snake_case")]
pub enum ScanStage {
    /// Moving to the safe height above the first waypoint.
    Transit,
    /// Descending and waiting for the force to settle.
    Engage { settled_ticks: u32 },
    /// Following segment `segment` at arc position `progress`.
    Traverse { segment: usize, progress: f64 },
    Done,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanState {
    pub stage: ScanStage,
    pub integral: f64,
}

impl ScanState {
    pub fn start() -> Self {
        ScanState { stage: ScanStage::Transit, integral: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeCommand {
    pub velocity: Vec3<f64>,
    pub yaw_rate: f64,
}

/// Velocity that reaches `target` in one tick, limited to `speed`.
pub fn reposition_velocity(from: Vec3<f64>, target: Vec3<f64>, speed: f64, dt: f64) -> Vec3<f64> {
    let v = (target - from) * (1.0 / dt);
    let n = v.norm();
    if n > speed {
        v * (speed / n)
    } else {
        v
    }
}

/// One tick of the hybrid force-position scan: position control along the
/// waypoint path, admittance control vertically, yaw held.
pub fn scan_step(
    state: &MechanismState,
    plan: &ScanPlan,
    gains: &ControllerGains,
    scan: &ScanState,
    phantom: &PhantomModel<f64>,
    approach: (f64, f64),
    dt: f64,
) -> (ProbeCommand, ScanState) {
    let (approach_height, transit_speed) = approach;
    let pos = state.probe_position;
    let mut next = *scan;
    let hold = |v: Vec3<f64>| ProbeCommand { velocity: v, yaw_rate: 0.0 };

    if let ScanStage::Transit = scan.stage {
        let w = plan.waypoints[0];
        let z = phantom.surface_height(w[0], w[1]).unwrap_or(pos.z) + approach_height;
        let target = Vec3::new(w[0], w[1], z);
        if (target - pos).norm() <= 1e-9 {
            next.stage = ScanStage::Engage { settled_ticks: 0 };
        } else {
            return (hold(reposition_velocity(pos, target, transit_speed, dt)), next);
        }
    }

    let in_contact = state.axial_force > 0.0;
    let (vz, integral) = admittance(state.axial_force, plan.f_ref, gains, scan.integral, in_contact, dt);
    next.integral = integral;
    let mut velocity = Vec3::new(0.0, 0.0, vz);

    match next.stage {
        ScanStage::Engage { settled_ticks } => {
            let ok = in_contact && (plan.f_ref - state.axial_force).abs() <= gains.settle_tolerance;
            let settled_ticks = if ok { settled_ticks + 1 } else { 0 };
            let window = (gains.settle_window / dt).round() as u32;
            next.stage = if settled_ticks >= window {
                ScanStage::Traverse { segment: 0, progress: 0.0 }
            } else {
                ScanStage::Engage { settled_ticks }
            };
        }
        ScanStage::Traverse { segment, progress } => {
            let mut seg = segment;
            let mut s = progress + plan.lateral_speed * dt;
            loop {
                let len = seg_len(plan.waypoints[seg], plan.waypoints[seg + 1]);
                if s < len || seg + 2 >= plan.waypoints.len() {
                    s = s.min(len);
                    break;
                }
                s -= len;
                seg += 1;
            }
            let (a, b) = (plan.waypoints[seg], plan.waypoints[seg + 1]);
            let len = seg_len(a, b);
            let t = if len > 0.0 { s / len } else { 1.0 };
            let target = [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t];
            velocity.x = (target[0] - pos.x) / dt;
            velocity.y = (target[1] - pos.y) / dt;
            let last = seg + 2 >= plan.waypoints.len() && s >= len;
            next.stage = if last { ScanStage::Done } else { ScanStage::Traverse { segment: seg, progress: s } };
        }
        _ => {}
    }
    (hold(velocity), next)
}

/// Lateral probe move bringing the clicked column to the frame centre.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CenterCommand {
    /// Translation along the probe's lateral axis, mm.
    pub delta_mm: f64,
    /// Horizontal probe target, world mm (vertical is left to the force loop).
    pub target: Vec3<f64>,
}

pub fn click_to_center(u: f64, v: f64, frame: &FrameGeometry<f64>, pose: &ProbePose) -> Result<CenterCommand, ControlError> {
    let (lateral, _) = frame.pixel_to_plane(u, v)?;
    let axis = pose.plane().lateral;
    Ok(CenterCommand { delta_mm: lateral, target: pose.position + axis * lateral })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotateDirection {
    Cw,
    Ccw,
}

/// New yaw target after one nudge; counter-clockwise (seen from above) is positive.
pub fn rotate_nudge(yaw_target: f64, direction: RotateDirection, increment: f64) -> Result<f64, ControlError> {
    if !(increment > 0.0 && increment <= 15f64.to_radians() + 1e-12) {
        return Err(ControlError::InvalidIncrement);
    }
    Ok(match direction {
        RotateDirection::Ccw => yaw_target + increment,
        RotateDirection::Cw => yaw_target - increment,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    Retract,
    Rotate,
    Extend,
}

/// One sequential actuator move of a staged needle command.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeedleStage {
    pub kind: StageKind,
    pub l_target: f64,
    pub theta_target: f64,
}

/// Angle first, then depth: withdraw to the minimum length if the angle must
/// change, rotate there, then extend to the inverse-kinematics length.
pub fn needle_target(
    u: f64,
    v: f64,
    params: &CalibrationParams<f64>,
    limits: &ActuatorLimits<f64>,
    state: &MechanismState,
    lockout_mm: f64,
) -> Result<Vec<NeedleStage>, ControlError> {
    let (l, theta) = needle_ik(params, limits, u, v)?;
    let mut stages = Vec::new();
    let mut cur_l = state.l_act;
    if (theta - state.theta_act).abs() > STAGE_EPS {
        if state.inserted_mm > lockout_mm {
            return Err(ControlError::AngleLockout { inserted_mm: state.inserted_mm });
        }
        if cur_l > limits.l_min + STAGE_EPS {
            stages.push(NeedleStage { kind: StageKind::Retract, l_target: limits.l_min, theta_target: state.theta_act });
            cur_l = limits.l_min;
        }
        stages.push(NeedleStage { kind: StageKind::Rotate, l_target: cur_l, theta_target: theta });
    }
    if (l - cur_l).abs() > STAGE_EPS {
        stages.push(NeedleStage { kind: StageKind::Extend, l_target: l, theta_target: theta });
    }
    Ok(stages)
}

/// Staged move to an absolute needle angle with the needle withdrawn.
pub fn set_angle(
    angle_rad: f64,
    params: &CalibrationParams<f64>,
    limits: &ActuatorLimits<f64>,
    state: &MechanismState,
    lockout_mm: f64,
) -> Result<Vec<NeedleStage>, ControlError> {
    let theta = (angle_rad - params.theta_off) / params.p_theta;
    if theta < limits.theta_min - 1e-9 || theta > limits.theta_max + 1e-9 {
        return Err(KinematicsError::OutsideWorkspace { limit: crate::kinematics::ActuatorLimit::Angular }.into());
    }
    let theta = limits.clamp_theta(theta);
    let mut stages = Vec::new();
    if (theta - state.theta_act).abs() > STAGE_EPS {
        if state.inserted_mm > lockout_mm {
            return Err(ControlError::AngleLockout { inserted_mm: state.inserted_mm });
        }
        if state.l_act > limits.l_min + STAGE_EPS {
            stages.push(NeedleStage { kind: StageKind::Retract, l_target: limits.l_min, theta_target: state.theta_act });
        }
        stages.push(NeedleStage { kind: StageKind::Rotate, l_target: limits.l_min, theta_target: theta });
    }
    Ok(stages)
}

/// Depth correction from a click along the needle axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TweakCommand {
    pub delta_mm: f64,
    pub l_target: f64,
}

/// Projects `click − estimated tip` (in mm) onto the estimated needle direction.
pub fn needle_tweak(
    u: f64,
    v: f64,
    params: &CalibrationParams<f64>,
    limits: &ActuatorLimits<f64>,
    frame: &FrameGeometry<f64>,
    state: &MechanismState,
    tweak_limit_mm: f64,
) -> Result<TweakCommand, ControlError> {
    if !frame.contains(u, v) {
        return Err(ImagingError::OutOfFrame { u, v, width: frame.width, height: frame.height }.into());
    }
    if !state.skin_punctured {
        return Err(ControlError::NotInserted);
    }
    let (eu, ev) = needle_fk(params, state.l_act, state.theta_act);
    let a = params.angle_rad(state.theta_act);
    let delta_mm = (u - eu) * frame.sx * a.cos() + (v - ev) * frame.sy * a.sin();
    if delta_mm.abs() > tweak_limit_mm {
        return Err(ControlError::ImplausibleTweak { mm: delta_mm, limit: tweak_limit_mm });
    }
    Ok(TweakCommand { delta_mm, l_target: limits.clamp_l(state.l_act + delta_mm / params.p_l) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mechanism::DeviceConfig;
    use approx::assert_abs_diff_eq;

    fn gains() -> ControllerGains {
        ControllerGains::from(&DeviceConfig::human().control)
    }

    #[test]
    fn admittance_equilibrium_and_proportional() {
        assert_eq!(admittance(4.0, 4.0, &gains(), 0.0, true, 0.01).0, 0.0);
        let (vz, i) = admittance(0.0, 4.0, &gains(), 0.0, false, 0.01);
        assert_abs_diff_eq!(vz, -4.0);
        assert_eq!(i, 0.0);
    }

    #[test]
    fn integral_is_bounded() {
        let g = gains();
        let mut i = 0.0;
        for _ in 0..100_000 {
            i = admittance(0.5, 4.0, &g, i, true, 0.01).1;
        }
        assert_abs_diff_eq!(g.k_i * i, g.integral_limit, epsilon = 1e-9);
    }

    #[test]
    fn centering_examples() {
        let f = FrameGeometry::standard();
        let pose = ProbePose { position: Vec3::new(1.0, 2.0, 3.0), yaw: 0.0 };
        assert_eq!(click_to_center(320.0, 77.0, &f, &pose).unwrap().delta_mm, 0.0);
        let c = click_to_center(384.0, 10.0, &f, &pose).unwrap();
        assert_abs_diff_eq!(c.delta_mm, 4.0);
        assert_abs_diff_eq!(c.target.x, 5.0);
        assert!(click_to_center(700.0, 0.0, &f, &pose).is_err());
    }

    #[test]
    fn nudges_accumulate() {
        let inc = 2f64.to_radians();
        let y = rotate_nudge(rotate_nudge(0.3, RotateDirection::Cw, inc).unwrap(), RotateDirection::Ccw, inc).unwrap();
        assert_abs_diff_eq!(y, 0.3, epsilon = 1e-15);
        let mut y = 0.0;
        for _ in 0..45 {
            y = rotate_nudge(y, RotateDirection::Ccw, inc).unwrap();
        }
        assert_abs_diff_eq!(y, std::f64::consts::FRAC_PI_2, epsilon = 1e-12);
        assert!(rotate_nudge(0.0, RotateDirection::Cw, 0.5).is_err());
    }

    fn inserted_state(l: f64, theta: f64, inserted: f64) -> MechanismState {
        let cfg = DeviceConfig::human();
        let mut s = MechanismState::at_home(&cfg, &PhantomModel::human());
        s.l_act = l;
        s.theta_act = theta;
        s.inserted_mm = inserted;
        s.skin_punctured = inserted > 0.0;
        s
    }

    #[test]
    fn target_stages() {
        let cfg = DeviceConfig::human();
        let p = cfg.calibrated_params();
        let s = inserted_state(200.0, 400.0, 0.0);
        let (u, v) = needle_fk(&p, 200.0, 400.0);
        assert!(needle_target(u, v, &p, &cfg.limits, &s, 2.0).unwrap().is_empty());
        let (u, v) = needle_fk(&p, 300.0, 400.0);
        let st = needle_target(u, v, &p, &cfg.limits, &s, 2.0).unwrap();
        assert_eq!(st.len(), 1);
        assert_eq!(st[0].kind, StageKind::Extend);
        let (u, v) = needle_fk(&p, 300.0, 500.0);
        let kinds: Vec<_> = needle_target(u, v, &p, &cfg.limits, &s, 2.0).unwrap().iter().map(|s| s.kind).collect();
        assert_eq!(kinds, vec![StageKind::Retract, StageKind::Rotate, StageKind::Extend]);
        let deep = inserted_state(200.0, 400.0, 10.0);
        assert!(matches!(needle_target(u, v, &p, &cfg.limits, &deep, 2.0), Err(ControlError::AngleLockout { .. })));
    }

    #[test]
    fn tweak_projection() {
        let cfg = DeviceConfig::human();
        let p = cfg.calibrated_params();
        let f = cfg.imaging.frame;
        let s = inserted_state(300.0, 400.0, 20.0);
        let (eu, ev) = needle_fk(&p, 300.0, 400.0);
        let a = p.angle_rad(400.0);
        assert_eq!(needle_tweak(eu, ev, &p, &cfg.limits, &f, &s, 20.0).unwrap().delta_mm, 0.0);
        let ahead = needle_tweak(eu + 3.0 * a.cos() / f.sx, ev + 3.0 * a.sin() / f.sy, &p, &cfg.limits, &f, &s, 20.0).unwrap();
        assert_abs_diff_eq!(ahead.delta_mm, 3.0, epsilon = 1e-9);
        assert_abs_diff_eq!(ahead.l_target, 330.0, epsilon = 1e-6);
        let perp = needle_tweak(eu - 3.0 * a.sin() / f.sx, ev + 3.0 * a.cos() / f.sy, &p, &cfg.limits, &f, &s, 20.0).unwrap();
        assert_abs_diff_eq!(perp.delta_mm, 0.0, epsilon = 1e-9);
        let far = needle_tweak(eu - 25.0 * a.cos() / f.sx, ev - 25.0 * a.sin() / f.sy, &p, &cfg.limits, &f, &s, 20.0);
        assert!(matches!(far, Err(ControlError::ImplausibleTweak { .. })));
    }
}
