//! Probe carrier, 2-DOF needle insertion mechanism and the quasi-static
//! needle/tissue contact model.
//!
//! The probe is an ideal Cartesian + yaw stage. The needle pivots about a
//! point fixed to the probe face and stays in the image plane, so the ground
//! truth tip is `pivot + r·(cos a·lateral + sin a·down)` with `r` and `a` the
//! true actuator maps.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{ray_tube_intervals, Vec3};
use crate::imaging::{ImagingConfig, NeedleSegment, ProbePose};
use crate::kinematics::{ActuatorLimit, ActuatorLimits, CalibrationParams};
use crate::phantom::{displaced_vessel, NeedleContact, PhantomModel, Vessel};

pub const CONFIG_FORMAT: u32 = 1;
pub const DT: f64 = 0.01;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("device config parse error: {0}")]
    Parse(String),
    #[error("invalid device config: {0}")]
    Invalid(String),
}

/// Physical actuator maps: feedback units to insertion length and needle angle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActuatorMap {
    pub p_l: f64,
    pub l_off: f64,
    pub p_theta: f64,
    pub theta_off: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub linear_mm_s: f64,
    pub angular_deg_s: f64,
    pub probe_mm_s: f64,
    pub yaw_deg_s: f64,
    /// Speed of operator-commanded repositioning (marks, centring, nudges).
    pub reposition_mm_s: f64,
}

/// Pivot position in image-plane coordinates relative to the probe face centre, mm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PivotOffset {
    pub lateral: f64,
    pub depth: f64,
}

/// What the controller believes about the kinematics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationSource {
    /// Fitted parameters, used as-is.
    Explicit(CalibrationParams<f64>),
    /// Componentwise offset added to the true parameters.
    Mismatch(CalibrationParams<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlConfig {
    pub f_ref: f64,
    pub lateral_speed: f64,
    pub k_p: f64,
    pub k_i: f64,
    pub settle_tolerance: f64,
    pub settle_window: f64,
    /// Bound on the integral contribution to the vertical rate, mm/s.
    pub integral_limit: f64,
    /// Height above the skin from which a scan approaches, mm.
    pub approach_height: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidewireConfig {
    /// Maximum tip offset from the lumen centre as a fraction of the radius.
    pub alpha: f64,
    /// Steepest insertion angle from the skin plane, degrees.
    pub max_angle_deg: f64,
    pub advance_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceConfig {
    pub format: u32,
    pub limits: ActuatorLimits<f64>,
    pub rates: Rates,
    pub actuator: ActuatorMap,
    pub pivot: PivotOffset,
    pub calibration: CalibrationSource,
    pub imaging: ImagingConfig,
    pub control: ControlConfig,
    /// Needle depth past the skin beyond which the angle is locked, mm.
    pub angle_lockout_mm: f64,
    /// Largest accepted tweak correction, mm.
    pub tweak_limit_mm: f64,
    pub guidewire: GuidewireConfig,
    pub home: ProbePose,
    pub home_theta_act: f64,
}

impl Default for DeviceConfig {
    fn default() -> Self {
        Self::human()
    }
}

impl DeviceConfig {
    fn base(l_off_mismatch: f64) -> Self {
        DeviceConfig {
            format: CONFIG_FORMAT,
            limits: ActuatorLimits::new(0.0, 1000.0, 150.0, 650.0),
            rates: Rates { linear_mm_s: 20.0, angular_deg_s: 30.0, probe_mm_s: 50.0, yaw_deg_s: 30.0, reposition_mm_s: 10.0 },
            actuator: ActuatorMap { p_l: 0.1, l_off: 0.0, p_theta: std::f64::consts::PI / 2048.0, theta_off: 0.05 },
            pivot: PivotOffset { lateral: -12.0, depth: 0.0 },
            calibration: CalibrationSource::Mismatch(CalibrationParams {
                p_l: 0.0,
                l_off: l_off_mismatch,
                p_theta: 0.0,
                theta_off: 0.0,
                x_scale: 0.0,
                y_scale: 0.0,
                x_off: 0.0,
                y_off: 0.0,
            }),
            imaging: ImagingConfig::default(),
            control: ControlConfig {
                f_ref: 4.0,
                lateral_speed: 2.5,
                k_p: 1.0,
                k_i: 0.5,
                settle_tolerance: 0.5,
                settle_window: 0.5,
                integral_limit: 10.0,
                approach_height: 3.0,
            },
            angle_lockout_mm: 2.0,
            tweak_limit_mm: 20.0,
            guidewire: GuidewireConfig { alpha: 0.5, max_angle_deg: 50.0, advance_mm: 150.0 },
            home: ProbePose { position: Vec3::new(0.0, 0.0, 40.0), yaw: 0.0 },
            home_theta_act: 400.0,
        }
    }

    /// Bench device: calibrated estimate places the tip 0.5 mm short of truth.
    pub fn human() -> Self {
        Self::base(-0.5)
    }

    /// In-vivo setup: a 2.8 mm length error between estimate and truth.
    pub fn porcine() -> Self {
        Self::base(-2.8)
    }

    /// Exact kinematics of the simulated device in pixel space.
    pub fn true_params(&self) -> CalibrationParams<f64> {
        let f = &self.imaging.frame;
        CalibrationParams {
            p_l: self.actuator.p_l,
            l_off: self.actuator.l_off,
            p_theta: self.actuator.p_theta,
            theta_off: self.actuator.theta_off,
            x_scale: 1.0 / f.sx,
            y_scale: 1.0 / f.sy,
            x_off: -(f.center_column() + self.pivot.lateral / f.sx),
            y_off: -self.pivot.depth / f.sy,
        }
    }

    /// Parameters the controllers use.
    pub fn calibrated_params(&self) -> CalibrationParams<f64> {
        match self.calibration {
            CalibrationSource::Explicit(p) => p,
            CalibrationSource::Mismatch(d) => {
                let t = self.true_params();
                CalibrationParams {
                    p_l: t.p_l + d.p_l,
                    l_off: t.l_off + d.l_off,
                    p_theta: t.p_theta + d.p_theta,
                    theta_off: t.theta_off + d.theta_off,
                    x_scale: t.x_scale + d.x_scale,
                    y_scale: t.y_scale + d.y_scale,
                    x_off: t.x_off + d.x_off,
                    y_off: t.y_off + d.y_off,
                }
            }
        }
    }

    /// Linear actuator rate in feedback units per second.
    pub fn linear_rate(&self) -> f64 {
        self.rates.linear_mm_s / self.actuator.p_l.abs()
    }

    pub fn angular_rate(&self) -> f64 {
        self.rates.angular_deg_s.to_radians() / self.actuator.p_theta.abs()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.into()));
        if self.format != CONFIG_FORMAT {
            return Err(ConfigError::Invalid(format!("unsupported format {}", self.format)));
        }
        if !self.limits.is_valid() {
            return bad("actuator limits must be finite with min <= max");
        }
        let r = &self.rates;
        if [r.linear_mm_s, r.angular_deg_s, r.probe_mm_s, r.yaw_deg_s, r.reposition_mm_s].iter().any(|v| !(*v > 0.0)) {
            return bad("rates must be positive");
        }
        if self.actuator.p_l == 0.0 || self.actuator.p_theta == 0.0 {
            return bad("actuator scales must be non-zero");
        }
        if self.true_params().validate().is_err() || self.calibrated_params().validate().is_err() {
            return bad("calibration parameters violate their invariants");
        }
        let c = &self.control;
        if !(c.f_ref > 0.0 && c.lateral_speed > 0.0 && c.k_p > 0.0 && c.k_i >= 0.0) {
            return bad("control gains must satisfy f_ref > 0, speed > 0, k_p > 0, k_i >= 0");
        }
        if !(self.guidewire.alpha > 0.0 && self.guidewire.max_angle_deg > 0.0) {
            return bad("guidewire thresholds must be positive");
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Needle interaction with one vessel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum ContactState {
    /// Tip outside the vessel; `holed` once the near wall has been punctured.
    Clear { holed: bool },
    /// Tip pushing a wall that first met the needle at `contact_s` along the shaft.
    Tenting { contact_s: f64, back: bool },
    Lumen,
    /// Tip has left through the back wall.
    Through,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VesselContact {
    pub vessel: String,
    pub state: ContactState,
    /// Wall contact force while tenting, N.
    pub force: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MechanismState {
    pub tick: u64,
    pub probe_position: Vec3<f64>,
    pub probe_yaw: f64,
    pub l_act: f64,
    pub theta_act: f64,
    pub axial_force: f64,
    pub skin_punctured: bool,
    /// Insertion length past the skin along the shaft, mm.
    pub inserted_mm: f64,
    pub back_wall_punctured: bool,
    pub contacts: Vec<VesselContact>,
}

impl MechanismState {
    pub fn at_home(cfg: &DeviceConfig, phantom: &PhantomModel<f64>) -> Self {
        MechanismState {
            tick: 0,
            probe_position: cfg.home.position,
            probe_yaw: cfg.home.yaw,
            l_act: cfg.limits.l_min,
            theta_act: cfg.limits.clamp_theta(cfg.home_theta_act),
            axial_force: 0.0,
            skin_punctured: false,
            inserted_mm: 0.0,
            back_wall_punctured: false,
            contacts: phantom
                .vessels
                .iter()
                .map(|v| VesselContact { vessel: v.id.clone(), state: ContactState::Clear { holed: false }, force: 0.0 })
                .collect(),
        }
    }

    pub fn probe_pose(&self) -> ProbePose {
        ProbePose { position: self.probe_position, yaw: self.probe_yaw }
    }

    pub fn in_lumen(&self) -> Option<&str> {
        self.contacts.iter().find(|c| c.state == ContactState::Lumen).map(|c| c.vessel.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MechanismCommand {
    pub probe_velocity: Vec3<f64>,
    pub yaw_rate: f64,
    pub l_target: f64,
    pub theta_target: f64,
}

impl MechanismCommand {
    /// Holds the probe and keeps the actuators where they are.
    pub fn hold(state: &MechanismState) -> Self {
        MechanismCommand { probe_velocity: Vec3::zero(), yaw_rate: 0.0, l_target: state.l_act, theta_target: state.theta_act }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum MechanismEvent {
    SkinPuncture,
    VesselWallContact { vessel: String, back_wall: bool },
    LumenEntry { vessel: String },
    BackWallPuncture { vessel: String },
    Clamped { limit: ActuatorLimit },
}

/// Ground-truth needle shaft direction for a probe pose and true angle.
pub fn needle_direction(pose: &ProbePose, angle: f64) -> Vec3<f64> {
    let plane = pose.plane();
    plane.lateral * angle.cos() + plane.down * angle.sin()
}

pub fn pivot_point(cfg: &DeviceConfig, pose: &ProbePose) -> Vec3<f64> {
    pose.plane().point(cfg.pivot.lateral, cfg.pivot.depth)
}

/// Ground-truth needle: pivot, unit direction and true length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeedleRay {
    pub pivot: Vec3<f64>,
    pub dir: Vec3<f64>,
    pub length: f64,
}

impl NeedleRay {
    pub fn tip(&self) -> Vec3<f64> {
        self.pivot + self.dir * self.length
    }

    pub fn segment(&self) -> NeedleSegment {
        NeedleSegment { pivot: self.pivot, tip: self.tip() }
    }

    pub fn angle_from(&self, normal: Vec3<f64>) -> f64 {
        self.dir.dot(normal).abs().min(1.0).asin()
    }
}

pub fn true_needle(cfg: &DeviceConfig, state: &MechanismState) -> NeedleRay {
    let a = &cfg.actuator;
    let pose = state.probe_pose();
    NeedleRay {
        pivot: pivot_point(cfg, &pose),
        dir: needle_direction(&pose, a.p_theta * state.theta_act + a.theta_off),
        length: (a.p_l * state.l_act + a.l_off).max(0.0),
    }
}

/// Shaft parameter at which the needle enters the skin: 0 when the pivot is
/// already at or below the surface, `None` if the ray never reaches it within `max_len`.
pub fn skin_entry(phantom: &PhantomModel<f64>, pivot: Vec3<f64>, dir: Vec3<f64>, max_len: f64) -> Option<f64> {
    let below = |s: f64| {
        let p = pivot + dir * s;
        phantom.surface_height(p.x, p.y).map(|h| p.z <= h).unwrap_or(false)
    };
    if below(0.0) {
        return Some(0.0);
    }
    const STEP: f64 = 0.25;
    let mut prev = 0.0;
    while prev < max_len {
        let s = (prev + STEP).min(max_len);
        if below(s) {
            let (mut lo, mut hi) = (prev, s);
            for _ in 0..40 {
                let mid = 0.5 * (lo + hi);
                if below(mid) {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            return Some(hi);
        }
        prev = s;
    }
    None
}

/// Tenting force for a wall pushed `d` mm: rolling up to `max_roll`, then tissue backing.
pub fn tenting_force(vessel: &Vessel<f64>, backing_stiffness: f64, d: f64) -> f64 {
    let d = d.max(0.0);
    if d <= vessel.max_roll {
        vessel.roll_stiffness * d
    } else {
        vessel.roll_stiffness * vessel.max_roll + backing_stiffness * (d - vessel.max_roll)
    }
}

/// Vessel geometry with any tenting contact applied.
pub fn displaced_vessels(cfg: &DeviceConfig, phantom: &PhantomModel<f64>, state: &MechanismState) -> Vec<Vessel<f64>> {
    let needle = true_needle(cfg, state);
    phantom
        .vessels
        .iter()
        .zip(&state.contacts)
        .map(|(v, c)| match c.state {
            ContactState::Tenting { .. } if c.force > 0.0 => {
                let contact = NeedleContact { point: needle.tip(), force: c.force, normal: needle.dir };
                displaced_vessel(v, Some(&contact))
            }
            _ => v.clone(),
        })
        .collect()
}

fn step_toward(current: f64, target: f64, max_step: f64) -> f64 {
    let d = target - current;
    if d.abs() <= max_step {
        target
    } else {
        current + max_step * d.signum()
    }
}

/// Advances the mechanism by one tick of length `dt`.
///
/// Actuator targets outside the limits are clamped and reported; the angle
/// is held while the needle is deeper than the lockout depth.
pub fn step(
    state: &MechanismState,
    cmd: &MechanismCommand,
    cfg: &DeviceConfig,
    phantom: &PhantomModel<f64>,
    dt: f64,
) -> (MechanismState, Vec<MechanismEvent>) {
    let mut next = state.clone();
    let mut events = Vec::new();
    next.tick += 1;

    let l_target = cfg.limits.clamp_l(cmd.l_target);
    let theta_target = cfg.limits.clamp_theta(cmd.theta_target);
    let l_clamped = l_target != cmd.l_target;
    let theta_clamped = theta_target != cmd.theta_target;
    match (l_clamped, theta_clamped) {
        (true, true) => events.push(MechanismEvent::Clamped { limit: ActuatorLimit::LinearAndAngular }),
        (true, false) => events.push(MechanismEvent::Clamped { limit: ActuatorLimit::Linear }),
        (false, true) => events.push(MechanismEvent::Clamped { limit: ActuatorLimit::Angular }),
        (false, false) => {}
    }

    let mut v = cmd.probe_velocity;
    let speed = v.norm();
    if speed > cfg.rates.probe_mm_s {
        v = v * (cfg.rates.probe_mm_s / speed);
    }
    next.probe_position += v * dt;
    let max_yaw = cfg.rates.yaw_deg_s.to_radians();
    next.probe_yaw += cmd.yaw_rate.clamp(-max_yaw, max_yaw) * dt;

    next.l_act = step_toward(state.l_act, l_target, cfg.linear_rate() * dt);
    if state.inserted_mm <= cfg.angle_lockout_mm {
        next.theta_act = step_toward(state.theta_act, theta_target, cfg.angular_rate() * dt);
    }

    let p = next.probe_position;
    next.axial_force = match phantom.surface_height(p.x, p.y) {
        Ok(h) => phantom.skin_stiffness * (h - p.z).max(0.0),
        Err(_) => 0.0,
    };

    update_needle(&mut next, cfg, phantom, &mut events);
    (next, events)
}

fn update_needle(state: &mut MechanismState, cfg: &DeviceConfig, phantom: &PhantomModel<f64>, events: &mut Vec<MechanismEvent>) {
    let needle = true_needle(cfg, state);
    let entry = skin_entry(phantom, needle.pivot, needle.dir, needle.length);
    state.inserted_mm = entry.map_or(0.0, |s| (needle.length - s).max(0.0));

    if state.inserted_mm <= 0.0 {
        // Withdrawn from the skin: the tract and any vessel contact are released.
        state.skin_punctured = false;
        state.back_wall_punctured = false;
        for c in &mut state.contacts {
            c.state = ContactState::Clear { holed: false };
            c.force = 0.0;
        }
        return;
    }
    if !state.skin_punctured && state.inserted_mm >= phantom.skin_puncture_force / phantom.skin_stiffness {
        state.skin_punctured = true;
        events.push(MechanismEvent::SkinPuncture);
    }
    if !state.skin_punctured {
        return;
    }

    let r = needle.length;
    for (vessel, contact) in phantom.vessels.iter().zip(state.contacts.iter_mut()) {
        let far = r + vessel.radius * 4.0 + 10.0;
        let interval = ray_tube_intervals(needle.pivot, needle.dir, far, &vessel.centerline, vessel.radius)
            .into_iter()
            .find(|&(_, s_out)| s_out > 0.0);
        contact.force = 0.0;
        let Some((s_in, s_out)) = interval else {
            contact.state = ContactState::Clear { holed: matches!(contact.state, ContactState::Clear { holed: true }) };
            continue;
        };
        // A tick may cross several boundaries; iterate to a fixed point.
        for _ in 0..6 {
            let before = contact.state;
            contact.state = match contact.state {
                ContactState::Clear { holed } if r >= s_in => {
                    if holed {
                        ContactState::Lumen
                    } else {
                        events.push(MechanismEvent::VesselWallContact { vessel: vessel.id.clone(), back_wall: false });
                        ContactState::Tenting { contact_s: s_in, back: false }
                    }
                }
                ContactState::Tenting { contact_s, back } => {
                    let d = r - contact_s;
                    if d < 0.0 {
                        if back {
                            ContactState::Lumen
                        } else {
                            ContactState::Clear { holed: false }
                        }
                    } else if tenting_force(vessel, phantom.backing_stiffness, d) >= vessel.wall_puncture_force {
                        if back {
                            state.back_wall_punctured = true;
                            events.push(MechanismEvent::BackWallPuncture { vessel: vessel.id.clone() });
                            ContactState::Through
                        } else {
                            events.push(MechanismEvent::LumenEntry { vessel: vessel.id.clone() });
                            ContactState::Lumen
                        }
                    } else {
                        contact.force = tenting_force(vessel, phantom.backing_stiffness, d);
                        ContactState::Tenting { contact_s, back }
                    }
                }
                ContactState::Lumen if r < s_in => ContactState::Clear { holed: true },
                ContactState::Lumen if r >= s_out => {
                    events.push(MechanismEvent::VesselWallContact { vessel: vessel.id.clone(), back_wall: true });
                    ContactState::Tenting { contact_s: s_out, back: true }
                }
                ContactState::Through if r < s_out => ContactState::Lumen,
                s => s,
            };
            if contact.state == before {
                break;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::needle_fk;
    use approx::assert_abs_diff_eq;

    fn flat_phantom() -> PhantomModel<f64> {
        let mut p = PhantomModel::human();
        p.surface = crate::phantom::Heightfield::flat(-80.0, -200.0, 2.0, 2.0, 81, 201, 0.0);
        for v in &mut p.vessels {
            for c in &mut v.centerline {
                c.z = -20.0;
            }
        }
        p.vessels.truncate(1);
        p
    }

    #[test]
    fn zero_command_is_fixed_point() {
        let cfg = DeviceConfig::human();
        let ph = PhantomModel::human();
        let s = MechanismState::at_home(&cfg, &ph);
        let (n, ev) = step(&s, &MechanismCommand::hold(&s), &cfg, &ph, DT);
        assert!(ev.is_empty());
        assert_eq!(n.tick, 1);
        assert_eq!(MechanismState { tick: 0, ..n }, s);
    }

    #[test]
    fn probe_penetration_sets_force() {
        let cfg = DeviceConfig::human();
        let mut ph = flat_phantom();
        ph.skin_stiffness = 2.0;
        let mut s = MechanismState::at_home(&cfg, &ph);
        s.probe_position = Vec3::new(0.0, 0.0, 1.0);
        let target = -1.0;
        for _ in 0..200 {
            let vz = ((target - s.probe_position.z) / DT).clamp(-50.0, 50.0);
            let cmd = MechanismCommand { probe_velocity: Vec3::new(0.0, 0.0, vz), ..MechanismCommand::hold(&s) };
            s = step(&s, &cmd, &cfg, &ph, DT).0;
        }
        assert_abs_diff_eq!(s.axial_force, 2.0, epsilon = 1e-9);
    }

    #[test]
    fn out_of_range_target_is_clamped() {
        let cfg = DeviceConfig::human();
        let ph = PhantomModel::human();
        let s = MechanismState::at_home(&cfg, &ph);
        let cmd = MechanismCommand { l_target: 5000.0, ..MechanismCommand::hold(&s) };
        let (_, ev) = step(&s, &cmd, &cfg, &ph, DT);
        assert_eq!(ev, vec![MechanismEvent::Clamped { limit: ActuatorLimit::Linear }]);
    }

    #[test]
    fn true_tip_matches_true_fk() {
        let cfg = DeviceConfig::human();
        let ph = PhantomModel::human();
        let mut s = MechanismState::at_home(&cfg, &ph);
        s.probe_yaw = 0.7;
        s.probe_position = Vec3::new(3.0, -4.0, 6.0);
        for (l, th) in [(0.0, 150.0), (250.0, 400.0), (900.0, 650.0)] {
            s.l_act = l;
            s.theta_act = th;
            let tip = true_needle(&cfg, &s).tip();
            let plane = s.probe_pose().plane();
            let q = plane.project(tip);
            let (u, v) = cfg.imaging.frame.plane_to_pixel(q.x, q.y);
            let (fu, fv) = needle_fk(&cfg.true_params(), l, th);
            assert_abs_diff_eq!(u, fu, epsilon = 1e-9);
            assert_abs_diff_eq!(v, fv, epsilon = 1e-9);
        }
    }

    #[test]
    fn wall_contact_precedes_lumen_entry() {
        let cfg = DeviceConfig::human();
        let ph = flat_phantom();
        let mut s = MechanismState::at_home(&cfg, &ph);
        // Longitudinal probe over the vessel, needle at 40 degrees.
        s.probe_position = Vec3::new(0.0, 0.0, 0.0);
        s.probe_yaw = std::f64::consts::FRAC_PI_2;
        s.theta_act = (40f64.to_radians() - cfg.actuator.theta_off) / cfg.actuator.p_theta;
        let mut seen = Vec::new();
        let cmd = MechanismCommand { l_target: 400.0, ..MechanismCommand::hold(&s) };
        for _ in 0..300 {
            let (n, ev) = step(&s, &cmd, &cfg, &ph, DT);
            s = n;
            seen.extend(ev);
        }
        let wall = seen.iter().position(|e| matches!(e, MechanismEvent::VesselWallContact { back_wall: false, .. }));
        let lumen = seen.iter().position(|e| matches!(e, MechanismEvent::LumenEntry { .. }));
        assert!(matches!(seen[0], MechanismEvent::SkinPuncture));
        assert!(wall.unwrap() < lumen.unwrap());
    }

    #[test]
    fn withdrawal_resets_contacts() {
        let cfg = DeviceConfig::human();
        let ph = flat_phantom();
        let mut s = MechanismState::at_home(&cfg, &ph);
        s.probe_position = Vec3::new(0.0, 0.0, 0.0);
        s.probe_yaw = std::f64::consts::FRAC_PI_2;
        s.theta_act = (40f64.to_radians() - 0.05) / cfg.actuator.p_theta;
        for target in [300.0, 0.0] {
            let cmd = MechanismCommand { l_target: target, ..MechanismCommand::hold(&s) };
            for _ in 0..300 {
                s = step(&s, &cmd, &cfg, &ph, DT).0;
            }
        }
        assert!(!s.skin_punctured);
        assert_eq!(s.contacts[0].state, ContactState::Clear { holed: false });
    }

    #[test]
    fn angle_locked_when_inserted() {
        let cfg = DeviceConfig::human();
        let ph = flat_phantom();
        let mut s = MechanismState::at_home(&cfg, &ph);
        s.probe_position = Vec3::new(0.0, 0.0, 0.0);
        s.l_act = 100.0;
        s = step(&s, &MechanismCommand::hold(&s), &cfg, &ph, DT).0;
        assert!(s.inserted_mm > cfg.angle_lockout_mm);
        let cmd = MechanismCommand { theta_target: 600.0, ..MechanismCommand::hold(&s) };
        let n = step(&s, &cmd, &cfg, &ph, DT).0;
        assert_eq!(n.theta_act, s.theta_act);
    }

    #[test]
    fn config_roundtrip() {
        for cfg in [DeviceConfig::human(), DeviceConfig::porcine()] {
            assert_eq!(DeviceConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        }
        let t = DeviceConfig::human().true_params();
        assert_abs_diff_eq!(t.x_off, -128.0, epsilon = 1e-12);
        assert_abs_diff_eq!(DeviceConfig::porcine().calibrated_params().l_off, -2.8, epsilon = 1e-12);
    }
}
