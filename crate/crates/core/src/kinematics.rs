//! Needle-tip kinematics of the 2-DOF insertion mechanism in ultrasound pixel space.
//!
//! The tip pixel is an affine map of the actuator feedback through polar
//! coordinates about the pivot:
//!
//! ```text
//! u = (p_l·l + l_off)·cos(p_θ·θ + θ_off)·x_scale − x_off
//! v = (p_l·l + l_off)·sin(p_θ·θ + θ_off)·y_scale − y_off
//! ```

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::FrameGeometry;
use crate::scalar::Scalar;

/// The eight parameters mapping actuator feedback to the needle-tip pixel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct CalibrationParams<T> {
    /// Insertion length per linear actuator unit, mm/unit.
    pub p_l: T,
    /// Insertion length at zero feedback, mm.
    pub l_off: T,
    /// Needle angle per angular actuator unit, rad/unit.
    pub p_theta: T,
    /// Needle angle at zero feedback, rad.
    pub theta_off: T,
    /// Lateral image scale, px/mm.
    pub x_scale: T,
    /// Depth image scale, px/mm.
    pub y_scale: T,
    /// Negated pivot column, px.
    pub x_off: T,
    /// Negated pivot row, px.
    pub y_off: T,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KinematicsError {
    #[error("invalid calibration parameters: {0}")]
    InvalidParams(&'static str),
    #[error("target outside the needle workspace: {limit} limit violated")]
    OutsideWorkspace { limit: ActuatorLimit },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActuatorLimit {
    Linear,
    Angular,
    LinearAndAngular,
}

impl std::fmt::Display for ActuatorLimit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ActuatorLimit::Linear => "linear",
            ActuatorLimit::Angular => "angular",
            ActuatorLimit::LinearAndAngular => "linear and angular",
        })
    }
}

impl<T: Scalar> CalibrationParams<T> {
    /// Unit scales, zero offsets: `u = l·cos θ`, `v = l·sin θ`.
    pub fn identity() -> Self {
        CalibrationParams {
            p_l: T::one(),
            l_off: T::zero(),
            p_theta: T::one(),
            theta_off: T::zero(),
            x_scale: T::one(),
            y_scale: T::one(),
            x_off: T::zero(),
            y_off: T::zero(),
        }
    }

    pub fn validate(&self) -> Result<(), KinematicsError> {
        let all = [self.p_l, self.l_off, self.p_theta, self.theta_off, self.x_scale, self.y_scale, self.x_off, self.y_off];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(KinematicsError::InvalidParams("parameters must be finite"));
        }
        if !(self.x_scale > T::zero() && self.y_scale > T::zero()) {
            return Err(KinematicsError::InvalidParams("image scales must be positive"));
        }
        if self.p_l == T::zero() || self.p_theta == T::zero() {
            return Err(KinematicsError::InvalidParams("actuator gains must be non-zero"));
        }
        Ok(())
    }

    /// Insertion length in mm for linear feedback `l_act`.
    pub fn length_mm(&self, l_act: T) -> T {
        self.p_l * l_act + self.l_off
    }

    /// Needle angle in rad for angular feedback `theta_act`.
    pub fn angle_rad(&self, theta_act: T) -> T {
        self.p_theta * theta_act + self.theta_off
    }

    /// Pivot (centre of rotation) in pixel space.
    pub fn pivot_px(&self) -> (T, T) {
        (-self.x_off, -self.y_off)
    }

    /// Applies the one-parameter gauge `(p_l, l_off) → c·(p_l, l_off)`,
    /// `(x_scale, y_scale) → (x_scale, y_scale)/c`, which leaves the forward map unchanged.
    pub fn regauged(&self, c: T) -> Self {
        CalibrationParams {
            p_l: self.p_l * c,
            l_off: self.l_off * c,
            x_scale: self.x_scale / c,
            y_scale: self.y_scale / c,
            ..*self
        }
    }
}

/// Rectangle of admissible actuator feedback values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ActuatorLimits<T> {
    pub l_min: T,
    pub l_max: T,
    pub theta_min: T,
    pub theta_max: T,
}

impl<T: Scalar> ActuatorLimits<T> {
    pub fn new(l_min: T, l_max: T, theta_min: T, theta_max: T) -> Self {
        ActuatorLimits { l_min, l_max, theta_min, theta_max }
    }

    pub fn is_valid(&self) -> bool {
        self.l_min <= self.l_max && self.theta_min <= self.theta_max
    }

    pub fn contains(&self, l_act: T, theta_act: T) -> bool {
        l_act >= self.l_min && l_act <= self.l_max && theta_act >= self.theta_min && theta_act <= self.theta_max
    }

    pub fn clamp_l(&self, l_act: T) -> T {
        l_act.max(self.l_min).min(self.l_max)
    }

    pub fn clamp_theta(&self, theta_act: T) -> T {
        theta_act.max(self.theta_min).min(self.theta_max)
    }
}

/// Needle-tip pixel for actuator feedback `(l_act, theta_act)`.
pub fn needle_fk<T: Scalar>(params: &CalibrationParams<T>, l_act: T, theta_act: T) -> (T, T) {
    let r = params.length_mm(l_act);
    let a = params.angle_rad(theta_act);
    (r * a.cos() * params.x_scale - params.x_off, r * a.sin() * params.y_scale - params.y_off)
}

/// Actuator feedback reaching pixel `(u, v)`, without limit checks.
pub fn needle_ik_unchecked<T: Scalar>(params: &CalibrationParams<T>, u: T, v: T) -> (T, T) {
    let x = (u + params.x_off) / params.x_scale;
    let y = (v + params.y_off) / params.y_scale;
    let r = (x * x + y * y).sqrt();
    let a = y.atan2(x);
    ((r - params.l_off) / params.p_l, (a - params.theta_off) / params.p_theta)
}

/// Actuator feedback reaching pixel `(u, v)`, rejected when outside `limits`.
pub fn needle_ik<T: Scalar>(
    params: &CalibrationParams<T>,
    limits: &ActuatorLimits<T>,
    u: T,
    v: T,
) -> Result<(T, T), KinematicsError> {
    let (l_act, theta_act) = needle_ik_unchecked(params, u, v);
    // Tolerate round-off at the limits so boundary pixels produced by FK stay reachable.
    let tol = T::lit(1e-9);
    let l_tol = tol * (T::one() + limits.l_max.abs().max(limits.l_min.abs()));
    let t_tol = tol * (T::one() + limits.theta_max.abs().max(limits.theta_min.abs()));
    let l_bad = !(l_act >= limits.l_min - l_tol && l_act <= limits.l_max + l_tol);
    let t_bad = !(theta_act >= limits.theta_min - t_tol && theta_act <= limits.theta_max + t_tol);
    match (l_bad, t_bad) {
        (false, false) => Ok((limits.clamp_l(l_act), limits.clamp_theta(theta_act))),
        (true, false) => Err(KinematicsError::OutsideWorkspace { limit: ActuatorLimit::Linear }),
        (false, true) => Err(KinematicsError::OutsideWorkspace { limit: ActuatorLimit::Angular }),
        (true, true) => Err(KinematicsError::OutsideWorkspace { limit: ActuatorLimit::LinearAndAngular }),
    }
}

/// Arc samples per boundary arc of the workspace polygon.
pub const WORKSPACE_ARC_SAMPLES: usize = 96;
/// Hard cap on workspace polygon vertices.
pub const WORKSPACE_MAX_VERTICES: usize = 256;

/// Pixel-space polygon approximating the needle workspace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct WorkspacePolygon<T> {
    pub vertices: Vec<(T, T)>,
}

impl<T: Scalar> WorkspacePolygon<T> {
    /// Absolute shoelace area in px².
    pub fn area(&self) -> T {
        let n = self.vertices.len();
        if n < 3 {
            return T::zero();
        }
        let mut acc = T::zero();
        for i in 0..n {
            let (x0, y0) = self.vertices[i];
            let (x1, y1) = self.vertices[(i + 1) % n];
            acc = acc + x0 * y1 - x1 * y0;
        }
        (acc * T::lit(0.5)).abs()
    }

    /// Even-odd point-in-polygon test.
    pub fn contains(&self, x: T, y: T) -> bool {
        let n = self.vertices.len();
        if n < 3 {
            return false;
        }
        let mut inside = false;
        let mut j = n - 1;
        for i in 0..n {
            let (xi, yi) = self.vertices[i];
            let (xj, yj) = self.vertices[j];
            if (yi > y) != (yj > y) {
                let xc = xi + (y - yi) * (xj - xi) / (yj - yi);
                if x < xc {
                    inside = !inside;
                }
            }
            j = i;
        }
        inside
    }

    /// Pixels (sampled at integer coordinates) inside the polygon, as a row-major mask.
    pub fn rasterize(&self, width: usize, height: usize) -> Vec<bool> {
        let mut mask = vec![false; width * height];
        for v in 0..height {
            for u in 0..width {
                mask[v * width + u] = self.contains(T::idx(u), T::idx(v));
            }
        }
        mask
    }
}

/// The image of the actuator-limit rectangle under [`needle_fk`], traced as
/// outer arc, far radial edge, inner arc and near radial edge, then clipped to
/// the frame rectangle.
pub fn workspace_mask<T: Scalar>(
    params: &CalibrationParams<T>,
    limits: &ActuatorLimits<T>,
    frame: &FrameGeometry<T>,
) -> WorkspacePolygon<T> {
    let n = WORKSPACE_ARC_SAMPLES;
    let theta_at = |k: usize| {
        limits.theta_min + (limits.theta_max - limits.theta_min) * T::idx(k) / T::idx(n - 1)
    };
    let mut ring: Vec<(T, T)> = Vec::with_capacity(2 * n);
    for k in 0..n {
        ring.push(needle_fk(params, limits.l_max, theta_at(k)));
    }
    for k in (0..n).rev() {
        ring.push(needle_fk(params, limits.l_min, theta_at(k)));
    }
    ring.dedup_by(|a, b| (a.0 - b.0).abs() <= T::lit(1e-12) && (a.1 - b.1).abs() <= T::lit(1e-12));
    let width = T::idx(frame.width as usize);
    let height = T::idx(frame.height as usize);
    let mut clipped = clip_to_rect(&ring, T::zero(), T::zero(), width, height);
    clipped.dedup_by(|a, b| (a.0 - b.0).abs() <= T::lit(1e-9) && (a.1 - b.1).abs() <= T::lit(1e-9));
    if clipped.len() > WORKSPACE_MAX_VERTICES {
        let stride = clipped.len().div_ceil(WORKSPACE_MAX_VERTICES);
        clipped = clipped.into_iter().step_by(stride).collect();
    }
    WorkspacePolygon { vertices: clipped }
}

/// Sutherland–Hodgman clipping against an axis-aligned rectangle.
fn clip_to_rect<T: Scalar>(poly: &[(T, T)], x0: T, y0: T, x1: T, y1: T) -> Vec<(T, T)> {
    #[derive(Clone, Copy)]
    enum Edge {
        Left,
        Right,
        Top,
        Bottom,
    }
    let inside = |p: (T, T), e: Edge| match e {
        Edge::Left => p.0 >= x0,
        Edge::Right => p.0 <= x1,
        Edge::Top => p.1 >= y0,
        Edge::Bottom => p.1 <= y1,
    };
    let cross = |a: (T, T), b: (T, T), e: Edge| {
        let t = match e {
            Edge::Left => (x0 - a.0) / (b.0 - a.0),
            Edge::Right => (x1 - a.0) / (b.0 - a.0),
            Edge::Top => (y0 - a.1) / (b.1 - a.1),
            Edge::Bottom => (y1 - a.1) / (b.1 - a.1),
        };
        (a.0 + (b.0 - a.0) * t, a.1 + (b.1 - a.1) * t)
    };
    let mut out: Vec<(T, T)> = poly.to_vec();
    for e in [Edge::Left, Edge::Right, Edge::Top, Edge::Bottom] {
        if out.is_empty() {
            break;
        }
        let input = std::mem::take(&mut out);
        let mut prev = *input.last().expect("non-empty");
        for &cur in &input {
            match (inside(cur, e), inside(prev, e)) {
                (true, true) => out.push(cur),
                (true, false) => {
                    out.push(cross(prev, cur, e));
                    out.push(cur);
                }
                (false, true) => out.push(cross(prev, cur, e)),
                (false, false) => {}
            }
            prev = cur;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn identity_fk() {
        let p = CalibrationParams::<f64>::identity();
        let (u, v) = needle_fk(&p, 10.0, 0.0);
        assert_abs_diff_eq!(u, 10.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v, 0.0, epsilon = 1e-12);
        let (u, v) = needle_fk(&p, 10.0, FRAC_PI_2);
        assert_abs_diff_eq!(u, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v, 10.0, epsilon = 1e-12);
    }

    #[test]
    fn identity_ik() {
        let p = CalibrationParams::<f64>::identity();
        let lim = ActuatorLimits::new(0.0, 100.0, -1.0, 2.0);
        let (l, t) = needle_ik(&p, &lim, 10.0, 0.0).unwrap();
        assert_abs_diff_eq!(l, 10.0, epsilon = 1e-12);
        assert_abs_diff_eq!(t, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn ik_names_violated_limit() {
        let p = CalibrationParams::<f64>::identity();
        let lim = ActuatorLimits::new(0.0, 10.0, 0.0, FRAC_PI_2);
        let (u, v) = needle_fk(&p, 11.0, 0.5);
        assert_eq!(
            needle_ik(&p, &lim, u, v),
            Err(KinematicsError::OutsideWorkspace { limit: ActuatorLimit::Linear })
        );
        let (u, v) = needle_fk(&p, 5.0, -0.3);
        assert_eq!(
            needle_ik(&p, &lim, u, v),
            Err(KinematicsError::OutsideWorkspace { limit: ActuatorLimit::Angular })
        );
    }

    #[test]
    fn params_validation() {
        let mut p = CalibrationParams::<f64>::identity();
        assert!(p.validate().is_ok());
        p.p_theta = 0.0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn collapsed_theta_range_is_a_segment() {
        let p = CalibrationParams::<f64>::identity();
        let lim = ActuatorLimits::new(0.0, 10.0, 0.5, 0.5);
        let frame = FrameGeometry { width: 64, height: 64, sx: 1.0, sy: 1.0 };
        let poly = workspace_mask(&p, &lim, &frame);
        assert!(poly.vertices.len() >= 2);
        assert_abs_diff_eq!(poly.area(), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn quarter_disc() {
        let p = CalibrationParams::<f64>::identity();
        let lim = ActuatorLimits::new(0.0, 10.0, 0.0, FRAC_PI_2);
        let frame = FrameGeometry { width: 64, height: 64, sx: 1.0, sy: 1.0 };
        let poly = workspace_mask(&p, &lim, &frame);
        assert!(poly.vertices.len() <= WORKSPACE_MAX_VERTICES);
        let exact = std::f64::consts::PI * 100.0 / 4.0;
        assert!((poly.area() - exact).abs() / exact < 1e-3, "area {}", poly.area());
        assert!(poly.contains(3.0, 3.0));
        assert!(!poly.contains(8.0, 8.0));
    }
}
