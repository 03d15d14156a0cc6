//! Small vector types and the tube/plane/ray geometry used by the phantom,
//! renderer and needle contact model.

use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[T; 3]", into = "[T; 3]")]
#[serde(bound = "T: Scalar")]
pub struct Vec3<T> {
    pub x: T,
    pub y: T,
    pub z: T,
}

impl<T> From<[T; 3]> for Vec3<T> {
    fn from([x, y, z]: [T; 3]) -> Self {
        Vec3 { x, y, z }
    }
}

impl<T> From<Vec3<T>> for [T; 3] {
    fn from(v: Vec3<T>) -> Self {
        [v.x, v.y, v.z]
    }
}

impl<T: Scalar> Vec3<T> {
    pub const fn new(x: T, y: T, z: T) -> Self {
        Vec3 { x, y, z }
    }

    pub fn zero() -> Self {
        Vec3::new(T::zero(), T::zero(), T::zero())
    }

    pub fn unit_z() -> Self {
        Vec3::new(T::zero(), T::zero(), T::one())
    }

    pub fn dot(self, o: Self) -> T {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Self) -> Self {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm_squared(self) -> T {
        self.dot(self)
    }

    pub fn norm(self) -> T {
        self.norm_squared().sqrt()
    }

    /// Unit vector in the same direction, or `None` for a (near) zero vector.
    pub fn normalized(self) -> Option<Self> {
        let n = self.norm();
        if n > T::epsilon() {
            Some(self * (T::one() / n))
        } else {
            None
        }
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

impl<T: Scalar> Add for Vec3<T> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl<T: Scalar> AddAssign for Vec3<T> {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl<T: Scalar> Sub for Vec3<T> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl<T: Scalar> Mul<T> for Vec3<T> {
    type Output = Self;
    fn mul(self, k: T) -> Self {
        Vec3::new(self.x * k, self.y * k, self.z * k)
    }
}

impl<T: Scalar> Neg for Vec3<T> {
    type Output = Self;
    fn neg(self) -> Self {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[T; 2]", into = "[T; 2]")]
#[serde(bound = "T: Scalar")]
pub struct Vec2<T> {
    pub x: T,
    pub y: T,
}

impl<T> From<[T; 2]> for Vec2<T> {
    fn from([x, y]: [T; 2]) -> Self {
        Vec2 { x, y }
    }
}

impl<T> From<Vec2<T>> for [T; 2] {
    fn from(v: Vec2<T>) -> Self {
        [v.x, v.y]
    }
}

impl<T: Scalar> Vec2<T> {
    pub const fn new(x: T, y: T) -> Self {
        Vec2 { x, y }
    }

    pub fn dot(self, o: Self) -> T {
        self.x * o.x + self.y * o.y
    }

    pub fn norm(self) -> T {
        self.dot(self).sqrt()
    }
}

impl<T: Scalar> Add for Vec2<T> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl<T: Scalar> Sub for Vec2<T> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl<T: Scalar> Mul<T> for Vec2<T> {
    type Output = Self;
    fn mul(self, k: T) -> Self {
        Vec2::new(self.x * k, self.y * k)
    }
}

/// Closest point on segment `[a, b]` to `p`, as the clamped parameter in `[0, 1]`.
pub fn closest_on_segment<T: Scalar>(p: Vec3<T>, a: Vec3<T>, b: Vec3<T>) -> T {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 <= T::zero() {
        return T::zero();
    }
    ((p - a).dot(ab) / len2).max(T::zero()).min(T::one())
}

/// Result of projecting a point onto a polyline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolylineProjection<T> {
    pub distance: T,
    pub point: Vec3<T>,
    /// Arc length of `point` from the first vertex.
    pub arc_length: T,
    pub segment: usize,
}

/// Cumulative arc lengths at each vertex (first entry is zero).
pub fn arc_lengths<T: Scalar>(points: &[Vec3<T>]) -> Vec<T> {
    let mut out = Vec::with_capacity(points.len());
    let mut acc = T::zero();
    out.push(acc);
    for w in points.windows(2) {
        acc = acc + (w[1] - w[0]).norm();
        out.push(acc);
    }
    out
}

/// Nearest point of a polyline (at least one vertex) to `p`.
pub fn project_onto_polyline<T: Scalar>(p: Vec3<T>, points: &[Vec3<T>]) -> PolylineProjection<T> {
    assert!(!points.is_empty(), "polyline needs at least one vertex");
    if points.len() == 1 {
        return PolylineProjection {
            distance: (p - points[0]).norm(),
            point: points[0],
            arc_length: T::zero(),
            segment: 0,
        };
    }
    let mut best = PolylineProjection {
        distance: T::infinity(),
        point: points[0],
        arc_length: T::zero(),
        segment: 0,
    };
    let mut start = T::zero();
    for (i, w) in points.windows(2).enumerate() {
        let seg_len = (w[1] - w[0]).norm();
        let t = closest_on_segment(p, w[0], w[1]);
        let q = w[0] + (w[1] - w[0]) * t;
        let d = (p - q).norm();
        if d < best.distance {
            best = PolylineProjection {
                distance: d,
                point: q,
                arc_length: start + t * seg_len,
                segment: i,
            };
        }
        start = start + seg_len;
    }
    best
}

/// Distance from `p` to the polyline.
pub fn distance_to_polyline<T: Scalar>(p: Vec3<T>, points: &[Vec3<T>]) -> T {
    project_onto_polyline(p, points).distance
}

/// Point at arc length `s` along the polyline, clamped to its ends.
pub fn point_at_arc_length<T: Scalar>(points: &[Vec3<T>], s: T) -> Vec3<T> {
    let mut start = T::zero();
    for w in points.windows(2) {
        let seg_len = (w[1] - w[0]).norm();
        if s <= start + seg_len || seg_len <= T::zero() {
            let t = if seg_len > T::zero() {
                ((s - start) / seg_len).max(T::zero()).min(T::one())
            } else {
                T::zero()
            };
            return w[0] + (w[1] - w[0]) * t;
        }
        start = start + seg_len;
    }
    *points.last().expect("non-empty polyline")
}

/// Entry/exit parameters of the ray `origin + s·dir` (unit `dir`) through the
/// solid sphere, if it is hit.
fn ray_sphere<T: Scalar>(origin: Vec3<T>, dir: Vec3<T>, center: Vec3<T>, radius: T) -> Option<(T, T)> {
    let oc = origin - center;
    let b = oc.dot(dir);
    let c = oc.norm_squared() - radius * radius;
    let disc = b * b - c;
    if disc < T::zero() {
        return None;
    }
    let sq = disc.sqrt();
    Some((-b - sq, -b + sq))
}

/// Interval of the ray inside the capsule of radius `radius` around segment `[a, b]`.
///
/// A capsule is convex, so the intersection is the hull of the cylinder-body
/// and end-cap intervals.
pub fn ray_capsule<T: Scalar>(
    origin: Vec3<T>,
    dir: Vec3<T>,
    a: Vec3<T>,
    b: Vec3<T>,
    radius: T,
) -> Option<(T, T)> {
    let mut lo = T::infinity();
    let mut hi = T::neg_infinity();
    let mut include = |iv: Option<(T, T)>| {
        if let Some((s0, s1)) = iv {
            if s1 >= s0 {
                lo = lo.min(s0);
                hi = hi.max(s1);
            }
        }
    };
    include(ray_sphere(origin, dir, a, radius));
    include(ray_sphere(origin, dir, b, radius));

    let axis = b - a;
    let len = axis.norm();
    if len > T::epsilon() {
        let w = axis * (T::one() / len);
        let oa = origin - a;
        let d_perp = dir - w * dir.dot(w);
        let o_perp = oa - w * oa.dot(w);
        let qa = d_perp.norm_squared();
        let qb = o_perp.dot(d_perp);
        let qc = o_perp.norm_squared() - radius * radius;
        // Infinite-cylinder interval.
        let body = if qa <= T::epsilon() * T::epsilon() {
            if qc < T::zero() {
                Some((T::neg_infinity(), T::infinity()))
            } else {
                None
            }
        } else {
            let disc = qb * qb - qa * qc;
            if disc < T::zero() {
                None
            } else {
                let sq = disc.sqrt();
                Some(((-qb - sq) / qa, (-qb + sq) / qa))
            }
        };
        // Clip to the slab 0 <= (p - a)·w <= len.
        if let Some((mut s0, mut s1)) = body {
            let h0 = oa.dot(w);
            let hd = dir.dot(w);
            if hd.abs() <= T::epsilon() {
                if h0 < T::zero() || h0 > len {
                    s1 = s0 - T::one();
                }
            } else {
                let mut t0 = (T::zero() - h0) / hd;
                let mut t1 = (len - h0) / hd;
                if t0 > t1 {
                    std::mem::swap(&mut t0, &mut t1);
                }
                s0 = s0.max(t0);
                s1 = s1.min(t1);
            }
            include(Some((s0, s1)));
        }
    }
    if hi >= lo {
        Some((lo, hi))
    } else {
        None
    }
}

/// Sorted, merged intervals of `[0, max_len]` along the ray that lie inside the
/// tube of radius `radius` around the polyline.
pub fn ray_tube_intervals<T: Scalar>(
    origin: Vec3<T>,
    dir: Vec3<T>,
    max_len: T,
    centerline: &[Vec3<T>],
    radius: T,
) -> Vec<(T, T)> {
    let mut raw: Vec<(T, T)> = Vec::new();
    if centerline.len() == 1 {
        if let Some(iv) = ray_sphere(origin, dir, centerline[0], radius) {
            raw.push(iv);
        }
    }
    for w in centerline.windows(2) {
        if let Some(iv) = ray_capsule(origin, dir, w[0], w[1], radius) {
            raw.push(iv);
        }
    }
    let mut clipped: Vec<(T, T)> = raw
        .into_iter()
        .map(|(a, b)| (a.max(T::zero()), b.min(max_len)))
        .filter(|(a, b)| b > a)
        .collect();
    clipped.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite interval"));
    let mut merged: Vec<(T, T)> = Vec::with_capacity(clipped.len());
    for iv in clipped {
        match merged.last_mut() {
            Some(last) if iv.0 <= last.1 => last.1 = last.1.max(iv.1),
            _ => merged.push(iv),
        }
    }
    merged
}

/// A vertical image plane: origin at the probe face centre, `lateral` along the
/// transducer array, `down` into the tissue.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImagePlane<T> {
    pub origin: Vec3<T>,
    pub lateral: Vec3<T>,
    pub down: Vec3<T>,
}

impl<T: Scalar> ImagePlane<T> {
    /// Plane of a probe at `origin` rotated by `yaw` about the vertical.
    pub fn from_probe(origin: Vec3<T>, yaw: T) -> Self {
        ImagePlane {
            origin,
            lateral: Vec3::new(yaw.cos(), yaw.sin(), T::zero()),
            down: Vec3::new(T::zero(), T::zero(), -T::one()),
        }
    }

    pub fn normal(&self) -> Vec3<T> {
        self.lateral.cross(self.down)
    }

    /// Orthonormality check of the in-plane axes.
    pub fn is_well_formed(&self, tol: T) -> bool {
        (self.lateral.norm() - T::one()).abs() <= tol
            && (self.down.norm() - T::one()).abs() <= tol
            && self.lateral.dot(self.down).abs() <= tol
            && self.origin.is_finite()
    }

    /// World point at in-plane coordinates `(lateral, depth)`.
    pub fn point(&self, lateral: T, depth: T) -> Vec3<T> {
        self.origin + self.lateral * lateral + self.down * depth
    }

    /// In-plane coordinates of the orthogonal projection of `p`.
    pub fn project(&self, p: Vec3<T>) -> Vec2<T> {
        let d = p - self.origin;
        Vec2::new(d.dot(self.lateral), d.dot(self.down))
    }

    /// Signed distance of `p` from the plane.
    pub fn signed_distance(&self, p: Vec3<T>) -> T {
        (p - self.origin).dot(self.normal())
    }
}

/// Planar section of a tube, in image-plane millimetres.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse<T> {
    /// `(lateral, depth)` of the centre.
    pub center: Vec2<T>,
    /// `(semi_major, semi_minor)`; the major axis is infinite when the plane
    /// is parallel to the vessel axis.
    pub semi_axes: (T, T),
    /// Angle of the major axis from the lateral axis towards depth.
    pub orientation: T,
}

impl<T: Scalar> Ellipse<T> {
    pub fn aspect_ratio(&self) -> T {
        self.semi_axes.0 / self.semi_axes.1
    }
}

/// Exact section of a straight tube segment `[a, b]` of radius `radius` with
/// `plane`, if the axis crosses the plane within the segment (or lies within
/// `radius` of it while parallel).
pub fn segment_cross_section<T: Scalar>(
    a: Vec3<T>,
    b: Vec3<T>,
    radius: T,
    plane: &ImagePlane<T>,
) -> Option<Ellipse<T>> {
    let axis = b - a;
    let len = axis.norm();
    let d = axis.normalized()?;
    let n = plane.normal();
    let cos = d.dot(n);
    let parallel_tol = T::lit(1e-9);
    if cos.abs() <= parallel_tol {
        let h = plane.signed_distance(a).abs();
        if h >= radius {
            return None;
        }
        let t = closest_on_segment(plane.origin, a, b);
        let c = a + axis * t;
        let dir = plane.project(plane.origin + d);
        return Some(Ellipse {
            center: plane.project(c),
            semi_axes: (T::infinity(), (radius * radius - h * h).sqrt()),
            orientation: dir.y.atan2(dir.x),
        });
    }
    let t_len = -plane.signed_distance(a) / cos;
    if t_len < T::zero() || t_len > len {
        return None;
    }
    let c = a + d * t_len;
    let in_plane = d - n * cos;
    let orientation = match in_plane.normalized() {
        Some(m) => m.dot(plane.down).atan2(m.dot(plane.lateral)),
        None => T::zero(),
    };
    Some(Ellipse {
        center: plane.project(c),
        semi_axes: (radius / cos.abs(), radius),
        orientation,
    })
}

/// Section of a polyline tube with a plane: the crossing nearest the plane origin.
pub fn tube_cross_section<T: Scalar>(
    centerline: &[Vec3<T>],
    radius: T,
    plane: &ImagePlane<T>,
) -> Option<Ellipse<T>> {
    centerline
        .windows(2)
        .filter_map(|w| segment_cross_section(w[0], w[1], radius, plane))
        .min_by(|p, q| {
            let dp = p.center.norm();
            let dq = q.center.norm();
            dp.partial_cmp(&dq).unwrap_or(std::cmp::Ordering::Equal)
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn v(x: f64, y: f64, z: f64) -> Vec3<f64> {
        Vec3::new(x, y, z)
    }

    #[test]
    fn perpendicular_ray_through_cylinder() {
        let iv = ray_capsule(v(0.0, 0.0, 10.0), v(0.0, 0.0, -1.0), v(0.0, -50.0, 0.0), v(0.0, 50.0, 0.0), 2.0)
            .unwrap();
        assert_abs_diff_eq!(iv.0, 8.0, epsilon = 1e-12);
        assert_abs_diff_eq!(iv.1, 12.0, epsilon = 1e-12);
    }

    #[test]
    fn ray_along_axis_hits_caps() {
        let iv = ray_capsule(v(0.0, -60.0, 0.0), v(0.0, 1.0, 0.0), v(0.0, -50.0, 0.0), v(0.0, 50.0, 0.0), 2.0)
            .unwrap();
        assert_abs_diff_eq!(iv.0, 8.0, epsilon = 1e-12);
        assert_abs_diff_eq!(iv.1, 112.0, epsilon = 1e-12);
    }

    #[test]
    fn tube_intervals_merge_across_joints() {
        let line = [v(0.0, -50.0, 0.0), v(0.0, 0.0, 0.0), v(0.0, 50.0, 0.0)];
        let ivs = ray_tube_intervals(v(0.0, -60.0, 0.0), v(0.0, 1.0, 0.0), 200.0, &line, 2.0);
        assert_eq!(ivs.len(), 1);
        assert_abs_diff_eq!(ivs[0].1, 112.0, epsilon = 1e-12);
    }

    #[test]
    fn projection_reports_arc_length() {
        let line = [v(0.0, 0.0, 0.0), v(10.0, 0.0, 0.0), v(10.0, 10.0, 0.0)];
        let p = project_onto_polyline(v(12.0, 4.0, 0.0), &line);
        assert_abs_diff_eq!(p.distance, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.arc_length, 14.0, epsilon = 1e-12);
        assert_eq!(p.segment, 1);
        assert_eq!(point_at_arc_length(&line, 14.0), v(10.0, 4.0, 0.0));
    }

    #[test]
    fn image_plane_axes() {
        let plane = ImagePlane::from_probe(v(1.0, 2.0, 3.0), std::f64::consts::FRAC_PI_2);
        assert!(plane.is_well_formed(1e-12));
        let p = plane.point(4.0, 5.0);
        assert_abs_diff_eq!(p.y, 6.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.z, -2.0, epsilon = 1e-12);
        let back = plane.project(p);
        assert_abs_diff_eq!(back.x, 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(back.y, 5.0, epsilon = 1e-12);
    }
}
