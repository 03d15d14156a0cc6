//! Virtual groin anatomy: skin heightfield, tissue layers and vessel tubes,
//! with the quasi-static vessel rolling response to needle contact.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    arc_lengths, point_at_arc_length, project_onto_polyline, tube_cross_section, Ellipse, ImagePlane, Vec3,
};
use crate::scalar::Scalar;

/// Current phantom file format version.
pub const PHANTOM_FORMAT: u32 = 1;

/// Half-width of the cosine falloff of a needle-induced vessel displacement, in mm of arc length.
pub const ROLL_FALLOFF_MM: f64 = 15.0;

#[derive(Debug, Error, PartialEq)]
pub enum PhantomError {
    #[error("point ({x}, {y}) mm is outside the surface domain")]
    OutOfDomain { x: f64, y: f64 },
    #[error("invalid phantom: {0}")]
    Invalid(String),
    #[error("unsupported phantom format {0}")]
    Format(u32),
    #[error("phantom file: {0}")]
    Parse(String),
}

/// Rectangular heightfield `z = s(x, y)` sampled on a regular grid, row-major in `y`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Heightfield<T> {
    pub x_min: T,
    pub y_min: T,
    pub dx: T,
    pub dy: T,
    pub nx: usize,
    pub ny: usize,
    pub heights: Vec<T>,
}

impl<T: Scalar> Heightfield<T> {
    pub fn flat(x_min: T, y_min: T, dx: T, dy: T, nx: usize, ny: usize, z: T) -> Self {
        Heightfield { x_min, y_min, dx, dy, nx, ny, heights: vec![z; nx * ny] }
    }

    /// Samples `f` at every grid node.
    pub fn from_fn(x_min: T, y_min: T, dx: T, dy: T, nx: usize, ny: usize, f: impl Fn(T, T) -> T) -> Self {
        let mut heights = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                heights.push(f(x_min + dx * T::idx(i), y_min + dy * T::idx(j)));
            }
        }
        Heightfield { x_min, y_min, dx, dy, nx, ny, heights }
    }

    pub fn x_max(&self) -> T {
        self.x_min + self.dx * T::idx(self.nx - 1)
    }

    pub fn y_max(&self) -> T {
        self.y_min + self.dy * T::idx(self.ny - 1)
    }

    pub fn node(&self, i: usize, j: usize) -> T {
        self.heights[j * self.nx + i]
    }

    pub fn contains(&self, x: T, y: T) -> bool {
        x >= self.x_min && x <= self.x_max() && y >= self.y_min && y <= self.y_max()
    }

    fn validate(&self) -> Result<(), PhantomError> {
        if self.nx < 2 || self.ny < 2 {
            return Err(PhantomError::Invalid("surface grid needs at least 2x2 nodes".into()));
        }
        if !(self.dx > T::zero() && self.dy > T::zero()) {
            return Err(PhantomError::Invalid("surface grid spacing must be positive".into()));
        }
        if self.heights.len() != self.nx * self.ny {
            return Err(PhantomError::Invalid(format!(
                "surface has {} heights, expected {}",
                self.heights.len(),
                self.nx * self.ny
            )));
        }
        if self.heights.iter().any(|h| !h.is_finite()) {
            return Err(PhantomError::Invalid("surface heights must be finite".into()));
        }
        Ok(())
    }

    /// Cell indices and local coordinates in `[0, 1]²`.
    fn locate(&self, x: T, y: T) -> Result<(usize, usize, T, T), PhantomError> {
        if !self.contains(x, y) {
            return Err(PhantomError::OutOfDomain { x: x.to_f64_lossy(), y: y.to_f64_lossy() });
        }
        let fx = (x - self.x_min) / self.dx;
        let fy = (y - self.y_min) / self.dy;
        let i = fx.floor().to_usize().unwrap_or(0).min(self.nx - 2);
        let j = fy.floor().to_usize().unwrap_or(0).min(self.ny - 2);
        Ok((i, j, fx - T::idx(i), fy - T::idx(j)))
    }

    /// Bilinear interpolation of the heightfield.
    pub fn height(&self, x: T, y: T) -> Result<T, PhantomError> {
        let (i, j, tx, ty) = self.locate(x, y)?;
        let one = T::one();
        let h00 = self.node(i, j);
        let h10 = self.node(i + 1, j);
        let h01 = self.node(i, j + 1);
        let h11 = self.node(i + 1, j + 1);
        Ok(h00 * (one - tx) * (one - ty) + h10 * tx * (one - ty) + h01 * (one - tx) * ty + h11 * tx * ty)
    }

    /// Gradient `(∂s/∂x, ∂s/∂y)` of the bilinear patch containing `(x, y)`.
    pub fn gradient(&self, x: T, y: T) -> Result<(T, T), PhantomError> {
        let (i, j, tx, ty) = self.locate(x, y)?;
        let one = T::one();
        let h00 = self.node(i, j);
        let h10 = self.node(i + 1, j);
        let h01 = self.node(i, j + 1);
        let h11 = self.node(i + 1, j + 1);
        let gx = ((h10 - h00) * (one - ty) + (h11 - h01) * ty) / self.dx;
        let gy = ((h01 - h00) * (one - tx) + (h11 - h10) * tx) / self.dy;
        Ok((gx, gy))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PhantomProfile {
    HumanPhantom,
    PorcineInVivo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct TissueLayer<T> {
    pub name: String,
    /// Depth below the skin at which this layer starts, mm.
    pub top_depth: T,
    pub echogenicity: T,
    pub speckle_variance: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VesselKind {
    Artery,
    Vein,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Vessel<T> {
    pub id: String,
    pub kind: VesselKind,
    pub centerline: Vec<Vec3<T>>,
    pub radius: T,
    /// Contact force at which the needle punctures the wall, N.
    pub wall_puncture_force: T,
    /// Lateral stiffness against rolling, N/mm.
    pub roll_stiffness: T,
    /// Maximum rolling displacement, mm.
    pub max_roll: T,
    /// Lumen echogenicity.
    pub echogenicity: T,
}

/// A needle pushing on a vessel wall.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeedleContact<T> {
    pub point: Vec3<T>,
    pub force: T,
    /// Unit push direction.
    pub normal: Vec3<T>,
}

impl<T: Scalar> Vessel<T> {
    fn validate(&self) -> Result<(), PhantomError> {
        let bad = |m: &str| Err(PhantomError::Invalid(format!("vessel {}: {m}", self.id)));
        if self.centerline.len() < 2 {
            return bad("centerline needs at least 2 points");
        }
        if self.centerline.iter().any(|p| !p.is_finite()) {
            return bad("centerline must be finite");
        }
        if self.centerline.windows(2).any(|w| (w[1] - w[0]).norm() <= T::zero()) {
            return bad("centerline points must be strictly ordered along arc length");
        }
        if !(self.radius > T::zero()) {
            return bad("radius must be positive");
        }
        if !(self.roll_stiffness > T::zero()) {
            return bad("roll_stiffness must be positive");
        }
        if !(self.max_roll >= T::zero()) {
            return bad("max_roll must be non-negative");
        }
        if !(self.wall_puncture_force > T::zero()) {
            return bad("wall_puncture_force must be positive");
        }
        if !(self.echogenicity >= T::zero() && self.echogenicity <= T::one()) {
            return bad("echogenicity must lie in [0, 1]");
        }
        Ok(())
    }

    /// Peak displacement caused by a contact force: `min(force / k_roll, max_roll)`.
    pub fn roll_displacement(&self, force: T) -> T {
        (force.max(T::zero()) / self.roll_stiffness).min(self.max_roll)
    }

    /// Exact section of this tube with an image plane.
    pub fn cross_section(&self, plane: &ImagePlane<T>) -> Option<Ellipse<T>> {
        tube_cross_section(&self.centerline, self.radius, plane)
    }
}

/// Centreline of `vessel` after a needle contact rolls it.
///
/// The peak displacement `min(force / roll_stiffness, max_roll)` is applied
/// at the contact's nearest centreline point along the contact normal and
/// attenuated with a raised cosine over ±15 mm of arc length. The centreline
/// is resampled at 1 mm inside the falloff window so the bend is represented.
pub fn displaced_vessel<T: Scalar>(vessel: &Vessel<T>, contact: Option<&NeedleContact<T>>) -> Vessel<T> {
    let Some(contact) = contact else {
        return vessel.clone();
    };
    let peak = vessel.roll_displacement(contact.force);
    if peak <= T::zero() {
        return vessel.clone();
    }
    let falloff = T::lit(ROLL_FALLOFF_MM);
    let arcs = arc_lengths(&vessel.centerline);
    let total = *arcs.last().expect("validated centerline");
    let center = project_onto_polyline(contact.point, &vessel.centerline).arc_length;

    let mut stations: Vec<T> = arcs.clone();
    let steps = (ROLL_FALLOFF_MM as i64) * 2;
    for k in 0..=steps {
        let s = center - falloff + T::lit(k as f64);
        if s > T::zero() && s < total {
            stations.push(s);
        }
    }
    stations.sort_by(|a, b| a.partial_cmp(b).expect("finite arc length"));
    stations.dedup_by(|a, b| (*a - *b).abs() <= T::lit(1e-9));

    let pi = T::PI();
    let half = T::lit(0.5);
    let centerline = stations
        .into_iter()
        .map(|s| {
            let p = point_at_arc_length(&vessel.centerline, s);
            let off = (s - center).abs();
            if off >= falloff {
                p
            } else {
                let w = half * (T::one() + (pi * off / falloff).cos());
                p + contact.normal * (peak * w)
            }
        })
        .collect();
    Vessel { centerline, ..vessel.clone() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct PhantomModel<T> {
    pub format: u32,
    pub profile: PhantomProfile,
    pub surface: Heightfield<T>,
    pub layers: Vec<TissueLayer<T>>,
    pub vessels: Vec<Vessel<T>>,
    /// Skin stiffness against probe indentation, N/mm.
    pub skin_stiffness: T,
    /// Force at which the needle breaks the skin, N.
    pub skin_puncture_force: T,
    /// Stiffness of the tissue behind a fully rolled vessel, N/mm.
    pub backing_stiffness: T,
    /// Allowed vessel depth range below the skin, mm.
    pub depth_limits: [T; 2],
}

impl<T: Scalar> PhantomModel<T> {
    pub fn validate(&self) -> Result<(), PhantomError> {
        if self.format != PHANTOM_FORMAT {
            return Err(PhantomError::Format(self.format));
        }
        self.surface.validate()?;
        if self.layers.is_empty() {
            return Err(PhantomError::Invalid("at least one tissue layer is required".into()));
        }
        if self.layers[0].top_depth != T::zero() {
            return Err(PhantomError::Invalid("first tissue layer must start at depth 0".into()));
        }
        if self.layers.windows(2).any(|w| w[1].top_depth <= w[0].top_depth) {
            return Err(PhantomError::Invalid("tissue layers must be ordered by increasing depth".into()));
        }
        if !(self.skin_stiffness > T::zero() && self.skin_puncture_force > T::zero() && self.backing_stiffness > T::zero())
        {
            return Err(PhantomError::Invalid("stiffness and puncture force must be positive".into()));
        }
        let [dmin, dmax] = self.depth_limits;
        for v in &self.vessels {
            v.validate()?;
            for p in &v.centerline {
                let s = self.surface.height(p.x, p.y).map_err(|_| {
                    PhantomError::Invalid(format!("vessel {} leaves the surface domain", v.id))
                })?;
                let depth = s - p.z;
                if depth < dmin || depth > dmax {
                    return Err(PhantomError::Invalid(format!(
                        "vessel {} centerline depth {:.3} mm outside [{}, {}]",
                        v.id, depth, dmin, dmax
                    )));
                }
            }
        }
        Ok(())
    }

    /// Skin height at `(x, y)`.
    pub fn surface_height(&self, x: T, y: T) -> Result<T, PhantomError> {
        self.surface.height(x, y)
    }

    /// Outward unit normal of the skin surface.
    pub fn surface_normal(&self, x: T, y: T) -> Result<Vec3<T>, PhantomError> {
        let (gx, gy) = self.surface.gradient(x, y)?;
        Ok(Vec3::new(-gx, -gy, T::one()).normalized().expect("non-degenerate normal"))
    }

    /// Tissue layer at `depth` below the skin.
    pub fn layer_at(&self, depth: T) -> &TissueLayer<T> {
        self.layers
            .iter()
            .rev()
            .find(|l| depth >= l.top_depth)
            .unwrap_or(&self.layers[0])
    }

    pub fn vessel(&self, id: &str) -> Option<&Vessel<T>> {
        self.vessels.iter().find(|v| v.id == id)
    }

    pub fn from_json(text: &str) -> Result<Self, PhantomError> {
        let model: Self = serde_json::from_str(text).map_err(|e| PhantomError::Parse(e.to_string()))?;
        model.validate()?;
        Ok(model)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("phantom serializes")
    }

    /// Default anatomy for a profile.
    pub fn for_profile(profile: PhantomProfile) -> Self {
        match profile {
            PhantomProfile::HumanPhantom => Self::human(),
            PhantomProfile::PorcineInVivo => Self::porcine(),
        }
    }

    /// Groin phantom with a skin crest at `x = 0` (`s = 8·cos(πx/60)` mm) and
    /// straight femoral artery/vein running along `y`.
    pub fn human() -> Self {
        let surface = groin_surface();
        let crest = T::lit(8.0);
        let vein_x = T::lit(10.0);
        let vein_top = surface.height(vein_x, T::zero()).expect("inside domain");
        let (y0, y1) = (T::lit(-VESSEL_HALF_LENGTH), T::lit(VESSEL_HALF_LENGTH));
        let artery = Vessel {
            id: "artery".into(),
            kind: VesselKind::Artery,
            centerline: vec![Vec3::new(T::zero(), y0, crest - T::lit(20.0)), Vec3::new(T::zero(), y1, crest - T::lit(20.0))],
            radius: T::lit(3.5),
            wall_puncture_force: T::lit(0.8),
            roll_stiffness: T::lit(0.4),
            max_roll: T::lit(3.0),
            echogenicity: T::lit(0.02),
        };
        let vein = Vessel {
            id: "vein".into(),
            kind: VesselKind::Vein,
            centerline: vec![Vec3::new(vein_x, y0, vein_top - T::lit(22.0)), Vec3::new(vein_x, y1, vein_top - T::lit(22.0))],
            radius: T::lit(4.5),
            wall_puncture_force: T::lit(0.6),
            roll_stiffness: T::lit(0.3),
            max_roll: T::lit(3.0),
            echogenicity: T::lit(0.03),
        };
        PhantomModel {
            format: PHANTOM_FORMAT,
            profile: PhantomProfile::HumanPhantom,
            surface,
            layers: default_layers(),
            vessels: vec![artery, vein],
            skin_stiffness: T::lit(4.0),
            skin_puncture_force: T::lit(1.5),
            backing_stiffness: T::lit(2.0),
            depth_limits: [T::lit(2.0), T::lit(80.0)],
        }
    }

    /// In-vivo profile: vessels 30 mm deep at the crest, bending towards the
    /// skin along a 30 mm radius arc, with 4x softer rolling.
    pub fn porcine() -> Self {
        let mut model = Self::human();
        model.profile = PhantomProfile::PorcineInVivo;
        let crest = T::lit(8.0);
        let vein_top = model.surface.height(T::lit(10.0), T::zero()).expect("inside domain");
        let artery_line = bent_centerline(T::zero(), crest - T::lit(30.0));
        let vein_line = bent_centerline(T::lit(10.0), vein_top - T::lit(32.0));
        for v in &mut model.vessels {
            v.roll_stiffness = v.roll_stiffness / T::lit(4.0);
            match v.kind {
                VesselKind::Artery => {
                    v.centerline = artery_line.clone();
                    v.max_roll = T::lit(2.0);
                }
                VesselKind::Vein => v.centerline = vein_line.clone(),
            }
        }
        model
    }
}

const VESSEL_HALF_LENGTH: f64 = 190.0;

fn groin_surface<T: Scalar>() -> Heightfield<T> {
    let pi = std::f64::consts::PI;
    Heightfield::from_fn(T::lit(-80.0), T::lit(-200.0), T::lit(2.0), T::lit(2.0), 81, 201, |x, _y| {
        T::lit(8.0 * (pi * x.to_f64_lossy() / 60.0).cos())
    })
}

/// Centreline at lateral position `x` whose deepest point `z_apex` sits at
/// `y = 0`, curving up along a 30 mm radius arc over ±30°, continuing on the
/// tangent to |y| = 35 mm and then running level.
fn bent_centerline<T: Scalar>(x: T, z_apex: T) -> Vec<Vec3<T>> {
    let radius = 30.0_f64;
    let arc_deg = 30.0_f64;
    let z0 = z_apex.to_f64_lossy();
    let mut half: Vec<(f64, f64)> = Vec::new();
    let mut deg = 0.0;
    while deg <= arc_deg + 1e-9 {
        let a = deg.to_radians();
        half.push((radius * a.sin(), z0 + radius * (1.0 - a.cos())));
        deg += 2.0;
    }
    let (y_end, z_end) = *half.last().expect("arc samples");
    let slope = arc_deg.to_radians().tan();
    let z_tan = z_end + (35.0 - y_end) * slope;
    half.push((35.0, z_tan));
    half.push((VESSEL_HALF_LENGTH, z_tan));
    let mut pts: Vec<Vec3<T>> = half
        .iter()
        .rev()
        .map(|&(y, z)| Vec3::new(x, T::lit(-y), T::lit(z)))
        .collect();
    pts.extend(half.iter().skip(1).map(|&(y, z)| Vec3::new(x, T::lit(y), T::lit(z))));
    pts
}

fn default_layers<T: Scalar>() -> Vec<TissueLayer<T>> {
    let layer = |name: &str, top: f64, echo: f64, var: f64| TissueLayer {
        name: name.into(),
        top_depth: T::lit(top),
        echogenicity: T::lit(echo),
        speckle_variance: T::lit(var),
    };
    vec![
        layer("skin", 0.0, 0.75, 0.04),
        layer("subcutaneous fat", 2.0, 0.35, 0.10),
        layer("muscle", 9.0, 0.55, 0.06),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn straight_vessel() -> Vessel<f64> {
        Vessel {
            id: "a".into(),
            kind: VesselKind::Artery,
            centerline: vec![Vec3::new(0.0, -50.0, -20.0), Vec3::new(0.0, 50.0, -20.0)],
            radius: 3.5,
            wall_puncture_force: 0.8,
            roll_stiffness: 0.4,
            max_roll: 3.0,
            echogenicity: 0.02,
        }
    }

    #[test]
    fn flat_surface_is_constant() {
        let hf = Heightfield::flat(0.0, 0.0, 1.0, 1.0, 101, 101, 0.0);
        assert_eq!(hf.height(10.0, 20.0).unwrap(), 0.0);
    }

    #[test]
    fn bilinear_midpoint() {
        let hf = Heightfield { x_min: 0.0, y_min: 0.0, dx: 100.0, dy: 100.0, nx: 2, ny: 2, heights: vec![0.0, 0.0, 4.0, 4.0] };
        for x in [0.0, 13.0, 50.0, 100.0] {
            assert_abs_diff_eq!(hf.height(x, 50.0).unwrap(), 2.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn out_of_domain_is_an_error() {
        let m = PhantomModel::<f64>::human();
        assert!(matches!(m.surface_height(500.0, 0.0), Err(PhantomError::OutOfDomain { .. })));
    }

    #[test]
    fn defaults_validate() {
        PhantomModel::<f64>::human().validate().unwrap();
        PhantomModel::<f64>::porcine().validate().unwrap();
        PhantomModel::<f32>::human().validate().unwrap();
    }

    #[test]
    fn porcine_is_softer_and_deeper() {
        let h = PhantomModel::<f64>::human();
        let p = PhantomModel::<f64>::porcine();
        assert_abs_diff_eq!(p.vessels[0].roll_stiffness * 4.0, h.vessels[0].roll_stiffness, epsilon = 1e-12);
        let apex = p.vessels[0].centerline.iter().map(|q| q.z).fold(f64::INFINITY, f64::min);
        assert_abs_diff_eq!(8.0 - apex, 30.0, epsilon = 1e-9);
    }

    #[test]
    fn no_contact_is_identity() {
        let v = straight_vessel();
        assert_eq!(displaced_vessel(&v, None), v);
    }

    #[test]
    fn displacement_saturates_at_max_roll() {
        let v = straight_vessel();
        let c = NeedleContact {
            point: Vec3::new(3.5, 0.0, -20.0),
            force: v.roll_stiffness * v.max_roll * 2.0,
            normal: Vec3::new(1.0, 0.0, 0.0),
        };
        let d = displaced_vessel(&v, Some(&c));
        let peak = d.centerline.iter().map(|p| p.x).fold(0.0, f64::max);
        assert_abs_diff_eq!(peak, v.max_roll, epsilon = 1e-12);
    }

    #[test]
    fn displacement_formula() {
        let v = straight_vessel();
        let c = NeedleContact { point: Vec3::new(0.0, 5.0, -16.5), force: 0.2, normal: Vec3::new(0.0, 0.0, -1.0) };
        let d = displaced_vessel(&v, Some(&c));
        let at_contact = project_onto_polyline(Vec3::new(0.0, 5.0, -30.0), &d.centerline).point;
        assert_abs_diff_eq!(at_contact.z, -20.5, epsilon = 1e-12);
        // Outside the falloff window the centreline is untouched.
        let far = project_onto_polyline(Vec3::new(0.0, 25.0, -30.0), &d.centerline).point;
        assert_abs_diff_eq!(far.z, -20.0, epsilon = 1e-12);
    }

    #[test]
    fn json_roundtrip_and_format_guard() {
        let m = PhantomModel::<f64>::porcine();
        let back = PhantomModel::<f64>::from_json(&m.to_json()).unwrap();
        assert_eq!(back, m);
        let mut bad = m.clone();
        bad.format = 2;
        assert_eq!(PhantomModel::<f64>::from_json(&bad.to_json()), Err(PhantomError::Format(2)));
    }
}
