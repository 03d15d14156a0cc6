//! Synthetic B-mode frames rendered geometrically from the phantom.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{closest_on_segment, ImagePlane, Vec2, Vec3};
use crate::phantom::{PhantomModel, Vessel};
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ImagingError {
    #[error("pixel ({u}, {v}) is outside the {width}x{height} frame")]
    OutOfFrame { u: f64, v: f64, width: u32, height: u32 },
}

/// Pixel grid and physical pixel size of the image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct FrameGeometry<T> {
    pub width: u32,
    pub height: u32,
    /// Lateral pixel size, mm/px.
    pub sx: T,
    /// Depth pixel size, mm/px.
    pub sy: T,
}

impl<T: Scalar> FrameGeometry<T> {
    /// 640x480 frame imaging 40 mm wide by 80 mm deep.
    pub fn standard() -> Self {
        FrameGeometry { width: 640, height: 480, sx: T::lit(1.0 / 16.0), sy: T::lit(1.0 / 6.0) }
    }

    pub fn center_column(&self) -> T {
        T::lit(self.width as f64 / 2.0)
    }

    pub fn contains(&self, u: T, v: T) -> bool {
        u >= T::zero() && v >= T::zero() && u < T::lit(self.width as f64) && v < T::lit(self.height as f64)
    }

    /// `(lateral, depth)` in mm of pixel `(u, v)`; lateral is zero at the centre column.
    pub fn pixel_to_plane(&self, u: T, v: T) -> Result<(T, T), ImagingError> {
        if !self.contains(u, v) {
            return Err(ImagingError::OutOfFrame {
                u: u.to_f64_lossy(),
                v: v.to_f64_lossy(),
                width: self.width,
                height: self.height,
            });
        }
        Ok(((u - self.center_column()) * self.sx, v * self.sy))
    }

    /// Inverse of [`pixel_to_plane`](Self::pixel_to_plane), unbounded.
    pub fn plane_to_pixel(&self, lateral: T, depth: T) -> (T, T) {
        (lateral / self.sx + self.center_column(), depth / self.sy)
    }
}

/// Renderer settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImagingConfig {
    pub frame: FrameGeometry<f64>,
    /// Axial force giving full acoustic coupling, N.
    pub f_couple: f64,
    pub noise_floor: f64,
    /// Elevational slice thickness within which the needle is visible, mm.
    pub slice_thickness: f64,
    /// Bright vessel wall thickness, mm.
    pub wall_thickness: f64,
    pub wall_echo: f64,
    pub needle_echo: f64,
    /// Half-width of the drawn needle shaft, mm.
    pub needle_half_width: f64,
}

impl Default for ImagingConfig {
    fn default() -> Self {
        ImagingConfig {
            frame: FrameGeometry::standard(),
            f_couple: 2.0,
            noise_floor: 0.05,
            slice_thickness: 2.0,
            wall_thickness: 1.0,
            wall_echo: 0.9,
            needle_echo: 1.0,
            needle_half_width: 0.25,
        }
    }
}

impl ImagingConfig {
    /// Coupling quality `clamp(force / f_couple, 0, 1)`.
    pub fn coupling(&self, axial_force: f64) -> f64 {
        (axial_force / self.f_couple).clamp(0.0, 1.0)
    }
}

/// Probe face centre and yaw about the vertical.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbePose {
    pub position: Vec3<f64>,
    pub yaw: f64,
}

impl ProbePose {
    pub fn plane(&self) -> ImagePlane<f64> {
        ImagePlane::from_probe(self.position, self.yaw)
    }
}

/// Straight needle shaft from the pivot to the tip, world mm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeedleSegment {
    pub pivot: Vec3<f64>,
    pub tip: Vec3<f64>,
}

/// Everything the renderer needs beyond the static phantom.
#[derive(Debug, Clone)]
pub struct RenderInput<'a> {
    pub probe: ProbePose,
    pub needle: Option<NeedleSegment>,
    pub axial_force: f64,
    /// Vessel geometry to draw, typically the contact-displaced vessels.
    pub vessels: &'a [Vessel<f64>],
}

#[derive(Debug, Clone, PartialEq)]
pub struct UltrasoundFrame {
    pub width: u32,
    pub height: u32,
    /// Row-major intensities in `[0, 1]`.
    pub intensities: Vec<f64>,
    pub sx: f64,
    pub sy: f64,
    pub probe_pose: ProbePose,
    pub coupling: f64,
    pub tick: u64,
}

impl UltrasoundFrame {
    pub fn at(&self, u: u32, v: u32) -> f64 {
        self.intensities[(v * self.width + u) as usize]
    }

    pub fn geometry(&self) -> FrameGeometry<f64> {
        FrameGeometry { width: self.width, height: self.height, sx: self.sx, sy: self.sy }
    }

    /// Binary portable graymap (P5), 8-bit, with the tick in a header comment.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n# tick {}\n{} {}\n255\n", self.tick, self.width, self.height).into_bytes();
        out.extend(self.intensities.iter().map(|&i| (i.clamp(0.0, 1.0) * 255.0).round() as u8));
        out
    }

    /// Decodes a P5 graymap written by [`to_pgm`](Self::to_pgm) into `(width, height, pixels)`.
    pub fn parse_pgm(bytes: &[u8]) -> Option<(u32, u32, Vec<u8>)> {
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return None;
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).ok()?.to_string());
        }
        if fields[0] != "P5" || fields[3] != "255" {
            return None;
        }
        let w: u32 = fields[1].parse().ok()?;
        let h: u32 = fields[2].parse().ok()?;
        let data = bytes.get(pos + 1..)?;
        (data.len() == (w * h) as usize).then(|| (w, h, data.to_vec()))
    }
}

/// Segments of a vessel that can reach the image rectangle.
fn candidate_segments(vessel: &Vessel<f64>, plane: &ImagePlane<f64>, half_width: f64, depth: f64, margin: f64) -> Vec<(Vec3<f64>, Vec3<f64>)> {
    let corners = [
        plane.point(-half_width, 0.0),
        plane.point(half_width, 0.0),
        plane.point(-half_width, depth),
        plane.point(half_width, depth),
    ];
    let lo = corners.iter().fold(Vec3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY), |a, c| {
        Vec3::new(a.x.min(c.x), a.y.min(c.y), a.z.min(c.z))
    });
    let hi = corners.iter().fold(Vec3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY), |a, c| {
        Vec3::new(a.x.max(c.x), a.y.max(c.y), a.z.max(c.z))
    });
    vessel
        .centerline
        .windows(2)
        .filter(|w| {
            let (a, b) = (w[0], w[1]);
            a.x.min(b.x) - margin <= hi.x
                && a.x.max(b.x) + margin >= lo.x
                && a.y.min(b.y) - margin <= hi.y
                && a.y.max(b.y) + margin >= lo.y
                && a.z.min(b.z) - margin <= hi.z
                && a.z.max(b.z) + margin >= lo.z
        })
        .map(|w| (w[0], w[1]))
        .collect()
}

/// Renders one B-mode frame.
///
/// Speckle is drawn for every pixel in row-major order from a ChaCha stream
/// keyed by `(seed, tick)`, so frames are a pure function of their inputs and
/// two renders differing only in force share the same speckle.
pub fn render(
    phantom: &PhantomModel<f64>,
    input: &RenderInput<'_>,
    seed: u64,
    tick: u64,
    cfg: &ImagingConfig,
) -> UltrasoundFrame {
    let frame = cfg.frame;
    let (w, h) = (frame.width as usize, frame.height as usize);
    let coupling = cfg.coupling(input.axial_force);
    let plane = input.probe.plane();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tick);

    let half_width = frame.sx * w as f64 / 2.0;
    let max_depth = frame.sy * h as f64;
    let vessels: Vec<(&Vessel<f64>, Vec<(Vec3<f64>, Vec3<f64>)>)> = input
        .vessels
        .iter()
        .map(|v| (v, candidate_segments(v, &plane, half_width, max_depth, v.radius + cfg.wall_thickness + 1.0)))
        .filter(|(_, segs)| !segs.is_empty())
        .collect();

    let needle = input.needle.and_then(|n| {
        let off = plane.signed_distance(n.pivot).abs().max(plane.signed_distance(n.tip).abs());
        (off <= cfg.slice_thickness).then(|| (plane.project(n.pivot), plane.project(n.tip)))
    });

    // Skin height only depends on the column: the image plane is vertical.
    let columns: Vec<Option<f64>> = (0..w)
        .map(|u| {
            let p = plane.point((u as f64 - frame.center_column()) * frame.sx, 0.0);
            phantom.surface_height(p.x, p.y).ok()
        })
        .collect();

    let mut intensities = Vec::with_capacity(w * h);
    for v in 0..h {
        let depth = v as f64 * frame.sy;
        for (u, skin) in columns.iter().enumerate() {
            let g: f64 = StandardNormal.sample(&mut rng);
            let lateral = (u as f64 - frame.center_column()) * frame.sx;
            let p = plane.point(lateral, depth);
            let tissue_depth = skin.map(|s| s - p.z).filter(|d| *d >= 0.0);
            let value = match tissue_depth {
                None => 0.0,
                Some(td) => {
                    let layer = phantom.layer_at(td);
                    let mut base = layer.echogenicity;
                    for (vessel, segs) in &vessels {
                        let d = segs
                            .iter()
                            .map(|&(a, b)| (p - (a + (b - a) * closest_on_segment(p, a, b))).norm())
                            .fold(f64::INFINITY, f64::min);
                        if d < vessel.radius {
                            base = vessel.echogenicity;
                            break;
                        } else if d < vessel.radius + cfg.wall_thickness {
                            base = cfg.wall_echo;
                        }
                    }
                    if let Some((a, b)) = needle {
                        if distance_2d(Vec2::new(lateral, depth), a, b) <= cfg.needle_half_width {
                            base = cfg.needle_echo;
                        }
                    }
                    let speckle = (1.0 + layer.speckle_variance.sqrt() * g).max(0.0);
                    (base * speckle).clamp(0.0, 1.0)
                }
            };
            intensities.push((coupling * value).max(cfg.noise_floor));
        }
    }

    UltrasoundFrame {
        width: frame.width,
        height: frame.height,
        intensities,
        sx: frame.sx,
        sy: frame.sy,
        probe_pose: input.probe,
        coupling,
        tick,
    }
}

fn distance_2d(p: Vec2<f64>, a: Vec2<f64>, b: Vec2<f64>) -> f64 {
    let ab = b - a;
    let len2 = ab.dot(ab);
    let t = if len2 > 0.0 { ((p - a).dot(ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
    (p - (a + ab * t)).norm()
}

/// A 4-connected region of pixels below a threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub area: usize,
    /// `(u, v)` centroid in pixels.
    pub centroid: (f64, f64),
    pub mean_intensity: f64,
    pub touches_border: bool,
}

/// Connected dark regions of a frame, largest first.
pub fn dark_blobs(frame: &UltrasoundFrame, threshold: f64) -> Vec<Blob> {
    let (w, h) = (frame.width as usize, frame.height as usize);
    let mut seen = vec![false; w * h];
    let mut blobs = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if seen[start] || frame.intensities[start] >= threshold {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let (mut n, mut su, mut sv, mut si, mut border) = (0usize, 0.0, 0.0, 0.0, false);
        while let Some(i) = stack.pop() {
            let (u, v) = (i % w, i / w);
            n += 1;
            su += u as f64;
            sv += v as f64;
            si += frame.intensities[i];
            border |= u == 0 || v == 0 || u == w - 1 || v == h - 1;
            let mut visit = |j: usize| {
                if !seen[j] && frame.intensities[j] < threshold {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if u > 0 {
                visit(i - 1);
            }
            if u + 1 < w {
                visit(i + 1);
            }
            if v > 0 {
                visit(i - w);
            }
            if v + 1 < h {
                visit(i + w);
            }
        }
        blobs.push(Blob {
            area: n,
            centroid: (su / n as f64, sv / n as f64),
            mean_intensity: si / n as f64,
            touches_border: border,
        });
    }
    blobs.sort_by(|a, b| b.area.cmp(&a.area));
    blobs
}
