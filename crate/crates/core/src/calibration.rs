//! Calibration sweeps and the nonlinear least-squares fit of the needle-tip
//! parameters from observed `(actuator, pixel)` pairs.
//!
//! The forward map has a one-parameter gauge freedom (see
//! [`CalibrationParams::regauged`]), so `x_scale` is pinned to the known
//! lateral image scale and the remaining seven parameters are estimated.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::FrameGeometry;
use crate::kinematics::{needle_fk, ActuatorLimits, CalibrationParams};
use crate::linalg::{least_squares, solve_spd};
use crate::scalar::Scalar;

pub const SWEEP_FORMAT: u32 = 1;

const MIN_GRID_COUNT: usize = 3;
const MIN_SAMPLES: usize = 8;
const MAX_ITERATIONS: usize = 200;
const INITIAL_DAMPING: f64 = 1e-3;
const RELATIVE_COST_TOL: f64 = 1e-12;
const INIT_GRID: usize = 32;

/// Names of the seven fitted parameters, in solver order.
pub const FITTED_PARAMETERS: [&str; 7] = ["p_l", "l_off", "p_theta", "theta_off", "y_scale", "x_off", "y_off"];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibrationError {
    #[error("a {n_l}x{n_theta} sweep is not identifiable: each axis needs at least 3 positions")]
    SweepTooSmall { n_l: usize, n_theta: usize },
    #[error("need at least 8 samples, got {0}")]
    TooFewSamples(usize),
    #[error("rank-deficient sweep: {direction} direction is not excited")]
    RankDeficient { direction: String },
    #[error("known x_scale must be positive and finite")]
    InvalidScale,
    #[error("invalid sample: {0}")]
    InvalidSample(String),
    #[error("sweep log: {0}")]
    Parse(String),
}

/// One observation of the tip pixel at a commanded actuator position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct SweepSample<T> {
    pub l_act: T,
    pub theta_act: T,
    pub u: T,
    pub v: T,
    #[serde(default = "unit_weight")]
    pub weight: T,
}

fn unit_weight<T: Scalar>() -> T {
    T::one()
}

/// `n_l × n_theta` grid over the limit rectangle, row-major in `l`, endpoints included.
pub fn plan_sweep<T: Scalar>(
    limits: &ActuatorLimits<T>,
    n_l: usize,
    n_theta: usize,
) -> Result<Vec<(T, T)>, CalibrationError> {
    if n_l < MIN_GRID_COUNT || n_theta < MIN_GRID_COUNT {
        return Err(CalibrationError::SweepTooSmall { n_l, n_theta });
    }
    let lin = |lo: T, hi: T, n: usize, k: usize| lo + (hi - lo) * T::idx(k) / T::idx(n - 1);
    let mut plan = Vec::with_capacity(n_l * n_theta);
    for i in 0..n_l {
        for j in 0..n_theta {
            plan.push((lin(limits.l_min, limits.l_max, n_l, i), lin(limits.theta_min, limits.theta_max, n_theta, j)));
        }
    }
    Ok(plan)
}

/// Observations of `plan` under `true_params` with seeded i.i.d. Gaussian pixel noise.
pub fn simulate_sweep<T: Scalar>(
    true_params: &CalibrationParams<T>,
    plan: &[(T, T)],
    noise_sigma: T,
    seed: u64,
) -> Vec<SweepSample<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = noise_sigma.max(T::zero());
    plan.iter()
        .map(|&(l_act, theta_act)| {
            let (u, v) = needle_fk(true_params, l_act, theta_act);
            let nu: f64 = StandardNormal.sample(&mut rng);
            let nv: f64 = StandardNormal.sample(&mut rng);
            SweepSample { l_act, theta_act, u: u + sigma * T::lit(nu), v: v + sigma * T::lit(nv), weight: T::one() }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct FitReport<T> {
    /// RMS pixel residual of the fitted parameters over the samples.
    pub rms_px: T,
    /// RMS pixel residual of the starting point.
    pub initial_rms_px: T,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions<T> {
    /// Huber threshold in px; `None` for plain least squares.
    pub huber_threshold: Option<T>,
}

impl<T: Scalar> Default for FitOptions<T> {
    fn default() -> Self {
        FitOptions { huber_threshold: None }
    }
}

impl<T: Scalar> FitOptions<T> {
    /// Huber weighting with the 3 px threshold.
    pub fn robust() -> Self {
        FitOptions { huber_threshold: Some(T::lit(3.0)) }
    }
}

fn pack<T: Scalar>(p: &CalibrationParams<T>) -> [T; 7] {
    [p.p_l, p.l_off, p.p_theta, p.theta_off, p.y_scale, p.x_off, p.y_off]
}

fn unpack<T: Scalar>(x: &[T; 7], x_scale: T) -> CalibrationParams<T> {
    CalibrationParams {
        p_l: x[0],
        l_off: x[1],
        p_theta: x[2],
        theta_off: x[3],
        x_scale,
        y_scale: x[4],
        x_off: x[5],
        y_off: x[6],
    }
}

fn count_distinct<T: Scalar>(mut values: Vec<T>) -> usize {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    values.dedup();
    values.len()
}

/// Weighted squared residual cost; Huber weights are recomputed from the current residuals.
fn cost<T: Scalar>(params: &CalibrationParams<T>, samples: &[SweepSample<T>], opts: &FitOptions<T>) -> T {
    samples
        .iter()
        .map(|s| {
            let (u, v) = needle_fk(params, s.l_act, s.theta_act);
            let r2 = (u - s.u) * (u - s.u) + (v - s.v) * (v - s.v);
            s.weight * huber_weight(r2.sqrt(), opts) * r2
        })
        .fold(T::zero(), |a, b| a + b)
}

fn huber_weight<T: Scalar>(r: T, opts: &FitOptions<T>) -> T {
    match opts.huber_threshold {
        Some(k) if r > k => k / r,
        _ => T::one(),
    }
}

/// Coarse start: a grid over the needle angles at the extreme angular
/// feedback values (both inside `(0, π/2)`), each followed by linear solves
/// for the radial affine map and pixel offsets.
fn initial_guess<T: Scalar>(samples: &[SweepSample<T>], x_scale: T, opts: &FitOptions<T>) -> Option<CalibrationParams<T>> {
    let th_min = samples.iter().map(|s| s.theta_act).fold(T::infinity(), T::min);
    let th_max = samples.iter().map(|s| s.theta_act).fold(T::neg_infinity(), T::max);
    let span = th_max - th_min;
    let step = T::FRAC_PI_2() / T::idx(INIT_GRID);
    let mut best: Option<(T, CalibrationParams<T>)> = None;
    for i in 0..INIT_GRID {
        for j in 0..INIT_GRID {
            if i == j {
                continue;
            }
            let a_lo = step * (T::idx(i) + T::lit(0.5));
            let a_hi = step * (T::idx(j) + T::lit(0.5));
            let p_theta = (a_hi - a_lo) / span;
            let theta_off = a_lo - p_theta * th_min;
            let Some(params) = linear_stage(samples, x_scale, p_theta, theta_off) else {
                continue;
            };
            let c = cost(&params, samples, opts);
            if c.is_finite() && best.as_ref().is_none_or(|(bc, _)| c < *bc) {
                best = Some((c, params));
            }
        }
    }
    best.map(|(_, p)| p)
}

/// With the angles fixed, `u` is linear in `(p_l, l_off, x_off)` and `v` in
/// `(y_scale·p_l, y_scale·l_off, y_off)`.
fn linear_stage<T: Scalar>(samples: &[SweepSample<T>], x_scale: T, p_theta: T, theta_off: T) -> Option<CalibrationParams<T>> {
    let mut rows_u = Vec::with_capacity(samples.len());
    let mut rows_v = Vec::with_capacity(samples.len());
    let mut us = Vec::with_capacity(samples.len());
    let mut vs = Vec::with_capacity(samples.len());
    for s in samples {
        let w = s.weight.sqrt();
        let a = p_theta * s.theta_act + theta_off;
        let (sin, cos) = a.sin_cos();
        rows_u.push(vec![w * x_scale * cos * s.l_act, w * x_scale * cos, -w]);
        rows_v.push(vec![w * sin * s.l_act, w * sin, -w]);
        us.push(w * s.u);
        vs.push(w * s.v);
    }
    let xu = least_squares(&rows_u, &us, 3).ok()?;
    let xv = least_squares(&rows_v, &vs, 3).ok()?;
    let (p_l, l_off) = (xu[0], xu[1]);
    let norm = p_l * p_l + l_off * l_off;
    if !(norm > T::zero()) {
        return None;
    }
    let y_scale = (xv[0] * p_l + xv[1] * l_off) / norm;
    if !(y_scale > T::zero()) || p_l == T::zero() {
        return None;
    }
    Some(CalibrationParams { p_l, l_off, p_theta, theta_off, x_scale, y_scale, x_off: xu[2], y_off: xv[2] })
}

/// Residuals and Jacobian rows `(∂u/∂x, ∂v/∂x)` for one sample.
fn residual_and_jacobian<T: Scalar>(p: &CalibrationParams<T>, s: &SweepSample<T>) -> ((T, T), [T; 7], [T; 7]) {
    let r = p.length_mm(s.l_act);
    let a = p.angle_rad(s.theta_act);
    let (sin, cos) = a.sin_cos();
    let u = r * cos * p.x_scale - p.x_off;
    let v = r * sin * p.y_scale - p.y_off;
    let z = T::zero();
    let one = T::one();
    let ju = [
        s.l_act * cos * p.x_scale,
        cos * p.x_scale,
        -r * sin * s.theta_act * p.x_scale,
        -r * sin * p.x_scale,
        z,
        -one,
        z,
    ];
    let jv = [
        s.l_act * sin * p.y_scale,
        sin * p.y_scale,
        r * cos * s.theta_act * p.y_scale,
        r * cos * p.y_scale,
        r * sin,
        z,
        -one,
    ];
    ((u - s.u, v - s.v), ju, jv)
}

/// Fits the calibration with default options.
pub fn fit<T: Scalar>(
    samples: &[SweepSample<T>],
    known_x_scale: T,
    init: Option<&CalibrationParams<T>>,
) -> Result<(CalibrationParams<T>, FitReport<T>), CalibrationError> {
    fit_with(samples, known_x_scale, init, &FitOptions::default())
}

/// Levenberg–Marquardt over the seven free parameters with `x_scale` pinned.
///
/// Damping is Marquardt-scaled (`λ·diag(JᵀJ)`), starting at `1e-3`,
/// multiplied by 10 on a rejected step and divided by 10 on an accepted one.
/// Stops when the relative cost change drops below `1e-12` or after 200 iterations.
pub fn fit_with<T: Scalar>(
    samples: &[SweepSample<T>],
    known_x_scale: T,
    init: Option<&CalibrationParams<T>>,
    opts: &FitOptions<T>,
) -> Result<(CalibrationParams<T>, FitReport<T>), CalibrationError> {
    if !(known_x_scale > T::zero() && known_x_scale.is_finite()) {
        return Err(CalibrationError::InvalidScale);
    }
    if samples.len() < MIN_SAMPLES {
        return Err(CalibrationError::TooFewSamples(samples.len()));
    }
    for s in samples {
        let vals = [s.l_act, s.theta_act, s.u, s.v, s.weight];
        if vals.iter().any(|v| !v.is_finite()) || s.weight < T::zero() || s.weight > T::one() {
            return Err(CalibrationError::InvalidSample(format!("{s:?}")));
        }
    }
    if count_distinct(samples.iter().map(|s| s.l_act).collect()) < MIN_GRID_COUNT {
        return Err(CalibrationError::RankDeficient { direction: "linear (l)".into() });
    }
    if count_distinct(samples.iter().map(|s| s.theta_act).collect()) < MIN_GRID_COUNT {
        return Err(CalibrationError::RankDeficient { direction: "angular (theta)".into() });
    }

    let start = match init {
        Some(p) => CalibrationParams { x_scale: known_x_scale, ..*p },
        None => initial_guess(samples, known_x_scale, opts)
            .ok_or_else(|| CalibrationError::RankDeficient { direction: "initialisation".into() })?,
    };
    let initial_rms_px = residual_report(&start, samples).rms;

    let n = 7;
    let mut x = pack(&start);
    let mut current = cost(&start, samples, opts);
    let mut lambda = T::lit(INITIAL_DAMPING);
    let floor = (T::epsilon() * T::lit(1e3)).powi(2) * T::idx(samples.len());
    let mut converged = current <= floor;
    let mut iterations = 0;
    let mut checked_rank = false;

    while !converged && iterations < MAX_ITERATIONS {
        iterations += 1;
        let params = unpack(&x, known_x_scale);
        let mut jtj = vec![T::zero(); n * n];
        let mut jtr = vec![T::zero(); n];
        for s in samples {
            let ((ru, rv), ju, jv) = residual_and_jacobian(&params, s);
            let w = s.weight * huber_weight((ru * ru + rv * rv).sqrt(), opts);
            for i in 0..n {
                jtr[i] = jtr[i] + w * (ju[i] * ru + jv[i] * rv);
                for j in 0..n {
                    jtj[i * n + j] = jtj[i * n + j] + w * (ju[i] * ju[j] + jv[i] * jv[j]);
                }
            }
        }
        if !checked_rank {
            checked_rank = true;
            let zero = vec![T::zero(); n];
            if let Err(k) = solve_spd(&jtj, &zero, n) {
                return Err(CalibrationError::RankDeficient { direction: FITTED_PARAMETERS[k].into() });
            }
        }
        let mut damped = jtj.clone();
        for i in 0..n {
            damped[i * n + i] = jtj[i * n + i] * (T::one() + lambda);
        }
        let neg_g: Vec<T> = jtr.iter().map(|g| -*g).collect();
        let Ok(delta) = solve_spd(&damped, &neg_g, n) else {
            lambda = lambda * T::lit(10.0);
            continue;
        };
        let mut trial = x;
        for i in 0..n {
            trial[i] = trial[i] + delta[i];
        }
        let trial_cost = cost(&unpack(&trial, known_x_scale), samples, opts);
        let rel = (current - trial_cost).abs() / current.max(T::min_positive_value());
        if trial_cost.is_finite() && trial_cost < current {
            x = trial;
            current = trial_cost;
            lambda = lambda / T::lit(10.0);
        } else {
            lambda = lambda * T::lit(10.0);
        }
        if rel < T::lit(RELATIVE_COST_TOL) || current <= floor || lambda > T::lit(1e16) {
            converged = true;
        }
    }

    let params = unpack(&x, known_x_scale);
    let rms_px = residual_report(&params, samples).rms;
    Ok((params, FitReport { rms_px, initial_rms_px, iterations, converged }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ResidualReport<T> {
    /// `observed − predicted` per sample, `(u, v)` px.
    pub residuals: Vec<(T, T)>,
    pub rms: T,
    pub max: T,
    /// Mean residual per axis.
    pub bias: (T, T),
}

pub fn residual_report<T: Scalar>(params: &CalibrationParams<T>, samples: &[SweepSample<T>]) -> ResidualReport<T> {
    let residuals: Vec<(T, T)> = samples
        .iter()
        .map(|s| {
            let (u, v) = needle_fk(params, s.l_act, s.theta_act);
            (s.u - u, s.v - v)
        })
        .collect();
    let n = T::idx(residuals.len().max(1));
    let sq = residuals.iter().map(|(a, b)| *a * *a + *b * *b).fold(T::zero(), |a, b| a + b);
    let max = residuals.iter().map(|(a, b)| (*a * *a + *b * *b).sqrt()).fold(T::zero(), T::max);
    let bu = residuals.iter().map(|r| r.0).fold(T::zero(), |a, b| a + b) / n;
    let bv = residuals.iter().map(|r| r.1).fold(T::zero(), |a, b| a + b) / n;
    ResidualReport { rms: (sq / n).sqrt(), max, bias: (bu, bv), residuals }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct SweepHeader {
    format: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    width: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    height: Option<u32>,
}

/// Sweep log text: a header line followed by one JSON record per sample.
pub fn write_sweep_log(samples: &[SweepSample<f64>], frame: Option<&FrameGeometry<f64>>) -> String {
    let header = SweepHeader { format: SWEEP_FORMAT, width: frame.map(|f| f.width), height: frame.map(|f| f.height) };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for s in samples {
        out.push_str(&serde_json::to_string(s).expect("sample serializes"));
        out.push('\n');
    }
    out
}

/// Parses a sweep log, checking pixels against the frame bounds when the header records them.
pub fn parse_sweep_log(text: &str) -> Result<Vec<SweepSample<f64>>, CalibrationError> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: SweepHeader = serde_json::from_str(lines.next().ok_or_else(|| CalibrationError::Parse("empty log".into()))?)
        .map_err(|e| CalibrationError::Parse(format!("header: {e}")))?;
    if header.format != SWEEP_FORMAT {
        return Err(CalibrationError::Parse(format!("unsupported format {}", header.format)));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let s: SweepSample<f64> =
                serde_json::from_str(line).map_err(|e| CalibrationError::Parse(format!("record {}: {e}", i + 1)))?;
            if let (Some(w), Some(h)) = (header.width, header.height) {
                if !(s.u >= 0.0 && s.v >= 0.0 && s.u < w as f64 && s.v < h as f64) {
                    return Err(CalibrationError::InvalidSample(format!("record {} pixel outside {w}x{h} frame", i + 1)));
                }
            }
            Ok(s)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn device() -> CalibrationParams<f64> {
        CalibrationParams {
            p_l: 0.1,
            l_off: 0.0,
            p_theta: std::f64::consts::PI / 2048.0,
            theta_off: 0.05,
            x_scale: 16.0,
            y_scale: 6.0,
            x_off: -128.0,
            y_off: 0.0,
        }
    }

    #[test]
    fn grid_corners() {
        let lim = ActuatorLimits::new(0.0, 100.0, 0.0, 60.0);
        let plan = plan_sweep(&lim, 3, 3).unwrap();
        assert_eq!(plan.len(), 9);
        for c in [(0.0, 0.0), (0.0, 60.0), (100.0, 0.0), (100.0, 60.0)] {
            assert!(plan.contains(&c));
        }
        let plan = plan_sweep(&lim, 10, 10).unwrap();
        assert_eq!(plan.len(), 100);
        assert_abs_diff_eq!(plan[10].0 - plan[0].0, 100.0 / 9.0, epsilon = 1e-12);
        assert!(matches!(plan_sweep(&lim, 2, 5), Err(CalibrationError::SweepTooSmall { .. })));
    }

    #[test]
    fn noiseless_sweep_lies_on_fk() {
        let lim = ActuatorLimits::new(50.0, 300.0, 150.0, 650.0);
        let plan = plan_sweep(&lim, 4, 4).unwrap();
        let s = simulate_sweep(&device(), &plan, 0.0, 1);
        for smp in &s {
            assert_eq!((smp.u, smp.v), needle_fk(&device(), smp.l_act, smp.theta_act));
        }
        assert_eq!(simulate_sweep(&device(), &plan, 1.0, 9), simulate_sweep(&device(), &plan, 1.0, 9));
    }

    #[test]
    fn single_angle_is_rank_deficient() {
        let plan: Vec<(f64, f64)> = (0..12).map(|i| (50.0 + 20.0 * i as f64, 400.0)).collect();
        let s = simulate_sweep(&device(), &plan, 0.0, 0);
        let err = fit(&s, 16.0, None).unwrap_err();
        assert_eq!(err, CalibrationError::RankDeficient { direction: "angular (theta)".into() });
    }

    #[test]
    fn offset_shift_is_constant_bias() {
        let lim = ActuatorLimits::new(50.0, 300.0, 150.0, 650.0);
        let plan = plan_sweep(&lim, 5, 5).unwrap();
        let s = simulate_sweep(&device(), &plan, 0.0, 3);
        let exact = residual_report(&device(), &s);
        assert_eq!(exact.rms, 0.0);
        let mut shifted = device();
        shifted.y_off += 5.0;
        let rep = residual_report(&shifted, &s);
        assert_abs_diff_eq!(rep.bias.1, 5.0, epsilon = 1e-9);
        assert_abs_diff_eq!(rep.bias.0, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn fit_recovers_noiseless_params() {
        let lim = ActuatorLimits::new(50.0, 300.0, 150.0, 650.0);
        let plan = plan_sweep(&lim, 6, 6).unwrap();
        let s = simulate_sweep(&device(), &plan, 0.0, 0);
        let (p, rep) = fit(&s, 16.0, None).unwrap();
        assert!(rep.converged);
        assert!(rep.rms_px < 1e-6, "{rep:?}");
        assert_abs_diff_eq!(p.y_scale, 6.0, epsilon = 1e-6);
        assert_abs_diff_eq!(p.x_off, -128.0, epsilon = 1e-5);
    }

    #[test]
    fn huber_fit_resists_outlier() {
        let lim = ActuatorLimits::new(50.0, 300.0, 150.0, 650.0);
        let plan = plan_sweep(&lim, 6, 6).unwrap();
        let mut s = simulate_sweep(&device(), &plan, 0.3, 5);
        s[7].u += 60.0;
        let (robust, _) = fit_with(&s, 16.0, None, &FitOptions::robust()).unwrap();
        let (plain, _) = fit(&s, 16.0, None).unwrap();
        let clean: Vec<_> = simulate_sweep(&device(), &plan, 0.0, 0);
        assert!(residual_report(&robust, &clean).rms < residual_report(&plain, &clean).rms);
    }

    #[test]
    fn sweep_log_roundtrip() {
        let lim = ActuatorLimits::new(50.0, 300.0, 150.0, 650.0);
        let plan = plan_sweep(&lim, 3, 3).unwrap();
        let s = simulate_sweep(&device(), &plan, 0.5, 2);
        let text = write_sweep_log(&s, Some(&FrameGeometry::standard()));
        assert_eq!(parse_sweep_log(&text).unwrap(), s);
        let tiny = FrameGeometry { width: 10, height: 10, sx: 1.0, sy: 1.0 };
        assert!(parse_sweep_log(&write_sweep_log(&s, Some(&tiny))).is_err());
    }
}
