//! Frozen expected values for the core operations.

use approx::assert_abs_diff_eq;

use seldinger_core::calibration::{self, fit, plan_sweep, residual_report, simulate_sweep, CalibrationError};
use seldinger_core::control::{self, RotateDirection};
use seldinger_core::geometry::{tube_cross_section, ImagePlane};
use seldinger_core::imaging::{dark_blobs, render, ImagingConfig, ProbePose, RenderInput};
use seldinger_core::kinematics::{needle_fk, needle_ik, ActuatorLimit, KinematicsError};
use seldinger_core::mechanism::{true_needle, DeviceConfig, MechanismState};
use seldinger_core::{ActuatorLimits, CalibrationParams, PhantomModel, Vec3};

fn spec_params() -> CalibrationParams {
    CalibrationParams {
        p_l: 0.05,
        l_off: 4.0,
        p_theta: 0.001,
        theta_off: 0.3,
        x_scale: 16.0,
        y_scale: 6.0,
        x_off: -40.0,
        y_off: 12.0,
    }
}

#[test]
fn fk_formula_value() {
    let (u, v) = needle_fk(&spec_params(), 800.0, 400.0);
    assert_abs_diff_eq!(u, 578.4488998482799, epsilon = 1e-9);
    assert_abs_diff_eq!(v, 158.07346943075044, epsilon = 1e-9);
}

#[test]
fn ik_beyond_reach_names_linear_limit() {
    let cfg = DeviceConfig::human();
    let p = cfg.calibrated_params();
    let (u0, v0) = p.pivot_px();
    let (u, v) = needle_fk(&p, cfg.limits.l_max, 400.0);
    let far = (u0 + (u - u0) * 1.1, v0 + (v - v0) * 1.1);
    assert_eq!(
        needle_ik(&p, &cfg.limits, far.0, far.1),
        Err(KinematicsError::OutsideWorkspace { limit: ActuatorLimit::Linear })
    );
}

#[test]
fn groin_crest_interpolation() {
    let ph = PhantomModel::human();
    assert_abs_diff_eq!(ph.surface_height(0.0, 0.0).unwrap(), 8.0, epsilon = 1e-12);
    // halfway between the x = 0 and x = 2 nodes
    assert_abs_diff_eq!(ph.surface_height(1.0, 3.0).unwrap(), 7.978087581473093, epsilon = 1e-12);
}

#[test]
fn cylinder_sections() {
    let line = [Vec3::new(0.0, -50.0, -20.0), Vec3::new(0.0, 50.0, -20.0)];
    let across = ImagePlane::from_probe(Vec3::new(0.0, 0.0, 0.0), 0.0);
    let e = tube_cross_section(&line, 3.5, &across).unwrap();
    assert_abs_diff_eq!(e.semi_axes.0, 3.5, epsilon = 1e-12);
    assert_abs_diff_eq!(e.semi_axes.1, 3.5, epsilon = 1e-12);
    assert_abs_diff_eq!(e.center.y, 20.0, epsilon = 1e-12);

    let oblique = ImagePlane::from_probe(Vec3::new(0.0, 0.0, 0.0), std::f64::consts::FRAC_PI_4);
    let e = tube_cross_section(&line, 3.5, &oblique).unwrap();
    assert_abs_diff_eq!(e.semi_axes.0, 4.949747468305833, epsilon = 1e-9);
    assert_abs_diff_eq!(e.semi_axes.1, 3.5, epsilon = 1e-12);

    let short = [Vec3::new(0.0, 10.0, -20.0), Vec3::new(0.0, 50.0, -20.0)];
    assert!(tube_cross_section(&short, 3.5, &across).is_none());
}

#[test]
fn sweep_grid_and_noise_statistics() {
    let lim = ActuatorLimits::new(0.0, 100.0, 0.0, 60.0);
    let plan = plan_sweep(&lim, 10, 10).unwrap();
    assert_eq!(plan.len(), 100);
    assert_abs_diff_eq!(plan[10].0 - plan[0].0, 100.0 / 9.0, epsilon = 1e-12);
    assert!(matches!(plan_sweep(&lim, 2, 10), Err(CalibrationError::SweepTooSmall { .. })));

    let p = DeviceConfig::human().true_params();
    let plan: Vec<(f64, f64)> = (0..10_000).map(|_| (500.0, 400.0)).collect();
    let s = simulate_sweep(&p, &plan, 1.0, 11);
    let (u0, v0) = needle_fk(&p, 500.0, 400.0);
    let std = |f: &dyn Fn(&calibration::SweepSample<f64>) -> f64| {
        let m = s.iter().map(f).sum::<f64>() / s.len() as f64;
        (s.iter().map(|x| (f(x) - m).powi(2)).sum::<f64>() / (s.len() - 1) as f64).sqrt()
    };
    assert!((std(&|x| x.u - u0) - 1.0).abs() < 0.05);
    assert!((std(&|x| x.v - v0) - 1.0).abs() < 0.05);
    assert_eq!(simulate_sweep(&p, &plan[..50], 1.0, 11), s[..50].to_vec());
}

#[test]
fn report_rms_matches_fit() {
    let p = DeviceConfig::human().true_params();
    let plan = plan_sweep(&DeviceConfig::human().limits, 10, 10).unwrap();
    let s = simulate_sweep(&p, &plan, 1.0, 5);
    let (fitted, report) = fit(&s, p.x_scale, None).unwrap();
    assert_eq!(residual_report(&fitted, &s).rms, report.rms_px);
}

#[test]
fn rendered_artery_centroid_matches_section() {
    let ph = PhantomModel::human();
    let cfg = ImagingConfig::default();
    let probe = ProbePose { position: Vec3::new(0.0, 0.0, 8.0), yaw: 0.0 };
    let input = RenderInput { probe, needle: None, axial_force: 4.0, vessels: &ph.vessels };
    let frame = render(&ph, &input, 1, 0, &cfg);
    assert_eq!(frame, render(&ph, &input, 1, 0, &cfg));
    let e = ph.vessel("artery").unwrap().cross_section(&probe.plane()).unwrap();
    let (cu, cv) = cfg.frame.plane_to_pixel(e.center.x, e.center.y);
    let blob = dark_blobs(&frame, 0.1)
        .into_iter()
        .filter(|b| !b.touches_border && b.area > 100)
        .min_by(|a, b| a.mean_intensity.total_cmp(&b.mean_intensity))
        .unwrap();
    assert!((blob.centroid.0 - cu).abs() <= 1.0 && (blob.centroid.1 - cv).abs() <= 1.0, "{blob:?} vs ({cu}, {cv})");

    let dark = render(&ph, &RenderInput { axial_force: 0.0, ..input }, 1, 0, &cfg);
    assert!(dark.intensities.iter().all(|&i| i == cfg.noise_floor));
}

#[test]
fn ccw_nudges_lengthen_the_section() {
    let ph = PhantomModel::human();
    let artery = ph.vessel("artery").unwrap();
    let mut yaw = 0.0;
    let mut last = 0.0;
    for _ in 0..44 {
        yaw = control::rotate_nudge(yaw, RotateDirection::Ccw, 2f64.to_radians()).unwrap();
        let e = artery.cross_section(&ImagePlane::from_probe(Vec3::new(0.0, 0.0, 8.0), yaw)).unwrap();
        assert!(e.semi_axes.0 > last);
        last = e.semi_axes.0;
    }
}

#[test]
fn staged_target_reaches_ground_truth_within_mismatch() {
    let cfg = DeviceConfig::human();
    let ph = PhantomModel::human();
    let cal = cfg.calibrated_params();
    let mut state = MechanismState::at_home(&cfg, &ph);
    state.probe_position.z = 60.0; // keep the needle in air
    let (u, v) = (450.0, 200.0);
    let stages = control::needle_target(u, v, &cal, &cfg.limits, &state, cfg.angle_lockout_mm).unwrap();
    let last = stages.last().unwrap();
    state.l_act = last.l_target;
    state.theta_act = last.theta_target;
    let (eu, ev) = needle_fk(&cal, state.l_act, state.theta_act);
    assert!((eu - u).hypot(ev - v) < 0.5);
    let tip = true_needle(&cfg, &state).tip();
    let q = state.probe_pose().plane().project(tip);
    let (tu, tv) = cfg.imaging.frame.plane_to_pixel(q.x, q.y);
    let mismatch_px = 0.5 * cfg.imaging.frame.sx.recip().max(cfg.imaging.frame.sy.recip());
    assert!((tu - u).hypot(tv - v) <= mismatch_px + 1e-9);
}
