//! Simulation core for a robotic ultrasound-guided vascular access system:
//! phantom geometry, ultrasound frame synthesis, needle kinematics and
//! calibration, the mechanism model, the control loops and the procedure
//! state machine.
//!
//! The numeric kernels are generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the `f64` instantiation used by the simulator.

pub mod calibration;
pub mod control;
pub mod geometry;
pub mod imaging;
pub mod kinematics;
pub mod linalg;
pub mod mechanism;
pub mod phantom;
pub mod procedure;
pub mod scalar;

pub use scalar::Scalar;

pub type Vec3 = geometry::Vec3<f64>;
pub type Vec2 = geometry::Vec2<f64>;
pub type CalibrationParams = kinematics::CalibrationParams<f64>;
pub type ActuatorLimits = kinematics::ActuatorLimits<f64>;
pub type SweepSample = calibration::SweepSample<f64>;
pub type FitReport = calibration::FitReport<f64>;
pub type PhantomModel = phantom::PhantomModel<f64>;
pub type Vessel = phantom::Vessel<f64>;
pub type ImagePlane = geometry::ImagePlane<f64>;
pub type Ellipse = geometry::Ellipse<f64>;
pub type FrameGeometry = imaging::FrameGeometry<f64>;

/// Single-precision instantiations of the math kernels.
pub mod f32 {
    pub type Vec3 = crate::geometry::Vec3<f32>;
    pub type Vec2 = crate::geometry::Vec2<f32>;
    pub type CalibrationParams = crate::kinematics::CalibrationParams<f32>;
    pub type ActuatorLimits = crate::kinematics::ActuatorLimits<f32>;
    pub type SweepSample = crate::calibration::SweepSample<f32>;
    pub type PhantomModel = crate::phantom::PhantomModel<f32>;
}
