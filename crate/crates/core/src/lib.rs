//! Real-time nonlinear model-predictive control for skid-steer platforms:
//! SE(2) kinematics, multiple-shooting transcription, an SQP solver with a
//! dual active-set QP, the control loop, a simulated plant, the UDP link and
//! run metrics.
//!
//! The math layers are generic over [`scalar::Real`] (`f32` or `f64`); the
//! runtime layers (controller, plant, link, telemetry) are `f64`.

pub mod config;
pub mod controller;
pub mod linalg;
pub mod ocp;
pub mod plant;
pub mod scalar;
pub mod se2;
pub mod sim;
pub mod skidsteer;
pub mod solver;
pub mod telemetry;
pub mod trajectory;
pub mod udp;

pub type Pose64 = se2::Pose<f64>;
pub type Pose32 = se2::Pose<f32>;
pub type Twist64 = se2::Twist<f64>;
pub type Twist32 = se2::Twist<f32>;
pub type WheelRates64 = skidsteer::WheelRates<f64>;
pub type WheelRates32 = skidsteer::WheelRates<f32>;
pub type PlatformParams64 = skidsteer::PlatformParams<f64>;
pub type SkidSteerModel64 = skidsteer::SkidSteerModel<f64>;
pub type SkidSteerModel32 = skidsteer::SkidSteerModel<f32>;
pub type TrajectorySpec64 = trajectory::TrajectorySpec<f64>;
pub type ReferenceSample64 = trajectory::ReferenceSample<f64>;
pub type OcpProblem64 = ocp::OcpProblem<f64>;
pub type OcpProblem32 = ocp::OcpProblem<f32>;
pub type HorizonConfig64 = ocp::HorizonConfig<f64>;
pub type Weights64 = ocp::Weights<f64>;
pub type Bounds64 = ocp::Bounds<f64>;
pub type SolverState64 = solver::SolverState<f64>;
pub type SolverState32 = solver::SolverState<f32>;
pub type SolverSettings64 = solver::SolverSettings<f64>;
