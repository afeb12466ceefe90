//! # climbplan
//!
//! Contact-implicit transition motion planning for multi-limbed climbing
//! robots. Given a scene (ground, walls, bricks, inclines, tubes), a robot
//! model and two safety factors, the planner solves a nonlinear program with
//! complementarity constraints for per-round toe placements, contact forces
//! and body poses, certifies the result with an independent LP equilibrium
//! oracle, and interpolates it into executable trajectories.
//!
//! Geometry, kinematics and the residual operations are generic over the
//! scalar type ([`Real`]); the NLP solver, LP oracle and trajectory builder
//! run in `f64`. The crate root carries `f64` aliases for everyday use and
//! `f32` aliases for the geometric types.

pub mod error;
pub mod formulation;
pub mod geometry;
pub mod kinematics;
pub mod lp;
pub mod scene;
pub mod setup;
pub mod solver;
pub mod trajectory;
pub mod verify;

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

pub use error::{Error, Result};

/// Scalar type accepted by the generic geometry and residual code.
pub trait Real: RealField + Copy + FromPrimitive + ToPrimitive {}

impl<T> Real for T where T: RealField + Copy + FromPrimitive + ToPrimitive {}

/// Converts an `f64` literal into `T`.
#[inline]
pub(crate) fn lit<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("f64 literal representable in scalar type")
}

pub type Vec3 = nalgebra::Vector3<f64>;
pub type Mat3 = nalgebra::Matrix3<f64>;

pub type Joint = kinematics::Joint<f64>;
pub type LegChain = kinematics::LegChain<f64>;
pub type RobotModel = kinematics::RobotModel<f64>;
pub type Pose = geometry::Pose<f64>;
pub type Surface = scene::Surface<f64>;
pub type Region = scene::Region<f64>;
pub type Scene = scene::Scene<f64>;
pub type ScenarioParams = scene::ScenarioParams<f64>;
pub type RoundState = formulation::RoundState<f64>;
pub type PlanProblem = formulation::PlanProblem<f64>;
pub type CostWeights = formulation::CostWeights<f64>;
pub type Targets = formulation::Targets<f64>;

pub type LegChainF32 = kinematics::LegChain<f32>;
pub type RobotModelF32 = kinematics::RobotModel<f32>;
pub type SurfaceF32 = scene::Surface<f32>;
pub type SceneF32 = scene::Scene<f32>;
pub type RoundStateF32 = formulation::RoundState<f32>;

pub use formulation::{KinematicsMode, ResidualReport};
pub use solver::{SolveResult, SolveStatus, SolverOptions};
pub use verify::SequenceLabel;
