//! Ready-made planning problems for the bundled scenes.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::formulation::{CostWeights, ForceCost, KinematicsMode, PlanProblem, RoundState, Targets};
use crate::kinematics::RobotModel;
use crate::scene::{scenario_library, ScenarioParams, Scene};
use crate::verify::support_forces;

/// Nominal body height above the ground (m).
pub const BODY_HEIGHT: f64 = 0.21;
/// Height of the toe targets on the walls (m).
pub const WALL_TOE_HEIGHT: f64 = 0.18;
/// Lateral toe offset of the standing posture (m).
pub const STANCE_HALF_WIDTH: f64 = 0.42;

/// Planning rounds each bundled scenario is set up with.
pub fn default_rounds(name: &str) -> Result<usize> {
    match name {
        "parallel_wall" | "flat_ground" | "tube_exit" => Ok(2),
        "parallel_wall_incline" => Ok(3),
        "parallel_wall_steps" => Ok(4),
        other => Err(Error::UnknownScenario(other.to_string())),
    }
}

/// A round at the given pose and toes, carrying static support forces on
/// every touching pair (nominal friction and torque).
pub fn supported_round(
    robot: &RobotModel<f64>,
    scene: &Scene<f64>,
    com: Vector3<f64>,
    body_euler: Vector3<f64>,
    toes: Vec<Vector3<f64>>,
) -> Result<RoundState<f64>> {
    let mut round = RoundState::unloaded(com, body_euler, toes, scene);
    round.forces = support_forces(&round, robot, scene, 1.0, 1.0)
        .ok_or_else(|| Error::InvalidProblem("initial stance cannot support the robot".into()))?;
    Ok(round)
}

/// The planning problem of a bundled scenario with the desk hexapod, nominal
/// safety factors `S_μ = 1.1`, `S_τ = 1.8` and switchability on.
pub fn standard_problem(name: &str, params: &ScenarioParams<f64>) -> Result<PlanProblem<f64>> {
    let mut robot = RobotModel::<f64>::desk_hexapod();
    let scene = scenario_library(name, params)?;
    let rounds = default_rounds(name)?;
    let half = params.wall_distance / 2.0;
    let hips: Vec<Vector3<f64>> = robot.legs.iter().map(|l| l.hip_offset).collect();
    let side = |leg: usize| hips[leg].y.signum();
    let hip_x = |leg: usize| hips[leg].x;
    let n = hips.len();
    let ground_toe = |leg: usize| Vector3::new(hip_x(leg), side(leg) * STANCE_HALF_WIDTH, 0.0);
    let wall_toe = |leg: usize| Vector3::new(hip_x(leg), side(leg) * half, WALL_TOE_HEIGHT);
    let mut weights = CostWeights::default();
    let mut com = Vector3::new(0.0, 0.0, BODY_HEIGHT);

    let (toes, targets): (Vec<_>, Vec<_>) = match name {
        "flat_ground" => (0..n).map(|l| (ground_toe(l), ground_toe(l) + Vector3::new(0.1, 0.0, 0.0))).unzip(),
        "parallel_wall" => (0..n).map(|l| (ground_toe(l), wall_toe(l))).unzip(),
        "parallel_wall_steps" => {
            // Left toes cannot reach the wall from the ground in one step.
            for leg in robot.legs.iter_mut().filter(|l| l.hip_offset.y > 0.0) {
                leg.max_toe_step = Some(0.17);
            }
            (0..n).map(|l| (ground_toe(l), wall_toe(l))).unzip()
        }
        "parallel_wall_incline" => {
            weights.force_cost = ForceCost::L2;
            weights.q_theta *= 0.1;
            let foot = half - params.incline_run;
            (0..n)
                .map(|l| {
                    let mut p = ground_toe(l);
                    if side(l) > 0.0 {
                        p.y = foot - 0.015;
                    }
                    (p, wall_toe(l))
                })
                .unzip()
        }
        "tube_exit" => {
            let (r, h) = (params.tube_radius, params.tube_height);
            com.z = h - 0.1;
            (0..n)
                .map(|l| {
                    (
                        Vector3::new(hip_x(l), side(l) * (r * r - hip_x(l) * hip_x(l)).sqrt(), h - 0.15),
                        Vector3::new(hip_x(l), side(l) * (r + 0.015), h),
                    )
                })
                .unzip()
        }
        other => return Err(Error::UnknownScenario(other.to_string())),
    };

    let initial_stance = supported_round(&robot, &scene, com, Vector3::zeros(), toes)?;
    Ok(PlanProblem {
        robot,
        scene,
        rounds,
        s_mu: 1.1,
        s_tau: 1.8,
        weights,
        targets: Targets { toes: targets, body: None },
        initial_stance,
        switchability: true,
        kinematics_mode: KinematicsMode::Sphere,
        terminal_tolerance: 0.002,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formulation::equilibrium_residual;
    use crate::scene::SCENARIOS;

    #[test]
    fn every_bundled_scenario_builds_a_valid_problem() {
        for name in SCENARIOS {
            let p = standard_problem(name, &ScenarioParams::default()).unwrap();
            p.validate().unwrap();
            let eq = equilibrium_residual(&p.initial_stance, &p.robot, &p.scene);
            assert!(eq.norm() < 1e-8, "{name}: initial stance out of balance by {}", eq.norm());
        }
    }

    #[test]
    fn unknown_scenario_is_named() {
        assert!(matches!(standard_problem("moon", &ScenarioParams::default()), Err(Error::UnknownScenario(_))));
    }
}
