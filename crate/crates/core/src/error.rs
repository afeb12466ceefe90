use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("leg Jacobian is singular or ill-conditioned (condition number {condition:.3e})")]
    SingularConfiguration { condition: f64 },

    #[error("point lies on the cylinder axis of surface `{surface}`")]
    DegeneratePoint { surface: String },

    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),

    #[error("unknown scenario parameter `{0}`")]
    UnknownParameter(String),

    #[error("invalid robot model: {0}")]
    InvalidModel(String),

    #[error("invalid scene: {0}")]
    InvalidScene(String),

    #[error("invalid problem: {0}")]
    InvalidProblem(String),

    #[error("operation requires {expected} kinematics mode")]
    ModeMismatch { expected: &'static str },

    #[error("inverse kinematics did not converge for leg `{leg}` (residual {residual:.3e} m)")]
    InverseKinematics { leg: String, residual: f64 },

    #[error("deflection system is inconsistent (relative residual {relative_residual:.3e})")]
    InconsistentSystem { relative_residual: f64 },

    #[error("invalid solver options: {0}")]
    InvalidOptions(String),
}
