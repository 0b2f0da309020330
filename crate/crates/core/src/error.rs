use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParams { field: &'static str, reason: String },

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    /// The bus voltage sits on the saturated CPL branch where the output
    /// derivatives are not defined.
    #[error("bus voltage {v_load} V is at or below the CPL cutoff {v_min} V")]
    SaturatedLoad { v_load: f64, v_min: f64 },

    #[error("target bus voltage {target} V must exceed the CPL cutoff {v_min} V")]
    TargetBelowCutoff { target: f64, v_min: f64 },

    #[error("decoupling matrix is ill-conditioned (condition number {0:.3e})")]
    IllConditionedDecoupling(f64),

    #[error("requested pole {0} does not have a strictly negative real part")]
    UnstablePole(f64),

    #[error("matrix is not Hurwitz (max real eigenvalue part {0:.3e})")]
    NotHurwitz(f64),

    #[error("matrix is not symmetric positive definite: {0}")]
    NotPositiveDefinite(&'static str),

    #[error("singular linear system in {0}")]
    Singular(&'static str),

    #[error("converter {converter} voltage {voltage} V is outside its safe interval ({lo}, {hi})")]
    OutsideSafeSet {
        converter: usize,
        voltage: f64,
        lo: f64,
        hi: f64,
    },

    #[error("quadratic program is infeasible")]
    QpInfeasible,

    #[error("quadratic program KKT system is ill-conditioned (condition number {0:.3e})")]
    QpIllConditioned(f64),

    #[error("invalid scenario: {0}")]
    Scenario(String),
}
