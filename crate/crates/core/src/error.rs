//! Error type shared by every analysis stage.

use thiserror::Error;

use crate::cct::InstabilityMode;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("no equilibrium found after {iterations} Newton iterations (residual {residual:e})")]
    NoEquilibriumFound { iterations: usize, residual: f64 },

    #[error("singular Jacobian at x = {at:?}")]
    SingularJacobian { at: Vec<f64> },

    #[error("step size {h:e} underflowed at t = {t}")]
    StiffnessFailure { t: f64, h: f64 },

    #[error("non-finite state at t = {t}")]
    NumericalBlowup { t: f64 },

    #[error("t = {t} outside trajectory span [{start}, {end}]")]
    OutOfRange { t: f64, start: f64, end: f64 },

    #[error("combined feasibility boundary has no constraints")]
    EmptyCombinedBoundary,

    #[error("state-space sampling needs a planar system, got n = {n}")]
    NotPlanar { n: usize },

    #[error("operating point infeasible: H = {h:e} at the pre-fault equilibrium")]
    InfeasibleOperatingPoint { h: f64 },

    #[error("no finite critical clearing time: fault stays stable up to t = {horizon}")]
    NoFiniteCct { horizon: f64 },

    #[error("inconclusive post-fault run for clearing time {t_cl}: {detail}")]
    InconclusiveRun { t_cl: f64, detail: String },

    #[error("bracket collapsed: clearing at {t} re-classified as {found}")]
    BracketCollapse { t: f64, found: &'static str },

    #[error("fault trajectory meets the boundary tangentially (|M5*M2| = {pivot:e})")]
    TangentialIntersection { pivot: f64 },

    #[error("end point too close to intersecting boundary portions (det = {det:e})")]
    DegenerateGeometry { det: f64 },

    #[error("sensitivity for {0:?} is not provided (controlling-UEP manifold formulation)")]
    UnsupportedMode(InstabilityMode),

    #[error("constraint `{constraint}` does not provide second derivatives")]
    MissingSecondDerivatives { constraint: String },

    #[error("instability mode changed across the difference step ({minus:?} vs {plus:?})")]
    ModeChangedAcrossStep {
        minus: InstabilityMode,
        plus: InstabilityMode,
    },

    #[error("expression error: {0}")]
    Expression(String),
}

impl Error {
    /// Variant name, for machine-readable error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::InvalidInput(_) => "InvalidInput",
            Error::NoEquilibriumFound { .. } => "NoEquilibriumFound",
            Error::SingularJacobian { .. } => "SingularJacobian",
            Error::StiffnessFailure { .. } => "StiffnessFailure",
            Error::NumericalBlowup { .. } => "NumericalBlowup",
            Error::OutOfRange { .. } => "OutOfRange",
            Error::EmptyCombinedBoundary => "EmptyCombinedBoundary",
            Error::NotPlanar { .. } => "NotPlanar",
            Error::InfeasibleOperatingPoint { .. } => "InfeasibleOperatingPoint",
            Error::NoFiniteCct { .. } => "NoFiniteCct",
            Error::InconclusiveRun { .. } => "InconclusiveRun",
            Error::BracketCollapse { .. } => "BracketCollapse",
            Error::TangentialIntersection { .. } => "TangentialIntersection",
            Error::DegenerateGeometry { .. } => "DegenerateGeometry",
            Error::UnsupportedMode(_) => "UnsupportedMode",
            Error::MissingSecondDerivatives { .. } => "MissingSecondDerivatives",
            Error::ModeChangedAcrossStep { .. } => "ModeChangedAcrossStep",
            Error::Expression(_) => "Expression",
        }
    }

    pub(crate) fn dims(what: &'static str, expected: usize, found: usize) -> Self {
        Error::DimensionMismatch {
            what,
            expected,
            found,
        }
    }
}
