use alloc::boxed::Box;
use alloc::string::String;
use core::fmt;

/// Errors raised while building or advancing a simulation.
#[derive(Clone, Debug, PartialEq)]
pub enum SimError {
    /// `det(F) <= 0` or a non-positive singular value where a positive one is required.
    DegenerateDeformation { particle: usize },
    /// A particle left the clamped interior region (or became non-finite).
    Escape { particle: usize },
    /// The mass-weighted covariance of a rigid body is rank deficient.
    Rigidity { body: usize },
    /// The pressure solve did not reach its tolerance.
    ResidualTooLarge { residual: f64 },
    /// A NaN or infinity appeared in a cotangent.
    PoisonedAdjoint { substep: usize },
    /// The loss evaluated to a non-finite value.
    NonFiniteLoss { value: f64 },
    /// A perturbed objective evaluation was not finite.
    NonFiniteObjective { parameter: usize, value: f64 },
    /// An error raised inside a particular substep.
    AtSubstep { substep: usize, source: Box<SimError> },
    Checkpoint(CheckpointError),
    Scene(SceneError),
    Loss(LossError),
}

impl SimError {
    pub fn at_substep(self, substep: usize) -> Self {
        match self {
            e @ SimError::AtSubstep { .. } => e,
            e @ SimError::PoisonedAdjoint { .. } => e,
            e => SimError::AtSubstep { substep, source: Box::new(e) },
        }
    }

    /// Innermost error, with any substep wrapper removed.
    pub fn root(&self) -> &SimError {
        match self {
            SimError::AtSubstep { source, .. } => source.root(),
            e => e,
        }
    }
}

impl fmt::Display for SimError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SimError::DegenerateDeformation { particle } => {
                write!(f, "degenerate deformation gradient on particle {particle}")
            }
            SimError::Escape { particle } => write!(f, "particle {particle} escaped the simulation domain"),
            SimError::Rigidity { body } => write!(f, "rigid body {body} has a degenerate covariance"),
            SimError::ResidualTooLarge { residual } => {
                write!(f, "pressure solve did not converge (residual {residual:e})")
            }
            SimError::PoisonedAdjoint { substep } => write!(f, "non-finite adjoint at substep {substep}"),
            SimError::NonFiniteLoss { value } => write!(f, "loss is not finite ({value})"),
            SimError::NonFiniteObjective { parameter, value } => {
                write!(f, "objective is not finite ({value}) when perturbing parameter {parameter}")
            }
            SimError::AtSubstep { substep, source } => write!(f, "substep {substep}: {source}"),
            SimError::Checkpoint(e) => write!(f, "{e}"),
            SimError::Scene(e) => write!(f, "{e}"),
            SimError::Loss(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for SimError {}

#[derive(Clone, Debug, PartialEq)]
pub enum CheckpointError {
    /// No snapshot stored at this substep.
    Missing { index: usize },
    /// Saves must land on multiples of the stride.
    Misaligned { index: usize, stride: usize },
    /// Snapshot bytes could not be decoded.
    Corrupt { index: usize, reason: &'static str },
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::Missing { index } => write!(f, "no checkpoint stored at substep {index}"),
            CheckpointError::Misaligned { index, stride } => {
                write!(f, "checkpoint index {index} is not a multiple of stride {stride}")
            }
            CheckpointError::Corrupt { index, reason } => {
                write!(f, "checkpoint at substep {index} is corrupt: {reason}")
            }
        }
    }
}

impl From<CheckpointError> for SimError {
    fn from(e: CheckpointError) -> Self {
        SimError::Checkpoint(e)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SceneError {
    ShapeOutsideDomain { shape: String },
    UnknownMaterial { name: String },
    NoParticlesSampled { shape: String },
    InvalidParameter { what: String },
    UnknownEffector { index: usize },
}

impl fmt::Display for SceneError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SceneError::ShapeOutsideDomain { shape } => write!(f, "shape '{shape}' lies outside the domain"),
            SceneError::UnknownMaterial { name } => write!(f, "unknown material '{name}'"),
            SceneError::NoParticlesSampled { shape } => write!(f, "shape '{shape}' produced no particles"),
            SceneError::InvalidParameter { what } => write!(f, "invalid parameter: {what}"),
            SceneError::UnknownEffector { index } => write!(f, "unknown effector {index}"),
        }
    }
}

impl core::error::Error for SceneError {}

impl From<SceneError> for SimError {
    fn from(e: SceneError) -> Self {
        SimError::Scene(e)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LossError {
    EmptySet,
    TooFewParticles { needed: usize, got: usize },
    LengthMismatch { expected: usize, got: usize },
    SensorOutsideDomain { sensor: usize },
    MissingGas,
    /// A weight is non-finite, or negative inside a composite.
    InvalidWeight,
}

impl fmt::Display for LossError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossError::EmptySet => write!(f, "loss evaluated on an empty point set"),
            LossError::TooFewParticles { needed, got } => {
                write!(f, "loss needs at least {needed} particles, got {got}")
            }
            LossError::LengthMismatch { expected, got } => {
                write!(f, "expected {expected} entries, got {got}")
            }
            LossError::SensorOutsideDomain { sensor } => write!(f, "sensor {sensor} lies outside the gas domain"),
            LossError::MissingGas => write!(f, "loss needs a gas field but the scene has none"),
            LossError::InvalidWeight => write!(f, "loss weights must be finite and non-negative"),
        }
    }
}

impl core::error::Error for LossError {}

impl From<LossError> for SimError {
    fn from(e: LossError) -> Self {
        SimError::Loss(e)
    }
}
