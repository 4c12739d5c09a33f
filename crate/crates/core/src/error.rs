use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid range: {0}")]
    InvalidRange(String),

    #[error("timestep {t} outside 1..={max}")]
    TimestepOutOfRange { t: usize, max: usize },

    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch { expected: Vec<usize>, found: Vec<usize> },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("sampler produced a non-finite value at timestep {t} (max |voxel| = {max_abs})")]
    NonFiniteSample { t: usize, max_abs: f64 },

    #[error("non-finite {what} in `{name}`")]
    NonFinite { what: &'static str, name: String },

    #[error("at iteration {iteration}: {source}")]
    Iteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: Vec<u8>, found: Vec<u8> },

    #[error("unsupported format version {found} (this build reads version {expected})")]
    UnsupportedVersion { found: u16, expected: u16 },

    #[error("truncated {what}: needed {needed} bytes, {available} available")]
    Truncated {
        what: &'static str,
        needed: usize,
        available: usize,
    },

    #[error("corrupt header: {0}")]
    CorruptHeader(String),

    #[error("subject `{0}` has fewer than two visits")]
    TooFewVisits(String),

    #[error("phantom horizon exceeded at age {age}: {axis} semi-axis would be {value}")]
    HorizonExceeded {
        age: f64,
        axis: &'static str,
        value: f64,
    },

    #[error("constant volume cannot be normalized (all voxels = {0})")]
    ConstantVolume(f64),

    #[error("insufficient samples: {found} volumes, need at least {needed}")]
    InsufficientSamples { found: usize, needed: usize },

    #[error("covariance not positive semi-definite after ridge (min eigenvalue {0:e})")]
    NotPositiveSemiDefinite(f64),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Coarse failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numerical,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidRange(_)
            | Error::InvalidArgument(_)
            | Error::Config(_)
            | Error::TimestepOutOfRange { .. }
            | Error::HorizonExceeded { .. } => ErrorClass::Config,
            Error::NonFiniteSample { .. } | Error::NonFinite { .. } | Error::NotPositiveSemiDefinite(_) => {
                ErrorClass::Numerical
            }
            Error::Iteration { source, .. } => source.class(),
            _ => ErrorClass::Data,
        }
    }
}
