use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Tensor or layer shapes do not compose.
    ShapeMismatch {
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    /// A NaN or infinity reached an operation boundary.
    NonFinite(&'static str),
    TargetOutOfRange {
        target: usize,
        classes: usize,
    },
    LayerOutOfRange {
        layer: usize,
        layers: usize,
    },
    /// The model has no convolutional layer to resolve `last_conv` against.
    NoConvLayer,
    /// The model tail is not `[global_avg_pool, flatten?, dense]`.
    NotCamEligible,
    /// An operation needs a capability the model does not provide.
    Unsupported(String),
    InvalidModel(String),
    InvalidArgument(String),
    /// A pixel-domain operation received a feature-domain map, or vice versa.
    DomainMismatch(String),
    /// Map without negative values handed to a signed-only metric.
    SignRequired,
    ZeroNorm,
    TooManyPlayers {
        players: usize,
        limit: usize,
    },
    EmptySet,
    UnknownModel(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { expected, found } => {
                write!(f, "shape mismatch: expected {expected:?}, found {found:?}")
            }
            Error::NonFinite(what) => write!(f, "non-finite value in {what}"),
            Error::TargetOutOfRange { target, classes } => {
                write!(f, "target class {target} out of range for {classes} classes")
            }
            Error::LayerOutOfRange { layer, layers } => {
                write!(f, "layer index {layer} out of range for {layers} layers")
            }
            Error::NoConvLayer => f.write_str("model has no convolutional layer"),
            Error::NotCamEligible => f.write_str("model tail is not global_avg_pool followed by a single dense layer"),
            Error::Unsupported(msg) => write!(f, "unsupported: {msg}"),
            Error::InvalidModel(msg) => write!(f, "invalid model: {msg}"),
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::DomainMismatch(msg) => write!(f, "attribution domain mismatch: {msg}"),
            Error::SignRequired => f.write_str("metric requires a signed attribution map (map is tagged nonneg)"),
            Error::ZeroNorm => f.write_str("attribution map has zero norm"),
            Error::TooManyPlayers { players, limit } => {
                write!(f, "exact enumeration refused for {players} players (limit {limit})")
            }
            Error::EmptySet => f.write_str("empty set"),
            Error::UnknownModel(name) => write!(f, "unknown reference model '{name}'"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
