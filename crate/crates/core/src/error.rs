use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid array geometry: {0}")]
    InvalidGeometry(String),

    #[error("path set must contain at least one path")]
    EmptyPathSet,

    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        found: String,
    },

    #[error("batch or dataset is empty")]
    EmptyBatch,

    #[error("neighbor {neighbor} contributes {samples} samples, below the floor of {required}")]
    NeighborBelowFloor {
        neighbor: usize,
        samples: usize,
        required: usize,
    },

    #[error("reference channel has zero norm")]
    ZeroNorm,

    #[error("distance must be nonnegative, got {0}")]
    NegativeDistance(f64),

    #[error("all aggregation weights are zero")]
    DegenerateWeights,

    #[error("model structures are incompatible: {0}")]
    StructureMismatch(String),

    #[error("no error value for user {0}")]
    MissingMember(usize),

    #[error("coalition has zero total data volume")]
    ZeroVolume,

    #[error("instance has {assignments} assignments, above the enumeration limit of {limit}")]
    InstanceTooLarge { assignments: u128, limit: u128 },

    #[error("replay buffer holds {have} transitions, {need} required")]
    InsufficientBuffer { have: usize, need: usize },

    #[error("switch dynamics did not settle within {0} switches")]
    NoConvergence(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(
        context: &'static str,
        expected: impl ToString,
        found: impl ToString,
    ) -> Self {
        Error::ShapeMismatch {
            context,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}
