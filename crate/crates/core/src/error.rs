use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate limb {limb}: length {length:e} is at or below the guard")]
    DegenerateLimb { limb: usize, length: f64 },
    #[error("kernel bandwidth must be positive, got {0}")]
    InvalidBandwidth(f64),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("frame is missing {0} flow")]
    MissingFlow(&'static str),
    #[error("point cloud has no limb attachments")]
    MissingAttachment,
    #[error("non-finite loss at iteration {iteration} in term {term}")]
    NonFiniteLoss { iteration: usize, term: &'static str },
    #[error("no ray hit the body")]
    EmptyCloud,
    #[error("need at least {k} points for {k} clusters, got {n}")]
    TooFewPoints { n: usize, k: usize },
    #[error("cluster {0} is empty")]
    EmptyCluster(usize),
    #[error("chamfer distance needs two nonempty point sets")]
    EmptySet,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("cost matrix is {rows}x{cols}, expected square")]
    NonSquare { rows: usize, cols: usize },
    #[error("no visible joints")]
    NoVisibleJoints,
    #[error("frame counts differ: {0} vs {1}")]
    FrameCountMismatch(usize, usize),
    #[error("invalid topology: {0}")]
    InvalidTopology(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("parse error in {path}: {msg}")]
    Parse { path: String, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFiniteLoss { .. } | Error::DegenerateLimb { .. })
    }
}
