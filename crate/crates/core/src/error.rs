use thiserror::Error;

/// Errors produced by the core library.
#[derive(Debug, Error)]
pub enum Error {
    /// Grid coordinates are malformed (duplicates, empty set).
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    /// Requested neighborhood cannot be built (e.g. k >= n).
    #[error("invalid neighborhood: {0}")]
    InvalidNeighborhood(String),

    /// Vector/matrix sizes do not line up.
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionError { expected: usize, got: usize },

    /// Design matrix is numerically rank deficient (condition estimate above 1e12).
    #[error("rank-deficient design matrix (condition estimate {cond:.3e})")]
    RankDeficient { cond: f64 },

    /// Too few observations for the requested fit.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// Instrument matrix is rank deficient or otherwise unusable.
    #[error("weak or collinear instruments (condition estimate {cond:.3e})")]
    WeakInstruments { cond: f64 },

    /// Iterative estimation failed to converge.
    #[error("no convergence after {iterations} iterations")]
    NoConvergence { iterations: usize },

    /// Input vector has zero variance.
    #[error("zero variance input: {0}")]
    ZeroVariance(String),

    /// Collinearity filtering removed every column.
    #[error("no usable feature columns: {0}")]
    NoUsableFeatures(String),

    /// Synthetic data specification violates its invariants.
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),

    /// A numerical operation that should succeed under the documented
    /// preconditions failed anyway.
    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    /// Empty input where at least one value is required.
    #[error("empty input: {0}")]
    EmptyInput(String),

    /// Degenerate statistical input (e.g. all paired differences zero).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Caller passed an argument outside its documented domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// An error that occurred while processing a specific image task.
    #[error("image {image_id} fold {fold} k {k}: {source}")]
    Image {
        image_id: String,
        fold: usize,
        k: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Wrap an error with the (image, fold, k) task that produced it.
    pub fn with_image_context(self, image_id: &str, fold: usize, k: usize) -> Error {
        Error::Image {
            image_id: image_id.to_string(),
            fold,
            k,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
