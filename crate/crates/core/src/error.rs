use thiserror::Error;

/// Errors raised by the reduction engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid truncation: {0}")]
    InvalidTruncation(String),

    /// Pairs `(k, j, k', j')` breaking the cluster gap conditions; `k == k'`
    /// marks a violation of the lower bound on a single eigenvalue.
    #[error("spectral gap violated by {} pair(s), first {:?}", .pairs.len(), .pairs.first())]
    GapViolation { pairs: Vec<(usize, usize, usize, usize)> },

    #[error("model error: {0}")]
    Model(String),

    #[error("operands live on different models or frequency dimensions")]
    ModelMismatch,

    #[error("generator is not Hermitian (defect {defect:.3e})")]
    NotHermitian { defect: f64 },

    #[error("collocation grid of size {grid} cannot resolve Fourier truncation {n_max}")]
    Aliasing { grid: usize, n_max: usize },

    #[error("inverse defect {defect:.3e} exceeds tolerance {tol:.3e}")]
    InverseDefect { defect: f64, tol: f64 },

    #[error("operator has nonzero phi-mean (norm {norm:.3e})")]
    NonzeroMean { norm: f64 },

    #[error("small divisor {value:.3e} at l={l:?} is below threshold {threshold:.3e}")]
    DivisorViolation {
        l: Vec<i64>,
        value: f64,
        threshold: f64,
    },

    #[error("excision required: divisor {value:.3e} below {threshold:.3e} at l={l:?}, (k,j)=({k},{j}), (k',j')=({k2},{j2})")]
    ExcisionRequired {
        l: Vec<i64>,
        k: usize,
        j: usize,
        k2: usize,
        j2: usize,
        value: f64,
        threshold: f64,
    },

    #[error("eigenvalue table has no entry for sample {0}")]
    IncompleteTable(usize),

    #[error("order undefined: operator vanishes on the fitted band")]
    UndefinedOrder,

    #[error("singular weight: cluster {0} has zero K0 eigenvalue")]
    SingularWeight(usize),

    #[error("flattened dimension {dim} exceeds oracle cap {cap}")]
    OracleCap { dim: usize, cap: usize },

    #[error("iteration stagnated at step {nu}: decay ratio {ratio:.3e}")]
    Stagnation { nu: usize, ratio: f64 },

    #[error("every frequency sample was excised")]
    EmptySurvivors,

    #[error("accuracy alert: step-halving error estimate {estimate:.3e} exceeds {tol:.3e}")]
    AccuracyAlert { estimate: f64, tol: f64 },

    #[error("container format: {message} (offset {offset})")]
    Format { message: String, offset: u64 },

    #[error("config: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("linear algebra failure: {0}")]
    LinearAlgebra(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
