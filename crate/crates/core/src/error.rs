use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("malformed manifest {path}: {msg} (byte {position})")]
    Manifest {
        path: PathBuf,
        msg: String,
        position: usize,
    },
    #[error("block {id}: blob truncated, needs bytes {offset}..{end} but blob has {available}")]
    TruncatedBlob {
        id: String,
        offset: u64,
        end: u64,
        available: u64,
    },
    #[error("duplicate block id {id} at manifest entry {index} (byte {position})")]
    DuplicateId {
        id: String,
        index: usize,
        position: usize,
    },
    #[error("block {id}: non-finite value at index {index}")]
    NonFinite { id: String, index: usize },
    #[error("block {id}: {msg}")]
    InvalidBlock { id: String, msg: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("cholesky factorization failed: {0}")]
    Cholesky(String),
    #[error("no whitening route available: {0}")]
    NoWhitener(String),
    #[error("interval has zero probability mass: [{lo}, {hi}]")]
    ZeroMass { lo: f64, hi: f64 },
    #[error("infeasible allocation: minimum cost {min_cost} bits exceeds budget {budget} bits")]
    Infeasible { min_cost: u64, budget: u64 },
    #[error("DP table too large: {units} budget units exceeds guard {guard}")]
    BudgetTooLarge { units: u64, guard: u64 },
    #[error("block {id}: cost {cost} bits is not a multiple of the DP unit {unit}")]
    NonIntegerCost { id: String, cost: u64, unit: u64 },
    #[error("missing block {0}")]
    MissingBlock(String),
    #[error("block {id}: ledger mismatch (stored {stored} bits, recomputed {recomputed} bits)")]
    LedgerMismatch {
        id: String,
        stored: u64,
        recomputed: u64,
    },
    #[error("block {id}: checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    ChecksumMismatch {
        id: String,
        stored: u32,
        computed: u32,
    },
    #[error("distillation diverged after {halvings} step-size halvings")]
    Divergence { halvings: u32 },
    #[error("parse error in {path}: {msg}")]
    Parse { path: PathBuf, msg: String },
    #[error("missing stage input {0}")]
    MissingInput(PathBuf),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("stage {stage} failed{}: {source}", block.as_ref().map(|b| format!(" on block {b}")).unwrap_or_default())]
    Stage {
        stage: String,
        block: Option<String>,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, msg: impl ToString) -> Self {
        Error::Parse {
            path: path.into(),
            msg: msg.to_string(),
        }
    }

    /// Wraps an error with the pipeline stage (and block) it came from.
    pub fn in_stage(self, stage: &str, block: Option<&str>) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage: stage.to_string(),
                block: block.map(str::to_string),
                source: Box::new(e),
            },
        }
    }
}
