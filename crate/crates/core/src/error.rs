use thiserror::Error;

/// Errors produced by the audit library.
#[derive(Debug, Error)]
pub enum AuditError {
    #[error("weighted estimand undefined: E[a | W0 = 1] is zero")]
    DegenerateWeights,

    #[error("cell `{0}` needs a CATE value but none was supplied")]
    MissingTau(String),

    #[error("subpopulation has zero probability mass")]
    EmptySubpopulation,

    #[error("overlap fails in cell `{label}`: probability {value} is not in (0, 1)")]
    OverlapViolation { label: String, value: f64 },

    #[error("no complier mass in the design")]
    NoCompliers,

    #[error("group distribution has no treated group with positive share")]
    NoTreatedGroups,

    #[error("cell labels are not numeric vectors (cell `{0}`)")]
    MissingNumericLabels(String),

    #[error("difference bound must be nonnegative, got {0}")]
    NegativeBound(f64),

    #[error("fixed-CATE program is infeasible: mu0 = {0} lies outside the CATE hull")]
    InfeasibleProgram(f64),

    #[error("brute-force oracle supports at most {max} cells, got {k}")]
    InstanceTooLarge { k: usize, max: usize },

    #[error("invalid support bounds [{lo}, {hi}]")]
    InvalidSupport { lo: f64, hi: f64 },

    #[error("cell `{label}` has no observations with {arm}")]
    EmptyCellArm { label: String, arm: &'static str },

    #[error("every cell was trimmed by the c_n = {0} threshold")]
    AllCellsTrimmed(f64),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("bootstrap gave up after {redraws} degenerate resamples")]
    ResampleDegenerate { redraws: usize },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: u64, msg: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("panel is unbalanced: {0}")]
    UnbalancedPanel(String),

    #[error("invalid simulation spec: {0}")]
    InvalidSpec(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, AuditError>;
