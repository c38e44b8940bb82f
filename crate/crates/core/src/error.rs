use thiserror::Error;

pub type Result<T, E = HteError> = std::result::Result<T, E>;

/// Errors surfaced by every stage of the toolkit.
#[derive(Debug, Error)]
pub enum HteError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("invalid parameter `{param}`: {message}")]
    Param { param: String, message: String },

    #[error("invalid generator config `{param}`: {message}")]
    Config { param: String, message: String },

    #[error("relative lift undefined for experiment {experiment_id}: control mean is zero")]
    UndefinedLift { experiment_id: String },

    #[error("variance undefined for experiment {experiment_id}: {arm} arm has fewer than two observations")]
    VarianceUndefined { experiment_id: String, arm: String },

    #[error("cannot fit feature `{feature}`: {message}")]
    Fitting { feature: String, message: String },

    #[error("schema version mismatch: transform expects v{expected}, got v{found}")]
    SchemaVersionMismatch { expected: u32, found: u32 },

    #[error("training diverged at epoch {epoch}, batch {batch}: loss is not finite")]
    Divergence { epoch: usize, batch: usize },

    #[error("warm start rejected: {0}")]
    WarmStart(String),

    #[error("dimension mismatch: expected {expected}, got {found}")]
    Dimension { expected: usize, found: usize },

    #[error("scope error: {0}")]
    Scope(String),

    #[error("arm error: {0}")]
    Arm(String),

    #[error("degenerate experiment: |total gain| {total_gain:e} below floor {floor:e}")]
    DegenerateExperiment { total_gain: f64, floor: f64 },

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("transform spec evolved: prior lineage has input dimension {prior}, current data needs {current}")]
    SpecEvolution { prior: usize, current: usize },

    #[error("registry error: {0}")]
    Registry(String),

    #[error("selection kept no experiments: {0}")]
    EmptySelection(String),

    #[error("run config: {0}")]
    RunConfig(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl HteError {
    pub fn param(param: impl Into<String>, message: impl Into<String>) -> Self {
        HteError::Param {
            param: param.into(),
            message: message.into(),
        }
    }

    pub fn config(param: impl Into<String>, message: impl Into<String>) -> Self {
        HteError::Config {
            param: param.into(),
            message: message.into(),
        }
    }

    /// Process exit code for the command-line tool: 1 validation, 2 data, 3 divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            HteError::Param { .. }
            | HteError::Config { .. }
            | HteError::Scope(_)
            | HteError::RunConfig(_)
            | HteError::WarmStart(_)
            | HteError::SpecEvolution { .. } => 1,
            HteError::Divergence { .. } => 3,
            _ => 2,
        }
    }
}
