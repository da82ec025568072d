use thiserror::Error;

/// Errors produced by the engine, training harness, and analysis layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matmul dimension mismatch: left is {a_rows}x{a_cols}, right is {b_rows}x{b_cols}")]
    DimMismatch {
        a_rows: usize,
        a_cols: usize,
        b_rows: usize,
        b_cols: usize,
    },
    #[error("shape mismatch: expected {expected_rows}x{expected_cols}, got {got_rows}x{got_cols}")]
    ShapeMismatch {
        expected_rows: usize,
        expected_cols: usize,
        got_rows: usize,
        got_cols: usize,
    },
    #[error("softmax row {row} is entirely masked; the query has no visible keys")]
    AllMaskedRow { row: usize },
    #[error("target id {target} at row {row} is outside vocab of size {vocab}")]
    TargetOutOfVocab {
        row: usize,
        target: u32,
        vocab: usize,
    },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("sequence of {len} tokens exceeds max_position {max_position}")]
    SequenceTooLong { len: usize, max_position: usize },
    #[error("cache built for {cache} does not match model config {model}")]
    CacheConfigMismatch { cache: String, model: String },
    #[error("prefix must be non-empty")]
    EmptyPrefix,
    #[error("skew coefficient must lie in [0, 1), got {0}")]
    InvalidSkew(f64),
    #[error("curriculum length t_c must be >= 1")]
    ZeroCurriculum,
    #[error("mask temperatures must be positive, got tau_start={tau_start}, tau_end={tau_end}")]
    NonPositiveTau { tau_start: f64, tau_end: f64 },
    #[error("no decode query has at least {window} generated predecessors")]
    NoEligibleQueries { window: usize },
    #[error("training diverged: validation NLL rose for {evals} consecutive evals (last {last_nll:.4})")]
    Diverged { evals: usize, last_nll: f64 },
    #[error("timer resolution too coarse for this model: step time {step_ns} ns < 10 ticks; use a larger model")]
    TimerResolution { step_ns: u128 },
    #[error("checkpoint is malformed: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
