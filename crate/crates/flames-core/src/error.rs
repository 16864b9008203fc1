//! Error types for the pipeline library.

use thiserror::Error;

/// Errors from parsing JSONL records.
#[derive(Debug, Error)]
pub enum ParseError {
    #[error("malformed JSON{}: {message}", fmt_line(.line))]
    MalformedJson {
        line: Option<usize>,
        message: String,
    },

    #[error("{kind}: missing field `{field}`")]
    MissingField { kind: &'static str, field: String },

    #[error("invariant violation: {message}")]
    InvariantViolation { message: String },
}

impl ParseError {
    /// Attaches a 1-based line number to a malformed-JSON error.
    pub fn at_line(self, line: usize) -> Self {
        match self {
            ParseError::MalformedJson { message, .. } => ParseError::MalformedJson {
                line: Some(line),
                message,
            },
            other => other,
        }
    }
}

fn fmt_line(line: &Option<usize>) -> String {
    match line {
        Some(n) => format!(" at line {n}"),
        None => String::new(),
    }
}

/// Errors from the chat-completion gateway.
#[derive(Debug, Clone, Error)]
pub enum GatewayError {
    #[error("endpoint `{endpoint}` unreachable after {attempts} attempts: {message}")]
    EndpointUnreachable {
        endpoint: String,
        attempts: u32,
        message: String,
    },

    #[error("bad response from `{endpoint}`: {message}")]
    BadResponse { endpoint: String, message: String },

    #[error("request cancelled")]
    Cancelled,

    #[error("unknown endpoint `{0}`")]
    UnknownEndpoint(String),
}

/// Errors from agent plan construction and execution.
#[derive(Debug, Error)]
pub enum AgentError {
    #[error("agent {agent} is missing required context: {field}")]
    MissingContext { agent: String, field: &'static str },

    #[error("agent {agent} received unexpected context: {field}")]
    UnexpectedContext { agent: String, field: &'static str },

    #[error("template `{template_id}`: {message}")]
    TemplateError {
        template_id: String,
        message: String,
    },

    #[error("malformed taxonomy: {0}")]
    MalformedTaxonomy(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Errors from quality-control filtering.
#[derive(Debug, Error)]
pub enum FilterError {
    #[error("strategy requires a solvability judge but none was provided")]
    MissingJudge,

    #[error("strategy requires a reward scorer but none was provided")]
    MissingReward,

    #[error("record {problem_id} entered filtering without extracted answers")]
    MissingAnswers { problem_id: String },

    #[error("record {problem_id} has {got} solutions, strategy expects {expected}")]
    WrongSolutionCount {
        problem_id: String,
        expected: usize,
        got: usize,
    },

    #[error("record {problem_id} has no solutions")]
    EmptySolutions { problem_id: String },

    #[error("judge failed: {0}")]
    Judge(#[source] GatewayError),

    #[error("reward scorer failed: {0}")]
    Reward(#[source] GatewayError),
}

/// Errors from JSONL file IO.
#[derive(Debug, Error)]
pub enum JsonlError {
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Parse {
        path: std::path::PathBuf,
        source: ParseError,
    },
}

/// Errors from dataset mixing.
#[derive(Debug, Error)]
pub enum MixError {
    #[error("source `{name}` too small: needed {needed}, available {available}")]
    SourceTooSmall {
        name: String,
        needed: usize,
        available: usize,
    },

    #[error("mixture weights sum to {sum}, expected 1 within 1e-9")]
    WeightSumInvalid { sum: f64 },

    #[error("source `{name}` has weight {weight}, expected a value in (0, 1]")]
    InvalidWeight { name: String, weight: f64 },

    #[error("mixture has no sources")]
    NoSources,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Jsonl(#[from] JsonlError),
}

/// Errors from the evaluation harness.
#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty input")]
    EmptyInput,

    #[error("benchmark `{name}`: duplicate item id `{id}`")]
    DuplicateItem { name: String, id: String },

    #[error("benchmark `{name}`: item `{id}` has an empty gold answer")]
    EmptyGold { name: String, id: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Jsonl(#[from] JsonlError),
}
