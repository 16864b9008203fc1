//! Library core of a synthetic math-reasoning data pipeline: seed problems
//! go through agent-based problem synthesis against an LLM endpoint, exact
//! dedup and 8-gram test-set decontamination, solution synthesis,
//! quality-control filtering and proportion-exact dataset mixing into
//! SFT-ready JSONL, plus a benchmark scorer with the answer-matching and
//! checkpoint-selection rules used by the pipeline.
//!
//! Every stage is deterministic given the pipeline config, the rng seed and
//! (for offline runs) the mock endpoint scripts.

pub mod agents;
pub mod config;
pub mod error;
pub mod evalharness;
pub mod gateway;
pub mod grading;
pub mod jsonl;
pub mod mixer;
pub mod model;
pub mod pipeline;
pub mod quality;

pub use error::{
    AgentError, EvalError, FilterError, GatewayError, JsonlError, MixError, ParseError,
};
pub use model::{
    content_id, parse_record, serialize_record, AgentKind, SeedProblem, SolvedRecord, Source,
    SyntheticProblem, TrainingRecord,
};
