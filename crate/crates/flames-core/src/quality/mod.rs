//! Deduplication, 8-gram test-set decontamination, and the six
//! quality-control filtering strategies.

pub mod filter;
pub mod ngram;

pub use filter::{
    apply_filter, parse_final_yes_no, FilterOutcome, FilterReason, FilterStrategy,
    LlmSolvabilityJudge, RewardScorer, SolvabilityJudge, StrategyKind,
};
pub use ngram::{
    is_contaminated, tokenize, Contamination, NGramIndex, DEFAULT_CONTAMINATION_THRESHOLD,
    DEFAULT_NGRAM_SIZE,
};

use std::collections::HashSet;

use crate::model::SyntheticProblem;

/// Streaming exact-match deduplicator over problem text. The first
/// occurrence wins; later duplicates are dropped and counted.
#[derive(Debug, Default)]
pub struct Deduper {
    seen: HashSet<String>,
    removed: usize,
}

impl Deduper {
    pub fn new() -> Self {
        Deduper::default()
    }

    /// Returns true when `problem_text` has not been seen before.
    pub fn admit(&mut self, problem_text: &str) -> bool {
        if self.seen.insert(problem_text.to_string()) {
            true
        } else {
            self.removed += 1;
            false
        }
    }

    pub fn removed(&self) -> usize {
        self.removed
    }
}

/// Keeps the first occurrence (stream order) of each exact problem string.
pub fn dedup_exact(problems: Vec<SyntheticProblem>) -> (Vec<SyntheticProblem>, usize) {
    let mut deduper = Deduper::new();
    let kept: Vec<SyntheticProblem> = problems
        .into_iter()
        .filter(|p| deduper.admit(&p.problem))
        .collect();
    (kept, deduper.removed())
}
