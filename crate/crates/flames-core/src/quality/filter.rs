//! The six quality-control filtering strategies that turn solved records
//! into training records (or drop them), plus the LLM solvability judge and
//! the reward-scorer interface.

use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{FilterError, GatewayError};
use crate::gateway::{ChatRequest, Gateway, Message, Role, SamplingConfig};
use crate::grading::{majority_answer, normalize, CanonicalAnswer};
use crate::model::{SolvedRecord, TrainingMeta, TrainingRecord};

/// Which of the six strategies to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    First,
    Majority,
    StrictSc,
    MajorityPlusFirst,
    SolvabilityPlusFirst,
    SolvabilityPlusRm,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 6] = [
        StrategyKind::First,
        StrategyKind::Majority,
        StrategyKind::StrictSc,
        StrategyKind::MajorityPlusFirst,
        StrategyKind::SolvabilityPlusFirst,
        StrategyKind::SolvabilityPlusRm,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            StrategyKind::First => "first",
            StrategyKind::Majority => "majority",
            StrategyKind::StrictSc => "strict_sc",
            StrategyKind::MajorityPlusFirst => "majority_plus_first",
            StrategyKind::SolvabilityPlusFirst => "solvability_plus_first",
            StrategyKind::SolvabilityPlusRm => "solvability_plus_rm",
        }
    }

    pub fn needs_judge(&self) -> bool {
        matches!(
            self,
            StrategyKind::SolvabilityPlusFirst | StrategyKind::SolvabilityPlusRm
        )
    }
}

impl FromStr for StrategyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        StrategyKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown filter strategy: {s:?}"))
    }
}

/// A strategy with its parameters.
#[derive(Debug, Clone)]
pub struct FilterStrategy {
    pub kind: StrategyKind,
    pub k_solutions: usize,
    pub majority_min: usize,
    pub selection_rng_seed: u64,
}

impl FilterStrategy {
    pub fn new(kind: StrategyKind) -> Self {
        FilterStrategy {
            kind,
            k_solutions: 3,
            majority_min: 2,
            selection_rng_seed: 0,
        }
    }
}

/// Why a record was kept or dropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterReason {
    NoMajority,
    Unsolvable,
    Kept,
    KeptFallbackFirst,
}

/// Result of filtering one record; `record` is present iff `kept`.
#[derive(Debug, Clone)]
pub struct FilterOutcome {
    pub kept: bool,
    pub record: Option<TrainingRecord>,
    pub reason: FilterReason,
}

impl FilterOutcome {
    pub fn solution_index(&self) -> Option<usize> {
        self.record.as_ref().map(|r| r.meta.solution_index)
    }
}

/// Verdict source for the Solvability* strategies.
pub trait SolvabilityJudge {
    fn is_solvable(&self, problem_text: &str) -> Result<bool, GatewayError>;
}

/// Scores candidate solutions; higher is better.
pub trait RewardScorer {
    fn score(&self, problem_text: &str, solutions: &[String]) -> Result<Vec<f64>, GatewayError>;
}

/// Per-record rng seeded by (global seed, problem id) so that outcomes are
/// independent of record order.
fn record_rng(selection_seed: u64, problem_id: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(selection_seed.to_le_bytes());
    hasher.update(problem_id.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    ChaCha8Rng::seed_from_u64(u64::from_le_bytes(bytes))
}

fn canonical_answers(rec: &SolvedRecord) -> Vec<Option<CanonicalAnswer>> {
    rec.solutions
        .iter()
        .map(|s| s.extracted_answer.as_deref().map(normalize))
        .collect()
}

fn keep(
    rec: &SolvedRecord,
    strategy: &FilterStrategy,
    index: usize,
    reason: FilterReason,
) -> FilterOutcome {
    let record = TrainingRecord {
        problem: rec.problem.problem.clone(),
        solution: rec.solutions[index].text.clone(),
        meta: TrainingMeta {
            agent: rec.problem.agent,
            filter: strategy.kind.name().to_string(),
            solution_index: index,
            seed_ids: rec.problem.seed_ids.clone(),
        },
        extras: Default::default(),
    };
    FilterOutcome {
        kept: true,
        record: Some(record),
        reason,
    }
}

fn drop_with(reason: FilterReason) -> FilterOutcome {
    FilterOutcome {
        kept: false,
        record: None,
        reason,
    }
}

/// Applies one strategy to one solved record.
pub fn apply_filter(
    strategy: &FilterStrategy,
    rec: &SolvedRecord,
    judge: Option<&dyn SolvabilityJudge>,
    reward: Option<&dyn RewardScorer>,
) -> Result<FilterOutcome, FilterError> {
    let id = &rec.problem.id;
    if rec.solutions.is_empty() {
        return Err(FilterError::EmptySolutions {
            problem_id: id.clone(),
        });
    }
    if rec.solutions.len() != strategy.k_solutions {
        return Err(FilterError::WrongSolutionCount {
            problem_id: id.clone(),
            expected: strategy.k_solutions,
            got: rec.solutions.len(),
        });
    }
    if !rec.answers_extracted {
        return Err(FilterError::MissingAnswers {
            problem_id: id.clone(),
        });
    }
    if strategy.kind.needs_judge() && judge.is_none() {
        return Err(FilterError::MissingJudge);
    }

    let solvable = match strategy.kind.needs_judge() {
        true => judge
            .unwrap()
            .is_solvable(&rec.problem.problem)
            .map_err(FilterError::Judge)?,
        false => true,
    };

    let mut rng = record_rng(strategy.selection_rng_seed, id);

    match strategy.kind {
        StrategyKind::First => Ok(keep(rec, strategy, 0, FilterReason::Kept)),
        StrategyKind::Majority => {
            match majority_answer(&canonical_answers(rec), strategy.majority_min) {
                Some((_, indices)) => {
                    let pick = indices[rng.random_range(0..indices.len())];
                    Ok(keep(rec, strategy, pick, FilterReason::Kept))
                }
                None => Ok(drop_with(FilterReason::NoMajority)),
            }
        }
        StrategyKind::StrictSc => {
            let answers = canonical_answers(rec);
            let all_present = answers.iter().all(Option::is_some);
            let unanimous =
                all_present && majority_answer(&answers, strategy.k_solutions).is_some();
            if unanimous {
                let pick = rng.random_range(0..rec.solutions.len());
                Ok(keep(rec, strategy, pick, FilterReason::Kept))
            } else {
                Ok(drop_with(FilterReason::NoMajority))
            }
        }
        StrategyKind::MajorityPlusFirst => {
            match majority_answer(&canonical_answers(rec), strategy.majority_min) {
                Some((_, indices)) => {
                    let pick = indices[rng.random_range(0..indices.len())];
                    Ok(keep(rec, strategy, pick, FilterReason::Kept))
                }
                None => Ok(keep(rec, strategy, 0, FilterReason::KeptFallbackFirst)),
            }
        }
        StrategyKind::SolvabilityPlusFirst => {
            if !solvable {
                return Ok(drop_with(FilterReason::Unsolvable));
            }
            Ok(keep(rec, strategy, 0, FilterReason::Kept))
        }
        StrategyKind::SolvabilityPlusRm => {
            if !solvable {
                return Ok(drop_with(FilterReason::Unsolvable));
            }
            let stored: Option<Vec<f64>> = rec.solutions.iter().map(|s| s.reward).collect();
            let rewards = match stored {
                Some(r) => r,
                None => {
                    let scorer = reward.ok_or(FilterError::MissingReward)?;
                    let texts: Vec<String> = rec.solutions.iter().map(|s| s.text.clone()).collect();
                    scorer
                        .score(&rec.problem.problem, &texts)
                        .map_err(FilterError::Reward)?
                }
            };
            // argmax; ties go to the lowest index.
            let mut best = 0usize;
            for (i, r) in rewards.iter().enumerate() {
                if *r > rewards[best] {
                    best = i;
                }
            }
            Ok(keep(rec, strategy, best, FilterReason::Kept))
        }
    }
}

/// Returns the verdict of the final yes/no token of `completion`, scanning
/// words from the end (case-insensitive). `None` when neither token occurs.
pub fn parse_final_yes_no(completion: &str) -> Option<bool> {
    let lowered = completion.to_lowercase();
    let words = lowered
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty());
    for word in words.collect::<Vec<_>>().into_iter().rev() {
        match word {
            "yes" => return Some(true),
            "no" => return Some(false),
            _ => {}
        }
    }
    None
}

/// LLM-backed solvability judge using the verdict prompt. Ambiguous
/// completions (no final yes/no token) count as unsolvable.
pub struct LlmSolvabilityJudge<'a> {
    gateway: &'a Gateway,
    endpoint: String,
    sampling: SamplingConfig,
    ambiguous: AtomicUsize,
}

impl<'a> LlmSolvabilityJudge<'a> {
    pub fn new(gateway: &'a Gateway, endpoint: &str) -> Self {
        LlmSolvabilityJudge {
            gateway,
            endpoint: endpoint.to_string(),
            sampling: SamplingConfig::evaluation(),
            ambiguous: AtomicUsize::new(0),
        }
    }

    /// Number of ambiguous verdicts seen so far.
    pub fn ambiguous_count(&self) -> usize {
        self.ambiguous.load(Ordering::Relaxed)
    }

    pub fn request_for(&self, problem_text: &str) -> ChatRequest {
        let prompt = crate::agents::templates::render_solvability_prompt(problem_text);
        ChatRequest {
            endpoint_name: self.endpoint.clone(),
            system: None,
            messages: vec![Message {
                role: Role::User,
                content: prompt,
            }],
            sampling: self.sampling.clone(),
            request_tag: format!(
                "solvability/{}",
                &crate::model::content_id(problem_text)[..16]
            ),
        }
    }
}

impl SolvabilityJudge for LlmSolvabilityJudge<'_> {
    fn is_solvable(&self, problem_text: &str) -> Result<bool, GatewayError> {
        let completion = self.gateway.complete(&self.request_for(problem_text))?;
        match parse_final_yes_no(&completion.text) {
            Some(verdict) => Ok(verdict),
            None => {
                self.ambiguous.fetch_add(1, Ordering::Relaxed);
                Ok(false)
            }
        }
    }
}
