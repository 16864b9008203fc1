//! Data model shared by every pipeline stage, plus the JSONL record schemas.
//!
//! All records are immutable after construction and serialize to one JSON
//! object per line (UTF-8, LF). Unknown fields survive a parse/serialize
//! round trip via the `extras` map on each record type.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::ParseError;

/// Origin corpus of a seed problem.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Source {
    Gsm8k,
    Math,
    Other(String),
}

impl Source {
    pub fn as_str(&self) -> &str {
        match self {
            Source::Gsm8k => "GSM8K",
            Source::Math => "MATH",
            Source::Other(s) => s,
        }
    }
}

impl From<&str> for Source {
    fn from(s: &str) -> Self {
        match s {
            "GSM8K" => Source::Gsm8k,
            "MATH" => Source::Math,
            other => Source::Other(other.to_string()),
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for Source {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        ser.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Source {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        let s = String::deserialize(de)?;
        Ok(Source::from(s.as_str()))
    }
}

/// The twelve problem synthesis agents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    FewShot,
    Paraphrase,
    KeyConcepts,
    SeededKeyConcepts,
    SuggesterEditor,
    Iqc,
    AskMeAnything,
    SelfVerification,
    Fobar,
    Qft,
    TaxonomyKeyConcepts,
    DistractionInsertion,
}

impl AgentKind {
    pub const ALL: [AgentKind; 12] = [
        AgentKind::FewShot,
        AgentKind::Paraphrase,
        AgentKind::KeyConcepts,
        AgentKind::SeededKeyConcepts,
        AgentKind::SuggesterEditor,
        AgentKind::Iqc,
        AgentKind::AskMeAnything,
        AgentKind::SelfVerification,
        AgentKind::Fobar,
        AgentKind::Qft,
        AgentKind::TaxonomyKeyConcepts,
        AgentKind::DistractionInsertion,
    ];

    /// Stable snake_case name used in JSONL records, config files and CLI flags.
    pub fn name(&self) -> &'static str {
        match self {
            AgentKind::FewShot => "few_shot",
            AgentKind::Paraphrase => "paraphrase",
            AgentKind::KeyConcepts => "key_concepts",
            AgentKind::SeededKeyConcepts => "seeded_key_concepts",
            AgentKind::SuggesterEditor => "suggester_editor",
            AgentKind::Iqc => "iqc",
            AgentKind::AskMeAnything => "ask_me_anything",
            AgentKind::SelfVerification => "self_verification",
            AgentKind::Fobar => "fobar",
            AgentKind::Qft => "qft",
            AgentKind::TaxonomyKeyConcepts => "taxonomy_key_concepts",
            AgentKind::DistractionInsertion => "distraction_insertion",
        }
    }

    /// Agents that are not seeded with corpus problems and therefore emit
    /// empty `seed_ids`.
    pub fn is_unseeded(&self) -> bool {
        matches!(self, AgentKind::TaxonomyKeyConcepts | AgentKind::Qft)
    }
}

impl fmt::Display for AgentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AgentKind {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AgentKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| ParseError::InvariantViolation {
                message: format!("unknown agent kind: {s:?}"),
            })
    }
}

/// A human-crafted problem+solution from a seed corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedProblem {
    pub id: String,
    pub source: Source,
    pub problem: String,
    pub solution: String,
    /// Gold final answer.
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject: Option<String>,
    #[serde(flatten)]
    pub extras: BTreeMap<String, serde_json::Value>,
}

/// One LLM interaction recorded in a synthetic problem's provenance trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationStep {
    pub template_id: String,
    pub prompt_digest: String,
    pub completion_digest: String,
}

/// An agent-generated problem with full provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticProblem {
    /// Content hash of `problem`; see [`content_id`].
    pub id: String,
    pub problem: String,
    pub agent: AgentKind,
    /// Empty for the unseeded agents (taxonomy_key_concepts, qft).
    #[serde(default)]
    pub seed_ids: Vec<String>,
    #[serde(default)]
    pub trace: Vec<GenerationStep>,
    pub created_step: u64,
    #[serde(flatten)]
    pub extras: BTreeMap<String, serde_json::Value>,
}

impl SyntheticProblem {
    /// Builds a problem with its id derived from the problem text.
    pub fn new(
        problem: String,
        agent: AgentKind,
        seed_ids: Vec<String>,
        trace: Vec<GenerationStep>,
        created_step: u64,
    ) -> Self {
        let id = content_id(&problem);
        SyntheticProblem {
            id,
            problem,
            agent,
            seed_ids,
            trace,
            created_step,
            extras: BTreeMap::new(),
        }
    }
}

/// One sampled solution for a synthetic problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionCandidate {
    pub text: String,
    /// Raw extracted final answer (canonicalized lazily at comparison time).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extracted_answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward: Option<f64>,
}

/// A synthetic problem plus its k candidate solutions, in generation order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolvedRecord {
    pub problem: SyntheticProblem,
    pub solutions: Vec<SolutionCandidate>,
    /// True once the answer-extraction pass has run over `solutions`.
    #[serde(default)]
    pub answers_extracted: bool,
    #[serde(flatten)]
    pub extras: BTreeMap<String, serde_json::Value>,
}

/// Metadata carried by every emitted training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub agent: AgentKind,
    pub filter: String,
    pub solution_index: usize,
    #[serde(default)]
    pub seed_ids: Vec<String>,
}

/// A (problem, chosen solution) pair ready for SFT JSONL output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub problem: String,
    pub solution: String,
    pub meta: TrainingMeta,
    #[serde(flatten)]
    pub extras: BTreeMap<String, serde_json::Value>,
}

/// Deterministic, collision-resistant digest of a problem text exactly as
/// stored (no normalization). SHA-256, lowercase hex.
pub fn content_id(problem_text: &str) -> String {
    hex::encode(Sha256::digest(problem_text.as_bytes()))
}

/// A typed JSONL record that can be parsed with invariant checks.
pub trait Record: Serialize + for<'de> Deserialize<'de> {
    /// Human-readable kind, used in error messages.
    const KIND: &'static str;

    /// Checks the record's own invariants (corpus-level invariants such as
    /// id uniqueness are enforced by the loaders).
    fn validate(&self) -> Result<(), ParseError>;
}

impl Record for SeedProblem {
    const KIND: &'static str = "seed_problem";

    fn validate(&self) -> Result<(), ParseError> {
        if self.problem.is_empty() {
            return Err(invariant("seed problem text is empty"));
        }
        if self.solution.is_empty() {
            return Err(invariant("seed solution text is empty"));
        }
        if let Some(level) = self.level {
            if !(1..=5).contains(&level) {
                return Err(invariant(&format!("level {level} outside 1..=5")));
            }
        }
        Ok(())
    }
}

impl Record for SyntheticProblem {
    const KIND: &'static str = "synthetic_problem";

    fn validate(&self) -> Result<(), ParseError> {
        if self.id != content_id(&self.problem) {
            return Err(invariant("id is not the content hash of the problem text"));
        }
        if self.agent.is_unseeded() != self.seed_ids.is_empty() {
            return Err(invariant(&format!(
                "agent {} requires seed_ids to be {}",
                self.agent,
                if self.agent.is_unseeded() {
                    "empty"
                } else {
                    "non-empty"
                }
            )));
        }
        Ok(())
    }
}

impl Record for SolvedRecord {
    const KIND: &'static str = "solved_record";

    fn validate(&self) -> Result<(), ParseError> {
        self.problem.validate()
    }
}

impl Record for TrainingRecord {
    const KIND: &'static str = "training_record";

    fn validate(&self) -> Result<(), ParseError> {
        if self.problem.is_empty() {
            return Err(invariant("training problem text is empty"));
        }
        Ok(())
    }
}

fn invariant(message: &str) -> ParseError {
    ParseError::InvariantViolation {
        message: message.to_string(),
    }
}

/// Parses one JSONL line into a typed record, checking its invariants.
/// Unknown fields are preserved in the record's `extras` map.
pub fn parse_record<T: Record>(line: &str) -> Result<T, ParseError> {
    let value: serde_json::Value =
        serde_json::from_str(line).map_err(|e| ParseError::MalformedJson {
            line: None,
            message: e.to_string(),
        })?;
    let record: T = serde_json::from_value(value).map_err(|e| {
        let msg = e.to_string();
        // serde_json reports absent required fields as "missing field `name`".
        if let Some(field) = msg
            .strip_prefix("missing field `")
            .and_then(|rest| rest.split('`').next())
        {
            ParseError::MissingField {
                kind: T::KIND,
                field: field.to_string(),
            }
        } else {
            ParseError::MalformedJson {
                line: None,
                message: msg,
            }
        }
    })?;
    record.validate()?;
    Ok(record)
}

/// Serializes a record as a single JSONL line (no trailing newline).
pub fn serialize_record<T: Record>(record: &T) -> String {
    serde_json::to_string(record).expect("record serialization cannot fail")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    #[test]
    fn test_agent_kind_has_exactly_twelve_variants() {
        assert_eq!(AgentKind::ALL.len(), 12);
        let names: HashSet<&str> = AgentKind::ALL.iter().map(|k| k.name()).collect();
        assert_eq!(names.len(), 12);
    }

    #[test]
    fn test_agent_kind_round_trips_through_name() {
        for kind in AgentKind::ALL {
            assert_eq!(kind.name().parse::<AgentKind>().unwrap(), kind);
        }
        assert!("evol_instruct".parse::<AgentKind>().is_err());
    }

    #[test]
    fn test_parse_minimal_seed_record() {
        let rec: SeedProblem = parse_record(
            r#"{"id":"g1","source":"GSM8K","problem":"p","solution":"s","answer":"4"}"#,
        )
        .unwrap();
        assert_eq!(rec.id, "g1");
        assert_eq!(rec.source, Source::Gsm8k);
        assert_eq!(rec.answer, "4");
        assert!(rec.extras.is_empty());
    }

    #[test]
    fn test_parse_reports_missing_field() {
        let err = parse_record::<SeedProblem>(r#"{"id":"g1","problem":"p"}"#).unwrap_err();
        match err {
            ParseError::MissingField { field, .. } => {
                // serde reports the first missing field in declaration order.
                assert_eq!(field, "source");
            }
            other => panic!("expected MissingField, got {other:?}"),
        }
    }

    #[test]
    fn test_parse_reports_malformed_json() {
        let err = parse_record::<SeedProblem>("not json").unwrap_err();
        assert!(matches!(err, ParseError::MalformedJson { .. }));
    }

    #[test]
    fn test_parse_rejects_empty_problem() {
        let err = parse_record::<SeedProblem>(
            r#"{"id":"g1","source":"GSM8K","problem":"","solution":"s","answer":"4"}"#,
        )
        .unwrap_err();
        assert!(matches!(err, ParseError::InvariantViolation { .. }));
    }

    #[test]
    fn test_parse_preserves_unknown_fields() {
        let line = r#"{"id":"g1","source":"GSM8K","problem":"p","solution":"s","answer":"4","split":"train"}"#;
        let rec: SeedProblem = parse_record(line).unwrap();
        assert_eq!(rec.extras["split"], serde_json::json!("train"));
        let rec2: SeedProblem = parse_record(&serialize_record(&rec)).unwrap();
        assert_eq!(rec, rec2);
    }

    #[test]
    fn test_synthetic_problem_id_must_match_content() {
        let mut p = SyntheticProblem::new(
            "a problem".into(),
            AgentKind::Paraphrase,
            vec!["g1".into()],
            vec![],
            0,
        );
        assert!(p.validate().is_ok());
        p.id = "deadbeef".into();
        assert!(p.validate().is_err());
    }

    #[test]
    fn test_seed_ids_empty_iff_unseeded() {
        let seeded_without_seed =
            SyntheticProblem::new("p".into(), AgentKind::Paraphrase, vec![], vec![], 0);
        assert!(seeded_without_seed.validate().is_err());

        let unseeded_with_seed =
            SyntheticProblem::new("p".into(), AgentKind::Qft, vec!["g1".into()], vec![], 0);
        assert!(unseeded_with_seed.validate().is_err());

        let qft = SyntheticProblem::new("p".into(), AgentKind::Qft, vec![], vec![], 0);
        assert!(qft.validate().is_ok());
    }

    #[test]
    fn test_content_id_is_deterministic_and_exact() {
        assert_eq!(content_id("abc"), content_id("abc"));
        assert_ne!(content_id("abc"), content_id("abc "));
        assert_eq!(content_id("abc").len(), 64);
    }

    #[test]
    fn test_content_id_collision_scan() {
        // 10^5 random strings, zero collisions.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut seen: HashSet<String> = HashSet::new();
        let mut texts: HashSet<String> = HashSet::new();
        while texts.len() < 100_000 {
            let len = rng.random_range(1..40);
            let s: String = (0..len)
                .map(|_| rng.random_range(b'a'..=b'z') as char)
                .collect();
            if texts.insert(s.clone()) && !seen.insert(content_id(&s)) {
                panic!("collision on {s:?}");
            }
        }
        assert_eq!(seen.len(), 100_000);
    }

    fn random_word(rng: &mut ChaCha8Rng) -> String {
        let len = rng.random_range(1..10);
        (0..len)
            .map(|_| rng.random_range(b'a'..=b'z') as char)
            .collect()
    }

    fn random_seed_problem(rng: &mut ChaCha8Rng, n: usize) -> SeedProblem {
        let mut extras = BTreeMap::new();
        if rng.random_bool(0.3) {
            extras.insert("note".to_string(), serde_json::json!(random_word(rng)));
        }
        SeedProblem {
            id: format!("s{n}"),
            source: match rng.random_range(0..3) {
                0 => Source::Gsm8k,
                1 => Source::Math,
                _ => Source::Other(random_word(rng)),
            },
            problem: random_word(rng),
            solution: random_word(rng),
            answer: format!("{}", rng.random_range(0..1000)),
            level: if rng.random_bool(0.5) {
                Some(rng.random_range(1..=5))
            } else {
                None
            },
            subject: if rng.random_bool(0.5) {
                Some(random_word(rng))
            } else {
                None
            },
            extras,
        }
    }

    #[test]
    fn test_round_trip_identity_randomized() {
        // parse(serialize(r)) == r for 1000 randomized records.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in 0..1000 {
            let seed = random_seed_problem(&mut rng, n);
            let back: SeedProblem = parse_record(&serialize_record(&seed)).unwrap();
            assert_eq!(seed, back);

            let synth = SyntheticProblem::new(
                random_word(&mut rng),
                AgentKind::ALL[rng.random_range(0..12)],
                vec![],
                vec![GenerationStep {
                    template_id: "t".into(),
                    prompt_digest: content_id("p"),
                    completion_digest: content_id("c"),
                }],
                n as u64,
            );
            let synth = if synth.agent.is_unseeded() {
                synth
            } else {
                SyntheticProblem {
                    seed_ids: vec![seed.id.clone()],
                    ..synth
                }
            };
            let back: SyntheticProblem = parse_record(&serialize_record(&synth)).unwrap();
            assert_eq!(synth, back);

            let solved = SolvedRecord {
                problem: synth,
                solutions: vec![SolutionCandidate {
                    text: random_word(&mut rng),
                    extracted_answer: Some("4".into()),
                    reward: if rng.random_bool(0.5) {
                        Some(0.25)
                    } else {
                        None
                    },
                }],
                answers_extracted: true,
                extras: BTreeMap::new(),
            };
            let back: SolvedRecord = parse_record(&serialize_record(&solved)).unwrap();
            assert_eq!(solved, back);

            let training = TrainingRecord {
                problem: solved.problem.problem.clone(),
                solution: solved.solutions[0].text.clone(),
                meta: TrainingMeta {
                    agent: solved.problem.agent,
                    filter: "first".into(),
                    solution_index: 0,
                    seed_ids: solved.problem.seed_ids.clone(),
                },
                extras: BTreeMap::new(),
            };
            let back: TrainingRecord = parse_record(&serialize_record(&training)).unwrap();
            assert_eq!(training, back);
        }
    }
}
