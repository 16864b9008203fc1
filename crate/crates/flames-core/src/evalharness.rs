//! Benchmark scoring with the grading kernel, greedy-decode evaluation
//! through the gateway, and checkpoint selection.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{EvalError, JsonlError, ParseError};
use crate::gateway::{ChatRequest, Gateway, Message, SamplingConfig};
use crate::grading::{answers_equal, extract_answer, normalize};
use crate::model::content_id;

/// Benchmark sizes reported for the standard sets; a mismatch logs a
/// warning but is not an error (fixtures are intentionally tiny).
pub const EXPECTED_SIZES: &[(&str, usize)] = &[
    ("gsm8k", 1319),
    ("math5k", 5000),
    ("collegemath", 2818),
    ("olympiadbench", 675),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkItem {
    pub id: String,
    pub question: String,
    pub gold_answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variation_type: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub name: String,
    pub items: Vec<BenchmarkItem>,
    /// Items dropped at load (the critical-thinking subset).
    pub excluded: usize,
}

fn normalized_variation(v: &str) -> String {
    v.to_lowercase().replace(['_', '-'], " ")
}

impl Benchmark {
    pub fn from_items(name: &str, items: Vec<BenchmarkItem>) -> Result<Benchmark, EvalError> {
        let mut kept = Vec::with_capacity(items.len());
        let mut seen = std::collections::HashSet::new();
        let mut excluded = 0usize;
        for item in items {
            if let Some(variation) = &item.variation_type {
                // The critical-thinking subset has no single gold answer;
                // it is excluded from scoring.
                if normalized_variation(variation) == "critical thinking" {
                    excluded += 1;
                    continue;
                }
            }
            if item.gold_answer.is_empty() {
                return Err(EvalError::EmptyGold {
                    name: name.to_string(),
                    id: item.id,
                });
            }
            if !seen.insert(item.id.clone()) {
                return Err(EvalError::DuplicateItem {
                    name: name.to_string(),
                    id: item.id,
                });
            }
            kept.push(item);
        }
        let bench = Benchmark {
            name: name.to_string(),
            items: kept,
            excluded,
        };
        if let Some((_, expected)) = EXPECTED_SIZES
            .iter()
            .find(|(n, _)| *n == bench.name.to_lowercase())
        {
            if bench.items.len() != *expected {
                log::warn!(
                    "benchmark {}: {} items, the standard set has {expected}",
                    bench.name,
                    bench.items.len()
                );
            }
        }
        Ok(bench)
    }

    /// Loads a benchmark JSONL file: `{id, question, gold_answer,
    /// variation_type?}` per line.
    pub fn load(name: &str, path: &Path) -> Result<Benchmark, EvalError> {
        let values = crate::jsonl::read_values(path)?;
        let mut items = Vec::with_capacity(values.len());
        for (i, value) in values.into_iter().enumerate() {
            let item: BenchmarkItem =
                serde_json::from_value(value).map_err(|e| JsonlError::Parse {
                    path: path.to_path_buf(),
                    source: ParseError::MalformedJson {
                        line: Some(i + 1),
                        message: e.to_string(),
                    },
                })?;
            items.push(item);
        }
        Benchmark::from_items(name, items)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemResult {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted: Option<String>,
    pub correct: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub benchmark: String,
    pub accuracy: f64,
    pub per_item: Vec<ItemResult>,
    pub decode_config_digest: String,
    /// Per-variation accuracies (the distraction insertion subset of
    /// GSMPlus is reported here).
    pub subsets: BTreeMap<String, f64>,
}

fn prediction_correct(prediction: &str, gold: &str) -> bool {
    match extract_answer(prediction) {
        Some(extracted) => answers_equal(&normalize(&extracted), &normalize(gold)),
        None => false,
    }
}

/// Scores predictions against a benchmark. Accuracy is computed over the
/// full benchmark size; a missing prediction counts as incorrect.
pub fn score(predictions: &BTreeMap<String, String>, bench: &Benchmark) -> EvalReport {
    let mut per_item = Vec::with_capacity(bench.items.len());
    let mut subset_totals: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for item in &bench.items {
        let (correct, predicted, note) = match predictions.get(&item.id) {
            Some(prediction) => (
                prediction_correct(prediction, &item.gold_answer),
                Some(prediction.clone()),
                None,
            ),
            None => (false, None, Some("missing prediction".to_string())),
        };
        if let Some(variation) = &item.variation_type {
            let entry = subset_totals
                .entry(normalized_variation(variation))
                .or_insert((0, 0));
            entry.1 += 1;
            if correct {
                entry.0 += 1;
            }
        }
        per_item.push(ItemResult {
            id: item.id.clone(),
            predicted,
            correct,
            note,
        });
    }
    let correct_count = per_item.iter().filter(|r| r.correct).count();
    let accuracy = if bench.items.is_empty() {
        0.0
    } else {
        correct_count as f64 / bench.items.len() as f64
    };
    EvalReport {
        benchmark: bench.name.clone(),
        accuracy,
        per_item,
        decode_config_digest: String::new(),
        subsets: subset_totals
            .into_iter()
            .map(|(k, (c, n))| (k, c as f64 / n as f64))
            .collect(),
    }
}

/// Runs one greedy completion per item through the gateway, then scores.
/// Gateway errors mark the item incorrect with a note; the run completes.
pub fn evaluate(
    gateway: &Gateway,
    endpoint: &str,
    bench: &Benchmark,
    system_prompt: Option<&str>,
    sampling: &SamplingConfig,
    max_in_flight: usize,
) -> EvalReport {
    let requests: Vec<ChatRequest> = bench
        .items
        .iter()
        .map(|item| ChatRequest {
            endpoint_name: endpoint.to_string(),
            system: system_prompt.map(str::to_string),
            messages: vec![Message::user(item.question.clone())],
            sampling: sampling.clone(),
            request_tag: format!("eval/{}/{}", bench.name, item.id),
        })
        .collect();
    let results = gateway.complete_many(&requests, max_in_flight);

    let mut predictions = BTreeMap::new();
    let mut errors: BTreeMap<String, String> = BTreeMap::new();
    for (item, result) in bench.items.iter().zip(results) {
        match result {
            Ok(completion) => {
                predictions.insert(item.id.clone(), completion.text);
            }
            Err(e) => {
                errors.insert(item.id.clone(), e.to_string());
            }
        }
    }
    let mut report = score(&predictions, bench);
    for item in report.per_item.iter_mut() {
        if let Some(error) = errors.get(&item.id) {
            item.note = Some(format!("gateway error: {error}"));
        }
    }
    report.decode_config_digest =
        content_id(&serde_json::to_string(sampling).expect("sampling serializes"));
    report
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointScore {
    pub checkpoint_id: String,
    pub gsm8k: f64,
    pub math: f64,
}

/// Picks the checkpoint with the highest mean of the two in-domain scores;
/// ties go to the latest checkpoint in list order.
pub fn select_checkpoint(scores: &[CheckpointScore]) -> Result<&str, EvalError> {
    if scores.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut best = 0usize;
    for (i, s) in scores.iter().enumerate() {
        let avg = (s.gsm8k + s.math) / 2.0;
        let best_avg = (scores[best].gsm8k + scores[best].math) / 2.0;
        if avg >= best_avg {
            best = i;
        }
    }
    Ok(&scores[best].checkpoint_id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::EndpointConfig;

    fn bench(n: usize) -> Benchmark {
        let items = (0..n)
            .map(|i| BenchmarkItem {
                id: format!("q{i}"),
                question: format!("What is {i} + 1?"),
                gold_answer: format!("{}", i + 1),
                variation_type: None,
            })
            .collect();
        Benchmark::from_items("fixture", items).unwrap()
    }

    #[test]
    fn test_score_counts_over_full_bench() {
        let b = bench(10);
        let mut predictions = BTreeMap::new();
        for i in 0..7 {
            predictions.insert(format!("q{i}"), format!("thinking... \\boxed{{{}}}", i + 1));
        }
        // q7 answered wrong, q8/q9 missing.
        predictions.insert("q7".into(), "\\boxed{999}".into());
        let report = score(&predictions, &b);
        assert!((report.accuracy - 0.7).abs() < 1e-12);
        assert!(report.per_item[8].note.as_deref() == Some("missing prediction"));
    }

    #[test]
    fn test_score_no_extractable_answer_is_incorrect() {
        let b = bench(1);
        let mut predictions = BTreeMap::new();
        predictions.insert("q0".into(), "I cannot solve this".into());
        assert_eq!(score(&predictions, &b).accuracy, 0.0);
    }

    #[test]
    fn test_score_grading_equivalence() {
        let items = vec![BenchmarkItem {
            id: "a".into(),
            question: "q".into(),
            gold_answer: "1/2".into(),
            variation_type: None,
        }];
        let b = Benchmark::from_items("g", items).unwrap();
        let mut predictions = BTreeMap::new();
        predictions.insert("a".into(), "so \\boxed{0.5}".into());
        assert_eq!(score(&predictions, &b).accuracy, 1.0);
    }

    #[test]
    fn test_score_permutation_invariant() {
        let b = bench(20);
        let mut predictions = BTreeMap::new();
        for i in 0..13 {
            predictions.insert(format!("q{i}"), format!("\\boxed{{{}}}", i + 1));
        }
        let forward = score(&predictions, &b).accuracy;
        let mut reversed = b.clone();
        reversed.items.reverse();
        assert_eq!(forward, score(&predictions, &reversed).accuracy);
    }

    #[test]
    fn test_critical_thinking_excluded_distraction_reported() {
        let items = vec![
            BenchmarkItem {
                id: "a".into(),
                question: "q".into(),
                gold_answer: "1".into(),
                variation_type: Some("distraction insertion".into()),
            },
            BenchmarkItem {
                id: "b".into(),
                question: "q".into(),
                gold_answer: "".into(),
                variation_type: Some("critical_thinking".into()),
            },
            BenchmarkItem {
                id: "c".into(),
                question: "q".into(),
                gold_answer: "2".into(),
                variation_type: None,
            },
        ];
        let b = Benchmark::from_items("gsmplus", items).unwrap();
        assert_eq!(b.items.len(), 2);
        assert_eq!(b.excluded, 1);

        let mut predictions = BTreeMap::new();
        predictions.insert("a".into(), "\\boxed{1}".into());
        predictions.insert("c".into(), "\\boxed{3}".into());
        let report = score(&predictions, &b);
        assert_eq!(report.subsets["distraction insertion"], 1.0);
        assert!((report.accuracy - 0.5).abs() < 1e-12);
    }

    #[test]
    fn test_evaluate_with_mock() {
        let gateway = Gateway::new(&[EndpointConfig::mock("mock")]).unwrap();
        let b = bench(5);
        for item in &b.items {
            gateway.mock("mock").unwrap().script(
                &format!("eval/fixture/{}", item.id),
                &format!("\\boxed{{{}}}", item.gold_answer),
            );
        }
        let report = evaluate(
            &gateway,
            "mock",
            &b,
            Some("sys"),
            &SamplingConfig::evaluation(),
            4,
        );
        assert_eq!(report.accuracy, 1.0);
        assert!(!report.decode_config_digest.is_empty());

        // Same scripts, same digest.
        let again = evaluate(
            &gateway,
            "mock",
            &b,
            Some("sys"),
            &SamplingConfig::evaluation(),
            1,
        );
        assert_eq!(report, again);
    }

    #[test]
    fn test_select_checkpoint_argmax_average() {
        let scores = vec![
            CheckpointScore {
                checkpoint_id: "c1".into(),
                gsm8k: 80.0,
                math: 50.0,
            },
            CheckpointScore {
                checkpoint_id: "c2".into(),
                gsm8k: 78.0,
                math: 56.0,
            },
        ];
        assert_eq!(select_checkpoint(&scores).unwrap(), "c2");
        assert_eq!(select_checkpoint(&scores[..1]).unwrap(), "c1");
        assert!(matches!(select_checkpoint(&[]), Err(EvalError::EmptyInput)));
    }

    #[test]
    fn test_select_checkpoint_tie_goes_to_latest() {
        let scores = vec![
            CheckpointScore {
                checkpoint_id: "c3".into(),
                gsm8k: 70.0,
                math: 60.0,
            },
            CheckpointScore {
                checkpoint_id: "c5".into(),
                gsm8k: 50.0,
                math: 50.0,
            },
            CheckpointScore {
                checkpoint_id: "c7".into(),
                gsm8k: 60.0,
                math: 70.0,
            },
        ];
        assert_eq!(select_checkpoint(&scores).unwrap(), "c7");
    }

    #[test]
    fn test_select_checkpoint_affine_invariance() {
        let scores = vec![
            CheckpointScore {
                checkpoint_id: "a".into(),
                gsm8k: 81.0,
                math: 44.0,
            },
            CheckpointScore {
                checkpoint_id: "b".into(),
                gsm8k: 70.0,
                math: 58.0,
            },
            CheckpointScore {
                checkpoint_id: "c".into(),
                gsm8k: 66.0,
                math: 59.0,
            },
        ];
        let rescaled: Vec<CheckpointScore> = scores
            .iter()
            .map(|s| CheckpointScore {
                checkpoint_id: s.checkpoint_id.clone(),
                gsm8k: 0.01 * s.gsm8k + 5.0,
                math: 0.01 * s.math + 5.0,
            })
            .collect();
        assert_eq!(
            select_checkpoint(&scores).unwrap(),
            select_checkpoint(&rescaled).unwrap()
        );
    }

    #[test]
    fn test_benchmark_rejects_duplicates_and_empty_gold() {
        let dup = vec![
            BenchmarkItem {
                id: "x".into(),
                question: "q".into(),
                gold_answer: "1".into(),
                variation_type: None,
            },
            BenchmarkItem {
                id: "x".into(),
                question: "q".into(),
                gold_answer: "2".into(),
                variation_type: None,
            },
        ];
        assert!(matches!(
            Benchmark::from_items("b", dup),
            Err(EvalError::DuplicateItem { .. })
        ));
        let empty = vec![BenchmarkItem {
            id: "x".into(),
            question: "q".into(),
            gold_answer: "".into(),
            variation_type: None,
        }];
        assert!(matches!(
            Benchmark::from_items("b", empty),
            Err(EvalError::EmptyGold { .. })
        ));
    }
}
