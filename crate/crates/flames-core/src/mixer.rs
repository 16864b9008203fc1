//! Proportion-exact blending of per-agent datasets into named mixtures, and
//! dataset statistics.
//!
//! Quotas come from largest-remainder apportionment of the target size over
//! source weights. Selection is keyed on sorted content ids, so a mixture is
//! stable under reordering of its source files.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{JsonlError, MixError, ParseError};
use crate::model::{content_id, TrainingRecord};
use crate::quality::tokenize;

const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixtureSource {
    pub name: String,
    pub dataset_path: PathBuf,
    pub weight: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub name: String,
    pub sources: Vec<MixtureSource>,
    pub target_size: usize,
    pub rng_seed: u64,
    /// Take everything available from a short source instead of failing.
    #[serde(default)]
    pub allow_short: bool,
}

/// Largest-remainder apportionment of `total` over `weights`; ties go to the
/// earlier source. `Σ result == total` whenever `Σ weights ≈ 1`.
pub fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let mut quotas: Vec<usize> = weights
        .iter()
        .map(|w| (w * total as f64).floor() as usize)
        .collect();
    let assigned: usize = quotas.iter().sum();
    let mut remainders: Vec<(usize, f64)> = weights
        .iter()
        .enumerate()
        .map(|(i, w)| (i, w * total as f64 - quotas[i] as f64))
        .collect();
    // Stable sort keeps earlier sources first among equal remainders.
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
    for (i, _) in remainders.into_iter().take(total.saturating_sub(assigned)) {
        quotas[i] += 1;
    }
    quotas
}

/// Splits a per-agent generation quota across seed corpora (largest
/// remainder, earlier share wins ties).
pub fn seed_quota(total: usize, shares: &[f64]) -> Vec<usize> {
    apportion(total, shares)
}

#[derive(Debug, Clone)]
pub struct MixOutcome {
    pub records: Vec<TrainingRecord>,
    /// Records taken per source, in source order.
    pub per_source_counts: Vec<(String, usize)>,
    /// (source, missing) when `allow_short` accepted a shortfall.
    pub shortfalls: Vec<(String, usize)>,
}

fn derived_rng(seed: u64, salt: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(salt.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    ChaCha8Rng::seed_from_u64(u64::from_le_bytes(bytes))
}

/// Blends the spec's sources into one deduplicated, shuffled dataset.
pub fn mix(spec: &MixtureSpec) -> Result<MixOutcome, MixError> {
    if spec.sources.is_empty() {
        return Err(MixError::NoSources);
    }
    for source in &spec.sources {
        if !(source.weight > 0.0 && source.weight <= 1.0) {
            return Err(MixError::InvalidWeight {
                name: source.name.clone(),
                weight: source.weight,
            });
        }
    }
    let sum: f64 = spec.sources.iter().map(|s| s.weight).sum();
    if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
        return Err(MixError::WeightSumInvalid { sum });
    }

    // Load and dedup by problem text, first occurrence (source order) wins.
    let mut seen: HashSet<String> = HashSet::new();
    let mut pools: Vec<Vec<TrainingRecord>> = Vec::new();
    for source in &spec.sources {
        let records: Vec<TrainingRecord> = crate::jsonl::read_records(&source.dataset_path)?;
        let pool: Vec<TrainingRecord> = records
            .into_iter()
            .filter(|r| seen.insert(r.problem.clone()))
            .collect();
        pools.push(pool);
    }

    let weights: Vec<f64> = spec.sources.iter().map(|s| s.weight).collect();
    let quotas = apportion(spec.target_size, &weights);

    let mut records = Vec::with_capacity(spec.target_size);
    let mut per_source_counts = Vec::new();
    let mut shortfalls = Vec::new();
    for ((source, mut pool), quota) in spec.sources.iter().zip(pools).zip(quotas) {
        if pool.len() < quota && !spec.allow_short {
            return Err(MixError::SourceTooSmall {
                name: source.name.clone(),
                needed: quota,
                available: pool.len(),
            });
        }
        // Key selection on sorted ids, not file order.
        pool.sort_by_cached_key(|r| content_id(&r.problem));
        let take = quota.min(pool.len());
        if take < quota {
            shortfalls.push((source.name.clone(), quota - take));
        }
        let mut rng = derived_rng(spec.rng_seed, &format!("source:{}", source.name));
        let mut picked = rand::seq::index::sample(&mut rng, pool.len(), take).into_vec();
        picked.sort_unstable();
        per_source_counts.push((source.name.clone(), take));
        for i in picked {
            records.push(pool[i].clone());
        }
    }

    let mut rng = derived_rng(spec.rng_seed, "shuffle");
    records.shuffle(&mut rng);

    Ok(MixOutcome {
        records,
        per_source_counts,
        shortfalls,
    })
}

/// Per-dataset statistics from a single streaming pass.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub count: usize,
    pub per_agent: BTreeMap<String, usize>,
    /// Buckets GSM8K / MATH / none, derived from seed id prefixes (or the
    /// record's own source field for seed corpora).
    pub per_source: BTreeMap<String, usize>,
    pub mean_problem_tokens: f64,
    pub duplicate_count: usize,
}

fn source_bucket(value: &serde_json::Value) -> &'static str {
    if let Some(source) = value.get("source").and_then(|v| v.as_str()) {
        return match source {
            "GSM8K" => "GSM8K",
            "MATH" => "MATH",
            _ => "none",
        };
    }
    let seed_ids = value
        .pointer("/meta/seed_ids")
        .or_else(|| value.get("seed_ids"))
        .and_then(|v| v.as_array());
    let first = seed_ids
        .and_then(|ids| ids.first())
        .and_then(|v| v.as_str());
    match first {
        Some(id) => {
            let prefix = id.split(':').next().unwrap_or("").to_lowercase();
            match prefix.as_str() {
                "gsm8k" => "GSM8K",
                "math" => "MATH",
                _ => "none",
            }
        }
        None => "none",
    }
}

/// Streams a JSONL dataset (training, synthetic, or seed records) and
/// accumulates counts. Duplicates are detected by problem content id.
pub fn stats(dataset_path: &Path) -> Result<DatasetStats, JsonlError> {
    let file = std::fs::File::open(dataset_path).map_err(|source| JsonlError::Io {
        path: dataset_path.to_path_buf(),
        source,
    })?;
    use std::io::BufRead;
    let reader = std::io::BufReader::new(file);

    let mut out = DatasetStats::default();
    let mut token_total: usize = 0;
    let mut ids: HashSet<String> = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| JsonlError::Io {
            path: dataset_path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| JsonlError::Parse {
                path: dataset_path.to_path_buf(),
                source: ParseError::MalformedJson {
                    line: Some(i + 1),
                    message: e.to_string(),
                },
            })?;
        let problem = value.get("problem").and_then(|v| v.as_str()).unwrap_or("");
        out.count += 1;
        token_total += tokenize(problem).len();
        if !ids.insert(content_id(problem)) {
            out.duplicate_count += 1;
        }
        let agent = value
            .pointer("/meta/agent")
            .or_else(|| value.get("agent"))
            .and_then(|v| v.as_str())
            .unwrap_or("none");
        *out.per_agent.entry(agent.to_string()).or_insert(0) += 1;
        *out.per_source
            .entry(source_bucket(&value).to_string())
            .or_insert(0) += 1;
    }
    if out.count > 0 {
        out.mean_problem_tokens = token_total as f64 / out.count as f64;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AgentKind, TrainingMeta};

    fn record(problem: &str, agent: AgentKind, seed_id: &str) -> TrainingRecord {
        TrainingRecord {
            problem: problem.into(),
            solution: "because".into(),
            meta: TrainingMeta {
                agent,
                filter: "first".into(),
                solution_index: 0,
                seed_ids: if seed_id.is_empty() {
                    vec![]
                } else {
                    vec![seed_id.into()]
                },
            },
            extras: Default::default(),
        }
    }

    fn write_source(dir: &Path, name: &str, count: usize, agent: AgentKind) -> PathBuf {
        let path = dir.join(format!("{name}.jsonl"));
        let records: Vec<TrainingRecord> = (0..count)
            .map(|i| record(&format!("{name} problem {i}"), agent, "gsm8k:1"))
            .collect();
        crate::jsonl::write_records(&path, &records).unwrap();
        path
    }

    fn spec(dir: &Path, target: usize) -> MixtureSpec {
        MixtureSpec {
            name: "test".into(),
            sources: vec![
                MixtureSource {
                    name: "a".into(),
                    dataset_path: write_source(dir, "a", 40, AgentKind::SuggesterEditor),
                    weight: 0.5,
                },
                MixtureSource {
                    name: "b".into(),
                    dataset_path: write_source(dir, "b", 40, AgentKind::Iqc),
                    weight: 0.5,
                },
            ],
            target_size: target,
            rng_seed: 11,
            allow_short: false,
        }
    }

    #[test]
    fn test_apportion_exact() {
        assert_eq!(
            apportion(1000, &[0.5, 0.2, 0.2, 0.1]),
            vec![500, 200, 200, 100]
        );
        assert_eq!(apportion(3, &[0.5, 0.5]), vec![2, 1]);
        assert_eq!(apportion(150_000, &[0.5, 0.5]), vec![75_000, 75_000]);
        assert_eq!(apportion(1, &[0.0, 1.0]), vec![0, 1]);
        // |quota - w*total| < 1 and totals add up, over random weights.
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let n = rng.random_range(1..6);
            let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
            let sum: f64 = raw.iter().sum();
            let weights: Vec<f64> = raw.iter().map(|w| w / sum).collect();
            let total = rng.random_range(0..5000);
            let quotas = apportion(total, &weights);
            assert_eq!(quotas.iter().sum::<usize>(), total);
            for (q, w) in quotas.iter().zip(&weights) {
                assert!((*q as f64 - w * total as f64).abs() < 1.0);
            }
        }
    }

    #[test]
    fn test_seed_quota_split() {
        assert_eq!(seed_quota(150_000, &[0.5, 0.5]), vec![75_000, 75_000]);
        assert_eq!(seed_quota(3, &[0.5, 0.5]), vec![2, 1]);
        assert_eq!(seed_quota(10, &[0.0, 1.0]), vec![0, 10]);
    }

    #[test]
    fn test_mix_counts_and_no_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let outcome = mix(&spec(dir.path(), 40)).unwrap();
        assert_eq!(outcome.records.len(), 40);
        assert_eq!(
            outcome.per_source_counts,
            vec![("a".into(), 20), ("b".into(), 20)]
        );
        let ids: HashSet<String> = outcome
            .records
            .iter()
            .map(|r| content_id(&r.problem))
            .collect();
        assert_eq!(ids.len(), 40);
    }

    #[test]
    fn test_mix_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let s = spec(dir.path(), 30);
        let a = mix(&s).unwrap();
        let b = mix(&s).unwrap();
        assert_eq!(a.records, b.records);
    }

    #[test]
    fn test_mix_selection_invariant_under_file_order() {
        let dir = tempfile::tempdir().unwrap();
        let s = spec(dir.path(), 30);
        let first = mix(&s).unwrap();

        // Reverse one source file on disk; same ids must be selected.
        let path = &s.sources[0].dataset_path;
        let mut records: Vec<TrainingRecord> = crate::jsonl::read_records(path).unwrap();
        records.reverse();
        crate::jsonl::write_records(path, &records).unwrap();
        let second = mix(&s).unwrap();

        let ids = |o: &MixOutcome| {
            let mut v: Vec<String> = o.records.iter().map(|r| content_id(&r.problem)).collect();
            v.sort();
            v
        };
        assert_eq!(ids(&first), ids(&second));
    }

    #[test]
    fn test_mix_source_too_small() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = spec(dir.path(), 100);
        let err = mix(&s).unwrap_err();
        assert!(matches!(
            err,
            MixError::SourceTooSmall {
                needed: 50,
                available: 40,
                ..
            }
        ));

        s.allow_short = true;
        let outcome = mix(&s).unwrap();
        assert_eq!(outcome.records.len(), 80);
        assert_eq!(outcome.shortfalls, vec![("a".into(), 10), ("b".into(), 10)]);
    }

    #[test]
    fn test_mix_rejects_bad_weights() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = spec(dir.path(), 10);
        s.sources[0].weight = 0.6;
        assert!(matches!(mix(&s), Err(MixError::WeightSumInvalid { .. })));
        s.sources[0].weight = 0.0;
        assert!(matches!(mix(&s), Err(MixError::InvalidWeight { .. })));
    }

    #[test]
    fn test_mix_cross_source_dedup() {
        let dir = tempfile::tempdir().unwrap();
        // Same problems in both sources: source b pool shrinks to zero.
        let path_a = write_source(dir.path(), "a", 10, AgentKind::SuggesterEditor);
        let records: Vec<TrainingRecord> = crate::jsonl::read_records(&path_a).unwrap();
        let path_b = dir.path().join("b.jsonl");
        crate::jsonl::write_records(&path_b, &records).unwrap();
        let s = MixtureSpec {
            name: "dup".into(),
            sources: vec![
                MixtureSource {
                    name: "a".into(),
                    dataset_path: path_a,
                    weight: 0.5,
                },
                MixtureSource {
                    name: "b".into(),
                    dataset_path: path_b,
                    weight: 0.5,
                },
            ],
            target_size: 10,
            rng_seed: 0,
            allow_short: true,
        };
        let outcome = mix(&s).unwrap();
        assert_eq!(outcome.per_source_counts[1].1, 0);
        assert_eq!(outcome.shortfalls, vec![("b".into(), 5)]);
    }

    #[test]
    fn test_stats_counts() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let records = vec![
            record("one two three", AgentKind::Iqc, "gsm8k:5"),
            record("four five", AgentKind::Iqc, "math:7"),
            record("one two three", AgentKind::Qft, ""),
        ];
        crate::jsonl::write_records(&path, &records).unwrap();
        let s = stats(&path).unwrap();
        assert_eq!(s.count, 3);
        assert_eq!(s.duplicate_count, 1);
        assert_eq!(s.per_agent["iqc"], 2);
        assert_eq!(s.per_agent["qft"], 1);
        assert_eq!(s.per_source["GSM8K"], 1);
        assert_eq!(s.per_source["MATH"], 1);
        assert_eq!(s.per_source["none"], 1);
        assert!((s.mean_problem_tokens - 8.0 / 3.0).abs() < 1e-12);
        assert_eq!(s.per_source.values().sum::<usize>(), s.count);
    }

    #[test]
    fn test_stats_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        assert_eq!(stats(&path).unwrap(), DatasetStats::default());
    }

    #[test]
    fn test_stats_count_equals_line_count() {
        use rand::Rng;
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for case in 0..20 {
            let n = rng.random_range(0..50);
            let records: Vec<TrainingRecord> = (0..n)
                .map(|i| {
                    record(
                        &format!("problem {} {i}", rng.random_range(0..10)),
                        AgentKind::ALL[rng.random_range(0..12)],
                        "gsm8k:0",
                    )
                })
                .collect();
            let path = dir.path().join(format!("case{case}.jsonl"));
            crate::jsonl::write_records(&path, &records).unwrap();
            let s = stats(&path).unwrap();
            assert_eq!(s.count, n);
            assert_eq!(s.per_agent.values().sum::<usize>(), n);
        }
    }

    #[test]
    fn test_stats_rejects_malformed_json() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, "{\"problem\":\"ok\"}\nnot json\n").unwrap();
        let err = stats(&path).unwrap_err();
        assert!(err.to_string().contains("line 2"));
    }
}
