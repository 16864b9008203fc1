//! Interruption semantics live in their own test binary: the cancel flag is
//! process-global, so this must not share a process with other tests.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use flames_core::config::{AgentConfig, PipelineConfig};
use flames_core::gateway::{EndpointConfig, MockMode};
use flames_core::jsonl;
use flames_core::model::{AgentKind, SeedProblem, Source};
use flames_core::pipeline::{self, file_digest, StageError};

fn seed_fixture(dir: &Path, name: &str, count: usize) -> PathBuf {
    let marker: String = name.chars().filter(|c| !c.is_ascii_digit()).collect();
    let records: Vec<SeedProblem> = (0..count)
        .map(|i| SeedProblem {
            id: format!("{i}"),
            source: Source::Other("fixture".into()),
            problem: format!("A {marker} problem {i} asks for a sum?"),
            solution: "sum it".into(),
            answer: "1".into(),
            level: None,
            subject: None,
            extras: Default::default(),
        })
        .collect();
    let path = dir.join(format!("{name}.jsonl"));
    jsonl::write_records(&path, &records).unwrap();
    path
}

fn config(dir: &Path, out: &str) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.rng_seed = 5;
    cfg.output_dir = dir.join(out);
    cfg.seeds.gsm8k_path = Some(dir.join("gsm8k.jsonl"));
    cfg.seeds.math_path = Some(dir.join("math.jsonl"));
    cfg.endpoints = vec![EndpointConfig::mock("mock")];
    cfg.endpoints[0].mock_mode = MockMode::HashFallback;
    cfg.agents = vec![AgentConfig {
        kind: AgentKind::Paraphrase,
        quota: 10,
        rounds: 1,
        template_overrides: Default::default(),
    }];
    cfg
}

#[test]
fn test_interrupt_leaves_resumable_state() {
    let dir = tempfile::tempdir().unwrap();
    seed_fixture(dir.path(), "gsm8k", 6);
    seed_fixture(dir.path(), "math", 6);

    let flag = Arc::new(AtomicBool::new(false));
    pipeline::install_cancel_flag(Arc::clone(&flag));

    // Uninterrupted baseline in a sibling output dir.
    let cfg_full = config(dir.path(), "full");
    pipeline::run_generate(&cfg_full).unwrap();
    let baseline = file_digest(&cfg_full.generate_output("paraphrase")).unwrap();

    // Interrupt before the first chunk.
    let cfg = config(dir.path(), "run");
    flag.store(true, Ordering::SeqCst);
    let err = pipeline::run_generate(&cfg).unwrap_err();
    assert!(matches!(err, StageError::Interrupted));
    assert_eq!(err.exit_code(), 130);

    // The resumable manifest exists and is marked incomplete.
    let manifest =
        pipeline::Manifest::read(&cfg.output_dir.join("generate/manifest.json")).unwrap();
    assert!(!manifest.completed);

    // Clearing the flag resumes to a byte-identical artifact.
    flag.store(false, Ordering::SeqCst);
    pipeline::run_generate(&cfg).unwrap();
    assert_eq!(
        file_digest(&cfg.generate_output("paraphrase")).unwrap(),
        baseline
    );
    let manifest =
        pipeline::Manifest::read(&cfg.output_dir.join("generate/manifest.json")).unwrap();
    assert!(manifest.completed);
}
