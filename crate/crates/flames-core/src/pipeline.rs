//! File-handoff pipeline stages: generate, decontaminate, solve, filter,
//! mix, eval, stats. Each stage reads and writes JSONL under the output
//! directory and records a manifest (config digest, input digests, counts).
//!
//! Stages short-circuit when a completed manifest matches the current config
//! and inputs. The LLM-bound stages (generate, solve) additionally resume
//! record-by-record through a `.progress` sidecar, so a killed run continues
//! where it stopped and ends byte-identical to an uninterrupted one.

use std::collections::{BTreeMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agents::{
    drive_tasks, enumerate_fobar_variants, fobar_transform, AgentRunReport, AgentTask, SeedContext,
    TemplateStore,
};
use crate::config::{AgentConfig, PipelineConfig};
use crate::error::{FilterError, GatewayError, JsonlError};
use crate::evalharness::{Benchmark, EvalReport};
use crate::gateway::{ChatRequest, Gateway, Message, SamplingConfig};
use crate::grading::extract_answer;
use crate::jsonl::{self, JsonlWriter};
use crate::mixer::{self, DatasetStats, MixtureSpec};
use crate::model::{
    content_id, AgentKind, Record, SeedProblem, SolutionCandidate, SolvedRecord, Source,
    SyntheticProblem,
};
use crate::quality::{
    self, apply_filter, parse_final_yes_no, Deduper, FilterReason, FilterStrategy, NGramIndex,
    RewardScorer, StrategyKind,
};

/// Stage failures, classified for CLI exit codes: 1 config error,
/// 2 upstream artifact missing, 3 endpoint failure budget exceeded.
#[derive(Debug, Error)]
pub enum StageError {
    #[error("config error: {0}")]
    Config(String),

    #[error("upstream artifact missing: {0}")]
    UpstreamMissing(String),

    #[error("endpoint failure budget exceeded: {errors}/{requests} requests failed (max rate {max_rate})")]
    ErrorBudget {
        errors: usize,
        requests: usize,
        max_rate: f64,
    },

    #[error("interrupted; partial output flushed, rerun to resume")]
    Interrupted,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl StageError {
    pub fn exit_code(&self) -> i32 {
        match self {
            StageError::Config(_) | StageError::Io(_) => 1,
            StageError::UpstreamMissing(_) => 2,
            StageError::ErrorBudget { .. } => 3,
            StageError::Interrupted => 130,
        }
    }
}

static CANCEL_FLAG: std::sync::OnceLock<std::sync::Arc<std::sync::atomic::AtomicBool>> =
    std::sync::OnceLock::new();

/// Installs a flag (set from a signal handler) that makes the LLM-bound
/// stages stop between unit commits, leaving resumable state behind.
pub fn install_cancel_flag(flag: std::sync::Arc<std::sync::atomic::AtomicBool>) {
    let _ = CANCEL_FLAG.set(flag);
}

fn interrupted() -> bool {
    CANCEL_FLAG
        .get()
        .is_some_and(|flag| flag.load(std::sync::atomic::Ordering::SeqCst))
}

impl From<JsonlError> for StageError {
    fn from(e: JsonlError) -> Self {
        StageError::Config(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputInfo {
    pub digest: String,
    pub records: u64,
}

/// Per-stage provenance record. Contains no timestamps and no absolute
/// paths, so reruns with the same config and inputs are byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub config_digest: String,
    pub seed: u64,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, OutputInfo>,
    pub counts: BTreeMap<String, u64>,
    pub completed: bool,
}

impl Manifest {
    fn new(stage: &str, cfg: &PipelineConfig) -> Manifest {
        Manifest {
            stage: stage.to_string(),
            config_digest: config_digest(cfg),
            seed: cfg.rng_seed,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            counts: BTreeMap::new(),
            completed: false,
        }
    }

    pub fn path_for(cfg: &PipelineConfig, stage: &str) -> PathBuf {
        cfg.output_dir.join(stage).join("manifest.json")
    }

    pub fn read(path: &Path) -> Option<Manifest> {
        let text = std::fs::read_to_string(path).ok()?;
        serde_json::from_str(&text).ok()
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        std::fs::write(path, text)
    }
}

/// Digest of the resolved config with the output location normalized away:
/// where artifacts land does not change what is computed.
pub fn config_digest(cfg: &PipelineConfig) -> String {
    let mut normalized = cfg.clone();
    normalized.output_dir = PathBuf::from("out");
    normalized.digest()
}

pub fn file_digest(path: &Path) -> std::io::Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn output_info(path: &Path) -> std::io::Result<OutputInfo> {
    Ok(OutputInfo {
        digest: file_digest(path)?,
        records: jsonl::count_lines(path)? as u64,
    })
}

/// True when a completed manifest matches the current config and inputs; the
/// stage can then be skipped entirely.
fn up_to_date(
    manifest_path: &Path,
    cfg: &PipelineConfig,
    inputs: &BTreeMap<String, String>,
) -> Option<Manifest> {
    let manifest = Manifest::read(manifest_path)?;
    if manifest.completed
        && manifest.config_digest == config_digest(cfg)
        && manifest.inputs == *inputs
    {
        Some(manifest)
    } else {
        None
    }
}

/// Append-only JSONL writer with a `.progress` sidecar recording
/// `unit_key\trecord_count` after each unit is flushed. On open, the output
/// is truncated back to the committed record count, so a torn unit is redone.
struct ResumableWriter {
    writer: JsonlWriter,
    progress: File,
    completed: HashSet<String>,
}

impl ResumableWriter {
    /// Opens output + sidecar for resume. Partial state recorded under a
    /// different config digest is discarded, never mixed into this run.
    fn open(path: &Path, config_digest: &str) -> std::io::Result<(Self, usize)> {
        let progress_path = progress_path(path);
        let mut completed = HashSet::new();
        let mut committed_records = 0usize;
        let mut stale = false;
        if progress_path.exists() {
            let text = std::fs::read_to_string(&progress_path)?;
            // A torn final line has no newline; drop it.
            let complete_part = match text.rfind('\n') {
                Some(pos) => &text[..pos + 1],
                None => "",
            };
            let mut lines = complete_part.lines();
            match lines.next() {
                Some(header) if header == format!("#config\t{config_digest}") => {
                    for line in lines {
                        if let Some((key, count)) = line.rsplit_once('\t') {
                            if let Ok(count) = count.parse::<usize>() {
                                completed.insert(key.to_string());
                                committed_records += count;
                            }
                        }
                    }
                }
                _ => stale = true,
            }
        }
        if stale {
            completed.clear();
            committed_records = 0;
            std::fs::remove_file(&progress_path)?;
        }
        jsonl::truncate_to_lines(path, committed_records)?;
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let writer = if committed_records > 0 {
            JsonlWriter::append(path)?
        } else {
            JsonlWriter::create(path)?
        };
        let fresh = !progress_path.exists();
        let mut progress = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&progress_path)?;
        if fresh {
            writeln!(progress, "#config\t{config_digest}")?;
            progress.flush()?;
        }
        Ok((
            ResumableWriter {
                writer,
                progress,
                completed,
            },
            committed_records,
        ))
    }

    fn is_done(&self, key: &str) -> bool {
        self.completed.contains(key)
    }

    fn commit<T: Record>(&mut self, key: &str, records: &[T]) -> std::io::Result<()> {
        for record in records {
            self.writer.write(record)?;
        }
        self.writer.flush()?;
        writeln!(self.progress, "{key}\t{}", records.len())?;
        self.progress.flush()?;
        self.completed.insert(key.to_string());
        Ok(())
    }
}

fn progress_path(output: &Path) -> PathBuf {
    let mut os = output.as_os_str().to_os_string();
    os.push(".progress");
    PathBuf::from(os)
}

fn derive_seed(global: u64, parts: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(global.to_le_bytes());
    for part in parts {
        hasher.update([0x1f]);
        hasher.update(part.as_bytes());
    }
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// Loads a seed corpus, forcing the configured source and namespacing ids as
/// `<source>:<id>` when not already prefixed. Ids must be unique.
pub fn load_seed_corpus(path: &Path, source: Source) -> Result<Vec<SeedProblem>, StageError> {
    let prefix = source.as_str().to_lowercase();
    let mut seen = HashSet::new();
    let mut out: Vec<SeedProblem> = Vec::new();
    for mut seed in jsonl::read_records::<SeedProblem>(path)? {
        seed.source = source.clone();
        if !seed.id.starts_with(&format!("{prefix}:")) {
            seed.id = format!("{prefix}:{}", seed.id);
        }
        if !seen.insert(seed.id.clone()) {
            return Err(StageError::Config(format!(
                "{}: duplicate seed id {}",
                path.display(),
                seed.id
            )));
        }
        out.push(seed);
    }
    Ok(out)
}

struct SeedPools {
    gsm8k: Vec<SeedProblem>,
    math: Vec<SeedProblem>,
}

impl SeedPools {
    fn load(cfg: &PipelineConfig) -> Result<SeedPools, StageError> {
        let gsm8k = match &cfg.seeds.gsm8k_path {
            Some(path) => load_seed_corpus(path, Source::Gsm8k)?,
            None => vec![],
        };
        let math = match &cfg.seeds.math_path {
            Some(path) => load_seed_corpus(path, Source::Math)?,
            None => vec![],
        };
        Ok(SeedPools { gsm8k, math })
    }
}

fn gateway_for(cfg: &PipelineConfig) -> Result<Gateway, StageError> {
    Gateway::new(&cfg.endpoints).map_err(|e| StageError::Config(e.to_string()))
}

fn template_store(agent_cfg: &AgentConfig) -> Result<TemplateStore, StageError> {
    let mut store = TemplateStore::new();
    for (template_id, path) in &agent_cfg.template_overrides {
        store
            .load_override(template_id, path)
            .map_err(|e| StageError::Config(format!("template override {template_id}: {e}")))?;
    }
    Ok(store)
}

/// One schedulable generation task.
struct TaskSpec {
    key: String,
    ctx: SeedContext,
    /// Which seed-quota bucket the products count against.
    bucket: Option<Source>,
}

fn seeded_task_specs(
    agent: AgentKind,
    pools: &SeedPools,
    pass: usize,
    global_seed: u64,
) -> Vec<TaskSpec> {
    // Round-robin GSM8K/MATH so the per-corpus split is honored even when
    // the run stops mid-pass.
    let mut specs = Vec::new();
    let max_len = pools.gsm8k.len().max(pools.math.len());
    for i in 0..max_len {
        for pool in [&pools.gsm8k, &pools.math] {
            if let Some(seed) = pool.get(i) {
                let key = format!("{}#p{pass}", seed.id);
                let rng = derive_seed(global_seed, &[agent.name(), &key]);
                specs.push(TaskSpec {
                    key,
                    ctx: SeedContext::seeded(seed.clone(), rng),
                    bucket: Some(seed.source.clone()),
                });
            }
        }
    }
    specs
}

fn task_specs(
    agent: AgentKind,
    quota: usize,
    cfg: &PipelineConfig,
    pools: &SeedPools,
    pass: usize,
) -> Result<Vec<TaskSpec>, StageError> {
    let global_seed = cfg.rng_seed;
    let specs = match agent {
        AgentKind::Qft => (0..quota.max(1))
            .map(|i| {
                let key = format!("qft-{i}#p{pass}");
                let rng = derive_seed(global_seed, &[agent.name(), &key]);
                TaskSpec {
                    key,
                    ctx: SeedContext::empty(rng),
                    bucket: None,
                }
            })
            .collect(),
        AgentKind::TaxonomyKeyConcepts => {
            let taxonomy = match &cfg.taxonomy_path {
                Some(path) => crate::agents::load_taxonomy(path)
                    .map_err(|e| StageError::Config(e.to_string()))?,
                None => crate::agents::default_taxonomy(),
            };
            taxonomy
                .subjects
                .iter()
                .map(|subject| {
                    let key = format!("{}#p{pass}", subject.path.join("/"));
                    let rng = derive_seed(global_seed, &[agent.name(), &key]);
                    TaskSpec {
                        key,
                        ctx: SeedContext::subject(subject.name.clone(), rng),
                        bucket: None,
                    }
                })
                .collect()
        }
        AgentKind::FewShot => {
            // Alternate exemplar pools so both corpora contribute.
            let mut specs = Vec::new();
            for i in 0..quota.max(1) {
                let (tag, pool) = if i % 2 == 0 && !pools.gsm8k.is_empty() || pools.math.is_empty()
                {
                    ("g", &pools.gsm8k)
                } else {
                    ("m", &pools.math)
                };
                if pool.is_empty() {
                    continue;
                }
                let key = format!("fs-{tag}-{i}#p{pass}");
                let rng = derive_seed(global_seed, &[agent.name(), &key]);
                specs.push(TaskSpec {
                    key,
                    ctx: SeedContext::few_shot(pool.clone(), rng),
                    bucket: None,
                });
            }
            specs
        }
        _ => seeded_task_specs(agent, pools, pass, global_seed),
    };
    Ok(specs)
}

fn requires_seeds(agent: AgentKind) -> bool {
    !matches!(agent, AgentKind::Qft | AgentKind::TaxonomyKeyConcepts)
}

#[derive(Debug, Default)]
struct AgentStageCounts {
    produced: usize,
    dedup_removed: usize,
    requests: usize,
    gateway_errors: usize,
    parse_failures: usize,
    template_failures: usize,
    exhausted: bool,
}

impl AgentStageCounts {
    fn absorb(&mut self, report: &AgentRunReport) {
        for (key, n) in &report.per_step_failures {
            if key.starts_with("gateway:") {
                self.gateway_errors += n;
            } else if key.starts_with("parse:") {
                self.parse_failures += n;
            } else {
                self.template_failures += n;
            }
        }
    }
}

/// Per-source sub-quotas for a seeded agent; a missing corpus shifts its
/// share to the other one.
fn sub_quotas(
    quota: usize,
    pools: &SeedPools,
    agent: AgentKind,
) -> Result<(usize, usize), StageError> {
    if !requires_seeds(agent) || matches!(agent, AgentKind::FewShot) {
        return Ok((quota, 0)); // single bucket, tracked as gsm8k slot
    }
    match (pools.gsm8k.is_empty(), pools.math.is_empty()) {
        (false, false) => {
            let q = mixer::seed_quota(quota, &[0.5, 0.5]);
            Ok((q[0], q[1]))
        }
        (false, true) => Ok((quota, 0)),
        (true, false) => Ok((0, quota)),
        (true, true) => Err(StageError::Config(format!(
            "agent {} needs seed corpora but none are configured",
            agent.name()
        ))),
    }
}

fn bucket_slot(bucket: &Option<Source>) -> usize {
    match bucket {
        Some(Source::Math) => 1,
        _ => 0,
    }
}

/// Runs FOBAR's templatic generation: first one seeded-random variant per
/// seed, then the remaining enumerated variants until the quota is met.
#[allow(clippy::too_many_arguments)]
fn run_fobar_agent(
    quota: usize,
    cfg: &PipelineConfig,
    pools: &SeedPools,
    writer: &mut ResumableWriter,
    produced_by_bucket: &mut [usize; 2],
    deduper: &mut Deduper,
    counts: &mut AgentStageCounts,
    step_counter: &mut u64,
) -> Result<(), StageError> {
    let quotas = sub_quotas(quota, pools, AgentKind::Fobar)?;
    let quotas = [quotas.0, quotas.1];
    for pass in 0..2usize {
        let specs = seeded_task_specs(AgentKind::Fobar, pools, pass, cfg.rng_seed);
        for spec in specs {
            if counts.produced >= quota {
                return Ok(());
            }
            let slot = bucket_slot(&spec.bucket);
            if produced_by_bucket[slot] >= quotas[slot] {
                continue;
            }
            if writer.is_done(&spec.key) {
                continue;
            }
            let seed = spec.ctx.seed.as_ref().expect("fobar tasks are seeded");
            let variants = match pass {
                0 => fobar_transform(seed, spec.ctx.rng_seed)
                    .into_iter()
                    .collect(),
                _ => enumerate_fobar_variants(seed),
            };
            let mut admitted = Vec::new();
            for mut problem in variants {
                if counts.produced + admitted.len() >= quota
                    || produced_by_bucket[slot] + admitted.len() >= quotas[slot]
                {
                    break;
                }
                if !deduper.admit(&problem.problem) {
                    continue;
                }
                problem.created_step = *step_counter;
                *step_counter += 1;
                admitted.push(problem);
            }
            counts.produced += admitted.len();
            produced_by_bucket[slot] += admitted.len();
            writer.commit(&spec.key, &admitted)?;
        }
    }
    counts.exhausted = counts.produced < quota;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_llm_agent(
    agent_cfg: &AgentConfig,
    cfg: &PipelineConfig,
    gateway: &Gateway,
    pools: &SeedPools,
    writer: &mut ResumableWriter,
    produced_by_bucket: &mut [usize; 2],
    deduper: &mut Deduper,
    counts: &mut AgentStageCounts,
    step_counter: &mut u64,
) -> Result<(), StageError> {
    let agent = agent_cfg.kind;
    let quota = agent_cfg.quota;
    let store = template_store(agent_cfg)?;
    let sampling = SamplingConfig::synthesis();
    let endpoint = &cfg.roles.problem;

    let quotas = sub_quotas(quota, pools, agent)?;
    let quotas = [quotas.0, quotas.1];
    let products_per_task = agent_cfg.rounds.max(1);

    // self_verification uses each seed once; it is one of the two agents
    // allowed to exhaust.
    let max_passes = if agent == AgentKind::SelfVerification {
        1
    } else {
        cfg.max_passes.max(1)
    };

    'outer: for pass in 0..max_passes {
        let specs = task_specs(agent, quota, cfg, pools, pass)?;
        if specs.is_empty() {
            break;
        }
        let mut queue: Vec<TaskSpec> = Vec::new();
        for spec in specs {
            if writer.is_done(&spec.key) {
                continue;
            }
            queue.push(spec);
        }
        let mut cursor = 0usize;
        while cursor < queue.len() {
            if interrupted() {
                return Err(StageError::Interrupted);
            }
            if counts.produced >= quota {
                break 'outer;
            }
            let remaining = quota - counts.produced;
            let chunk_size = remaining.div_ceil(products_per_task).clamp(1, 64);
            let mut chunk: Vec<&TaskSpec> = Vec::new();
            while cursor < queue.len() && chunk.len() < chunk_size {
                let spec = &queue[cursor];
                cursor += 1;
                let slot = bucket_slot(&spec.bucket);
                if produced_by_bucket[slot] >= quotas[slot] {
                    continue;
                }
                chunk.push(spec);
            }
            if chunk.is_empty() {
                continue;
            }
            let mut tasks: Vec<AgentTask> = Vec::new();
            for spec in &chunk {
                let task = AgentTask::new(
                    agent,
                    &spec.ctx,
                    agent_cfg.rounds.max(1),
                    &store,
                    endpoint,
                    &sampling,
                    &format!("{}/{}", agent.name(), spec.key),
                )
                .map_err(|e| StageError::Config(e.to_string()))?;
                tasks.push(task);
            }
            counts.requests += drive_tasks(gateway, &mut tasks, cfg.max_in_flight);
            for (spec, task) in chunk.iter().zip(tasks) {
                if counts.produced >= quota {
                    break 'outer;
                }
                let slot = bucket_slot(&spec.bucket);
                let mut report = AgentRunReport::default();
                let products = task.collect(0, &mut report);
                counts.absorb(&report);
                let mut admitted = Vec::new();
                for mut problem in products {
                    if counts.produced + admitted.len() >= quota
                        || produced_by_bucket[slot] + admitted.len() >= quotas[slot]
                    {
                        break;
                    }
                    if !deduper.admit(&problem.problem) {
                        continue;
                    }
                    problem.created_step = *step_counter;
                    *step_counter += 1;
                    admitted.push(problem);
                }
                counts.produced += admitted.len();
                produced_by_bucket[slot] += admitted.len();
                writer.commit(&spec.key, &admitted)?;
            }
        }
    }
    if agent == AgentKind::SelfVerification {
        counts.exhausted = counts.produced < quota;
    }
    Ok(())
}

/// Recovers the dedup set and per-bucket counters from records committed by
/// an interrupted run.
fn recover_generate_state(
    path: &Path,
    committed: usize,
    deduper: &mut Deduper,
    produced_by_bucket: &mut [usize; 2],
    step_counter: &mut u64,
) -> Result<usize, StageError> {
    if committed == 0 {
        return Ok(0);
    }
    let existing: Vec<SyntheticProblem> = jsonl::read_records(path)?;
    for problem in &existing {
        deduper.admit(&problem.problem);
        let slot = match problem.seed_ids.first() {
            Some(id) if id.starts_with("math:") => 1,
            _ => 0,
        };
        produced_by_bucket[slot] += 1;
    }
    *step_counter = existing.len() as u64;
    Ok(existing.len())
}

/// The generate stage: runs every configured agent to its quota.
pub fn run_generate(cfg: &PipelineConfig) -> Result<Manifest, StageError> {
    if cfg.agents.is_empty() {
        return Err(StageError::Config("no agents configured".into()));
    }
    let pools = SeedPools::load(cfg)?;

    let mut inputs = BTreeMap::new();
    if let Some(path) = &cfg.seeds.gsm8k_path {
        inputs.insert("seeds:gsm8k".to_string(), file_digest(path)?);
    }
    if let Some(path) = &cfg.seeds.math_path {
        inputs.insert("seeds:math".to_string(), file_digest(path)?);
    }
    let manifest_path = Manifest::path_for(cfg, "generate");
    if let Some(manifest) = up_to_date(&manifest_path, cfg, &inputs) {
        return Ok(manifest);
    }

    let gateway = gateway_for(cfg)?;
    let mut manifest = Manifest::new("generate", cfg);
    manifest.inputs = inputs;

    for agent_cfg in &cfg.agents {
        let agent = agent_cfg.kind;
        if requires_seeds(agent) && pools.gsm8k.is_empty() && pools.math.is_empty() {
            return Err(StageError::Config(format!(
                "agent {} needs seed corpora but none are configured",
                agent.name()
            )));
        }
        let out_path = cfg.generate_output(agent.name());
        let (mut writer, committed) = ResumableWriter::open(&out_path, &manifest.config_digest)?;
        let mut deduper = Deduper::new();
        let mut produced_by_bucket = [0usize; 2];
        let mut step_counter = 0u64;
        let already = recover_generate_state(
            &out_path,
            committed,
            &mut deduper,
            &mut produced_by_bucket,
            &mut step_counter,
        )?;

        let mut counts = AgentStageCounts {
            produced: already,
            ..Default::default()
        };
        let run = if agent == AgentKind::Fobar {
            run_fobar_agent(
                agent_cfg.quota,
                cfg,
                &pools,
                &mut writer,
                &mut produced_by_bucket,
                &mut deduper,
                &mut counts,
                &mut step_counter,
            )
        } else {
            run_llm_agent(
                agent_cfg,
                cfg,
                &gateway,
                &pools,
                &mut writer,
                &mut produced_by_bucket,
                &mut deduper,
                &mut counts,
                &mut step_counter,
            )
        };
        if let Err(e) = run {
            if matches!(e, StageError::Interrupted) {
                // Partial outputs are flushed; record the resumable state.
                manifest.write(&manifest_path)?;
            }
            return Err(e);
        }
        counts.dedup_removed = deduper.removed();

        let name = agent.name();
        manifest
            .counts
            .insert(format!("{name}:requested"), agent_cfg.quota as u64);
        manifest
            .counts
            .insert(format!("{name}:produced"), counts.produced as u64);
        manifest
            .counts
            .insert(format!("{name}:dedup_removed"), counts.dedup_removed as u64);
        manifest
            .counts
            .insert(format!("{name}:requests"), counts.requests as u64);
        manifest.counts.insert(
            format!("{name}:gateway_errors"),
            counts.gateway_errors as u64,
        );
        manifest.counts.insert(
            format!("{name}:parse_failures"),
            counts.parse_failures as u64,
        );
        manifest.counts.insert(
            format!("{name}:template_failures"),
            counts.template_failures as u64,
        );
        manifest
            .counts
            .insert(format!("{name}:exhausted"), counts.exhausted as u64);
        manifest
            .outputs
            .insert(format!("{name}.jsonl"), output_info(&out_path)?);

        if counts.requests > 0 {
            let rate = counts.gateway_errors as f64 / counts.requests as f64;
            if rate > cfg.max_error_rate {
                return Err(StageError::ErrorBudget {
                    errors: counts.gateway_errors,
                    requests: counts.requests,
                    max_rate: cfg.max_error_rate,
                });
            }
        }
    }

    manifest.completed = true;
    manifest.write(&manifest_path)?;
    Ok(manifest)
}

/// Request-count plan for `--dry-run`: (agent, quota, estimated requests).
pub fn generate_plan(cfg: &PipelineConfig) -> Vec<(AgentKind, usize, usize)> {
    cfg.agents
        .iter()
        .map(|a| {
            let steps_per_product = match a.kind {
                AgentKind::Fobar => 0,
                AgentKind::KeyConcepts
                | AgentKind::SeededKeyConcepts
                | AgentKind::AskMeAnything
                | AgentKind::SelfVerification => 2,
                AgentKind::SuggesterEditor => 2,
                AgentKind::TaxonomyKeyConcepts => 2,
                _ => 1,
            };
            (a.kind, a.quota, a.quota * steps_per_product)
        })
        .collect()
}

/// Loads decontamination test sets: benchmark-style (`question`) or
/// seed-style (`problem`) JSONL records.
fn load_test_sets(cfg: &PipelineConfig) -> Result<Vec<(String, String)>, StageError> {
    let mut out = Vec::new();
    for path in &cfg.decontamination.test_sets {
        if !path.exists() {
            return Err(StageError::Config(format!(
                "test set {} does not exist",
                path.display()
            )));
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("test");
        for (i, value) in jsonl::read_values(path)?.into_iter().enumerate() {
            let text = value
                .get("question")
                .or_else(|| value.get("problem"))
                .and_then(|v| v.as_str())
                .ok_or_else(|| {
                    StageError::Config(format!(
                        "{} line {}: record has neither `question` nor `problem`",
                        path.display(),
                        i + 1
                    ))
                })?;
            let id = value
                .get("id")
                .and_then(|v| v.as_str())
                .map(|s| format!("{stem}:{s}"))
                .unwrap_or_else(|| format!("{stem}:{}", i + 1));
            out.push((id, text.to_string()));
        }
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
struct ContaminationReportRow<'a> {
    synthetic_id: &'a str,
    matched_test_id: &'a str,
    overlap_fraction: f64,
}

/// The decontaminate stage: drops synthetic problems that cover a test
/// problem's 8-grams at the configured threshold.
pub fn run_decontaminate(cfg: &PipelineConfig) -> Result<Manifest, StageError> {
    let mut inputs = BTreeMap::new();
    for agent_cfg in &cfg.agents {
        let path = cfg.generate_output(agent_cfg.kind.name());
        if !path.exists() {
            return Err(StageError::UpstreamMissing(path.display().to_string()));
        }
        inputs.insert(
            format!("generate:{}", agent_cfg.kind.name()),
            file_digest(&path)?,
        );
    }
    for (i, path) in cfg.decontamination.test_sets.iter().enumerate() {
        if !path.exists() {
            return Err(StageError::Config(format!(
                "test set {} does not exist",
                path.display()
            )));
        }
        inputs.insert(format!("test_set:{i}"), file_digest(path)?);
    }
    let manifest_path = Manifest::path_for(cfg, "decontaminate");
    if let Some(manifest) = up_to_date(&manifest_path, cfg, &inputs) {
        return Ok(manifest);
    }

    let tests = load_test_sets(cfg)?;
    let index = NGramIndex::build(&tests, cfg.quality.ngram_size);
    let mut manifest = Manifest::new("decontaminate", cfg);
    manifest.inputs = inputs;

    let report_path = cfg.output_dir.join("decontaminate").join("report.jsonl");
    let mut report = JsonlWriter::create(&report_path)?;

    for agent_cfg in &cfg.agents {
        let name = agent_cfg.kind.name();
        let problems: Vec<SyntheticProblem> = jsonl::read_records(&cfg.generate_output(name))?;
        let mut kept = Vec::with_capacity(problems.len());
        let mut removed = 0u64;
        for problem in problems {
            match index.contamination_check(&problem.problem, cfg.quality.threshold) {
                Some(hit) => {
                    removed += 1;
                    report.write_value(
                        &serde_json::to_value(ContaminationReportRow {
                            synthetic_id: &problem.id,
                            matched_test_id: &hit.test_id,
                            overlap_fraction: hit.overlap_fraction,
                        })
                        .expect("row serializes"),
                    )?;
                }
                None => kept.push(problem),
            }
        }
        let out_path = cfg.decontaminate_output(name);
        jsonl::write_records(&out_path, &kept)?;
        manifest
            .counts
            .insert(format!("{name}:kept"), kept.len() as u64);
        manifest.counts.insert(format!("{name}:removed"), removed);
        manifest
            .outputs
            .insert(format!("{name}.jsonl"), output_info(&out_path)?);
    }
    report.flush()?;
    manifest
        .outputs
        .insert("report.jsonl".to_string(), output_info(&report_path)?);
    manifest
        .counts
        .insert("test_problems".to_string(), index.len() as u64);

    manifest.completed = true;
    manifest.write(&manifest_path)?;
    Ok(manifest)
}

/// The solve stage: samples k solutions per problem and extracts answers.
pub fn run_solve(cfg: &PipelineConfig) -> Result<Manifest, StageError> {
    let mut inputs = BTreeMap::new();
    for agent_cfg in &cfg.agents {
        let path = cfg.decontaminate_output(agent_cfg.kind.name());
        if !path.exists() {
            return Err(StageError::UpstreamMissing(path.display().to_string()));
        }
        inputs.insert(
            format!("decontaminate:{}", agent_cfg.kind.name()),
            file_digest(&path)?,
        );
    }
    let manifest_path = Manifest::path_for(cfg, "solve");
    if let Some(manifest) = up_to_date(&manifest_path, cfg, &inputs) {
        return Ok(manifest);
    }

    let gateway = gateway_for(cfg)?;
    let mut manifest = Manifest::new("solve", cfg);
    manifest.inputs = inputs;
    let k = cfg.quality.k_solutions;
    let sampling = SamplingConfig::synthesis();

    for agent_cfg in &cfg.agents {
        let name = agent_cfg.kind.name();
        let problems: Vec<SyntheticProblem> = jsonl::read_records(&cfg.decontaminate_output(name))?;
        let out_path = cfg.solve_output(name);
        let (mut writer, _) = ResumableWriter::open(&out_path, &manifest.config_digest)?;

        let pending: Vec<&SyntheticProblem> =
            problems.iter().filter(|p| !writer.is_done(&p.id)).collect();

        let mut requests_total = 0usize;
        let mut gateway_errors = 0usize;
        let mut dropped = 0u64;
        for batch in pending.chunks(256) {
            if interrupted() {
                manifest.write(&manifest_path)?;
                return Err(StageError::Interrupted);
            }
            let requests: Vec<ChatRequest> = batch
                .iter()
                .flat_map(|p| {
                    (0..k).map(|j| ChatRequest {
                        endpoint_name: cfg.roles.solution.clone(),
                        system: Some(cfg.solve.system_prompt.clone()),
                        messages: vec![Message::user(p.problem.clone())],
                        sampling: sampling.clone(),
                        request_tag: format!("solve/{}/{j}", p.id),
                    })
                })
                .collect();
            requests_total += requests.len();
            let results = gateway.complete_many(&requests, cfg.max_in_flight);
            for (i, problem) in batch.iter().enumerate() {
                let slot = &results[i * k..(i + 1) * k];
                let mut solutions = Vec::with_capacity(k);
                let mut failed = false;
                for result in slot {
                    match result {
                        Ok(completion) => solutions.push(SolutionCandidate {
                            text: completion.text.clone(),
                            extracted_answer: extract_answer(&completion.text),
                            reward: None,
                        }),
                        Err(_) => {
                            gateway_errors += 1;
                            failed = true;
                        }
                    }
                }
                if failed {
                    // A record entering filtering must hold exactly k
                    // solutions; drop and account instead.
                    dropped += 1;
                    writer.commit::<SolvedRecord>(&problem.id, &[])?;
                    continue;
                }
                let record = SolvedRecord {
                    problem: (*problem).clone(),
                    solutions,
                    answers_extracted: true,
                    extras: Default::default(),
                };
                writer.commit(&problem.id, &[record])?;
            }
        }
        manifest
            .counts
            .insert(format!("{name}:problems"), problems.len() as u64);
        manifest
            .counts
            .insert(format!("{name}:requests"), requests_total as u64);
        manifest
            .counts
            .insert(format!("{name}:gateway_errors"), gateway_errors as u64);
        manifest.counts.insert(format!("{name}:dropped"), dropped);
        manifest
            .outputs
            .insert(format!("{name}.jsonl"), output_info(&out_path)?);

        if requests_total > 0 {
            let rate = gateway_errors as f64 / requests_total as f64;
            if rate > cfg.max_error_rate {
                return Err(StageError::ErrorBudget {
                    errors: gateway_errors,
                    requests: requests_total,
                    max_rate: cfg.max_error_rate,
                });
            }
        }
    }

    manifest.completed = true;
    manifest.write(&manifest_path)?;
    Ok(manifest)
}

/// Hash-derived rewards for offline runs: deterministic per solution text.
pub struct MockRewardScorer;

impl RewardScorer for MockRewardScorer {
    fn score(&self, _problem: &str, solutions: &[String]) -> Result<Vec<f64>, GatewayError> {
        Ok(solutions
            .iter()
            .map(|s| Sha256::digest(s.as_bytes())[0] as f64 / 255.0)
            .collect())
    }
}

/// Reward scorer served over HTTP: POST {problem, solutions} -> {rewards}.
pub struct HttpRewardScorer {
    url: String,
}

impl HttpRewardScorer {
    pub fn new(base_url: &str) -> Self {
        HttpRewardScorer {
            url: base_url.trim_end_matches('/').to_string(),
        }
    }
}

impl RewardScorer for HttpRewardScorer {
    fn score(&self, problem: &str, solutions: &[String]) -> Result<Vec<f64>, GatewayError> {
        let body = serde_json::json!({"problem": problem, "solutions": solutions});
        let mut response = ureq::post(&self.url)
            .header("Content-Type", "application/json")
            .send_json(&body)
            .map_err(|e| GatewayError::EndpointUnreachable {
                endpoint: self.url.clone(),
                attempts: 1,
                message: e.to_string(),
            })?;
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| GatewayError::BadResponse {
                endpoint: self.url.clone(),
                message: e.to_string(),
            })?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| GatewayError::BadResponse {
                endpoint: self.url.clone(),
                message: e.to_string(),
            })?;
        value
            .get("rewards")
            .and_then(|r| r.as_array())
            .map(|arr| arr.iter().filter_map(|v| v.as_f64()).collect())
            .ok_or_else(|| GatewayError::BadResponse {
                endpoint: self.url.clone(),
                message: "response lacks a rewards array".into(),
            })
    }
}

/// Pre-computed verdicts used to batch solvability judging.
struct MapJudge {
    verdicts: BTreeMap<String, bool>,
}

impl quality::SolvabilityJudge for MapJudge {
    fn is_solvable(&self, problem_text: &str) -> Result<bool, GatewayError> {
        Ok(*self
            .verdicts
            .get(&content_id(problem_text))
            .unwrap_or(&false))
    }
}

#[derive(Debug, Serialize)]
struct FilterReportRow<'a> {
    problem_id: &'a str,
    strategy: &'a str,
    kept: bool,
    reason: FilterReason,
    #[serde(skip_serializing_if = "Option::is_none")]
    solution_index: Option<usize>,
}

/// The filter stage: applies the configured quality-control strategy to
/// every solved record, emitting training records and a per-record report.
pub fn run_filter(
    cfg: &PipelineConfig,
    strategy_override: Option<StrategyKind>,
) -> Result<Manifest, StageError> {
    let mut inputs = BTreeMap::new();
    for agent_cfg in &cfg.agents {
        let path = cfg.solve_output(agent_cfg.kind.name());
        if !path.exists() {
            return Err(StageError::UpstreamMissing(path.display().to_string()));
        }
        inputs.insert(
            format!("solve:{}", agent_cfg.kind.name()),
            file_digest(&path)?,
        );
    }
    let kind = strategy_override.unwrap_or(cfg.quality.filter);
    inputs.insert("strategy".to_string(), kind.name().to_string());
    let manifest_path = Manifest::path_for(cfg, "filter");
    if let Some(manifest) = up_to_date(&manifest_path, cfg, &inputs) {
        return Ok(manifest);
    }

    let strategy = FilterStrategy {
        kind,
        k_solutions: cfg.quality.k_solutions,
        majority_min: cfg.quality.majority_min,
        selection_rng_seed: cfg.rng_seed,
    };

    let mut manifest = Manifest::new("filter", cfg);
    manifest.inputs = inputs;
    let report_path = cfg.output_dir.join("filter").join("report.jsonl");
    let mut report = JsonlWriter::create(&report_path)?;

    let gateway = if kind.needs_judge() {
        Some(gateway_for(cfg)?)
    } else {
        None
    };
    let reward_scorer: Option<Box<dyn RewardScorer>> = if kind == StrategyKind::SolvabilityPlusRm {
        match cfg.endpoint(&cfg.roles.reward) {
            Some(ep) if ep.kind == crate::gateway::EndpointKind::Http => Some(Box::new(
                HttpRewardScorer::new(ep.base_url.as_deref().unwrap_or_default()),
            )),
            Some(_) => Some(Box::new(MockRewardScorer)),
            None => None,
        }
    } else {
        None
    };

    let mut ambiguous_verdicts = 0u64;
    for agent_cfg in &cfg.agents {
        let name = agent_cfg.kind.name();
        let records: Vec<SolvedRecord> = jsonl::read_records(&cfg.solve_output(name))?;

        // Batch the judge calls through complete_many instead of one
        // blocking call per record.
        let judge: Option<MapJudge> = match &gateway {
            Some(gateway) => {
                let requests: Vec<ChatRequest> = records
                    .iter()
                    .map(|r| {
                        let prompt =
                            crate::agents::templates::render_solvability_prompt(&r.problem.problem);
                        ChatRequest {
                            endpoint_name: cfg.roles.judge.clone(),
                            system: None,
                            messages: vec![Message::user(prompt)],
                            sampling: SamplingConfig::evaluation(),
                            request_tag: format!("solvability/{}", &r.problem.id[..16]),
                        }
                    })
                    .collect();
                let results = gateway.complete_many(&requests, cfg.max_in_flight);
                let mut verdicts = BTreeMap::new();
                for (record, result) in records.iter().zip(results) {
                    let verdict = match result {
                        Ok(completion) => match parse_final_yes_no(&completion.text) {
                            Some(v) => v,
                            None => {
                                ambiguous_verdicts += 1;
                                false
                            }
                        },
                        // Conservative drop on judge failure.
                        Err(_) => false,
                    };
                    verdicts.insert(record.problem.id.clone(), verdict);
                }
                Some(MapJudge { verdicts })
            }
            None => None,
        };

        let mut kept_records = Vec::new();
        let mut reason_counts: BTreeMap<&'static str, u64> = BTreeMap::new();
        let mut level_totals: BTreeMap<String, (u64, u64)> = BTreeMap::new();
        for record in &records {
            let outcome = apply_filter(
                &strategy,
                record,
                judge.as_ref().map(|j| j as &dyn quality::SolvabilityJudge),
                reward_scorer.as_deref(),
            )
            .map_err(|e| match e {
                FilterError::MissingJudge | FilterError::MissingReward => {
                    StageError::Config(e.to_string())
                }
                other => StageError::Config(other.to_string()),
            })?;
            let reason_name = match outcome.reason {
                FilterReason::NoMajority => "no_majority",
                FilterReason::Unsolvable => "unsolvable",
                FilterReason::Kept => "kept",
                FilterReason::KeptFallbackFirst => "kept_fallback_first",
            };
            *reason_counts.entry(reason_name).or_insert(0) += 1;
            if let Some(level) = record.problem.extras.get("level").and_then(|v| v.as_u64()) {
                let entry = level_totals
                    .entry(format!("level_{level}"))
                    .or_insert((0, 0));
                entry.1 += 1;
                if !outcome.kept {
                    entry.0 += 1;
                }
            }
            report.write_value(
                &serde_json::to_value(FilterReportRow {
                    problem_id: &record.problem.id,
                    strategy: kind.name(),
                    kept: outcome.kept,
                    reason: outcome.reason,
                    solution_index: outcome.solution_index(),
                })
                .expect("row serializes"),
            )?;
            if let Some(training) = outcome.record {
                kept_records.push(training);
            }
        }

        let out_path = cfg.filter_output(name);
        jsonl::write_records(&out_path, &kept_records)?;
        manifest
            .counts
            .insert(format!("{name}:input"), records.len() as u64);
        manifest
            .counts
            .insert(format!("{name}:kept"), kept_records.len() as u64);
        for (reason, n) in reason_counts {
            manifest.counts.insert(format!("{name}:reason:{reason}"), n);
        }
        for (level, (removed, total)) in level_totals {
            manifest
                .counts
                .insert(format!("{name}:removed:{level}"), removed);
            manifest
                .counts
                .insert(format!("{name}:total:{level}"), total);
        }
        manifest
            .outputs
            .insert(format!("{name}.jsonl"), output_info(&out_path)?);
    }
    report.flush()?;
    manifest
        .counts
        .insert("ambiguous_verdicts".to_string(), ambiguous_verdicts);
    manifest
        .outputs
        .insert("report.jsonl".to_string(), output_info(&report_path)?);

    manifest.completed = true;
    manifest.write(&manifest_path)?;
    Ok(manifest)
}

/// The mix stage: blends filtered per-agent datasets into one mixture file.
pub fn run_mix(cfg: &PipelineConfig, spec: &MixtureSpec) -> Result<Manifest, StageError> {
    let mut inputs = BTreeMap::new();
    for source in &spec.sources {
        if !source.dataset_path.exists() {
            return Err(StageError::UpstreamMissing(
                source.dataset_path.display().to_string(),
            ));
        }
        inputs.insert(
            format!("source:{}", source.name),
            file_digest(&source.dataset_path)?,
        );
    }
    inputs.insert("mixture".to_string(), spec.name.clone());
    inputs.insert("target_size".to_string(), spec.target_size.to_string());
    let manifest_path = cfg
        .output_dir
        .join("mix")
        .join(format!("{}.manifest.json", spec.name));
    if let Some(manifest) = up_to_date(&manifest_path, cfg, &inputs) {
        return Ok(manifest);
    }

    let outcome = mixer::mix(spec).map_err(|e| StageError::Config(e.to_string()))?;

    let out_path = cfg.mix_output(&spec.name);
    jsonl::write_records(&out_path, &outcome.records)?;

    let mut manifest = Manifest::new("mix", cfg);
    manifest.inputs = inputs;
    manifest
        .counts
        .insert("records".to_string(), outcome.records.len() as u64);
    for (source, n) in &outcome.per_source_counts {
        manifest
            .counts
            .insert(format!("source:{source}"), *n as u64);
    }
    for (source, missing) in &outcome.shortfalls {
        manifest
            .counts
            .insert(format!("shortfall:{source}"), *missing as u64);
    }
    let stats = mixer::stats(&out_path)?;
    manifest
        .counts
        .insert("duplicates".to_string(), stats.duplicate_count as u64);
    manifest
        .outputs
        .insert(format!("{}.jsonl", spec.name), output_info(&out_path)?);

    manifest.completed = true;
    manifest.write(&manifest_path)?;
    Ok(manifest)
}

/// The eval stage: greedy decode over a benchmark, then score.
pub fn run_eval(
    cfg: &PipelineConfig,
    name: &str,
    path: &Path,
) -> Result<(Manifest, EvalReport), StageError> {
    if !path.exists() {
        return Err(StageError::UpstreamMissing(path.display().to_string()));
    }
    let bench = Benchmark::load(name, path).map_err(|e| StageError::Config(e.to_string()))?;
    let gateway = gateway_for(cfg)?;
    let sampling = SamplingConfig::evaluation();
    let report = crate::evalharness::evaluate(
        &gateway,
        &cfg.roles.eval,
        &bench,
        Some(&cfg.eval.system_prompt),
        &sampling,
        cfg.max_in_flight,
    );

    let mut manifest = Manifest::new("eval", cfg);
    manifest
        .inputs
        .insert(format!("benchmark:{name}"), file_digest(path)?);
    let out_path = cfg.output_dir.join("eval").join(format!("{name}.json"));
    if let Some(parent) = out_path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut text = serde_json::to_string_pretty(&report).expect("report serializes");
    text.push('\n');
    std::fs::write(&out_path, text)?;
    manifest
        .counts
        .insert("items".to_string(), bench.items.len() as u64);
    manifest
        .counts
        .insert("excluded".to_string(), bench.excluded as u64);
    manifest.counts.insert(
        "correct".to_string(),
        report.per_item.iter().filter(|r| r.correct).count() as u64,
    );
    manifest
        .outputs
        .insert(format!("{name}.json"), output_info(&out_path)?);
    manifest.completed = true;
    manifest.write(
        &cfg.output_dir
            .join("eval")
            .join(format!("{name}.manifest.json")),
    )?;
    Ok((manifest, report))
}

/// The stats stage: one streaming pass over a dataset file.
pub fn run_stats(cfg: &PipelineConfig, input: &Path) -> Result<DatasetStats, StageError> {
    if !input.exists() {
        return Err(StageError::UpstreamMissing(input.display().to_string()));
    }
    let stats = mixer::stats(input)?;
    let stem = input
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("dataset");
    let out_path = cfg.output_dir.join("stats").join(format!("{stem}.json"));
    if let Some(parent) = out_path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut text = serde_json::to_string_pretty(&stats).expect("stats serialize");
    text.push('\n');
    std::fs::write(&out_path, text)?;
    Ok(stats)
}
