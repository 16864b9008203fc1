//! Operator CLI for the synthetic math-reasoning data pipeline. Stages read
//! and write JSONL under the configured output directory; every value in the
//! config file can be overridden by a flag (flags win).

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, OnceLock};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use flames_core::config::PipelineConfig;
use flames_core::evalharness::CheckpointScore;
use flames_core::grading::{answers_equal, extract_answer, normalize};
use flames_core::pipeline::{self, StageError};
use flames_core::quality::StrategyKind;

static INTERRUPT_FLAG: OnceLock<Arc<AtomicBool>> = OnceLock::new();

extern "C" fn on_sigint(_: libc::c_int) {
    if let Some(flag) = INTERRUPT_FLAG.get() {
        flag.store(true, Ordering::SeqCst);
    }
}

#[derive(Parser)]
#[command(
    name = "flames",
    version,
    about = "Synthetic math reasoning data pipeline"
)]
struct Cli {
    /// Pipeline config file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Global rng seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory override.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,

    /// Print the plan without calling any endpoint.
    #[arg(long, global = true)]
    dry_run: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GenerateArgs {
    /// Restrict to one agent (default: every configured agent).
    #[arg(long)]
    agent: Option<String>,

    /// Quota override for the selected agent.
    #[arg(long)]
    quota: Option<usize>,

    /// Rounds override for the selected agent.
    #[arg(long)]
    rounds: Option<usize>,

    /// Endpoint name override for problem synthesis.
    #[arg(long)]
    endpoint: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize problems with the configured agents.
    Generate(GenerateArgs),
    /// Remove synthetic problems overlapping the test sets.
    Decontaminate,
    /// Sample k solutions per problem and extract answers.
    Solve {
        /// Endpoint name override for solution synthesis.
        #[arg(long)]
        endpoint: Option<String>,
    },
    /// Apply a quality-control strategy to solved records.
    Filter {
        /// first | majority | strict_sc | majority_plus_first |
        /// solvability_plus_first | solvability_plus_rm
        #[arg(long)]
        strategy: Option<String>,
    },
    /// Blend filtered datasets into a mixture.
    Mix {
        /// Mixture name from the config, or a shipped preset
        /// (flames_small, flames_large, flames_xl).
        #[arg(long)]
        preset: String,

        /// Target size override.
        #[arg(long)]
        target: Option<usize>,

        /// Accept short sources, taking all their records.
        #[arg(long)]
        allow_short: bool,
    },
    /// Run greedy-decode evaluation over a benchmark file.
    Eval {
        #[arg(long)]
        bench: String,

        #[arg(long)]
        path: PathBuf,

        /// Endpoint name override.
        #[arg(long)]
        endpoint: Option<String>,
    },
    /// Dataset statistics for a JSONL file.
    Stats {
        #[arg(long)]
        input: PathBuf,
    },
    /// Debug answer extraction, normalization and comparison.
    AnswersCheck {
        #[command(subcommand)]
        action: AnswersAction,
    },
    /// Pick the checkpoint with the best GSM8K/MATH average.
    SelectCheckpoint {
        /// JSONL of {checkpoint_id, gsm8k, math}.
        #[arg(long)]
        scores: PathBuf,
    },
}

#[derive(Subcommand)]
enum AnswersAction {
    /// Extract the final answer from a solution text.
    Extract { text: String },
    /// Normalize a raw answer to canonical form.
    Normalize { raw: String },
    /// Compare two raw answers for equivalence.
    Compare { a: String, b: String },
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path).map_err(StageError::Config)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.rng_seed = seed;
    }
    if let Some(dir) = &cli.output_dir {
        cfg.output_dir = dir.clone();
    }
    Ok(cfg)
}

fn apply_generate_overrides(cfg: &mut PipelineConfig, args: &GenerateArgs) -> Result<()> {
    if let Some(agent) = &args.agent {
        let kind = agent
            .parse()
            .map_err(|e| StageError::Config(format!("{e}")))?;
        cfg.agents.retain(|a| a.kind == kind);
        if cfg.agents.is_empty() {
            cfg.agents.push(flames_core::config::AgentConfig {
                kind,
                quota: args.quota.unwrap_or(10),
                rounds: args.rounds.unwrap_or(1),
                template_overrides: Default::default(),
            });
        }
    }
    if let Some(quota) = args.quota {
        for a in cfg.agents.iter_mut() {
            a.quota = quota;
        }
    }
    if let Some(rounds) = args.rounds {
        for a in cfg.agents.iter_mut() {
            a.rounds = rounds;
        }
    }
    if let Some(endpoint) = &args.endpoint {
        cfg.roles.problem = endpoint.clone();
    }
    Ok(())
}

fn print_counts(manifest: &flames_core::pipeline::Manifest) {
    for (key, value) in &manifest.counts {
        println!("  {key} = {value}");
    }
}

fn run(cli: Cli) -> Result<i32> {
    let mut cfg = load_config(&cli)?;

    match &cli.command {
        Command::Generate(args) => {
            apply_generate_overrides(&mut cfg, args)?;
            if cli.dry_run {
                println!("generate plan (agent, quota, estimated requests):");
                for (agent, quota, requests) in pipeline::generate_plan(&cfg) {
                    println!("  {agent} quota={quota} est_requests={requests}");
                }
                return Ok(0);
            }
            let manifest = pipeline::run_generate(&cfg)?;
            println!("generate complete:");
            print_counts(&manifest);
        }
        Command::Decontaminate => {
            if cli.dry_run {
                println!(
                    "decontaminate plan: {} test set file(s), threshold {}, n = {}",
                    cfg.decontamination.test_sets.len(),
                    cfg.quality.threshold,
                    cfg.quality.ngram_size
                );
                return Ok(0);
            }
            let manifest = pipeline::run_decontaminate(&cfg)?;
            println!("decontaminate complete:");
            print_counts(&manifest);
        }
        Command::Solve { endpoint } => {
            if let Some(endpoint) = endpoint {
                cfg.roles.solution = endpoint.clone();
            }
            if cli.dry_run {
                let k = cfg.quality.k_solutions;
                println!("solve plan: k = {k} solutions per problem");
                return Ok(0);
            }
            let manifest = pipeline::run_solve(&cfg)?;
            println!("solve complete:");
            print_counts(&manifest);
        }
        Command::Filter { strategy } => {
            let strategy_override: Option<StrategyKind> = match strategy {
                Some(s) => Some(s.parse().map_err(StageError::Config)?),
                None => None,
            };
            if cli.dry_run {
                let kind = strategy_override.unwrap_or(cfg.quality.filter);
                println!("filter plan: strategy = {}", kind.name());
                return Ok(0);
            }
            let manifest = pipeline::run_filter(&cfg, strategy_override)?;
            println!("filter complete:");
            print_counts(&manifest);
        }
        Command::Mix {
            preset,
            target,
            allow_short,
        } => {
            let mut spec = cfg
                .mixture_spec(preset, *target)
                .ok_or_else(|| StageError::Config(format!("unknown mixture `{preset}`")))?;
            spec.allow_short = *allow_short;
            if cli.dry_run {
                println!("mix plan for `{preset}` (target {}):", spec.target_size);
                let quotas = flames_core::mixer::apportion(
                    spec.target_size,
                    &spec.sources.iter().map(|s| s.weight).collect::<Vec<_>>(),
                );
                for (source, quota) in spec.sources.iter().zip(quotas) {
                    println!(
                        "  {} <- {} records from {}",
                        source.name,
                        quota,
                        source.dataset_path.display()
                    );
                }
                return Ok(0);
            }
            let manifest = pipeline::run_mix(&cfg, &spec)?;
            println!("mix `{preset}` complete:");
            print_counts(&manifest);
        }
        Command::Eval {
            bench,
            path,
            endpoint,
        } => {
            if let Some(endpoint) = endpoint {
                cfg.roles.eval = endpoint.clone();
            }
            if cli.dry_run {
                println!("eval plan: benchmark `{bench}` from {}", path.display());
                return Ok(0);
            }
            let (_, report) = pipeline::run_eval(&cfg, bench, path)?;
            println!("eval `{bench}`: accuracy {:.4}", report.accuracy);
            for (subset, accuracy) in &report.subsets {
                println!("  subset {subset}: {accuracy:.4}");
            }
        }
        Command::Stats { input } => {
            let stats = pipeline::run_stats(&cfg, input)?;
            println!("{}", serde_json::to_string_pretty(&stats)?);
        }
        Command::AnswersCheck { action } => match action {
            AnswersAction::Extract { text } => match extract_answer(text) {
                Some(answer) => println!("{answer}"),
                None => println!("(no answer found)"),
            },
            AnswersAction::Normalize { raw } => {
                let canonical = normalize(raw);
                println!("{canonical}");
            }
            AnswersAction::Compare { a, b } => {
                let equal = answers_equal(&normalize(a), &normalize(b));
                println!("{equal}");
            }
        },
        Command::SelectCheckpoint { scores } => {
            let values = flames_core::jsonl::read_values(scores)
                .map_err(|e| StageError::Config(e.to_string()))?;
            let mut parsed: Vec<CheckpointScore> = Vec::new();
            for value in values {
                parsed.push(
                    serde_json::from_value(value)
                        .context("checkpoint score records need {checkpoint_id, gsm8k, math}")?,
                );
            }
            let best = flames_core::evalharness::select_checkpoint(&parsed)
                .map_err(|e| StageError::Config(e.to_string()))?;
            println!("{best}");
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    // SIGINT stops LLM-bound stages between unit commits; flushed JSONL
    // prefixes and progress sidecars make the rerun resume cleanly.
    let flag = Arc::new(AtomicBool::new(false));
    INTERRUPT_FLAG.set(Arc::clone(&flag)).ok();
    pipeline::install_cancel_flag(flag);
    unsafe {
        libc::signal(libc::SIGINT, on_sigint as *const () as libc::sighandler_t);
    }

    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(error) => {
            eprintln!("error: {error:#}");
            let code = error
                .downcast_ref::<StageError>()
                .map(StageError::exit_code)
                .unwrap_or(1);
            ExitCode::from(code as u8)
        }
    }
}
