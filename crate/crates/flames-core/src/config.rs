//! Declarative pipeline configuration (TOML file, flag-overridable).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::gateway::EndpointConfig;
use crate::mixer::{MixtureSource, MixtureSpec};
use crate::model::{content_id, AgentKind};
use crate::quality::StrategyKind;

/// Chain-of-thought system prompt used for solution synthesis and greedy
/// evaluation unless the config overrides it.
pub const DEFAULT_SYSTEM_PROMPT: &str =
    "Please reason step by step, and put your final answer within \\boxed{}.";

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SeedsConfig {
    #[serde(default)]
    pub gsm8k_path: Option<PathBuf>,
    #[serde(default)]
    pub math_path: Option<PathBuf>,
}

/// Which configured endpoint serves each pipeline role.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RolesConfig {
    #[serde(default = "default_endpoint_name")]
    pub problem: String,
    #[serde(default = "default_endpoint_name")]
    pub solution: String,
    #[serde(default = "default_endpoint_name")]
    pub judge: String,
    #[serde(default = "default_endpoint_name")]
    pub reward: String,
    #[serde(default = "default_endpoint_name")]
    pub eval: String,
}

fn default_endpoint_name() -> String {
    "mock".to_string()
}

impl Default for RolesConfig {
    fn default() -> Self {
        RolesConfig {
            problem: default_endpoint_name(),
            solution: default_endpoint_name(),
            judge: default_endpoint_name(),
            reward: default_endpoint_name(),
            eval: default_endpoint_name(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentConfig {
    pub kind: AgentKind,
    pub quota: usize,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    /// template id -> file path replacing the built-in template.
    #[serde(default)]
    pub template_overrides: BTreeMap<String, PathBuf>,
}

fn default_rounds() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QualityConfig {
    #[serde(default = "default_ngram_size")]
    pub ngram_size: usize,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default = "default_filter")]
    pub filter: StrategyKind,
    #[serde(default = "default_k_solutions")]
    pub k_solutions: usize,
    #[serde(default = "default_majority_min")]
    pub majority_min: usize,
}

fn default_ngram_size() -> usize {
    crate::quality::DEFAULT_NGRAM_SIZE
}

fn default_threshold() -> f64 {
    crate::quality::DEFAULT_CONTAMINATION_THRESHOLD
}

fn default_filter() -> StrategyKind {
    StrategyKind::MajorityPlusFirst
}

fn default_k_solutions() -> usize {
    3
}

fn default_majority_min() -> usize {
    2
}

impl Default for QualityConfig {
    fn default() -> Self {
        QualityConfig {
            ngram_size: default_ngram_size(),
            threshold: default_threshold(),
            filter: default_filter(),
            k_solutions: default_k_solutions(),
            majority_min: default_majority_min(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DecontaminationConfig {
    #[serde(default)]
    pub test_sets: Vec<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptedStageConfig {
    #[serde(default = "default_system_prompt")]
    pub system_prompt: String,
}

fn default_system_prompt() -> String {
    DEFAULT_SYSTEM_PROMPT.to_string()
}

impl Default for PromptedStageConfig {
    fn default() -> Self {
        PromptedStageConfig {
            system_prompt: default_system_prompt(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixtureSourceConfig {
    pub name: String,
    /// Defaults to `<output_dir>/filter/<name>.jsonl`.
    #[serde(default)]
    pub dataset_path: Option<PathBuf>,
    pub weight: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixtureConfig {
    pub name: String,
    pub target_size: usize,
    pub sources: Vec<MixtureSourceConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub name: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    #[serde(default)]
    pub rng_seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    /// Stage fails (exit 3) when gateway errors exceed this fraction of
    /// issued requests.
    #[serde(default = "default_max_error_rate")]
    pub max_error_rate: f64,
    /// Seed-cycling passes an agent may take to reach its quota.
    #[serde(default = "default_max_passes")]
    pub max_passes: usize,
    #[serde(default)]
    pub seeds: SeedsConfig,
    #[serde(default)]
    pub endpoints: Vec<EndpointConfig>,
    #[serde(default)]
    pub roles: RolesConfig,
    #[serde(default)]
    pub agents: Vec<AgentConfig>,
    #[serde(default)]
    pub quality: QualityConfig,
    #[serde(default)]
    pub decontamination: DecontaminationConfig,
    #[serde(default)]
    pub taxonomy_path: Option<PathBuf>,
    #[serde(default)]
    pub solve: PromptedStageConfig,
    #[serde(default)]
    pub eval: PromptedStageConfig,
    #[serde(default)]
    pub mixtures: Vec<MixtureConfig>,
    #[serde(default)]
    pub benchmarks: Vec<BenchmarkConfig>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_max_in_flight() -> usize {
    8
}

fn default_max_error_rate() -> f64 {
    0.5
}

fn default_max_passes() -> usize {
    4
}

impl Default for PipelineConfig {
    fn default() -> Self {
        toml::from_str("").expect("empty config deserializes to defaults")
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<PipelineConfig, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn load(path: &Path) -> Result<PipelineConfig, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        PipelineConfig::from_toml(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    /// Stable digest of the fully-resolved config (after flag overrides).
    pub fn digest(&self) -> String {
        content_id(&serde_json::to_string(self).expect("config serializes"))
    }

    pub fn endpoint(&self, name: &str) -> Option<&EndpointConfig> {
        self.endpoints.iter().find(|e| e.name == name)
    }

    pub fn agent(&self, kind: AgentKind) -> Option<&AgentConfig> {
        self.agents.iter().find(|a| a.kind == kind)
    }

    /// Resolves a configured mixture (or a shipped preset) into a concrete
    /// spec, defaulting source paths to the filter stage outputs.
    pub fn mixture_spec(&self, name: &str, target_override: Option<usize>) -> Option<MixtureSpec> {
        let (target_size, sources) = if let Some(m) = self.mixtures.iter().find(|m| m.name == name)
        {
            let sources = m
                .sources
                .iter()
                .map(|s| MixtureSource {
                    name: s.name.clone(),
                    dataset_path: s
                        .dataset_path
                        .clone()
                        .unwrap_or_else(|| self.filter_output(&s.name)),
                    weight: s.weight,
                })
                .collect();
            (m.target_size, sources)
        } else {
            let target = preset_target(name)?;
            let sources = preset_blend()
                .iter()
                .map(|(agent, weight)| MixtureSource {
                    name: agent.name().to_string(),
                    dataset_path: self.filter_output(agent.name()),
                    weight: *weight,
                })
                .collect();
            (target, sources)
        };
        Some(MixtureSpec {
            name: name.to_string(),
            sources,
            target_size: target_override.unwrap_or(target_size),
            rng_seed: self.rng_seed,
            allow_short: false,
        })
    }

    pub fn generate_output(&self, agent: &str) -> PathBuf {
        self.output_dir
            .join("generate")
            .join(format!("{agent}.jsonl"))
    }

    pub fn decontaminate_output(&self, agent: &str) -> PathBuf {
        self.output_dir
            .join("decontaminate")
            .join(format!("{agent}.jsonl"))
    }

    pub fn solve_output(&self, agent: &str) -> PathBuf {
        self.output_dir.join("solve").join(format!("{agent}.jsonl"))
    }

    pub fn filter_output(&self, agent: &str) -> PathBuf {
        self.output_dir
            .join("filter")
            .join(format!("{agent}.jsonl"))
    }

    pub fn mix_output(&self, mixture: &str) -> PathBuf {
        self.output_dir.join("mix").join(format!("{mixture}.jsonl"))
    }
}

/// The blend behind the shipped mixture presets.
pub fn preset_blend() -> &'static [(AgentKind, f64)] {
    &[
        (AgentKind::SuggesterEditor, 0.50),
        (AgentKind::Iqc, 0.20),
        (AgentKind::TaxonomyKeyConcepts, 0.20),
        (AgentKind::DistractionInsertion, 0.10),
    ]
}

/// Target sizes of the shipped presets.
pub fn preset_target(name: &str) -> Option<usize> {
    match name {
        "flames_small" => Some(150_000),
        "flames_large" => Some(1_000_000),
        "flames_xl" => Some(1_500_000),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn test_defaults_from_empty_config() {
        let cfg = PipelineConfig::default();
        assert_eq!(cfg.quality.ngram_size, 8);
        assert_eq!(cfg.quality.threshold, 0.95);
        assert_eq!(cfg.quality.k_solutions, 3);
        assert_eq!(cfg.max_in_flight, 8);
        assert_eq!(cfg.solve.system_prompt, DEFAULT_SYSTEM_PROMPT);
    }

    #[test]
    fn test_parse_full_config() {
        let cfg = PipelineConfig::from_toml(
            r#"
            rng_seed = 7
            output_dir = "work"

            [seeds]
            gsm8k_path = "g.jsonl"
            math_path = "m.jsonl"

            [[endpoints]]
            name = "mock"
            kind = "mock"
            mock_mode = "hash_fallback"

            [[agents]]
            kind = "suggester_editor"
            quota = 20
            rounds = 2

            [quality]
            filter = "first"

            [[mixtures]]
            name = "custom"
            target_size = 10
            [[mixtures.sources]]
            name = "suggester_editor"
            weight = 1.0
            "#,
        )
        .unwrap();
        assert_eq!(cfg.rng_seed, 7);
        assert_eq!(cfg.agents[0].kind, AgentKind::SuggesterEditor);
        assert_eq!(cfg.agents[0].rounds, 2);
        assert_eq!(cfg.quality.filter, StrategyKind::First);
        let spec = cfg.mixture_spec("custom", None).unwrap();
        assert_eq!(spec.target_size, 10);
        assert_eq!(
            spec.sources[0].dataset_path,
            PathBuf::from("work/filter/suggester_editor.jsonl")
        );
    }

    #[test]
    fn test_preset_mixtures() {
        let cfg = PipelineConfig::default();
        let spec = cfg.mixture_spec("flames_small", None).unwrap();
        assert_eq!(spec.target_size, 150_000);
        let weights: Vec<f64> = spec.sources.iter().map(|s| s.weight).collect();
        assert_eq!(weights, vec![0.50, 0.20, 0.20, 0.10]);
        assert_eq!(
            cfg.mixture_spec("flames_large", None).unwrap().target_size,
            1_000_000
        );
        assert_eq!(
            cfg.mixture_spec("flames_xl", None).unwrap().target_size,
            1_500_000
        );
        assert_eq!(
            cfg.mixture_spec("flames_small", Some(1000))
                .unwrap()
                .target_size,
            1000
        );
        assert!(cfg.mixture_spec("unknown", None).is_none());
    }

    #[test]
    fn test_digest_stable_and_override_sensitive() {
        let a = PipelineConfig::default();
        let b = PipelineConfig::default();
        assert_eq!(a.digest(), b.digest());
        let mut c = PipelineConfig::default();
        c.rng_seed = 99;
        assert_ne!(a.digest(), c.digest());
    }
}
