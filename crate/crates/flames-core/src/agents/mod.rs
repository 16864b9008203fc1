//! The twelve problem-synthesis agents as prompt plans: single- or
//! multi-step LLM orchestrations, plus FOBAR's purely templatic transform.
//!
//! A plan's first step is fully rendered at build time; later steps keep
//! open slots (`{keyconcept}`, `{suggestions}`, `{statement}`) that are
//! threaded in from earlier step outputs during execution. Completions that
//! fail parsing are dropped and counted, never emitted and never retried.

pub mod fobar;
pub mod taxonomy;
pub mod templates;

pub use fobar::{enumerate_fobar_variants, fobar_transform, numeric_occurrences};
pub use taxonomy::{default_taxonomy, load_taxonomy, Taxonomy, TaxonomySubject};
pub use templates::TemplateStore;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{AgentError, GatewayError};
use crate::gateway::{ChatRequest, Completion, Gateway, Message, SamplingConfig};
use crate::model::{content_id, AgentKind, GenerationStep, SeedProblem, SyntheticProblem};

/// Exemplars sampled into a few_shot prompt.
pub const FEW_SHOT_EXAMPLES: usize = 4;

/// Inputs for one agent invocation. Exactly the fields the agent kind
/// requires must be present.
#[derive(Debug, Clone)]
pub struct SeedContext {
    pub seed: Option<SeedProblem>,
    pub few_shot_pool: Option<Vec<SeedProblem>>,
    pub taxonomy_subject: Option<String>,
    pub rng_seed: u64,
}

impl SeedContext {
    pub fn seeded(seed: SeedProblem, rng_seed: u64) -> Self {
        SeedContext {
            seed: Some(seed),
            few_shot_pool: None,
            taxonomy_subject: None,
            rng_seed,
        }
    }

    pub fn few_shot(pool: Vec<SeedProblem>, rng_seed: u64) -> Self {
        SeedContext {
            seed: None,
            few_shot_pool: Some(pool),
            taxonomy_subject: None,
            rng_seed,
        }
    }

    pub fn subject(subject: impl Into<String>, rng_seed: u64) -> Self {
        SeedContext {
            seed: None,
            few_shot_pool: None,
            taxonomy_subject: Some(subject.into()),
            rng_seed,
        }
    }

    pub fn empty(rng_seed: u64) -> Self {
        SeedContext {
            seed: None,
            few_shot_pool: None,
            taxonomy_subject: None,
            rng_seed,
        }
    }
}

/// How a step's completion is turned into output text.
#[derive(Debug, Clone, PartialEq)]
pub enum ParseRule {
    WholeText,
    /// Text after the last occurrence of the marker; the whole completion
    /// when the marker is absent.
    AfterMarker(String),
    /// One item per line, list bullets and numbering stripped.
    KeyConceptList,
    YesNo,
}

impl ParseRule {
    /// Parses a completion; `None` means the completion is dropped (and
    /// counted as a parse failure).
    pub fn apply(&self, completion: &str) -> Option<Vec<String>> {
        match self {
            ParseRule::WholeText => {
                let text = completion.trim();
                if text.is_empty() {
                    None
                } else {
                    Some(vec![text.to_string()])
                }
            }
            ParseRule::AfterMarker(marker) => {
                let text = match completion.rfind(marker.as_str()) {
                    Some(pos) => &completion[pos + marker.len()..],
                    None => completion,
                };
                let text = text.trim();
                if text.is_empty() {
                    None
                } else {
                    Some(vec![text.to_string()])
                }
            }
            ParseRule::KeyConceptList => {
                let items: Vec<String> = completion
                    .lines()
                    .map(strip_list_prefix)
                    .filter(|l| !l.is_empty())
                    .map(str::to_string)
                    .collect();
                if items.is_empty() {
                    None
                } else {
                    Some(items)
                }
            }
            ParseRule::YesNo => crate::quality::parse_final_yes_no(completion)
                .map(|v| vec![if v { "yes" } else { "no" }.to_string()]),
        }
    }
}

fn strip_list_prefix(line: &str) -> &str {
    let line = line.trim();
    let line = line
        .strip_prefix('-')
        .or_else(|| line.strip_prefix('*'))
        .or_else(|| line.strip_prefix('•'))
        .unwrap_or(line);
    // Numbered prefixes like "3." or "3)".
    let trimmed = line.trim_start();
    if let Some(pos) = trimmed.find(['.', ')']) {
        if pos > 0 && trimmed[..pos].chars().all(|c| c.is_ascii_digit()) {
            return trimmed[pos + 1..].trim();
        }
    }
    trimmed
}

/// One step of a prompt plan.
#[derive(Debug, Clone)]
pub struct PlanStep {
    pub template_id: String,
    /// Build-time variables substituted; step-output slots may remain open.
    pub rendered_prompt: String,
    pub parse: ParseRule,
    /// QFT sends the prompt as the system message with no user messages.
    pub system_only: bool,
}

/// An agent's round-1 plan. Iterative agents (suggester_editor, iqc) append
/// further rounds during execution, re-seeded with the previous round's
/// output problem.
#[derive(Debug, Clone)]
pub struct PromptPlan {
    pub agent: AgentKind,
    pub steps: Vec<PlanStep>,
}

fn missing(agent: AgentKind, field: &'static str) -> AgentError {
    AgentError::MissingContext {
        agent: agent.name().to_string(),
        field,
    }
}

fn unexpected(agent: AgentKind, field: &'static str) -> AgentError {
    AgentError::UnexpectedContext {
        agent: agent.name().to_string(),
        field,
    }
}

fn check_context(agent: AgentKind, ctx: &SeedContext) -> Result<(), AgentError> {
    let needs_seed = !matches!(
        agent,
        AgentKind::FewShot | AgentKind::Qft | AgentKind::TaxonomyKeyConcepts
    );
    let needs_pool = agent == AgentKind::FewShot;
    let needs_subject = agent == AgentKind::TaxonomyKeyConcepts;

    match (needs_seed, ctx.seed.is_some()) {
        (true, false) => return Err(missing(agent, "seed")),
        (false, true) => return Err(unexpected(agent, "seed")),
        _ => {}
    }
    match (needs_pool, ctx.few_shot_pool.is_some()) {
        (true, false) => return Err(missing(agent, "few_shot_pool")),
        (false, true) => return Err(unexpected(agent, "few_shot_pool")),
        _ => {}
    }
    if needs_pool && ctx.few_shot_pool.as_ref().is_some_and(|p| p.is_empty()) {
        return Err(missing(agent, "few_shot_pool"));
    }
    match (needs_subject, ctx.taxonomy_subject.is_some()) {
        (true, false) => return Err(missing(agent, "taxonomy_subject")),
        (false, true) => return Err(unexpected(agent, "taxonomy_subject")),
        _ => {}
    }
    Ok(())
}

fn vars_from(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
    pairs
        .iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

fn step(
    store: &TemplateStore,
    template_id: &str,
    vars: &BTreeMap<String, String>,
    parse: ParseRule,
) -> Result<PlanStep, AgentError> {
    Ok(PlanStep {
        template_id: template_id.to_string(),
        rendered_prompt: store.render_partial(template_id, vars)?,
        parse,
        system_only: false,
    })
}

fn after(marker: &str) -> ParseRule {
    ParseRule::AfterMarker(marker.to_string())
}

/// Builds the round-1 prompt plan for an agent. FOBAR has no plan (it is a
/// templatic transform handled by [`fobar_transform`]).
pub fn build_plan(
    agent: AgentKind,
    ctx: &SeedContext,
    store: &TemplateStore,
) -> Result<PromptPlan, AgentError> {
    check_context(agent, ctx)?;
    let seed = ctx.seed.as_ref();
    let problem = seed.map(|s| s.problem.as_str()).unwrap_or("");
    let solution = seed.map(|s| s.solution.as_str()).unwrap_or("");
    let answer = seed.map(|s| s.answer.as_str()).unwrap_or("");

    let steps = match agent {
        AgentKind::FewShot => {
            let pool = ctx.few_shot_pool.as_ref().expect("checked");
            let mut rng = ChaCha8Rng::seed_from_u64(ctx.rng_seed);
            let count = FEW_SHOT_EXAMPLES.min(pool.len());
            let picked = rand::seq::index::sample(&mut rng, pool.len(), count);
            let examples = picked
                .iter()
                .map(|i| format!("Problem : {}", pool[i].problem))
                .collect::<Vec<_>>()
                .join("\n\n");
            vec![step(
                store,
                "few_shot",
                &vars_from(&[("examples", &examples)]),
                after("New Problem:"),
            )?]
        }
        AgentKind::Paraphrase => vec![step(
            store,
            "paraphrase",
            &vars_from(&[("problem", problem)]),
            after("Rephrase the above question:"),
        )?],
        AgentKind::KeyConcepts => vec![
            step(
                store,
                "problem_to_key_concepts",
                &vars_from(&[("problem", problem), ("solution", solution)]),
                after("Key Concept :"),
            )?,
            step(
                store,
                "key_concepts_problem",
                &vars_from(&[]),
                after("New Problem :"),
            )?,
        ],
        AgentKind::SeededKeyConcepts => vec![
            step(
                store,
                "problem_to_key_concepts",
                &vars_from(&[("problem", problem), ("solution", solution)]),
                after("Key Concept :"),
            )?,
            step(
                store,
                "seeded_key_concepts_problem",
                &vars_from(&[("problem", problem)]),
                after("New Problem :"),
            )?,
        ],
        AgentKind::SuggesterEditor => suggester_editor_round(store, problem)?,
        AgentKind::Iqc => vec![iqc_step(store, problem)?],
        AgentKind::AskMeAnything => vec![
            step(
                store,
                "ask_me_anything_statement",
                &vars_from(&[("problem", problem), ("solution", solution)]),
                after("Statement:"),
            )?,
            step(
                store,
                "ask_me_anything_question",
                &vars_from(&[]),
                after("New Problem:"),
            )?,
        ],
        AgentKind::SelfVerification => vec![
            step(
                store,
                "self_verification_statement",
                &vars_from(&[("problem", problem), ("answer", answer)]),
                after("Statement:"),
            )?,
            step(
                store,
                "self_verification_question",
                &vars_from(&[]),
                after("New Problem:"),
            )?,
        ],
        AgentKind::Qft => {
            let mut s = step(store, "qft_system", &vars_from(&[]), ParseRule::WholeText)?;
            s.system_only = true;
            vec![s]
        }
        AgentKind::TaxonomyKeyConcepts => {
            let subject = ctx.taxonomy_subject.as_deref().expect("checked");
            vec![
                step(
                    store,
                    "taxonomy_concepts",
                    &vars_from(&[("subject", subject)]),
                    ParseRule::KeyConceptList,
                )?,
                step(
                    store,
                    "key_concepts_problem",
                    &vars_from(&[]),
                    after("New Problem :"),
                )?,
            ]
        }
        AgentKind::DistractionInsertion => vec![step(
            store,
            "distraction_insertion",
            &vars_from(&[("problem", problem), ("solution", solution)]),
            after("New Problem:"),
        )?],
        AgentKind::Fobar => {
            return Err(AgentError::TemplateError {
                template_id: "fobar".into(),
                message: "fobar is a templatic transform with no prompt plan".into(),
            })
        }
    };
    Ok(PromptPlan { agent, steps })
}

fn suggester_editor_round(
    store: &TemplateStore,
    problem: &str,
) -> Result<Vec<PlanStep>, AgentError> {
    Ok(vec![
        step(
            store,
            "suggester",
            &vars_from(&[("problem", problem)]),
            after("Suggestions:"),
        )?,
        step(
            store,
            "editor",
            &vars_from(&[("problem", problem)]),
            after("New Problem:"),
        )?,
    ])
}

fn iqc_step(store: &TemplateStore, problem: &str) -> Result<PlanStep, AgentError> {
    step(
        store,
        "iqc",
        &vars_from(&[("problem", problem)]),
        after("New Problem:"),
    )
}

/// Outcome counters for one agent run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AgentRunReport {
    pub requested: usize,
    pub produced: usize,
    /// Seed permutations ran out (FOBAR and self_verification only).
    pub exhausted: bool,
    /// Failure counters keyed `parse:<template>` / `gateway:<template>` /
    /// `template:<template>`.
    pub per_step_failures: BTreeMap<String, usize>,
}

impl AgentRunReport {
    pub fn total_failures(&self) -> usize {
        self.per_step_failures.values().sum()
    }
}

struct Produced {
    text: String,
    trace: Vec<GenerationStep>,
}

/// One in-flight agent invocation, driven step by step. Sequential within
/// the task; the stage runner batches many tasks through `complete_many`.
pub struct AgentTask {
    agent: AgentKind,
    seed_ids: Vec<String>,
    rounds: usize,
    round: usize,
    steps: Vec<PlanStep>,
    cursor: usize,
    vars: BTreeMap<String, String>,
    trace: Vec<GenerationStep>,
    products: Vec<Produced>,
    failed: bool,
    counters: BTreeMap<String, usize>,
    endpoint: String,
    sampling: SamplingConfig,
    tag_prefix: String,
    store: TemplateStore,
    pending_prompt: Option<String>,
}

impl AgentTask {
    pub fn new(
        agent: AgentKind,
        ctx: &SeedContext,
        rounds: usize,
        store: &TemplateStore,
        endpoint: &str,
        sampling: &SamplingConfig,
        tag_prefix: &str,
    ) -> Result<Self, AgentError> {
        assert!(rounds >= 1, "rounds must be at least 1");
        let plan = build_plan(agent, ctx, store)?;
        // Rounds beyond 1 are only meaningful for the iterative agents.
        let rounds = if matches!(agent, AgentKind::SuggesterEditor | AgentKind::Iqc) {
            rounds
        } else {
            1
        };
        let seed_ids = match agent {
            AgentKind::FewShot => {
                // Provenance covers the sampled exemplars; replay the same
                // seeded choice the plan builder made.
                let pool = ctx.few_shot_pool.as_ref().expect("checked by build_plan");
                let mut rng = ChaCha8Rng::seed_from_u64(ctx.rng_seed);
                let count = FEW_SHOT_EXAMPLES.min(pool.len());
                rand::seq::index::sample(&mut rng, pool.len(), count)
                    .iter()
                    .map(|i| pool[i].id.clone())
                    .collect()
            }
            _ if agent.is_unseeded() => vec![],
            _ => vec![ctx.seed.as_ref().expect("checked by build_plan").id.clone()],
        };
        Ok(AgentTask {
            agent,
            seed_ids,
            rounds,
            round: 0,
            steps: plan.steps,
            cursor: 0,
            vars: BTreeMap::new(),
            trace: Vec::new(),
            products: Vec::new(),
            failed: false,
            counters: BTreeMap::new(),
            endpoint: endpoint.to_string(),
            sampling: sampling.clone(),
            tag_prefix: tag_prefix.to_string(),
            store: store.clone(),
            pending_prompt: None,
        })
    }

    pub fn is_done(&self) -> bool {
        self.failed || self.cursor >= self.steps.len()
    }

    /// The request for the current step, or `None` when the task is done.
    pub fn next_request(&mut self) -> Option<ChatRequest> {
        if self.is_done() {
            return None;
        }
        let step = &self.steps[self.cursor];
        let prompt = match templates::finalize_prompt(
            &step.template_id,
            &step.rendered_prompt,
            &self.vars,
        ) {
            Ok(p) => p,
            Err(_) => {
                *self
                    .counters
                    .entry(format!("template:{}", step.template_id))
                    .or_insert(0) += 1;
                self.failed = true;
                return None;
            }
        };
        let request = ChatRequest {
            endpoint_name: self.endpoint.clone(),
            system: step.system_only.then(|| prompt.clone()),
            messages: if step.system_only {
                vec![]
            } else {
                vec![Message::user(prompt.clone())]
            },
            sampling: self.sampling.clone(),
            request_tag: format!("{}/s{}", self.tag_prefix, self.cursor),
        };
        self.pending_prompt = Some(prompt);
        Some(request)
    }

    fn bump(&mut self, key: String) {
        *self.counters.entry(key).or_insert(0) += 1;
    }

    /// Consumes the completion for the current step and advances the plan.
    pub fn feed(&mut self, result: Result<Completion, GatewayError>) {
        debug_assert!(!self.is_done());
        let template_id = self.steps[self.cursor].template_id.clone();
        let prompt = self.pending_prompt.take().unwrap_or_default();

        let completion = match result {
            Ok(c) => c,
            Err(_) => {
                self.bump(format!("gateway:{template_id}"));
                self.failed = true;
                return;
            }
        };
        self.trace.push(GenerationStep {
            template_id: template_id.clone(),
            prompt_digest: content_id(&prompt),
            completion_digest: content_id(&completion.text),
        });

        let outputs = match self.steps[self.cursor].parse.apply(&completion.text) {
            Some(outputs) => outputs,
            None => {
                self.bump(format!("parse:{template_id}"));
                // A failed fan-out step only loses that concept; anything
                // else ends the task (earlier rounds' products are kept).
                if self.agent == AgentKind::TaxonomyKeyConcepts && self.cursor > 0 {
                    self.cursor += 1;
                } else {
                    self.failed = true;
                }
                return;
            }
        };
        self.advance(outputs);
    }

    fn advance(&mut self, outputs: Vec<String>) {
        let out = outputs[0].clone();
        match self.agent {
            AgentKind::FewShot
            | AgentKind::Paraphrase
            | AgentKind::Qft
            | AgentKind::DistractionInsertion => {
                self.emit(out);
                self.cursor += 1;
            }
            AgentKind::KeyConcepts | AgentKind::SeededKeyConcepts => {
                if self.cursor == 0 {
                    self.vars.insert("keyconcept".into(), out);
                } else {
                    self.emit(out);
                }
                self.cursor += 1;
            }
            AgentKind::AskMeAnything | AgentKind::SelfVerification => {
                if self.cursor == 0 {
                    self.vars.insert("statement".into(), out);
                } else {
                    self.emit(out);
                }
                self.cursor += 1;
            }
            AgentKind::SuggesterEditor => {
                if (self.cursor - self.round * 2) == 0 {
                    self.vars.insert("suggestions".into(), out);
                    self.cursor += 1;
                } else {
                    self.emit(out.clone());
                    self.cursor += 1;
                    self.round += 1;
                    if self.round < self.rounds {
                        self.vars.remove("suggestions");
                        match suggester_editor_round(&self.store, &out) {
                            Ok(steps) => self.steps.extend(steps),
                            Err(_) => {
                                self.bump("template:suggester".into());
                                self.failed = true;
                            }
                        }
                    }
                }
            }
            AgentKind::Iqc => {
                self.emit(out.clone());
                self.cursor += 1;
                self.round += 1;
                if self.round < self.rounds {
                    match iqc_step(&self.store, &out) {
                        Ok(step) => self.steps.push(step),
                        Err(_) => {
                            self.bump("template:iqc".into());
                            self.failed = true;
                        }
                    }
                }
            }
            AgentKind::TaxonomyKeyConcepts => {
                if self.cursor == 0 {
                    // Fan the deferred problem step out, one per concept.
                    let proto = self.steps[1].clone();
                    self.steps.truncate(1);
                    for concept in outputs {
                        let mut vars = BTreeMap::new();
                        vars.insert("keyconcept".to_string(), concept);
                        let mut fanned = proto.clone();
                        fanned.rendered_prompt = match templates::finalize_prompt(
                            &proto.template_id,
                            &proto.rendered_prompt,
                            &vars,
                        ) {
                            Ok(p) => p,
                            Err(_) => {
                                self.bump(format!("template:{}", proto.template_id));
                                continue;
                            }
                        };
                        self.steps.push(fanned);
                    }
                    self.cursor += 1;
                } else {
                    // Trace is the concept-list step plus this fan-out step.
                    let trace = vec![
                        self.trace[0].clone(),
                        self.trace.last().expect("step just recorded").clone(),
                    ];
                    self.products.push(Produced { text: out, trace });
                    self.cursor += 1;
                }
            }
            AgentKind::Fobar => unreachable!("fobar has no prompt plan"),
        }
    }

    fn emit(&mut self, text: String) {
        self.products.push(Produced {
            text,
            trace: self.trace.clone(),
        });
    }

    /// Expected product count for this task.
    pub fn requested(&self) -> usize {
        match self.agent {
            AgentKind::TaxonomyKeyConcepts if self.cursor > 0 => self.steps.len() - 1,
            AgentKind::SuggesterEditor | AgentKind::Iqc => self.rounds,
            _ => 1,
        }
    }

    /// Converts products into synthetic problems, numbering them from
    /// `first_step`, and folds counters into the report.
    pub fn collect(self, first_step: u64, report: &mut AgentRunReport) -> Vec<SyntheticProblem> {
        report.requested += self.requested();
        report.produced += self.products.len();
        for (key, n) in self.counters {
            *report.per_step_failures.entry(key).or_insert(0) += n;
        }
        self.products
            .into_iter()
            .enumerate()
            .map(|(i, p)| {
                SyntheticProblem::new(
                    p.text,
                    self.agent,
                    self.seed_ids.clone(),
                    p.trace,
                    first_step + i as u64,
                )
            })
            .collect()
    }
}

/// Advances many tasks in lockstep waves, delegating all parallelism to
/// `complete_many`. Each wave issues at most one request per task. Returns
/// the number of requests issued.
pub fn drive_tasks(gateway: &Gateway, tasks: &mut [AgentTask], max_in_flight: usize) -> usize {
    let mut issued = 0;
    loop {
        let mut wave: Vec<(usize, ChatRequest)> = Vec::new();
        for (i, task) in tasks.iter_mut().enumerate() {
            if let Some(req) = task.next_request() {
                wave.push((i, req));
            }
        }
        if wave.is_empty() {
            return issued;
        }
        issued += wave.len();
        let requests: Vec<ChatRequest> = wave.iter().map(|(_, r)| r.clone()).collect();
        let results = gateway.complete_many(&requests, max_in_flight);
        for ((i, _), result) in wave.into_iter().zip(results) {
            tasks[i].feed(result);
        }
    }
}

/// Runs one agent invocation to completion against the gateway.
///
/// FOBAR never calls the gateway: it applies [`fobar_transform`] directly.
#[allow(clippy::too_many_arguments)]
pub fn run_agent(
    agent: AgentKind,
    ctx: &SeedContext,
    gateway: &Gateway,
    store: &TemplateStore,
    rounds: usize,
    endpoint: &str,
    sampling: &SamplingConfig,
    tag_prefix: &str,
) -> Result<(Vec<SyntheticProblem>, AgentRunReport), AgentError> {
    assert!(rounds >= 1, "rounds must be at least 1");
    let mut report = AgentRunReport::default();

    if agent == AgentKind::Fobar {
        check_context(agent, ctx)?;
        let seed = ctx.seed.as_ref().expect("checked");
        report.requested = 1;
        let problems: Vec<SyntheticProblem> =
            fobar_transform(seed, ctx.rng_seed).into_iter().collect();
        report.produced = problems.len();
        return Ok((problems, report));
    }

    let mut task = AgentTask::new(agent, ctx, rounds, store, endpoint, sampling, tag_prefix)?;
    while let Some(request) = task.next_request() {
        let result = gateway.complete(&request);
        task.feed(result);
    }
    let problems = task.collect(0, &mut report);
    Ok((problems, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{EndpointConfig, MockMode};
    use crate::model::Source;

    fn seed(id: &str, problem: &str, solution: &str, answer: &str) -> SeedProblem {
        SeedProblem {
            id: id.into(),
            source: Source::Gsm8k,
            problem: problem.into(),
            solution: solution.into(),
            answer: answer.into(),
            level: None,
            subject: None,
            extras: Default::default(),
        }
    }

    fn strict_gateway(scripts: &[(&str, &str)]) -> Gateway {
        let mut cfg = EndpointConfig::mock("mock");
        cfg.mock_mode = MockMode::Strict;
        let gateway = Gateway::new(&[cfg]).unwrap();
        for (tag, text) in scripts {
            gateway.mock("mock").unwrap().script(tag, text);
        }
        gateway
    }

    fn run(
        agent: AgentKind,
        ctx: &SeedContext,
        gateway: &Gateway,
        rounds: usize,
    ) -> (Vec<SyntheticProblem>, AgentRunReport) {
        run_agent(
            agent,
            ctx,
            gateway,
            &TemplateStore::new(),
            rounds,
            "mock",
            &SamplingConfig::synthesis(),
            "t",
        )
        .unwrap()
    }

    #[test]
    fn test_distraction_plan_carries_seed_verbatim() {
        let ctx = SeedContext::seeded(seed("g1", "Apples cost 3 dollars.", "3 dollars", "3"), 0);
        let plan =
            build_plan(AgentKind::DistractionInsertion, &ctx, &TemplateStore::new()).unwrap();
        assert_eq!(plan.steps.len(), 1);
        let prompt = &plan.steps[0].rendered_prompt;
        assert!(prompt.contains("hide a misleading detail"));
        assert!(prompt.contains("Problem: Apples cost 3 dollars."));
        assert!(prompt.contains("Solution: 3 dollars"));
    }

    #[test]
    fn test_key_concepts_plan_shape() {
        let ctx = SeedContext::seeded(seed("g1", "P?", "S.", "4"), 0);
        let plan = build_plan(AgentKind::KeyConcepts, &ctx, &TemplateStore::new()).unwrap();
        assert_eq!(plan.steps.len(), 2);
        assert!(plan.steps[0].rendered_prompt.ends_with("Key Concept :"));
        assert_eq!(
            plan.steps[0].parse,
            ParseRule::AfterMarker("Key Concept :".into())
        );
        assert!(plan.steps[1].rendered_prompt.contains("{keyconcept}"));
    }

    #[test]
    fn test_qft_plan_is_system_only() {
        let ctx = SeedContext::empty(0);
        let plan = build_plan(AgentKind::Qft, &ctx, &TemplateStore::new()).unwrap();
        assert_eq!(plan.steps.len(), 1);
        assert!(plan.steps[0].system_only);

        let gateway = Gateway::new(&[EndpointConfig::mock("mock")]).unwrap();
        let mut task = AgentTask::new(
            AgentKind::Qft,
            &ctx,
            1,
            &TemplateStore::new(),
            "mock",
            &SamplingConfig::synthesis(),
            "qft-0",
        )
        .unwrap();
        let req = task.next_request().unwrap();
        assert!(req.system.is_some());
        assert!(req.messages.is_empty());
        drop(gateway);
    }

    #[test]
    fn test_context_exactness() {
        let s = seed("g1", "P?", "S.", "4");
        // Missing seed.
        assert!(matches!(
            build_plan(
                AgentKind::Paraphrase,
                &SeedContext::empty(0),
                &TemplateStore::new()
            ),
            Err(AgentError::MissingContext { field: "seed", .. })
        ));
        // Extra seed for QFT.
        assert!(matches!(
            build_plan(
                AgentKind::Qft,
                &SeedContext::seeded(s.clone(), 0),
                &TemplateStore::new()
            ),
            Err(AgentError::UnexpectedContext { field: "seed", .. })
        ));
        // Empty few-shot pool.
        assert!(matches!(
            build_plan(
                AgentKind::FewShot,
                &SeedContext::few_shot(vec![], 0),
                &TemplateStore::new()
            ),
            Err(AgentError::MissingContext {
                field: "few_shot_pool",
                ..
            })
        ));
        // FOBAR has no plan.
        assert!(matches!(
            build_plan(
                AgentKind::Fobar,
                &SeedContext::seeded(s, 0),
                &TemplateStore::new()
            ),
            Err(AgentError::TemplateError { .. })
        ));
    }

    #[test]
    fn test_paraphrase_single_step_passthrough() {
        let gateway = strict_gateway(&[("t/s0", "A reworded problem?")]);
        let ctx = SeedContext::seeded(seed("g1", "P?", "S.", "4"), 0);
        let (problems, report) = run(AgentKind::Paraphrase, &ctx, &gateway, 1);
        assert_eq!(problems.len(), 1);
        assert_eq!(problems[0].problem, "A reworded problem?");
        assert_eq!(problems[0].seed_ids, vec!["g1".to_string()]);
        assert_eq!(problems[0].trace.len(), 1);
        assert_eq!(report.produced, 1);
    }

    #[test]
    fn test_empty_completion_is_parse_failure() {
        let gateway = strict_gateway(&[("t/s0", "")]);
        let ctx = SeedContext::seeded(seed("g1", "P?", "S.", "4"), 0);
        let (problems, report) = run(AgentKind::Paraphrase, &ctx, &gateway, 1);
        assert!(problems.is_empty());
        assert_eq!(report.produced, 0);
        assert_eq!(report.per_step_failures["parse:paraphrase"], 1);
    }

    #[test]
    fn test_suggester_editor_two_rounds() {
        let gateway = strict_gateway(&[
            ("t/s0", "add a second buyer"),
            ("t/s1", "Harder problem one?"),
            ("t/s2", "add a discount"),
            ("t/s3", "Harder problem two?"),
        ]);
        let ctx = SeedContext::seeded(seed("g1", "Base problem?", "S.", "4"), 0);
        let (problems, report) = run(AgentKind::SuggesterEditor, &ctx, &gateway, 2);
        assert_eq!(problems.len(), 2);
        assert_eq!(problems[0].problem, "Harder problem one?");
        assert_eq!(problems[1].problem, "Harder problem two?");
        assert_eq!(problems[0].trace.len(), 2);
        assert_eq!(problems[1].trace.len(), 4);
        assert_eq!(problems[0].created_step, 0);
        assert_eq!(problems[1].created_step, 1);
        assert_eq!(report.requested, 2);
        assert_eq!(report.produced, 2);
        // Round 2 re-seeds with round 1's output problem.
        let mock = gateway.mock("mock").unwrap();
        assert_eq!(mock.call_count("t/s2"), 1);
    }

    #[test]
    fn test_iqc_trace_grows_with_rounds() {
        let gateway = strict_gateway(&[("t/s0", "Composed one?"), ("t/s1", "Composed two?")]);
        let ctx = SeedContext::seeded(seed("g1", "Base?", "S.", "4"), 0);
        let (problems, _) = run(AgentKind::Iqc, &ctx, &gateway, 2);
        assert_eq!(problems.len(), 2);
        assert_eq!(problems[0].trace.len(), 1);
        assert_eq!(problems[1].trace.len(), 2);
    }

    #[test]
    fn test_taxonomy_fans_out_per_concept() {
        let gateway = strict_gateway(&[
            ("t/s0", "1. counting pairs\n2. adding totals"),
            ("t/s1", "Problem about pairs?"),
            ("t/s2", "Problem about totals?"),
        ]);
        let ctx = SeedContext::subject("combinatorics", 0);
        let (problems, report) = run(AgentKind::TaxonomyKeyConcepts, &ctx, &gateway, 1);
        assert_eq!(problems.len(), 2);
        assert!(problems.iter().all(|p| p.seed_ids.is_empty()));
        assert!(problems.iter().all(|p| p.trace.len() == 2));
        assert_eq!(report.requested, 2);
    }

    #[test]
    fn test_mock_runs_are_deterministic() {
        let scripts = [("t/s0", "a concept"), ("t/s1", "Generated problem?")];
        let ctx = SeedContext::seeded(seed("g1", "P?", "S.", "4"), 7);
        let run_once = || {
            let gateway = strict_gateway(&scripts);
            run(AgentKind::KeyConcepts, &ctx, &gateway, 1).0
        };
        assert_eq!(run_once(), run_once());
    }

    #[test]
    fn test_few_shot_provenance_covers_exemplars() {
        let pool: Vec<SeedProblem> = (0..6)
            .map(|i| seed(&format!("g{i}"), &format!("Problem {i}?"), "S.", "1"))
            .collect();
        let gateway = strict_gateway(&[("t/s0", "A new problem?")]);
        let ctx = SeedContext::few_shot(pool, 3);
        let (problems, _) = run(AgentKind::FewShot, &ctx, &gateway, 1);
        assert_eq!(problems.len(), 1);
        assert_eq!(problems[0].seed_ids.len(), FEW_SHOT_EXAMPLES);
        // Deterministic per rng seed.
        let (problems2, _) = {
            let gateway = strict_gateway(&[("t/s0", "A new problem?")]);
            run(AgentKind::FewShot, &ctx, &gateway, 1)
        };
        assert_eq!(problems[0].seed_ids, problems2[0].seed_ids);
    }

    #[test]
    fn test_gateway_error_counted_and_products_kept() {
        let gateway = strict_gateway(&[("t/s0", "add a twist"), ("t/s1", "Round one problem?")]);
        // Round 2 suggester (t/s2) is unscripted -> strict mock error.
        let ctx = SeedContext::seeded(seed("g1", "Base?", "S.", "4"), 0);
        let (problems, report) = run(AgentKind::SuggesterEditor, &ctx, &gateway, 2);
        assert_eq!(problems.len(), 1);
        assert_eq!(report.produced, 1);
        assert_eq!(report.per_step_failures["gateway:suggester"], 1);
    }

    #[test]
    fn test_parse_rules() {
        assert_eq!(ParseRule::WholeText.apply("  x  "), Some(vec!["x".into()]));
        assert_eq!(ParseRule::WholeText.apply("   "), None);
        let marker = ParseRule::AfterMarker("Out:".into());
        assert_eq!(marker.apply("Out: a Out: b"), Some(vec!["b".into()]));
        assert_eq!(marker.apply("no marker"), Some(vec!["no marker".into()]));
        assert_eq!(
            ParseRule::KeyConceptList.apply("- a\n2. b\n\n* c"),
            Some(vec!["a".into(), "b".into(), "c".into()])
        );
        assert_eq!(
            ParseRule::YesNo.apply("I think Yes"),
            Some(vec!["yes".into()])
        );
        assert_eq!(ParseRule::YesNo.apply("hmm"), None);
    }
}
