//! Prompt templates: embedded template files, header stripping, and slot
//! rendering.
//!
//! Template files live in `templates/` and may start with `#:` header lines
//! (source attribution, version, variable list) which are stripped at load.
//! Variable slots use `{name}` with lowercase names; anything else in braces
//! (for example `binom{6}{5}`) is left untouched.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;

use crate::error::AgentError;

macro_rules! template_file {
    ($name:literal) => {
        (
            $name,
            include_str!(concat!("../../templates/", $name, ".txt")),
        )
    };
}

const TEMPLATE_FILES: &[(&str, &str)] = &[
    template_file!("problem_to_key_concepts"),
    template_file!("key_concepts_problem"),
    template_file!("seeded_key_concepts_problem"),
    template_file!("distraction_insertion"),
    template_file!("solvability_filter"),
    template_file!("few_shot"),
    template_file!("paraphrase"),
    template_file!("suggester"),
    template_file!("editor"),
    template_file!("iqc"),
    template_file!("ask_me_anything_statement"),
    template_file!("ask_me_anything_question"),
    template_file!("self_verification_statement"),
    template_file!("self_verification_question"),
    template_file!("qft_system"),
    template_file!("taxonomy_concepts"),
];

/// Variables each template consumes. Seed-context variables are substituted
/// at plan-build time; step-output variables (`keyconcept`, `suggestions`,
/// `statement`) are threaded in when the producing step completes.
fn declared_variables(template_id: &str) -> &'static [&'static str] {
    match template_id {
        "problem_to_key_concepts" => &["problem", "solution"],
        "key_concepts_problem" => &["keyconcept"],
        "seeded_key_concepts_problem" => &["problem", "keyconcept"],
        "distraction_insertion" => &["problem", "solution"],
        "solvability_filter" => &["problem"],
        "few_shot" => &["examples"],
        "paraphrase" => &["problem"],
        "suggester" => &["problem"],
        "editor" => &["problem", "suggestions"],
        "iqc" => &["problem"],
        "ask_me_anything_statement" => &["problem", "solution"],
        "ask_me_anything_question" => &["statement"],
        "self_verification_statement" => &["problem", "answer"],
        "self_verification_question" => &["statement"],
        "qft_system" => &[],
        "taxonomy_concepts" => &["subject"],
        _ => &[],
    }
}

/// Drops leading `#:` header lines plus the single following blank line.
pub fn strip_template_header(raw: &str) -> &str {
    let mut rest = raw;
    loop {
        if rest.starts_with("#:") {
            match rest.find('\n') {
                Some(pos) => rest = &rest[pos + 1..],
                None => return "",
            }
        } else {
            break;
        }
    }
    rest.strip_prefix('\n').unwrap_or(rest)
}

fn builtin_templates() -> &'static HashMap<&'static str, &'static str> {
    static BODIES: OnceLock<HashMap<&'static str, &'static str>> = OnceLock::new();
    BODIES.get_or_init(|| {
        TEMPLATE_FILES
            .iter()
            .map(|(id, raw)| (*id, strip_template_header(raw)))
            .collect()
    })
}

fn slot_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([a-z_]+)\}").unwrap())
}

/// Single-pass slot substitution over the template text only; substituted
/// values are never rescanned, so seed text containing `{...}` stays intact.
fn substitute(text: &str, vars: &BTreeMap<String, String>) -> String {
    slot_regex()
        .replace_all(text, |caps: &regex::Captures| match vars.get(&caps[1]) {
            Some(value) => value.clone(),
            None => caps[0].to_string(),
        })
        .into_owned()
}

/// Template lookup with per-run file overrides.
#[derive(Debug, Default, Clone)]
pub struct TemplateStore {
    overrides: HashMap<String, String>,
}

impl TemplateStore {
    pub fn new() -> Self {
        TemplateStore::default()
    }

    /// Replaces a built-in template with the contents of `path` (same `#:`
    /// header convention).
    pub fn load_override(&mut self, template_id: &str, path: &Path) -> Result<(), AgentError> {
        let raw = std::fs::read_to_string(path)?;
        self.overrides.insert(
            template_id.to_string(),
            strip_template_header(&raw).to_string(),
        );
        Ok(())
    }

    pub fn body(&self, template_id: &str) -> Result<&str, AgentError> {
        if let Some(text) = self.overrides.get(template_id) {
            return Ok(text);
        }
        builtin_templates()
            .get(template_id)
            .copied()
            .ok_or_else(|| AgentError::TemplateError {
                template_id: template_id.to_string(),
                message: "unknown template".into(),
            })
    }

    /// Renders the template with the given variables, leaving declared
    /// variables that are not yet available as open slots (they are threaded
    /// in from earlier step outputs at execution time).
    pub fn render_partial(
        &self,
        template_id: &str,
        vars: &BTreeMap<String, String>,
    ) -> Result<String, AgentError> {
        Ok(substitute(self.body(template_id)?, vars))
    }
}

/// Fills remaining slots and verifies no declared variable is left open.
pub fn finalize_prompt(
    template_id: &str,
    rendered: &str,
    vars: &BTreeMap<String, String>,
) -> Result<String, AgentError> {
    let text = substitute(rendered, vars);
    for var in declared_variables(template_id) {
        if text.contains(&format!("{{{var}}}")) {
            return Err(AgentError::TemplateError {
                template_id: template_id.to_string(),
                message: format!("variable {{{var}}} left unsubstituted"),
            });
        }
    }
    Ok(text)
}

/// Renders the solvability verdict prompt for one problem.
pub fn render_solvability_prompt(problem_text: &str) -> String {
    let mut vars = BTreeMap::new();
    vars.insert("problem".to_string(), problem_text.to_string());
    substitute(
        builtin_templates()
            .get("solvability_filter")
            .expect("built-in template"),
        &vars,
    )
}
