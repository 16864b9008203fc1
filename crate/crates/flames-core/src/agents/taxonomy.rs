//! Math subject taxonomy used by the taxonomy_key_concepts agent.
//!
//! The repo ships a default subject list curated for this project (the
//! `data/taxonomy.jsonl` file); callers may load their own file in the same
//! JSONL shape.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::AgentError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaxonomySubject {
    pub name: String,
    /// Root-to-leaf path; full paths are unique within a taxonomy.
    pub path: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Taxonomy {
    pub subjects: Vec<TaxonomySubject>,
}

impl Taxonomy {
    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    fn from_jsonl(data: &str, origin: &str) -> Result<Taxonomy, AgentError> {
        let mut subjects = Vec::new();
        let mut seen_paths = std::collections::HashSet::new();
        for (i, line) in data.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let subject: TaxonomySubject = serde_json::from_str(line).map_err(|e| {
                AgentError::MalformedTaxonomy(format!("{origin} line {}: {e}", i + 1))
            })?;
            if subject.name.is_empty() || subject.path.is_empty() {
                return Err(AgentError::MalformedTaxonomy(format!(
                    "{origin} line {}: empty name or path",
                    i + 1
                )));
            }
            if !seen_paths.insert(subject.path.clone()) {
                return Err(AgentError::MalformedTaxonomy(format!(
                    "{origin} line {}: duplicate path {:?}",
                    i + 1,
                    subject.path.join(" / ")
                )));
            }
            subjects.push(subject);
        }
        Ok(Taxonomy { subjects })
    }
}

/// Loads a taxonomy from a JSONL file of subject records.
pub fn load_taxonomy(path: &Path) -> Result<Taxonomy, AgentError> {
    let data = std::fs::read_to_string(path)?;
    Taxonomy::from_jsonl(&data, &path.display().to_string())
}

/// The subject list shipped with the repo.
pub fn default_taxonomy() -> Taxonomy {
    Taxonomy::from_jsonl(include_str!("../../data/taxonomy.jsonl"), "builtin")
        .expect("shipped taxonomy is well-formed")
}
