//! The FOBAR agent: a purely templatic transform that masks one numeric
//! literal with the variable X and appends a backward-reasoning question
//! using the seed problem's gold answer.

use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;

use crate::model::{AgentKind, SeedProblem, SyntheticProblem};

/// Maximal digit runs with optional thousands commas and an optional single
/// decimal point. Spelled-out numbers are not detected.
fn number_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\d{1,3}(?:,\d{3})+(?:\.\d+)?|\d+(?:\.\d+)?").unwrap())
}

/// Byte spans of every numeric-literal occurrence, left to right.
pub fn numeric_occurrences(text: &str) -> Vec<(usize, usize)> {
    number_regex()
        .find_iter(text)
        .map(|m| (m.start(), m.end()))
        .collect()
}

fn variant_for(seed: &SeedProblem, span: (usize, usize)) -> SyntheticProblem {
    let masked = format!("{}X{}", &seed.problem[..span.0], &seed.problem[span.1..]);
    let problem = format!(
        "{masked} If we know the answer to the above question is {}, what is the value of unknown variable X?",
        seed.answer
    );
    SyntheticProblem::new(problem, AgentKind::Fobar, vec![seed.id.clone()], vec![], 0)
}

/// Masks one numeric occurrence, chosen uniformly by a seeded rng, and
/// appends the backward question. Returns `None` when the problem contains
/// no numeric literal.
pub fn fobar_transform(seed: &SeedProblem, rng_seed: u64) -> Option<SyntheticProblem> {
    let occurrences = numeric_occurrences(&seed.problem);
    if occurrences.is_empty() {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let pick = occurrences[rng.random_range(0..occurrences.len())];
    Some(variant_for(seed, pick))
}

/// One variant per numeric occurrence, in occurrence order. Used when an
/// agent quota exceeds what random sampling can reach.
pub fn enumerate_fobar_variants(seed: &SeedProblem) -> Vec<SyntheticProblem> {
    numeric_occurrences(&seed.problem)
        .into_iter()
        .map(|span| variant_for(seed, span))
        .collect()
}
