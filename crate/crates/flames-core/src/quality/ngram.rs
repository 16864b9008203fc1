//! Token n-gram index for test-set decontamination.
//!
//! A synthetic problem is contaminated by a test problem T when the fraction
//! of T's token n-gram windows that also occur among the synthetic problem's
//! n-grams reaches the threshold. The fraction is computed over the *test*
//! problem's windows, so a synthetic superstring of a test problem always
//! scores 1.0. Test problems shorter than n tokens contribute their full
//! token sequence as a single gram.

use std::collections::{BTreeSet, HashMap, HashSet};

/// Lowercases, maps every non-alphanumeric character to a space, and splits
/// on whitespace runs.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

pub const DEFAULT_NGRAM_SIZE: usize = 8;
pub const DEFAULT_CONTAMINATION_THRESHOLD: f64 = 0.95;

#[derive(Debug)]
struct TestEntry {
    test_id: String,
    /// Sliding-window count (not unique-gram count).
    total_ngrams: usize,
    /// Window multiplicity per gram key.
    gram_counts: HashMap<String, u32>,
}

/// Inverted n-gram index over a collection of test problems.
#[derive(Debug)]
pub struct NGramIndex {
    n: usize,
    tests: Vec<TestEntry>,
    inverted: HashMap<String, Vec<u32>>,
    /// Gram sizes present: n plus the lengths of short test problems.
    gram_lengths: BTreeSet<usize>,
    /// Test problems skipped because they tokenized to nothing.
    pub skipped_empty: usize,
}

/// A contamination hit against one test problem.
#[derive(Debug, Clone, PartialEq)]
pub struct Contamination {
    pub test_id: String,
    pub overlap_fraction: f64,
}

fn gram_key(tokens: &[String]) -> String {
    tokens.join(" ")
}

impl NGramIndex {
    /// Indexes the given `(test_id, text)` pairs with gram size `n`.
    pub fn build(test_sets: &[(String, String)], n: usize) -> NGramIndex {
        assert!(n >= 1, "gram size must be at least 1");
        let mut index = NGramIndex {
            n,
            tests: Vec::new(),
            inverted: HashMap::new(),
            gram_lengths: BTreeSet::new(),
            skipped_empty: 0,
        };
        for (test_id, text) in test_sets {
            let tokens = tokenize(text);
            if tokens.is_empty() {
                index.skipped_empty += 1;
                continue;
            }
            let window = n.min(tokens.len());
            index.gram_lengths.insert(window);
            let mut gram_counts: HashMap<String, u32> = HashMap::new();
            for w in tokens.windows(window) {
                *gram_counts.entry(gram_key(w)).or_insert(0) += 1;
            }
            let total_ngrams = tokens.len() - window + 1;
            let idx = index.tests.len() as u32;
            for key in gram_counts.keys() {
                index.inverted.entry(key.clone()).or_default().push(idx);
            }
            index.tests.push(TestEntry {
                test_id: test_id.clone(),
                total_ngrams,
                gram_counts,
            });
        }
        index
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.tests.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tests.is_empty()
    }

    /// Per-test window totals, in index order.
    pub fn totals(&self) -> impl Iterator<Item = (&str, usize)> {
        self.tests
            .iter()
            .map(|t| (t.test_id.as_str(), t.total_ngrams))
    }

    /// Test ids whose gram sets contain the given token window.
    pub fn lookup(&self, tokens: &[String]) -> Vec<&str> {
        self.inverted
            .get(&gram_key(tokens))
            .map(|ids| {
                ids.iter()
                    .map(|&i| self.tests[i as usize].test_id.as_str())
                    .collect()
            })
            .unwrap_or_default()
    }

    /// Set of gram keys of `tokens` for every gram length the index holds.
    fn synthetic_grams(&self, tokens: &[String]) -> HashSet<String> {
        let mut grams = HashSet::new();
        for &len in &self.gram_lengths {
            if tokens.len() >= len {
                for w in tokens.windows(len) {
                    grams.insert(gram_key(w));
                }
            }
        }
        grams
    }

    /// Returns the first test problem (index order) whose window overlap with
    /// `problem_text` reaches `threshold`, with its overlap fraction.
    pub fn contamination_check(&self, problem_text: &str, threshold: f64) -> Option<Contamination> {
        self.contaminations(problem_text, threshold)
            .into_iter()
            .next()
    }

    /// All test problems whose overlap reaches `threshold`, in index order.
    pub fn contaminations(&self, problem_text: &str, threshold: f64) -> Vec<Contamination> {
        let tokens = tokenize(problem_text);
        let grams = self.synthetic_grams(&tokens);
        let mut matched_windows = vec![0u32; self.tests.len()];
        for key in &grams {
            if let Some(test_idxs) = self.inverted.get(key) {
                for &t in test_idxs {
                    matched_windows[t as usize] += self.tests[t as usize].gram_counts[key];
                }
            }
        }
        let mut hits = Vec::new();
        for (i, entry) in self.tests.iter().enumerate() {
            let fraction = matched_windows[i] as f64 / entry.total_ngrams as f64;
            if fraction >= threshold {
                hits.push(Contamination {
                    test_id: entry.test_id.clone(),
                    overlap_fraction: fraction,
                });
            }
        }
        hits
    }
}

/// Sliding-window convenience: builds the index and answers with the matched
/// test id only.
pub fn is_contaminated(problem_text: &str, idx: &NGramIndex, threshold: f64) -> Option<String> {
    idx.contamination_check(problem_text, threshold)
        .map(|c| c.test_id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn test_tokenize_rule() {
        assert_eq!(
            tokenize("Tom has 3 apples."),
            vec!["tom", "has", "3", "apples"]
        );
        assert_eq!(tokenize(""), Vec::<String>::new());
        assert_eq!(tokenize("a--b  c!"), vec!["a", "b", "c"]);
    }

    #[test]
    fn test_tokenize_idempotent_on_joined_output() {
        for text in ["Tom has 3 apples.", "x+1 = 2", "MIXED case Words"] {
            let once = tokenize(text);
            let twice = tokenize(&once.join(" "));
            assert_eq!(once, twice);
        }
    }

    #[test]
    fn test_window_counts() {
        let nine = (0..9)
            .map(|i| format!("w{i}"))
            .collect::<Vec<_>>()
            .join(" ");
        let idx = NGramIndex::build(&[("t1".into(), nine)], 8);
        assert_eq!(idx.totals().next(), Some(("t1", 2)));

        let idx = NGramIndex::build(&[("t2".into(), "just three tokens".into())], 8);
        assert_eq!(idx.totals().next(), Some(("t2", 1)));
    }

    #[test]
    fn test_verbatim_superset_is_contaminated() {
        let test_problem = "Mary bakes twelve pies every single day of the week".to_string();
        let idx = NGramIndex::build(&[("t1".into(), test_problem.clone())], 8);
        let synthetic = format!("Background story here. {test_problem} And a trailing question?");
        let hit = idx.contamination_check(&synthetic, 0.95).unwrap();
        assert_eq!(hit.test_id, "t1");
        assert!((hit.overlap_fraction - 1.0).abs() < 1e-12);
    }

    #[test]
    fn test_disjoint_text_is_clean() {
        let idx = NGramIndex::build(&[("t1".into(), "alpha beta gamma delta".into())], 8);
        assert_eq!(
            is_contaminated("totally unrelated words here", &idx, 0.95),
            None
        );
    }

    #[test]
    fn test_short_test_problem_whole_sequence_rule() {
        let idx = NGramIndex::build(&[("t1".into(), "three short tokens".into())], 8);
        // The 3-token sequence appears contiguously: contaminated.
        assert_eq!(
            is_contaminated("prefix three short tokens suffix", &idx, 0.95).as_deref(),
            Some("t1")
        );
        // Tokens present but not contiguous: clean.
        assert_eq!(
            is_contaminated("three little short big tokens", &idx, 0.95),
            None
        );
    }

    fn random_words(rng: &mut ChaCha8Rng, n: usize, vocab: usize) -> String {
        (0..n)
            .map(|_| format!("w{}", rng.random_range(0..vocab)))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Brute-force window-overlap oracle, independent of the index.
    fn oracle_overlap(test_text: &str, synthetic_text: &str, n: usize) -> f64 {
        let t = tokenize(test_text);
        let s = tokenize(synthetic_text);
        if t.is_empty() {
            return 0.0;
        }
        let w = n.min(t.len());
        let s_grams: HashSet<Vec<String>> = if s.len() >= w {
            s.windows(w).map(|x| x.to_vec()).collect()
        } else {
            HashSet::new()
        };
        let windows: Vec<Vec<String>> = t.windows(w).map(|x| x.to_vec()).collect();
        let matched = windows.iter().filter(|w| s_grams.contains(*w)).count();
        matched as f64 / windows.len() as f64
    }

    #[test]
    fn test_index_lookup_matches_brute_force() {
        // Cross-check `lookup` on 50 random problems.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tests: Vec<(String, String)> = (0..50)
            .map(|i| {
                let len = rng.random_range(3..20);
                (format!("t{i}"), random_words(&mut rng, len, 30))
            })
            .collect();
        let idx = NGramIndex::build(&tests, 8);
        for _ in 0..200 {
            let probe_len = rng.random_range(1..12);
            let probe: Vec<String> = (0..probe_len)
                .map(|_| format!("w{}", rng.random_range(0..30)))
                .collect();
            let got: HashSet<&str> = idx.lookup(&probe).into_iter().collect();
            let expect: HashSet<&str> = tests
                .iter()
                .filter(|(_, text)| {
                    let toks = tokenize(text);
                    let w = 8usize.min(toks.len());
                    w == probe.len() && toks.windows(w).any(|win| win == probe.as_slice())
                })
                .map(|(id, _)| id.as_str())
                .collect();
            assert_eq!(got, expect);
        }
    }

    #[test]
    fn test_contamination_matches_oracle_on_random_corpus() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let tests: Vec<(String, String)> = (0..30)
            .map(|i| {
                let len = rng.random_range(2..25);
                (format!("t{i}"), random_words(&mut rng, len, 12))
            })
            .collect();
        let idx = NGramIndex::build(&tests, 8);
        for _ in 0..100 {
            let len = rng.random_range(1..60);
            let synthetic = random_words(&mut rng, len, 12);
            let got = idx.contamination_check(&synthetic, 0.5);
            let expect = tests
                .iter()
                .map(|(id, text)| (id, oracle_overlap(text, &synthetic, 8)))
                .find(|(_, f)| *f >= 0.5);
            match (got, expect) {
                (None, None) => {}
                (Some(hit), Some((id, f))) => {
                    assert_eq!(&hit.test_id, id);
                    assert!((hit.overlap_fraction - f).abs() < 1e-12);
                }
                (got, expect) => panic!("mismatch: index={got:?} oracle={expect:?}"),
            }
        }
    }
}
