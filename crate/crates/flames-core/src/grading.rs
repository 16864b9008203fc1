//! Final-answer extraction, canonical normalization, equivalence testing and
//! majority voting over sampled solutions.
//!
//! Extraction rule: the contents of the last balanced `\boxed{...}` group
//! (outermost, nesting allowed); failing that, the last line-final
//! "answer is X" / "= X" pattern; failing that, the last standalone numeric
//! literal.
//!
//! Normalization rules, applied in order: strip surrounding whitespace, `$`
//! and trailing `.`; delete `\left`, `\right`, `\!`, `\,`, `~`; map
//! `\dfrac`/`\tfrac` to `\frac`; `\frac{a}{b}` and `a/b` with integer a, b
//! become exact rationals; plain integers and finite decimals (thousands
//! commas removed, `%` divides by 100) become exact rationals; scientific
//! notation becomes a decimal (significand, exponent) pair; everything else
//! is symbolic with whitespace removed and single-character brace groups
//! collapsed.

use std::fmt;
use std::sync::OnceLock;

use num::bigint::BigInt;
use num::rational::BigRational;
use num::{Signed, Zero};
use regex::Regex;

/// A normalized final answer.
#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalAnswer {
    pub kind: AnswerKind,
    /// Original extracted text, kept for reporting.
    pub raw: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AnswerKind {
    /// Reduced fraction with positive denominator.
    Rational(BigRational),
    /// significand * 10^exponent, significand free of trailing zeros.
    Decimal { significand: BigInt, exponent: i32 },
    /// Whitespace-free normalized text.
    Symbolic(String),
}

impl CanonicalAnswer {
    pub fn rational(num: i64, den: i64) -> Self {
        let r = BigRational::new(BigInt::from(num), BigInt::from(den));
        CanonicalAnswer {
            raw: format!("{num}/{den}"),
            kind: AnswerKind::Rational(r),
        }
    }

    pub fn decimal(significand: i64, exponent: i32) -> Self {
        let raw = format!("{significand}e{exponent}");
        let (s, e) = canonical_decimal(BigInt::from(significand), exponent);
        CanonicalAnswer {
            raw,
            kind: AnswerKind::Decimal {
                significand: s,
                exponent: e,
            },
        }
    }

    pub fn symbolic(text: &str) -> Self {
        normalize(text)
    }

    /// Canonical text form; `normalize(render(x)) == x` for numeric kinds.
    pub fn render(&self) -> String {
        match &self.kind {
            AnswerKind::Rational(r) => {
                if r.denom() == &BigInt::from(1) {
                    r.numer().to_string()
                } else {
                    format!("{}/{}", r.numer(), r.denom())
                }
            }
            AnswerKind::Decimal {
                significand,
                exponent,
            } => format!("{significand}e{exponent}"),
            AnswerKind::Symbolic(text) => text.clone(),
        }
    }
}

impl fmt::Display for CanonicalAnswer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

fn canonical_decimal(mut significand: BigInt, mut exponent: i32) -> (BigInt, i32) {
    let ten = BigInt::from(10);
    if significand.is_zero() {
        return (significand, 0);
    }
    while (&significand % &ten).is_zero() {
        significand /= &ten;
        exponent += 1;
    }
    (significand, exponent)
}

fn regexes() -> &'static ExtractRegexes {
    static RE: OnceLock<ExtractRegexes> = OnceLock::new();
    RE.get_or_init(|| ExtractRegexes {
        answer_is: Regex::new(r"(?i)answer is\s*(.+?)\s*$").unwrap(),
        equals_tail: Regex::new(r"=\s*([^=]+?)\s*$").unwrap(),
        number: Regex::new(r"-?(?:\d{1,3}(?:,\d{3})+|\d+)(?:\.\d+)?").unwrap(),
        latex_frac: Regex::new(r"^(-?)\\frac\{(-?\d+)\}\{(-?\d+)\}$").unwrap(),
        plain_frac: Regex::new(r"^(-?\d+)\s*/\s*(-?\d+)$").unwrap(),
        plain_number: Regex::new(r"^[+-]?(?:\d{1,3}(?:,\d{3})+|\d+)(?:\.\d+)?$").unwrap(),
        scientific: Regex::new(r"^([+-]?)(\d+)(?:\.(\d+))?[eE]([+-]?\d+)$").unwrap(),
        brace_single: Regex::new(r"\{(\w)\}").unwrap(),
    })
}

struct ExtractRegexes {
    answer_is: Regex,
    equals_tail: Regex,
    number: Regex,
    latex_frac: Regex,
    plain_frac: Regex,
    plain_number: Regex,
    scientific: Regex,
    brace_single: Regex,
}

/// Extracts the final answer text from a model solution, or `None` when the
/// solution contains nothing recognizable.
pub fn extract_answer(solution_text: &str) -> Option<String> {
    if let Some(boxed) = last_outermost_boxed(solution_text) {
        return Some(boxed);
    }

    let re = regexes();
    for line in solution_text.lines().rev() {
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        if let Some(caps) = re.answer_is.captures(line) {
            return Some(trim_sentence(&caps[1]));
        }
        if let Some(caps) = re.equals_tail.captures(line) {
            return Some(trim_sentence(&caps[1]));
        }
    }

    last_standalone_number(solution_text)
}

fn trim_sentence(s: &str) -> String {
    s.trim().trim_end_matches('.').trim().to_string()
}

/// Contents of the last outermost balanced `\boxed{...}` group. Unbalanced
/// groups are skipped, so the result is always brace-balanced.
fn last_outermost_boxed(text: &str) -> Option<String> {
    const MARKER: &str = "\\boxed{";
    let bytes = text.as_bytes();
    let mut spans: Vec<(usize, usize)> = Vec::new(); // (content_start, content_end)
    let mut search_from = 0;
    while let Some(rel) = text[search_from..].find(MARKER) {
        let open = search_from + rel + MARKER.len() - 1; // index of '{'
        let mut depth = 0usize;
        let mut close = None;
        for (i, &b) in bytes.iter().enumerate().skip(open) {
            match b {
                b'{' => depth += 1,
                b'}' => {
                    depth -= 1;
                    if depth == 0 {
                        close = Some(i);
                        break;
                    }
                }
                _ => {}
            }
        }
        if let Some(close) = close {
            spans.push((open + 1, close));
        } // unbalanced groups are skipped
        search_from = search_from + rel + MARKER.len();
    }
    // Keep outermost spans only: drop any span contained in another.
    let outermost: Vec<&(usize, usize)> = spans
        .iter()
        .filter(|(s, e)| !spans.iter().any(|(s2, e2)| s2 < s && e < e2))
        .collect();
    outermost.last().map(|(s, e)| text[*s..*e].to_string())
}

fn last_standalone_number(text: &str) -> Option<String> {
    let re = regexes();
    let mut last: Option<String> = None;
    for m in re.number.find_iter(text) {
        // Standalone: not glued to a word character or a dot on the left.
        if let Some(prev) = text[..m.start()].chars().next_back() {
            if prev.is_alphanumeric() || prev == '.' || prev == '_' {
                continue;
            }
        }
        last = Some(m.as_str().to_string());
    }
    last
}

/// Normalizes raw extracted text into a canonical answer. Symbolic is the
/// total fallback, so this never fails.
pub fn normalize(raw: &str) -> CanonicalAnswer {
    let re = regexes();
    let mut s = raw.trim().to_string();

    // Strip surrounding $ and trailing dots until stable.
    loop {
        let before = s.len();
        s = s
            .trim()
            .trim_start_matches('$')
            .trim_end_matches('$')
            .trim_end_matches('.')
            .trim()
            .to_string();
        if s.len() == before {
            break;
        }
    }

    for junk in ["\\left", "\\right", "\\!", "\\,", "~"] {
        s = s.replace(junk, "");
    }
    s = s.replace("\\dfrac", "\\frac").replace("\\tfrac", "\\frac");
    let s = s.trim().to_string();

    if let Some(caps) = re.latex_frac.captures(&s) {
        let neg = &caps[1] == "-";
        if let Some(r) = parse_fraction(&caps[2], &caps[3], neg) {
            return CanonicalAnswer {
                kind: AnswerKind::Rational(r),
                raw: raw.to_string(),
            };
        }
    }

    if let Some(caps) = re.plain_frac.captures(&s) {
        if let Some(r) = parse_fraction(&caps[1], &caps[2], false) {
            return CanonicalAnswer {
                kind: AnswerKind::Rational(r),
                raw: raw.to_string(),
            };
        }
    }

    let (numeric_part, percent) = match s.strip_suffix('%') {
        Some(rest) => (rest.trim_end().to_string(), true),
        None => (s.clone(), false),
    };
    if re.plain_number.is_match(&numeric_part) {
        let num = numeric_part.replace(',', "");
        let kind = match num.split_once('.') {
            // Integers stay exact rationals.
            None => num.parse::<BigInt>().ok().map(|n| {
                let r = if percent {
                    BigRational::new(n, BigInt::from(100))
                } else {
                    BigRational::from(n)
                };
                AnswerKind::Rational(r)
            }),
            // A decimal point produces the decimal kind: significand and
            // power-of-ten exponent, trailing zeros folded away.
            Some((int_part, frac_part)) => {
                let digits = format!("{}{}", int_part.trim_start_matches('+'), frac_part);
                digits.parse::<BigInt>().ok().map(|significand| {
                    let mut exponent = -(frac_part.len() as i32);
                    if percent {
                        exponent -= 2;
                    }
                    let (significand, exponent) = canonical_decimal(significand, exponent);
                    AnswerKind::Decimal {
                        significand,
                        exponent,
                    }
                })
            }
        };
        if let Some(kind) = kind {
            return CanonicalAnswer {
                kind,
                raw: raw.to_string(),
            };
        }
    }

    if let Some(caps) = re.scientific.captures(&numeric_part) {
        let sign = if &caps[1] == "-" { -1 } else { 1 };
        let int_digits = &caps[2];
        let frac_digits = caps.get(3).map(|m| m.as_str()).unwrap_or("");
        let exp: i64 = caps[4].parse().unwrap_or(0);
        let digits = format!("{int_digits}{frac_digits}");
        if let Ok(mut significand) = digits.parse::<BigInt>() {
            significand *= BigInt::from(sign);
            let mut exponent = exp - frac_digits.len() as i64;
            if percent {
                exponent -= 2;
            }
            if let Ok(exponent) = i32::try_from(exponent) {
                let (significand, exponent) = canonical_decimal(significand, exponent);
                return CanonicalAnswer {
                    kind: AnswerKind::Decimal {
                        significand,
                        exponent,
                    },
                    raw: raw.to_string(),
                };
            }
        }
    }

    // Symbolic fallback: drop whitespace, collapse single-char brace groups.
    let mut text: String = s.chars().filter(|c| !c.is_whitespace()).collect();
    loop {
        let next = re.brace_single.replace_all(&text, "$1").into_owned();
        if next == text {
            break;
        }
        text = next;
    }
    if text.is_empty() {
        // Degenerate input that stripped to nothing; keep the raw form so the
        // symbolic text stays non-empty.
        text = raw.to_string();
    }
    CanonicalAnswer {
        kind: AnswerKind::Symbolic(text),
        raw: raw.to_string(),
    }
}

fn parse_fraction(num: &str, den: &str, negate: bool) -> Option<BigRational> {
    let n: BigInt = num.parse().ok()?;
    let d: BigInt = den.parse().ok()?;
    if d.is_zero() {
        return None;
    }
    let r = BigRational::new(n, d);
    Some(if negate { -r } else { r })
}

fn to_rational(kind: &AnswerKind) -> Option<BigRational> {
    match kind {
        AnswerKind::Rational(r) => Some(r.clone()),
        AnswerKind::Decimal {
            significand,
            exponent,
        } => {
            let base = BigRational::from(significand.clone());
            let scale = BigRational::from(BigInt::from(10)).pow(*exponent);
            Some(base * scale)
        }
        AnswerKind::Symbolic(_) => None,
    }
}

/// Equality of canonical answers. Two rationals compare exactly; any pair
/// involving a decimal compares with relative tolerance 1e-6; symbolic
/// answers compare by normalized text; numeric never equals symbolic.
pub fn answers_equal(a: &CanonicalAnswer, b: &CanonicalAnswer) -> bool {
    match (&a.kind, &b.kind) {
        (AnswerKind::Symbolic(x), AnswerKind::Symbolic(y)) => x == y,
        (AnswerKind::Rational(x), AnswerKind::Rational(y)) => x == y,
        (x, y) => {
            let (Some(rx), Some(ry)) = (to_rational(x), to_rational(y)) else {
                return false;
            };
            if rx == ry {
                return true;
            }
            let diff = (&rx - &ry).abs();
            let scale = rx.abs().max(ry.abs());
            let tol = BigRational::new(BigInt::from(1), BigInt::from(1_000_000));
            diff <= tol * scale
        }
    }
}

/// Partitions present answers into equivalence classes under
/// [`answers_equal`] and returns the largest class if it reaches
/// `min_count`. Ties go to the class containing the lowest index; absent
/// answers never match anything.
pub fn majority_answer(
    answers: &[Option<CanonicalAnswer>],
    min_count: usize,
) -> Option<(CanonicalAnswer, Vec<usize>)> {
    let mut classes: Vec<(CanonicalAnswer, Vec<usize>)> = Vec::new();
    for (i, answer) in answers.iter().enumerate() {
        let Some(answer) = answer else { continue };
        match classes
            .iter_mut()
            .find(|(rep, _)| answers_equal(rep, answer))
        {
            Some((_, members)) => members.push(i),
            None => classes.push((answer.clone(), vec![i])),
        }
    }
    // Classes were created in index order, so the first maximal class is the
    // one containing the lowest index.
    let best = classes.into_iter().max_by_key(|(_, m)| {
        // max_by_key keeps the *last* maximum; invert creation order to keep
        // the first.
        (m.len(), std::cmp::Reverse(m[0]))
    })?;
    if best.1.len() >= min_count {
        Some(best)
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn norm(s: &str) -> CanonicalAnswer {
        normalize(s)
    }

    #[test]
    fn test_extract_last_boxed_group() {
        assert_eq!(
            extract_answer("so \\boxed{\\frac{1}{2}} done").as_deref(),
            Some("\\frac{1}{2}")
        );
        assert_eq!(
            extract_answer("first \\boxed{3} then \\boxed{7}").as_deref(),
            Some("7")
        );
    }

    #[test]
    fn test_extract_nested_boxed_returns_outermost() {
        assert_eq!(
            extract_answer("\\boxed{1+\\boxed{2}}").as_deref(),
            Some("1+\\boxed{2}")
        );
    }

    #[test]
    fn test_extract_skips_unbalanced_boxed() {
        // The trailing group never closes; fall back to the earlier one.
        assert_eq!(
            extract_answer("\\boxed{5} and \\boxed{oops").as_deref(),
            Some("5")
        );
        // A lone unbalanced group falls through to the numeric fallback,
        // never returning a brace fragment.
        assert_eq!(extract_answer("\\boxed{12").as_deref(), Some("12"));
    }

    #[test]
    fn test_extract_answer_is_pattern() {
        assert_eq!(
            extract_answer("steps...\nThe answer is 42.").as_deref(),
            Some("42")
        );
        assert_eq!(extract_answer("x = 5\ny = 6").as_deref(), Some("6"));
    }

    #[test]
    fn test_extract_last_standalone_number() {
        assert_eq!(
            extract_answer("we get 10 then 20 apples").as_deref(),
            Some("20")
        );
        assert_eq!(
            extract_answer("version v1.2 costs 3,000").as_deref(),
            Some("3,000")
        );
    }

    #[test]
    fn test_extract_none() {
        assert_eq!(extract_answer("no answer here"), None);
        assert_eq!(extract_answer(""), None);
    }

    #[test]
    fn test_normalize_decimal_and_fraction_agree() {
        // "0.5" keeps the decimal kind; "\\frac{1}{2}" is an exact rational;
        // the two compare equal.
        let half = norm("0.5");
        let frac = norm("\\frac{1}{2}");
        assert_eq!(
            half.kind,
            AnswerKind::Decimal {
                significand: 5.into(),
                exponent: -1
            }
        );
        assert_eq!(
            frac.kind,
            AnswerKind::Rational(BigRational::new(1.into(), 2.into()))
        );
        assert!(answers_equal(&half, &frac));
        assert!(answers_equal(&half, &CanonicalAnswer::rational(1, 2)));
    }

    #[test]
    fn test_decimal_truncations_of_rationals_compare_equal() {
        assert!(answers_equal(&norm("1/3"), &norm("0.333333")));
        assert!(!answers_equal(&norm("1/3"), &norm("0.33")));
        assert!(answers_equal(&norm("2"), &norm("2.0")));
    }

    #[test]
    fn test_normalize_percent() {
        assert!(answers_equal(
            &norm("50%"),
            &CanonicalAnswer::rational(1, 2)
        ));
        assert!(answers_equal(
            &norm("12.5%"),
            &CanonicalAnswer::rational(1, 8)
        ));
    }

    #[test]
    fn test_normalize_symbolic_whitespace() {
        assert_eq!(norm("x+1").kind, norm(" x + 1 ").kind);
        assert_ne!(norm("x+1").kind, norm("x+2").kind);
    }

    #[test]
    fn test_normalize_strips_latex_noise() {
        assert_eq!(norm("$\\left(3,4\\right)$").kind, norm("(3,4)").kind);
        assert_eq!(
            norm("\\dfrac{2}{4}").kind,
            CanonicalAnswer::rational(1, 2).kind
        );
        assert_eq!(norm("x^{2}").kind, norm("x^2").kind);
    }

    #[test]
    fn test_normalize_scientific_is_decimal() {
        let d = norm("1.5e3");
        assert_eq!(
            d.kind,
            AnswerKind::Decimal {
                significand: 15.into(),
                exponent: 2
            }
        );
    }

    #[test]
    fn test_normalize_idempotent_through_render() {
        for s in [
            "1/2",
            "0.5",
            "42",
            "50%",
            "x+1",
            "\\frac{3}{9}",
            "1.5e3",
            "-7",
        ] {
            let once = normalize(s);
            let twice = normalize(&once.render());
            assert_eq!(once.kind, twice.kind, "not idempotent for {s:?}");
        }
    }

    #[test]
    fn test_answers_equal_rational_decimal() {
        assert!(answers_equal(
            &CanonicalAnswer::rational(1, 2),
            &CanonicalAnswer::decimal(5, -1)
        ));
        // 1/3 vs 0.3333333: inside the 1e-6 relative tolerance.
        assert!(answers_equal(
            &CanonicalAnswer::rational(1, 3),
            &CanonicalAnswer::decimal(3333333, -7)
        ));
        // 1/3 vs 0.33: outside.
        assert!(!answers_equal(
            &CanonicalAnswer::rational(1, 3),
            &CanonicalAnswer::decimal(33, -2)
        ));
    }

    #[test]
    fn test_answers_equal_kind_mismatch() {
        assert!(!answers_equal(
            &CanonicalAnswer::symbolic("x+1"),
            &CanonicalAnswer::rational(1, 1)
        ));
    }

    #[test]
    fn test_answers_equal_reflexive_symmetric() {
        let cases = vec![
            norm("1/2"),
            norm("0.5"),
            norm("x+1"),
            norm("1.5e3"),
            norm("-42"),
            norm("7%"),
        ];
        for a in &cases {
            assert!(answers_equal(a, a));
            for b in &cases {
                assert_eq!(answers_equal(a, b), answers_equal(b, a));
            }
        }
    }

    #[test]
    fn test_rational_equality_exact() {
        // On the rational subdomain equality is exact reduced-fraction
        // equality, checked against independent integer arithmetic.
        for (a, b, c, d) in [
            (1i64, 2i64, 2i64, 4i64),
            (3, 9, 1, 3),
            (-1, 2, 1, -2),
            (5, 1, 10, 2),
        ] {
            let equal = a * d == b * c;
            assert_eq!(
                answers_equal(
                    &CanonicalAnswer::rational(a, b),
                    &CanonicalAnswer::rational(c, d)
                ),
                equal
            );
        }
    }

    #[test]
    fn test_majority_merges_equivalent_answers() {
        let answers = vec![Some(norm("1/2")), Some(norm("0.5")), Some(norm("7"))];
        let (winner, indices) = majority_answer(&answers, 2).unwrap();
        assert!(answers_equal(&winner, &CanonicalAnswer::rational(1, 2)));
        assert_eq!(indices, vec![0, 1]);
    }

    #[test]
    fn test_majority_absent_below_min() {
        let answers = vec![Some(norm("4")), Some(norm("5")), Some(norm("6"))];
        assert!(majority_answer(&answers, 2).is_none());
    }

    #[test]
    fn test_majority_skips_absent_answers() {
        let answers = vec![None, Some(norm("4")), Some(norm("4"))];
        let (winner, indices) = majority_answer(&answers, 2).unwrap();
        assert!(answers_equal(&winner, &CanonicalAnswer::rational(4, 1)));
        assert_eq!(indices, vec![1, 2]);
    }

    #[test]
    fn test_majority_tie_goes_to_lowest_index() {
        let answers = vec![
            Some(norm("4")),
            Some(norm("5")),
            Some(norm("5")),
            Some(norm("4")),
        ];
        let (winner, indices) = majority_answer(&answers, 2).unwrap();
        assert!(answers_equal(&winner, &CanonicalAnswer::rational(4, 1)));
        assert_eq!(indices, vec![0, 3]);
    }
}
