//! Declarative expert rules evaluated over example text.
//!
//! Conventions: proportions divide by the number of non-whitespace
//! characters (or words, for word-list rules) and are 0 on empty text;
//! keyword and prefix matches are case-insensitive and anchored at a word
//! boundary.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;
use std::sync::OnceLock;

use regex::{Regex, RegexBuilder};
use serde::{Deserialize, Serialize};

use super::matrix::{FeatureDescriptor, FeatureKind, FeatureMatrix};
use crate::data_model::Corpus;
use crate::error::{Error, Result};
use crate::util;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CharClass {
    Vowel,
    Consonant,
    Letter,
    Digit,
    Punctuation,
    /// `+ - * / = < > ^ %`
    MathPunctuation,
    NonMathPunctuation,
    Any,
    /// Explicit character set (case-insensitive for letters).
    Chars(String),
}

const VOWELS: &str = "aeiouáéíóúàèìòùäëïöüâêîôû";
const MATH: &str = "+-*/=<>^%";

impl CharClass {
    pub fn contains(&self, c: char) -> bool {
        let lower = c.to_lowercase().next().unwrap_or(c);
        match self {
            CharClass::Vowel => VOWELS.contains(lower),
            CharClass::Consonant => c.is_alphabetic() && !VOWELS.contains(lower),
            CharClass::Letter => c.is_alphabetic(),
            CharClass::Digit => c.is_ascii_digit(),
            CharClass::Punctuation => is_punct(c),
            CharClass::MathPunctuation => MATH.contains(c),
            CharClass::NonMathPunctuation => is_punct(c) && !MATH.contains(c),
            CharClass::Any => !c.is_whitespace(),
            CharClass::Chars(set) => set.chars().any(|s| s.to_lowercase().next() == Some(lower)),
        }
    }
}

fn is_punct(c: char) -> bool {
    !c.is_alphanumeric() && !c.is_whitespace()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Output {
    #[default]
    Presence,
    Count,
    Proportion,
}

/// What a rule computes. Every variant is total over arbitrary text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Evaluator {
    Keyword { keyword: String },
    Prefix { prefix: String },
    Regex {
        pattern: String,
        #[serde(default)]
        output: Output,
    },
    /// The whole (trimmed) text matches the pattern.
    WholeMatch { pattern: String },
    CharCount { class: CharClass },
    CharProportion { class: CharClass },
    /// Longest run of consecutive characters of the class.
    MaxRun { class: CharClass },
    /// Longest run of one repeated character.
    MaxRepeat,
    WordCount,
    /// Words of at least two letters with no digits.
    ValidWordCount,
    /// Words containing no digit.
    NonNumberWordCount,
    NumberCount,
    LongestNumber,
    IsBlank,
    IsDigit,
    WordList {
        words: Vec<String>,
        #[serde(default)]
        output: Output,
    },
    /// Distinct words shared with another field.
    WordOverlap {
        other_field: String,
        #[serde(default)]
        only: Vec<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertRule {
    pub id: String,
    pub category: String,
    pub name: String,
    /// Field the rule reads; all schema fields joined when absent.
    #[serde(default)]
    pub field: Option<String>,
    #[serde(flatten)]
    pub evaluator: Evaluator,
}

#[derive(Debug)]
enum Compiled {
    None,
    Re(Regex),
    Words(HashSet<String>),
}

#[derive(Debug)]
pub struct ExpertBank {
    pub rules: Vec<ExpertRule>,
    compiled: Vec<Compiled>,
}

/// Integers, decimals and simple fractions.
fn number_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\d+(?:[.,]\d+)?(?:/\d+)?").unwrap())
}

fn ci(pattern: &str) -> std::result::Result<Regex, regex::Error> {
    RegexBuilder::new(pattern).case_insensitive(true).build()
}

fn word_set(text: &str) -> HashSet<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn words(text: &str) -> Vec<&str> {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()))
        .filter(|w| !w.is_empty())
        .collect()
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl ExpertBank {
    pub fn new(rules: Vec<ExpertRule>) -> Result<Self> {
        let mut ids = HashSet::new();
        let mut compiled = Vec::with_capacity(rules.len());
        for r in &rules {
            if !ids.insert(r.id.as_str()) {
                return Err(Error::Config(format!("duplicate expert rule id `{}`", r.id)));
            }
            let bad = |e: regex::Error| Error::Config(format!("rule `{}`: {e}", r.id));
            let c = match &r.evaluator {
                Evaluator::Keyword { keyword } => {
                    if keyword.trim().is_empty() {
                        return Err(Error::Config(format!("rule `{}`: empty keyword", r.id)));
                    }
                    Compiled::Re(ci(&format!(r"\b{}\b", regex::escape(keyword.trim()))).map_err(bad)?)
                }
                Evaluator::Prefix { prefix } => {
                    if prefix.trim().is_empty() {
                        return Err(Error::Config(format!("rule `{}`: empty prefix", r.id)));
                    }
                    Compiled::Re(ci(&format!(r"\b{}", regex::escape(prefix.trim()))).map_err(bad)?)
                }
                Evaluator::Regex { pattern, .. } => Compiled::Re(ci(pattern).map_err(bad)?),
                Evaluator::WholeMatch { pattern } => Compiled::Re(ci(&format!("^(?:{pattern})$")).map_err(bad)?),
                Evaluator::WordList { words, .. } => Compiled::Words(words.iter().map(|w| w.to_lowercase()).collect()),
                Evaluator::WordOverlap { only, .. } => Compiled::Words(only.iter().map(|w| w.to_lowercase()).collect()),
                _ => Compiled::None,
            };
            compiled.push(c);
        }
        Ok(ExpertBank { rules, compiled })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let rules: Vec<ExpertRule> = util::read_json(path)?;
        ExpertBank::new(rules)
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    fn eval_rule(&self, i: usize, text: &str, fields: &BTreeMap<String, String>) -> f64 {
        let rule = &self.rules[i];
        let nonspace = text.chars().filter(|c| !c.is_whitespace()).count();
        match (&rule.evaluator, &self.compiled[i]) {
            (Evaluator::Keyword { .. } | Evaluator::Prefix { .. } | Evaluator::WholeMatch { .. }, Compiled::Re(re)) => {
                let t = if matches!(rule.evaluator, Evaluator::WholeMatch { .. }) { text.trim() } else { text };
                re.is_match(t) as u8 as f64
            }
            (Evaluator::Regex { output, .. }, Compiled::Re(re)) => match output {
                Output::Presence => re.is_match(text) as u8 as f64,
                Output::Count => re.find_iter(text).count() as f64,
                Output::Proportion => ratio(re.find_iter(text).count(), words(text).len()),
            },
            (Evaluator::CharCount { class }, _) => text.chars().filter(|&c| class.contains(c)).count() as f64,
            (Evaluator::CharProportion { class }, _) => ratio(
                text.chars().filter(|&c| !c.is_whitespace() && class.contains(c)).count(),
                nonspace,
            ),
            (Evaluator::MaxRun { class }, _) => {
                let (mut best, mut cur) = (0usize, 0usize);
                for c in text.chars() {
                    cur = if class.contains(c) { cur + 1 } else { 0 };
                    best = best.max(cur);
                }
                best as f64
            }
            (Evaluator::MaxRepeat, _) => {
                let (mut best, mut cur, mut prev) = (0usize, 0usize, None);
                for c in text.chars() {
                    cur = if Some(c) == prev { cur + 1 } else { 1 };
                    prev = Some(c);
                    best = best.max(cur);
                }
                best as f64
            }
            (Evaluator::WordCount, _) => words(text).len() as f64,
            (Evaluator::ValidWordCount, _) => words(text)
                .iter()
                .filter(|w| w.chars().count() >= 2 && w.chars().all(char::is_alphabetic))
                .count() as f64,
            (Evaluator::NonNumberWordCount, _) => {
                words(text).iter().filter(|w| !w.chars().any(|c| c.is_ascii_digit())).count() as f64
            }
            (Evaluator::NumberCount, _) => number_re().find_iter(text).count() as f64,
            (Evaluator::LongestNumber, _) => number_re()
                .find_iter(text)
                .map(|m| m.as_str().chars().count())
                .max()
                .unwrap_or(0) as f64,
            (Evaluator::IsBlank, _) => text.trim().is_empty() as u8 as f64,
            (Evaluator::IsDigit, _) => {
                let t = text.trim();
                (!t.is_empty() && t.chars().all(|c| c.is_ascii_digit())) as u8 as f64
            }
            (Evaluator::WordList { output, .. }, Compiled::Words(set)) => {
                let ws = words(text);
                let hits = ws.iter().filter(|w| set.contains(&w.to_lowercase())).count();
                match output {
                    Output::Presence => (hits > 0) as u8 as f64,
                    Output::Count => hits as f64,
                    Output::Proportion => ratio(hits, ws.len()),
                }
            }
            (Evaluator::WordOverlap { other_field, .. }, Compiled::Words(only)) => {
                let other = fields.get(other_field).map(String::as_str).unwrap_or("");
                word_set(text)
                    .intersection(&word_set(other))
                    .filter(|w| only.is_empty() || only.contains(*w))
                    .count() as f64
            }
            _ => unreachable!("rule `{}` compiled inconsistently", rule.id),
        }
    }

    /// One value per rule for a single example.
    pub fn evaluate(&self, fields: &BTreeMap<String, String>, schema: &[String]) -> Vec<f64> {
        let joined = schema
            .iter()
            .map(|f| fields.get(f).map(String::as_str).unwrap_or(""))
            .collect::<Vec<_>>()
            .join("\n");
        (0..self.rules.len())
            .map(|i| {
                let text = match &self.rules[i].field {
                    Some(f) => fields.get(f).map(String::as_str).unwrap_or(""),
                    None => joined.as_str(),
                };
                self.eval_rule(i, text, fields)
            })
            .collect()
    }

    pub fn evaluate_text(&self, text: &str) -> Vec<f64> {
        let fields = BTreeMap::from([("text".to_string(), text.to_string())]);
        self.evaluate(&fields, &["text".to_string()])
    }

    pub fn descriptors(&self) -> Vec<FeatureDescriptor> {
        self.rules
            .iter()
            .map(|r| FeatureDescriptor {
                id: format!("ef:{}", r.id),
                kind: FeatureKind::Ef,
                label: r.name.clone(),
                source: r.id.clone(),
            })
            .collect()
    }

    pub fn build(&self, corpus: &Corpus, schema: &[String]) -> Result<FeatureMatrix> {
        let values = corpus
            .examples
            .iter()
            .flat_map(|e| self.evaluate(&e.fields, schema))
            .collect();
        FeatureMatrix::new(
            corpus.examples.iter().map(|e| e.id.clone()).collect(),
            self.descriptors(),
            values,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rule(id: &str, evaluator: Evaluator) -> ExpertRule {
        ExpertRule {
            id: id.into(),
            category: "test".into(),
            name: id.into(),
            field: None,
            evaluator,
        }
    }

    fn one(e: Evaluator, text: &str) -> f64 {
        ExpertBank::new(vec![rule("r", e)]).unwrap().evaluate_text(text)[0]
    }

    #[test]
    fn keyword_and_prefix() {
        let kw = || Evaluator::Keyword { keyword: "intercropping".into() };
        assert_eq!(one(kw(), "Maize-bean Intercropping reduced losses."), 1.0);
        assert_eq!(one(kw(), "intercroppings"), 0.0);
        let pre = || Evaluator::Prefix { prefix: "convent".into() };
        assert_eq!(one(pre(), "compared with conventional tillage"), 1.0);
        assert_eq!(one(pre(), "reconvention"), 0.0);
        assert_eq!(one(Evaluator::Keyword { keyword: "CH4".into() }, "ch4 fluxes"), 1.0);
    }

    #[test]
    fn vowel_proportion_of_abc() {
        let v = one(Evaluator::CharProportion { class: CharClass::Vowel }, "abc");
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn empty_text_conventions() {
        let bank = ExpertBank::new(vec![
            rule("a", Evaluator::CharCount { class: CharClass::Letter }),
            rule("b", Evaluator::CharProportion { class: CharClass::Digit }),
            rule("c", Evaluator::WordList { words: vec!["hola".into()], output: Output::Proportion }),
            rule("d", Evaluator::MaxRun { class: CharClass::Vowel }),
            rule("e", Evaluator::NumberCount),
            rule("f", Evaluator::Regex { pattern: "x".into(), output: Output::Proportion }),
            rule("g", Evaluator::IsBlank),
        ])
        .unwrap();
        assert_eq!(bank.evaluate_text(""), [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn statistics() {
        assert_eq!(one(Evaluator::MaxRun { class: CharClass::Vowel }, "queueing"), 5.0);
        assert_eq!(one(Evaluator::MaxRepeat, "noooo way"), 4.0);
        assert_eq!(one(Evaluator::NumberCount, "1/2 of 3.5 and 10"), 3.0);
        assert_eq!(one(Evaluator::LongestNumber, "1/2 of 3.5 and 10"), 3.0);
        assert_eq!(one(Evaluator::IsDigit, " 7 "), 1.0);
        assert_eq!(one(Evaluator::IsDigit, "7a"), 0.0);
        assert_eq!(one(Evaluator::ValidWordCount, "ok a b2 yes!"), 2.0);
        assert_eq!(one(Evaluator::NonNumberWordCount, "ok 12 b2 yes"), 2.0);
        assert_eq!(one(Evaluator::CharCount { class: CharClass::Chars("ñ".into()) }, "Ñandú niño"), 2.0);
        assert_eq!(one(Evaluator::CharCount { class: CharClass::MathPunctuation }, "2+2=4!"), 2.0);
        assert_eq!(one(Evaluator::WholeMatch { pattern: r"[:;]-?[)(]".into() }, " :) "), 1.0);
    }

    #[test]
    fn word_overlap_between_fields() {
        let mut r = rule("o", Evaluator::WordOverlap { other_field: "question".into(), only: vec![] });
        r.field = Some("answer".into());
        let bank = ExpertBank::new(vec![r]).unwrap();
        let fields = BTreeMap::from([
            ("question".to_string(), "Why is the sky blue?".to_string()),
            ("answer".to_string(), "The sky is blue because of scattering".to_string()),
        ]);
        let schema = ["question".to_string(), "answer".to_string()];
        assert_eq!(bank.evaluate(&fields, &schema), [4.0]);
    }

    #[test]
    fn malformed_registry_rejected_at_load() {
        let bad = ExpertBank::new(vec![rule("r", Evaluator::Regex { pattern: "(".into(), output: Output::Count })]);
        assert!(matches!(bad, Err(Error::Config(_))));
        let dup = ExpertBank::new(vec![rule("r", Evaluator::IsBlank), rule("r", Evaluator::IsDigit)]);
        assert!(matches!(dup, Err(Error::Config(_))));
        assert!(ExpertBank::new(vec![rule("k", Evaluator::Keyword { keyword: " ".into() })]).is_err());
    }

    #[test]
    fn registry_json_shape() {
        let json = r#"[
            {"id": "kw-rice", "category": "keyword", "name": "rice", "kind": "keyword", "keyword": "rice"},
            {"id": "vowels", "category": "traditional", "name": "vowel proportion", "field": "answer",
             "kind": "char-proportion", "class": "vowel"},
            {"id": "ntilde", "category": "traditional", "name": "letter ñ", "kind": "char-proportion",
             "class": {"chars": "ñ"}}
        ]"#;
        let rules: Vec<ExpertRule> = serde_json::from_str(json).unwrap();
        let bank = ExpertBank::new(rules).unwrap();
        assert_eq!(bank.len(), 3);
        assert_eq!(bank.rules[1].field.as_deref(), Some("answer"));
    }
}
