//! Deterministic offline backend. Every response is a pure function of the
//! rendered messages, so cached and uncached runs agree exactly.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::gateway::{BackendError, CompletionParams, LlmBackend};
use super::template::Message;
use crate::util::fnv1a64;

type MockFn = dyn Fn(&[Message]) -> Result<String, BackendError> + Send + Sync;

pub struct MockBackend {
    respond: Arc<MockFn>,
}

impl MockBackend {
    pub fn from_fn<F>(f: F) -> Self
    where
        F: Fn(&[Message]) -> Result<String, BackendError> + Send + Sync + 'static,
    {
        MockBackend { respond: Arc::new(f) }
    }

    pub fn constant(text: &str) -> Self {
        let text = text.to_string();
        Self::from_fn(move |_| Ok(text.clone()))
    }

    pub fn from_spec(spec: MockSpec) -> Self {
        Self::from_fn(move |m| Ok(spec.respond(m)))
    }
}

impl LlmBackend for MockBackend {
    fn complete(&self, messages: &[Message], _: &CompletionParams) -> Result<String, BackendError> {
        (self.respond)(messages)
    }
}

/// Declarative mock: the first rule whose triggers all occur in the
/// conversation (case-insensitive) decides the response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockSpec {
    #[serde(default)]
    pub rules: Vec<MockRule>,
    #[serde(default = "default_response")]
    pub default: String,
}

fn default_response() -> String {
    "I am not sure.".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockRule {
    pub when_contains: Vec<String>,
    #[serde(flatten)]
    pub action: MockAction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "kebab-case")]
pub enum MockAction {
    Respond {
        respond: String,
    },
    /// Yes/No oracle: answers `yes` iff any subject occurs in the conversation
    /// once the trigger phrases are removed. A hash of the conversation flips
    /// the answer with probability `noise`.
    Oracle {
        subjects: Vec<String>,
        #[serde(default = "yes_text")]
        yes: String,
        #[serde(default = "no_text")]
        no: String,
        #[serde(default)]
        noise: f64,
    },
    /// Numbered list of the questions whose keyword occurs in the conversation,
    /// padded from `filler`, capped at `count`.
    ListQuestions {
        questions: Vec<KeywordQuestion>,
        #[serde(default)]
        filler: Vec<String>,
        count: usize,
    },
}

fn yes_text() -> String {
    "Yes.".into()
}

fn no_text() -> String {
    "No.".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeywordQuestion {
    pub keyword: String,
    pub question: String,
}

pub fn conversation_text(messages: &[Message]) -> String {
    messages
        .iter()
        .map(|m| m.content.as_str())
        .collect::<Vec<_>>()
        .join("\n")
}

/// Uniform value in [0, 1) derived from the conversation text.
pub fn conversation_unit(text: &str, salt: &str) -> f64 {
    let h = fnv1a64(format!("{salt}\u{1}{text}").as_bytes());
    (h >> 11) as f64 / (1u64 << 53) as f64
}

impl MockSpec {
    pub fn respond(&self, messages: &[Message]) -> String {
        let text = conversation_text(messages);
        let lower = text.to_lowercase();
        for rule in &self.rules {
            let triggers: Vec<String> = rule.when_contains.iter().map(|t| t.to_lowercase()).collect();
            if !triggers.iter().all(|t| lower.contains(t.as_str())) {
                continue;
            }
            return match &rule.action {
                MockAction::Respond { respond } => respond.clone(),
                MockAction::Oracle { subjects, yes, no, noise } => {
                    let mut body = lower.clone();
                    for t in &triggers {
                        body = body.replace(t.as_str(), " ");
                    }
                    let hit = subjects.iter().any(|s| body.contains(&s.to_lowercase()));
                    let flip = conversation_unit(&text, "oracle-noise") < *noise;
                    if hit != flip { yes.clone() } else { no.clone() }
                }
                MockAction::ListQuestions { questions, filler, count } => {
                    let mut out: Vec<&str> = questions
                        .iter()
                        .filter(|q| lower.contains(&q.keyword.to_lowercase()))
                        .map(|q| q.question.as_str())
                        .collect();
                    out.extend(filler.iter().map(String::as_str));
                    out.truncate(*count);
                    out.iter()
                        .enumerate()
                        .map(|(i, q)| format!("{}. {q}", i + 1))
                        .collect::<Vec<_>>()
                        .join("\n")
                }
            };
        }
        self.default.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn oracle_spec(noise: f64) -> MockSpec {
        MockSpec {
            rules: vec![MockRule {
                when_contains: vec!["Does the abstract address agroecology?".into()],
                action: MockAction::Oracle {
                    subjects: vec!["agroecolog".into()],
                    yes: "Yes.".into(),
                    no: "No.".into(),
                    noise,
                },
            }],
            default: "No.".into(),
        }
    }

    fn ask(abs: &str) -> Vec<Message> {
        vec![Message::user(format!(
            "Abstract: {abs}\nQuestion: Does the abstract address agroecology?"
        ))]
    }

    #[test]
    fn oracle_is_deterministic_and_ignores_the_question_text() {
        let spec = oracle_spec(0.0);
        let cases = [
            ("Agroecological practices reduce N2O.", "Yes."),
            ("Rice paddies emit methane.", "No."),
            ("AGROECOLOGY and climate.", "Yes."),
            ("", "No."),
        ];
        for (abs, want) in cases {
            assert_eq!(spec.respond(&ask(abs)), want, "{abs}");
            assert_eq!(spec.respond(&ask(abs)), spec.respond(&ask(abs)));
        }
    }

    #[test]
    fn oracle_noise_rate_is_roughly_respected() {
        let spec = oracle_spec(0.1);
        let flips = (0..2000)
            .filter(|i| spec.respond(&ask(&format!("agroecology study {i}"))) == "No.")
            .count();
        assert!((120..=280).contains(&flips), "{flips}");
    }

    #[test]
    fn list_questions_numbers_matches() {
        let spec = MockSpec {
            rules: vec![MockRule {
                when_contains: vec!["binary questions".into()],
                action: MockAction::ListQuestions {
                    questions: vec![
                        KeywordQuestion { keyword: "mulch".into(), question: "Does the text mention mulch?".into() },
                        KeywordQuestion { keyword: "tractor".into(), question: "Does the text mention a tractor?".into() },
                    ],
                    filler: vec!["Is the text long?".into()],
                    count: 2,
                },
            }],
            default: String::new(),
        };
        let out = spec.respond(&[Message::user("Write 5 binary questions. Text: we used mulch")]);
        assert_eq!(out, "1. Does the text mention mulch?\n2. Is the text long?");
    }
}
