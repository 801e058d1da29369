//! Planted-rule benchmark: a generated corpus whose label is a majority vote
//! of three keyword indicators, a mock LLM that answers questions from the
//! same indicators with label noise, and a ready-to-run workspace.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bsq::{save_registry, Bsq, Origin};
use crate::data_model::{Corpus, Example, Label};
use crate::error::Result;
use crate::llm::mock::{KeywordQuestion, MockAction, MockRule, MockSpec};
use crate::util;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topic {
    pub keyword: String,
    pub question: String,
}

fn topic(keyword: &str, question: &str) -> Topic {
    Topic { keyword: keyword.into(), question: question.into() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n: usize,
    pub seed: u64,
    /// Probability that the mock flips a yes/no answer.
    pub noise: f64,
    /// Each present with probability 1/2; the label is positive when at least two are.
    pub signals: Vec<Topic>,
    /// Present with probability 1/2, independent of the label.
    pub distractors: Vec<Topic>,
    pub min_words: usize,
    pub max_words: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n: 2000,
            seed: 17,
            noise: 0.10,
            signals: vec![
                topic("volcano", "Does the text mention a volcano?"),
                topic("glacier", "Is a glacier referred to anywhere in the passage?"),
                topic("meteor", "Does the writer talk about a meteor?"),
            ],
            distractors: vec![
                topic("harbor", "Is there any harbor described?"),
                topic("orchard", "Does an orchard appear in the story?"),
                topic("library", "Is a library part of the content?"),
                topic("bicycle", "Would you say a bicycle is involved?"),
            ],
            min_words: 14,
            max_words: 24,
        }
    }
}

const FILLER: &[&str] = &[
    "morning", "river", "stone", "window", "garden", "yellow", "quiet", "market", "bridge", "cloud", "summer",
    "winter", "table", "paper", "friend", "coffee", "forest", "valley", "ocean", "street", "music", "silver",
    "candle", "engine", "pocket", "village", "pencil", "basket", "mirror", "ladder", "tunnel", "meadow", "pepper",
    "rabbit", "saddle", "carpet", "button", "hammer", "jacket", "kettle", "lemon", "marble", "needle", "oyster",
    "parrot", "quartz", "ribbon", "shadow", "thread", "velvet", "walnut", "anchor", "blanket", "cabin", "desert",
    "feather", "gravel", "island", "jungle", "kitten", "lagoon", "mitten", "nectar", "pillow", "spoon", "timber",
    "violet", "wagon", "yogurt", "zipper", "painted", "walked", "slowly", "bright", "gentle", "heavy", "narrow",
    "ancient", "sudden", "little",
];

/// Whether each signal keyword is present, per example.
pub fn indicators(ex: &Example, spec: &SyntheticSpec) -> Vec<bool> {
    let words: Vec<String> = ex.field("text").split_whitespace().map(str::to_lowercase).collect();
    spec.signals.iter().map(|t| words.contains(&t.keyword)).collect()
}

pub fn planted_label(present: &[bool]) -> Label {
    if present.iter().filter(|&&p| p).count() >= 2 {
        Label::Positive
    } else {
        Label::Negative
    }
}

pub fn generate_corpus(spec: &SyntheticSpec) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let examples = (0..spec.n)
        .map(|i| {
            let len = rng.gen_range(spec.min_words..=spec.max_words);
            let mut words: Vec<&str> = (0..len).map(|_| *FILLER.choose(&mut rng).unwrap()).collect();
            let mut present = Vec::new();
            for t in &spec.signals {
                let on = rng.gen_bool(0.5);
                present.push(on);
                if on {
                    words.insert(rng.gen_range(0..=words.len()), &t.keyword);
                }
            }
            for t in &spec.distractors {
                if rng.gen_bool(0.5) {
                    words.insert(rng.gen_range(0..=words.len()), &t.keyword);
                }
            }
            Example::new(format!("syn-{i:05}"), &[("text", &words.join(" "))], Some(planted_label(&present)))
        })
        .collect();
    Corpus { examples }
}

/// Extra questions merged in by augmentation; none carries signal.
pub fn extra_questions() -> Vec<Bsq> {
    [
        ("ling-1", "Is a lighthouse named in the text?"),
        ("ling-2", "Does the content refer to a windmill?"),
    ]
    .iter()
    .map(|(id, q)| Bsq::new(*id, *q, Origin::LinguisticRule).expect("valid question"))
    .collect()
}

pub const GENERATION_TRIGGER: &str = "yes/no questions that would help";
pub const BASELINE_TRIGGER: &str = "Decide whether the text satisfies the hidden rule";

pub fn mock_spec(spec: &SyntheticSpec) -> MockSpec {
    let all: Vec<&Topic> = spec.signals.iter().chain(&spec.distractors).collect();
    let mut rules = vec![MockRule {
        when_contains: vec![GENERATION_TRIGGER.into()],
        action: MockAction::ListQuestions {
            questions: all
                .iter()
                .map(|t| KeywordQuestion { keyword: t.keyword.clone(), question: t.question.clone() })
                .collect(),
            filler: vec!["Is the text written in the first person?".into()],
            count: 10,
        },
    }];
    for t in &all {
        rules.push(MockRule {
            when_contains: vec![t.question.clone()],
            action: MockAction::Oracle {
                subjects: vec![t.keyword.clone()],
                yes: "Yes.".into(),
                no: "No.".into(),
                noise: spec.noise,
            },
        });
    }
    // A weak baseline: positive whenever the first signal shows up.
    rules.push(MockRule {
        when_contains: vec![BASELINE_TRIGGER.into()],
        action: MockAction::Oracle {
            subjects: vec![spec.signals[0].keyword.clone()],
            yes: "The answer is positive.".into(),
            no: "The answer is negative.".into(),
            noise: 0.0,
        },
    });
    MockSpec { rules, default: "No.".into() }
}

const GEN_TEMPLATE: &str = r#"name = "synthetic-gen-bsq"
placeholders = ["text", "n"]

[[messages]]
role = "system"
text = "You help break a classification task into simpler checks."

[[messages]]
role = "user"
text = "Here is an example:\n{{text}}\nWrite {{n}} yes/no questions that would help decide its class.""#;

const LABEL_TEMPLATE: &str = r#"name = "synthetic-label"
placeholders = ["text", "question"]

[[messages]]
role = "user"
text = "Text: {{text}}\nQuestion: {{question}}\nAnswer with yes or no.""#;

const BASELINE_TEMPLATE: &str = r#"name = "synthetic-baseline"
placeholders = ["text", "examples"]

[[messages]]
role = "user"
text = "{{examples}}\nDecide whether the text satisfies the hidden rule. Reply positive or negative.\n{{text}}""#;

const EXPERT_RULES: &str = r#"[
  {"id": "words", "category": "statistics", "name": "word count", "kind": "word-count"},
  {"id": "kw-harbor", "category": "keyword", "name": "keyword harbor", "kind": "keyword", "keyword": "harbor"}
]"#;

fn config_toml(spec: &SyntheticSpec) -> String {
    format!(
        r#"[task]
name = "synthetic"
schema = ["text"]
label_names = ["negative", "positive"]
p_q = 0.02
p_l = 0.10
c = 8
c_plus = 10
metric_mode = "positive-class"
seed = {seed}

[data]
corpus = "corpus.jsonl"

[split]
train_frac = 0.7
val_frac = 0.1
test_frac = 0.2
seed = {seed}

[llm]
backend = "mock"
model = "mock-oracle"
mock_spec = "mock.json"

[bsq]
generation_template = "templates/gen_bsq.toml"
per_sample = 10
linguistic = "bsq_linguistic.jsonl"

[weak_label]
direct_template = "templates/label.toml"

[nllfg]
backbone_id = "tiny-encoder:h=16,l=1,a=2,ff=32"
max_len = 64
epochs = 8
lr = 2e-3
seed = {seed}

[features]
expert_rules = "expert_rules.json"

[features.bong]
max_features = 200

[selection]
folds = 15
kinds = ["nllf"]

[selection.ga]
population = 24
generations = 12
seed = {seed}

[baseline]
verdicts = {{ yes = ["positive"], no = ["negative"] }}
classify_template = "templates/baseline.toml"

[run]
baselines = ["vanilla"]
"#,
        seed = spec.seed
    )
}

/// Writes corpus, mock spec, templates and config into `dir`; returns the
/// config path.
pub fn write_workspace(dir: &Path, spec: &SyntheticSpec) -> Result<PathBuf> {
    let corpus = generate_corpus(spec);
    corpus.save(&dir.join("corpus.jsonl"))?;
    util::write_json(&dir.join("mock.json"), &mock_spec(spec))?;
    save_registry(&dir.join("bsq_linguistic.jsonl"), &extra_questions())?;
    util::write_atomic(&dir.join("templates/gen_bsq.toml"), GEN_TEMPLATE.as_bytes())?;
    util::write_atomic(&dir.join("templates/label.toml"), LABEL_TEMPLATE.as_bytes())?;
    util::write_atomic(&dir.join("templates/baseline.toml"), BASELINE_TEMPLATE.as_bytes())?;
    util::write_atomic(&dir.join("expert_rules.json"), EXPERT_RULES.as_bytes())?;
    let cfg = dir.join("config.toml");
    util::write_atomic(&cfg, config_toml(spec).as_bytes())?;
    Ok(cfg)
}
