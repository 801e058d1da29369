//! LLM prompting baselines: direct, zero-shot chain-of-thought, and
//! self-ask with model-chosen follow-up questions.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_model::{Corpus, Example, Label};
use crate::error::{Error, Result};
use crate::llm::{CompletionParams, Gateway, Message, PromptTemplate};
use crate::weak_labeler::{extract_answer, Answer, LabelMode, Lexicon};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Vanilla,
    Cot,
    SelfAsk,
}

impl Strategy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Strategy::Vanilla),
            "cot" => Ok(Strategy::Cot),
            "self-ask" => Ok(Strategy::SelfAsk),
            _ => Err(Error::Config(format!("unknown strategy `{s}` (vanilla, cot, self-ask)"))),
        }
    }
}

/// Templates for one task. `classify` sees the example fields, `text` and
/// `examples` (rendered exemplars, empty at 0-shot).
#[derive(Debug, Clone)]
pub struct BaselineTemplates {
    pub classify: PromptTemplate,
    /// Appended after the reasoning turn in CoT mode.
    pub cot_answer: Option<PromptTemplate>,
    /// Self-ask opening; same bindings as `classify`.
    pub self_ask: Option<PromptTemplate>,
    /// Asks the model to answer its own follow-up; binds `question`.
    pub follow_up: Option<PromptTemplate>,
    /// Forces a verdict once the follow-up budget is spent.
    pub final_answer: Option<PromptTemplate>,
}

#[derive(Debug, Clone)]
pub struct PromptBaselineConfig {
    pub strategy: Strategy,
    pub shots: usize,
    pub exemplar_ids: Vec<String>,
    pub max_follow_ups: usize,
    /// `yes` words map to the positive class, `no` words to the negative one.
    pub verdicts: Lexicon,
    /// Words used to show exemplar labels, `[negative, positive]`.
    pub label_words: [String; 2],
    pub templates: BaselineTemplates,
    /// Class assigned to abstentions.
    pub fallback: Label,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptPrediction {
    pub example_id: String,
    pub label: Label,
    pub abstained: bool,
    pub follow_ups: usize,
    pub transcript: Vec<Message>,
}

impl PromptBaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shots != 0 && self.shots != 4 {
            return Err(Error::Config(format!("shots must be 0 or 4, got {}", self.shots)));
        }
        if self.exemplar_ids.len() != self.shots {
            return Err(Error::Config(format!(
                "{}-shot prompting needs exactly {} exemplars, got {}",
                self.shots,
                self.shots,
                self.exemplar_ids.len()
            )));
        }
        let needs = |t: &Option<PromptTemplate>, what: &str| {
            t.as_ref()
                .map(|_| ())
                .ok_or_else(|| Error::Config(format!("{:?} prompting needs a `{what}` template", self.strategy)))
        };
        match self.strategy {
            Strategy::Vanilla => Ok(()),
            Strategy::Cot => needs(&self.templates.cot_answer, "cot_answer"),
            Strategy::SelfAsk => {
                needs(&self.templates.self_ask, "self_ask")?;
                needs(&self.templates.follow_up, "follow_up")?;
                needs(&self.templates.final_answer, "final_answer")
            }
        }
    }
}

fn bindings(t: &PromptTemplate, ex: &Example, schema: &[String], shots: &str) -> BTreeMap<String, String> {
    let mut b = ex.fields.clone();
    b.insert("text".into(), ex.premise(schema));
    b.insert("examples".into(), shots.to_string());
    b.retain(|k, _| t.placeholders.contains(k));
    b
}

/// Exemplar block; the exemplars must come from the training split.
pub fn render_exemplars(cfg: &PromptBaselineConfig, train: &Corpus, schema: &[String]) -> Result<String> {
    let mut out = Vec::new();
    for id in &cfg.exemplar_ids {
        let ex = train
            .get(id)
            .ok_or_else(|| Error::Config(format!("exemplar `{id}` is not in the training split")))?;
        let gold = ex
            .gold
            .ok_or_else(|| Error::Config(format!("exemplar `{id}` has no gold label")))?;
        out.push(format!("{}\nAnswer: {}", ex.premise(schema), cfg.label_words[gold.index()]));
    }
    Ok(out.join("\n\n"))
}

/// Line starting with `Follow up:` in a self-ask turn.
fn follow_up_question(text: &str) -> Option<String> {
    text.lines().find_map(|l| {
        let l = l.trim();
        let lower = l.to_lowercase();
        lower
            .strip_prefix("follow up:")
            .or_else(|| lower.strip_prefix("follow-up:"))
            .map(|_| l[l.find(':').unwrap() + 1..].trim().to_string())
            .filter(|q| !q.is_empty())
    })
}

fn to_label(a: Answer) -> Label {
    match a {
        Answer::Yes => Label::Positive,
        Answer::No => Label::Negative,
    }
}

fn classify_one(
    gateway: &Gateway,
    params: &CompletionParams,
    cfg: &PromptBaselineConfig,
    ex: &Example,
    schema: &[String],
    shots: &str,
) -> Result<PromptPrediction> {
    let t = &cfg.templates;
    let mut conv: Vec<Message>;
    let mut verdict = None;
    let mut follow_ups = 0;
    match cfg.strategy {
        Strategy::Vanilla => {
            conv = t.classify.render(&bindings(&t.classify, ex, schema, shots))?.messages;
            let r = gateway.complete(&conv, params)?;
            verdict = extract_answer(&r.text, LabelMode::Direct, &cfg.verdicts);
            conv.push(Message::assistant(r.text));
        }
        Strategy::Cot => {
            conv = t.classify.render(&bindings(&t.classify, ex, schema, shots))?.messages;
            let reasoning = gateway.complete(&conv, params)?;
            conv.push(Message::assistant(reasoning.text.clone()));
            conv.extend(t.cot_answer.as_ref().unwrap().render(&BTreeMap::new())?.messages);
            let r = gateway.complete(&conv, params)?;
            verdict = extract_answer(&r.text, LabelMode::Cot, &cfg.verdicts)
                .or_else(|| extract_answer(&format!("{}\n{}", reasoning.text, r.text), LabelMode::Cot, &cfg.verdicts));
            conv.push(Message::assistant(r.text));
        }
        Strategy::SelfAsk => {
            let open = t.self_ask.as_ref().unwrap();
            conv = open.render(&bindings(open, ex, schema, shots))?.messages;
            loop {
                let r = gateway.complete(&conv, params)?;
                conv.push(Message::assistant(r.text.clone()));
                let question = follow_up_question(&r.text);
                if question.is_none() {
                    verdict = extract_answer(&r.text, LabelMode::Cot, &cfg.verdicts);
                }
                match question {
                    Some(q) if follow_ups < cfg.max_follow_ups => {
                        follow_ups += 1;
                        let fu = t.follow_up.as_ref().unwrap();
                        conv.extend(fu.render(&BTreeMap::from([("question".to_string(), q)]))?.messages);
                    }
                    _ => break,
                }
            }
            if verdict.is_none() {
                conv.extend(t.final_answer.as_ref().unwrap().render(&BTreeMap::new())?.messages);
                let r = gateway.complete(&conv, params)?;
                verdict = extract_answer(&r.text, LabelMode::Cot, &cfg.verdicts);
                conv.push(Message::assistant(r.text));
            }
        }
    }
    Ok(PromptPrediction {
        example_id: ex.id.clone(),
        label: verdict.map_or(cfg.fallback, to_label),
        abstained: verdict.is_none(),
        follow_ups,
        transcript: conv,
    })
}

/// Classifies every example; abstentions get `cfg.fallback` and a flag.
pub fn prompt_classify(
    gateway: &Gateway,
    params: &CompletionParams,
    cfg: &PromptBaselineConfig,
    examples: &Corpus,
    train: &Corpus,
    schema: &[String],
) -> Result<Vec<PromptPrediction>> {
    cfg.validate()?;
    let shots = render_exemplars(cfg, train, schema)?;
    examples
        .examples
        .par_iter()
        .map(|ex| classify_one(gateway, params, cfg, ex, schema, &shots))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{MockBackend, Role};
    use std::sync::Arc;

    fn templates() -> BaselineTemplates {
        let t = |name: &str, ph: &[&str], text: &str| PromptTemplate::new(name, ph, vec![(Role::User, text)]).unwrap();
        BaselineTemplates {
            classify: t("classify", &["text", "examples"], "{{examples}}\nIs this answer coherent?\n{{text}}"),
            cot_answer: Some(t("cot-answer", &[], "Therefore, the answer is")),
            self_ask: Some(t("self-ask", &["text"], "Are follow up questions needed here?\n{{text}}")),
            follow_up: Some(t("follow-up", &["question"], "Answer: {{question}}")),
            final_answer: Some(t("final", &[], "So the final answer is")),
        }
    }

    fn cfg(strategy: Strategy) -> PromptBaselineConfig {
        PromptBaselineConfig {
            strategy,
            shots: 0,
            exemplar_ids: vec![],
            max_follow_ups: 4,
            verdicts: Lexicon {
                yes: vec!["incoherent".into()],
                no: vec!["coherent".into()],
                answer_markers: vec!["answer is".into()],
            },
            label_words: ["coherent".into(), "incoherent".into()],
            templates: templates(),
            fallback: Label::Negative,
        }
    }

    fn corpus() -> Corpus {
        Corpus::new(vec![
            Example::new("a", &[("text", "blah")], Some(Label::Positive)),
            Example::new("b", &[("text", "fine")], Some(Label::Negative)),
            Example::new("c", &[("text", "ok")], Some(Label::Negative)),
            Example::new("d", &[("text", "zzz")], Some(Label::Positive)),
        ])
        .unwrap()
    }

    fn params() -> CompletionParams {
        CompletionParams::new("mock")
    }

    #[test]
    fn scripted_incoherent_is_positive() {
        let gw = Gateway::new(Arc::new(MockBackend::constant("The answer is incoherent.")));
        let schema = ["text".to_string()];
        let preds = prompt_classify(&gw, &params(), &cfg(Strategy::Vanilla), &corpus(), &corpus(), &schema).unwrap();
        assert!(preds.iter().all(|p| p.label == Label::Positive && !p.abstained));
        assert_eq!(preds[0].transcript.len(), 2);
    }

    #[test]
    fn cot_uses_the_final_turn() {
        let gw = Gateway::new(Arc::new(MockBackend::from_fn(|m: &[Message]| Ok({
            if m.last().unwrap().content.contains("Therefore") {
                "coherent".to_string()
            } else {
                "It could look incoherent at first, but".to_string()
            }
        }))));
        let schema = ["text".to_string()];
        let preds = prompt_classify(&gw, &params(), &cfg(Strategy::Cot), &corpus(), &corpus(), &schema).unwrap();
        assert!(preds.iter().all(|p| p.label == Label::Negative));
        assert_eq!(preds[0].transcript.len(), 4);
    }

    #[test]
    fn self_ask_caps_follow_ups_then_forces_an_answer() {
        let gw = Gateway::new(Arc::new(MockBackend::from_fn(|m: &[Message]| Ok({
            if m.last().unwrap().content.contains("final answer") {
                "So the final answer is incoherent".to_string()
            } else {
                "Follow up: is it on topic?".to_string()
            }
        }))));
        let schema = ["text".to_string()];
        let preds = prompt_classify(&gw, &params(), &cfg(Strategy::SelfAsk), &corpus(), &corpus(), &schema).unwrap();
        for p in &preds {
            assert_eq!(p.follow_ups, 4);
            assert_eq!(p.label, Label::Positive);
        }
    }

    #[test]
    fn self_ask_stops_when_the_model_answers() {
        let gw = Gateway::new(Arc::new(MockBackend::from_fn(|m: &[Message]| Ok({
            if m.len() == 1 {
                "Follow up: does it answer the question?".to_string()
            } else {
                "So the final answer is coherent".to_string()
            }
        }))));
        let schema = ["text".to_string()];
        let preds = prompt_classify(&gw, &params(), &cfg(Strategy::SelfAsk), &corpus(), &corpus(), &schema).unwrap();
        assert!(preds.iter().all(|p| p.follow_ups == 1 && p.label == Label::Negative));
    }

    #[test]
    fn abstention_uses_fallback() {
        let gw = Gateway::new(Arc::new(MockBackend::constant("I cannot tell.")));
        let schema = ["text".to_string()];
        let mut c = cfg(Strategy::Vanilla);
        c.fallback = Label::Positive;
        let preds = prompt_classify(&gw, &params(), &c, &corpus(), &corpus(), &schema).unwrap();
        assert!(preds.iter().all(|p| p.abstained && p.label == Label::Positive));
    }

    #[test]
    fn four_shot_needs_four_training_exemplars() {
        let gw = Gateway::new(Arc::new(MockBackend::constant("coherent")));
        let schema = ["text".to_string()];
        let mut c = cfg(Strategy::Vanilla);
        c.shots = 4;
        c.exemplar_ids = vec!["a".into(), "b".into(), "c".into()];
        let err = prompt_classify(&gw, &params(), &c, &corpus(), &corpus(), &schema).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        c.exemplar_ids.push("zz".into());
        assert!(prompt_classify(&gw, &params(), &c, &corpus(), &corpus(), &schema).is_err());
        c.exemplar_ids[3] = "d".into();
        let preds = prompt_classify(&gw, &params(), &c, &corpus(), &corpus(), &schema).unwrap();
        assert!(preds[0].transcript[0].content.contains("blah\nAnswer: incoherent"));
    }

    #[test]
    fn cached_rerun_makes_no_calls() {
        let gw = Gateway::new(Arc::new(MockBackend::constant("coherent")));
        let schema = ["text".to_string()];
        let a = prompt_classify(&gw, &params(), &cfg(Strategy::Vanilla), &corpus(), &corpus(), &schema).unwrap();
        gw.reset_stats();
        let b = prompt_classify(&gw, &params(), &cfg(Strategy::Vanilla), &corpus(), &corpus(), &schema).unwrap();
        assert_eq!(gw.stats().backend_calls, 0);
        assert_eq!(a, b);
    }
}
