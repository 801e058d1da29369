//! Zero-shot Yes/No weak labels for (example, question) pairs.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bsq::Bsq;
use crate::data_model::Corpus;
use crate::error::{Error, Result};
use crate::llm::{CompletionParams, Gateway, Message, PromptTemplate};
use crate::util;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Answer {
    Yes,
    No,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    #[default]
    Direct,
    Cot,
}

/// Affirmative/negative vocabulary plus the words that introduce a final
/// answer in chain-of-thought text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lexicon {
    pub yes: Vec<String>,
    pub no: Vec<String>,
    #[serde(default = "default_markers")]
    pub answer_markers: Vec<String>,
}

fn default_markers() -> Vec<String> {
    vec!["answer".into()]
}

impl Default for Lexicon {
    fn default() -> Self {
        Lexicon::english()
    }
}

impl Lexicon {
    pub fn english() -> Self {
        Lexicon {
            yes: vec!["yes".into()],
            no: vec!["no".into()],
            answer_markers: default_markers(),
        }
    }

    pub fn spanish() -> Self {
        Lexicon {
            yes: vec!["sí".into(), "si".into()],
            no: vec!["no".into()],
            answer_markers: vec!["respuesta".into(), "answer".into()],
        }
    }
}

fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
}

fn first_verdict(text: &str, lex: &Lexicon) -> Option<Answer> {
    tokens(text).find_map(|t| {
        if lex.yes.contains(&t) {
            Some(Answer::Yes)
        } else if lex.no.contains(&t) {
            Some(Answer::No)
        } else {
            None
        }
    })
}

/// Direct mode: first standalone affirmative/negative token. CoT mode: the
/// text after the last answer marker first, then the direct rule.
pub fn extract_answer(raw: &str, mode: LabelMode, lex: &Lexicon) -> Option<Answer> {
    if mode == LabelMode::Cot {
        let lower = raw.to_lowercase();
        let tail = lex
            .answer_markers
            .iter()
            .filter_map(|m| lower.rfind(&m.to_lowercase()).map(|p| p + m.len()))
            .max();
        if let Some(start) = tail {
            if let Some(a) = first_verdict(&lower[start..], lex) {
                return Some(a);
            }
        }
    }
    first_verdict(raw, lex)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakLabel {
    pub example_id: String,
    pub bsq_id: String,
    pub answer: Answer,
    pub mode: LabelMode,
    pub raw_hash: String,
    /// Full completion; persisted in the LLM cache rather than the label file.
    #[serde(skip)]
    pub raw: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelFailure {
    pub example_id: String,
    pub bsq_id: String,
    pub raw: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WeakLabelOutcome {
    pub labels: Vec<WeakLabel>,
    pub failures: Vec<LabelFailure>,
}

/// Prompts for one labeling mode. `cot_answer` is appended after the model's
/// reasoning to elicit the final verdict.
#[derive(Debug, Clone)]
pub struct LabelTemplates {
    pub direct: PromptTemplate,
    pub cot_reason: Option<PromptTemplate>,
    pub cot_answer: Option<PromptTemplate>,
}

fn pair_bindings(
    template: &PromptTemplate,
    fields: &BTreeMap<String, String>,
    premise: String,
    question: &str,
) -> BTreeMap<String, String> {
    let mut b = fields.clone();
    b.insert("text".into(), premise);
    b.insert("question".into(), question.to_string());
    b.retain(|k, _| template.placeholders.contains(k));
    b
}

#[allow(clippy::too_many_arguments)]
pub fn weak_label(
    gateway: &Gateway,
    params: &CompletionParams,
    examples: &Corpus,
    bsqs: &[Bsq],
    mode: LabelMode,
    templates: &LabelTemplates,
    schema: &[String],
    lexicon: &Lexicon,
) -> Result<WeakLabelOutcome> {
    let pairs: Vec<(usize, usize)> = (0..examples.len())
        .flat_map(|e| (0..bsqs.len()).map(move |q| (e, q)))
        .collect();
    let first = match mode {
        LabelMode::Direct => &templates.direct,
        LabelMode::Cot => templates
            .cot_reason
            .as_ref()
            .ok_or_else(|| Error::Config("cot labeling needs a reasoning template".into()))?,
    };
    let requests = pairs
        .iter()
        .map(|&(e, q)| {
            let ex = &examples.examples[e];
            let b = pair_bindings(first, &ex.fields, ex.premise(schema), &bsqs[q].text);
            Ok((first.render(&b)?.messages, params.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    let stage1 = gateway
        .complete_many(&requests)
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    let (raws, verdict_texts): (Vec<String>, Vec<String>) = match mode {
        LabelMode::Direct => stage1.iter().map(|r| (r.text.clone(), r.text.clone())).unzip(),
        LabelMode::Cot => {
            let answer_tpl = templates
                .cot_answer
                .as_ref()
                .ok_or_else(|| Error::Config("cot labeling needs an answer template".into()))?;
            let trigger = answer_tpl.render(&BTreeMap::new())?.messages;
            let follow: Vec<(Vec<Message>, CompletionParams)> = requests
                .iter()
                .zip(&stage1)
                .map(|((m, p), r)| {
                    let mut m = m.clone();
                    m.push(Message::assistant(r.text.clone()));
                    m.extend(trigger.iter().cloned());
                    (m, p.clone())
                })
                .collect();
            let stage2 = gateway
                .complete_many(&follow)
                .into_iter()
                .collect::<Result<Vec<_>>>()?;
            stage1
                .iter()
                .zip(&stage2)
                .map(|(a, b)| (format!("{}\n{}", a.text, b.text), b.text.clone()))
                .unzip()
        }
    };

    let mut out = WeakLabelOutcome::default();
    for ((&(e, q), raw), verdict_text) in pairs.iter().zip(raws).zip(verdict_texts) {
        let example_id = examples.examples[e].id.clone();
        let bsq_id = bsqs[q].id.clone();
        let answer = extract_answer(&verdict_text, mode, lexicon).or_else(|| extract_answer(&raw, mode, lexicon));
        match answer {
            Some(answer) => out.labels.push(WeakLabel {
                example_id,
                bsq_id,
                answer,
                mode,
                raw_hash: util::sha256_hex(raw.as_bytes()),
                raw,
            }),
            None => out.failures.push(LabelFailure { example_id, bsq_id, raw }),
        }
    }
    check_unique(&out.labels)?;
    Ok(out)
}

pub fn check_unique(labels: &[WeakLabel]) -> Result<()> {
    let mut seen = HashSet::new();
    for l in labels {
        if !seen.insert((&l.example_id, &l.bsq_id, l.mode)) {
            return Err(Error::Internal(format!(
                "duplicate weak label for ({}, {}, {:?})",
                l.example_id, l.bsq_id, l.mode
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerHistogramRow {
    pub bsq_id: String,
    pub text: String,
    pub yes: usize,
    pub no: usize,
}

/// Yes/No counts per question, in question order.
pub fn histogram(labels: &[WeakLabel], bsqs: &[Bsq]) -> Vec<AnswerHistogramRow> {
    bsqs.iter()
        .map(|b| {
            let (mut yes, mut no) = (0, 0);
            for l in labels.iter().filter(|l| l.bsq_id == b.id) {
                match l.answer {
                    Answer::Yes => yes += 1,
                    Answer::No => no += 1,
                }
            }
            AnswerHistogramRow { bsq_id: b.id.clone(), text: b.text.clone(), yes, no }
        })
        .collect()
}

pub fn write_histogram_csv(path: &Path, rows: &[AnswerHistogramRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Internal(e.to_string()))?;
    util::write_atomic(path, &bytes)
}

/// Text bar chart of the histogram, one line per question.
pub fn render_histogram(rows: &[AnswerHistogramRow], width: usize) -> String {
    let mut s = String::new();
    for r in rows {
        let total = (r.yes + r.no).max(1);
        let y = r.yes * width / total;
        s.push_str(&format!(
            "{:<12} {}{} yes={} no={}\n",
            r.bsq_id,
            "#".repeat(y),
            ".".repeat(width - y),
            r.yes,
            r.no
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bsq::Origin;
    use crate::data_model::Example;
    use crate::llm::{MockBackend, Role};
    use std::sync::Arc;

    fn en() -> Lexicon {
        Lexicon::english()
    }

    #[test]
    fn direct_extraction_fixtures() {
        let cases = [
            ("Yes, the abstract addresses adaptation.", Some(Answer::Yes)),
            ("No.", Some(Answer::No)),
            ("It is unclear.", None),
            ("NO", Some(Answer::No)),
            ("Not mentioned; yes it is implied", Some(Answer::Yes)),
            ("", None),
            ("nope, yesterday", None),
        ];
        for (raw, want) in cases {
            assert_eq!(extract_answer(raw, LabelMode::Direct, &en()), want, "{raw}");
        }
    }

    #[test]
    fn cot_extraction_prefers_final_answer() {
        let raw = "Let's think step by step. Yes, the text mentions soil. But no mitigation is measured. Therefore, the answer is No.";
        assert_eq!(extract_answer(raw, LabelMode::Cot, &en()), Some(Answer::No));
        assert_eq!(extract_answer(raw, LabelMode::Direct, &en()), Some(Answer::Yes));
        assert_eq!(
            extract_answer("Reasoning without marker. Yes.", LabelMode::Cot, &en()),
            Some(Answer::Yes)
        );
        assert_eq!(extract_answer("The answer is unclear.", LabelMode::Cot, &en()), None);
    }

    #[test]
    fn spanish_lexicon() {
        let es = Lexicon::spanish();
        assert_eq!(extract_answer("Sí, la respuesta es coherente.", LabelMode::Direct, &es), Some(Answer::Yes));
        assert_eq!(extract_answer("Por lo tanto, la respuesta es no.", LabelMode::Cot, &es), Some(Answer::No));
    }

    fn templates() -> LabelTemplates {
        LabelTemplates {
            direct: PromptTemplate::new(
                "label",
                &["text", "question"],
                vec![(Role::User, "Text: {{text}}\nQuestion: {{question}} Answer Yes or No.")],
            )
            .unwrap(),
            cot_reason: Some(
                PromptTemplate::new(
                    "label-cot",
                    &["text", "question"],
                    vec![(Role::User, "Text: {{text}}\nQuestion: {{question}}\nLet's think step by step.")],
                )
                .unwrap(),
            ),
            cot_answer: Some(
                PromptTemplate::new("label-cot-answer", &[], vec![(Role::User, "Therefore, the answer (Yes or No) is")])
                    .unwrap(),
            ),
        }
    }

    fn corpus() -> Corpus {
        Corpus::new(vec![
            Example::new("e1", &[("text", "a")], None),
            Example::new("e2", &[("text", "b")], None),
        ])
        .unwrap()
    }

    fn bsqs() -> Vec<Bsq> {
        vec![
            Bsq::new("q1", "Is it A?", Origin::Llm).unwrap(),
            Bsq::new("q2", "Is it B?", Origin::Llm).unwrap(),
        ]
    }

    #[test]
    fn constant_yes_backend_labels_everything_yes() {
        let gw = Gateway::new(Arc::new(MockBackend::constant("Yes.")));
        let out = weak_label(
            &gw,
            &CompletionParams::new("mock"),
            &corpus(),
            &bsqs(),
            LabelMode::Direct,
            &templates(),
            &["text".into()],
            &en(),
        )
        .unwrap();
        assert_eq!(out.labels.len(), 4);
        assert!(out.labels.iter().all(|l| l.answer == Answer::Yes));
        let h = histogram(&out.labels, &bsqs());
        assert_eq!((h[0].yes, h[0].no), (2, 0));
    }

    #[test]
    fn failures_are_recorded_not_coerced() {
        let gw = Gateway::new(Arc::new(MockBackend::from_fn(|m| {
            Ok(if m[0].content.contains("Is it A?") { "Maybe.".into() } else { "No".into() })
        })));
        let out = weak_label(
            &gw,
            &CompletionParams::new("mock"),
            &corpus(),
            &bsqs(),
            LabelMode::Direct,
            &templates(),
            &["text".into()],
            &en(),
        )
        .unwrap();
        assert_eq!(out.labels.len(), 2);
        assert_eq!(out.failures.len(), 2);
        assert!(out.failures.iter().all(|f| f.bsq_id == "q1" && f.raw == "Maybe."));
    }

    #[test]
    fn cot_mode_uses_two_stage_prompting() {
        let gw = Gateway::new(Arc::new(MockBackend::from_fn(|m| {
            Ok(if m.len() == 1 {
                "Let's think step by step. Yes, there is a mention but the answer depends.".into()
            } else {
                "No.".into()
            })
        })));
        let out = weak_label(
            &gw,
            &CompletionParams::new("mock"),
            &corpus(),
            &bsqs(),
            LabelMode::Cot,
            &templates(),
            &["text".into()],
            &en(),
        )
        .unwrap();
        assert!(out.labels.iter().all(|l| l.answer == Answer::No && l.mode == LabelMode::Cot));
        assert!(out.labels[0].raw.contains("step by step"));
        assert_eq!(gw.stats().backend_calls, 8);
    }

    #[test]
    fn warmed_cache_replays_without_backend_calls() {
        let gw = Gateway::new(Arc::new(MockBackend::constant("No.")));
        let run = || {
            weak_label(
                &gw,
                &CompletionParams::new("mock"),
                &corpus(),
                &bsqs(),
                LabelMode::Direct,
                &templates(),
                &["text".into()],
                &en(),
            )
            .unwrap()
        };
        let a = run();
        gw.reset_stats();
        let b = run();
        assert_eq!(gw.stats().backend_calls, 0);
        assert_eq!(a, b);
    }
}
