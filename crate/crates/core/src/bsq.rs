//! Binary subtask questions: generation from LLM completions, the manual
//! grouping round-trip, and augmentation into the active feature set.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::data_model::Corpus;
use crate::error::{Error, Result};
use crate::llm::{CompletionParams, Gateway, PromptTemplate};
use crate::util;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Origin {
    Llm,
    LinguisticRule,
    Human,
    Paraphrase,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bsq {
    pub id: String,
    pub text: String,
    pub origin: Origin,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_id: Option<String>,
    #[serde(default = "yes")]
    pub active: bool,
    /// Example ids for raw questions, raw question ids for curated ones.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sources: Vec<String>,
}

fn yes() -> bool {
    true
}

impl Bsq {
    pub fn new(id: impl Into<String>, text: impl Into<String>, origin: Origin) -> Result<Self> {
        let b = Bsq {
            id: id.into(),
            text: text.into().trim().to_string(),
            origin,
            group_id: None,
            active: true,
            sources: Vec::new(),
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.text.is_empty() || !self.text.ends_with('?') {
            return Err(Error::validation(format!(
                "question `{}` must be non-empty and end with '?': {:?}",
                self.id, self.text
            )));
        }
        Ok(())
    }
}

/// Dedup key: trimmed, case-folded, whitespace-collapsed text.
pub fn normalize(text: &str) -> String {
    text.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

pub fn load_registry(path: &Path) -> Result<Vec<Bsq>> {
    let items: Vec<Bsq> = util::read_jsonl(path)?;
    let mut ids = HashSet::new();
    for b in &items {
        b.validate()?;
        if !ids.insert(b.id.clone()) {
            return Err(Error::validation(format!("duplicate question id `{}` in {}", b.id, path.display())));
        }
    }
    Ok(items)
}

pub fn save_registry(path: &Path, items: &[Bsq]) -> Result<()> {
    util::write_jsonl(path, items)
}

fn marker_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"^\s*(?:[-*•]+|\(?\d{1,3}[.)]|[Qq]\d{1,3}[:.)])\s*").unwrap()
    })
}

fn inline_number_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?:^|\s)(\d{1,3})[.)]\s").unwrap())
}

/// Splits a line like `1. A? 2. B?` at consecutively numbered markers.
fn split_inline_numbered(line: &str) -> Vec<&str> {
    let mut cuts = Vec::new();
    let mut expected: Option<u32> = None;
    for cap in inline_number_re().captures_iter(line) {
        let n: u32 = cap[1].parse().unwrap_or(0);
        let pos = cap.get(1).unwrap().start();
        match expected {
            None if line[..pos].trim().is_empty() => {
                expected = Some(n + 1);
                cuts.push(pos);
            }
            Some(e) if n == e => {
                expected = Some(n + 1);
                cuts.push(pos);
            }
            _ => {}
        }
    }
    if cuts.len() <= 1 {
        return vec![line];
    }
    let mut parts = Vec::new();
    for (i, &start) in cuts.iter().enumerate() {
        let end = cuts.get(i + 1).copied().unwrap_or(line.len());
        parts.push(&line[start..end]);
    }
    parts
}

/// Extracts questions from a completion: one per line or numbered item, list
/// markers stripped, terminal `?` required.
pub fn parse_questions(completion: &str) -> Vec<String> {
    completion
        .lines()
        .flat_map(split_inline_numbered)
        .map(|item| marker_re().replace(item, "").trim().trim_matches('"').trim().to_string())
        .filter(|q| q.len() > 1 && q.ends_with('?'))
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerationOutcome {
    pub bsqs: Vec<Bsq>,
    /// Example ids whose completion held no parseable question.
    pub misses: Vec<String>,
    /// Questions parsed before deduplication.
    pub parsed_total: usize,
}

/// Prompts the LLM once per sample and collects up to `per_sample` questions
/// from each completion, collapsing exact duplicates.
pub fn generate_raw_bsqs(
    gateway: &Gateway,
    params: &CompletionParams,
    samples: &Corpus,
    template: &PromptTemplate,
    schema: &[String],
    per_sample: usize,
) -> Result<GenerationOutcome> {
    if per_sample == 0 {
        return Err(Error::validation("per_sample must be at least 1"));
    }
    if samples.is_empty() {
        return Err(Error::validation("no samples for question generation"));
    }
    let requests = samples
        .examples
        .iter()
        .map(|ex| {
            let mut b: BTreeMap<String, String> = ex.fields.clone();
            b.insert("text".into(), ex.premise(schema));
            b.insert("n".into(), per_sample.to_string());
            b.retain(|k, _| template.placeholders.contains(k));
            Ok((template.render(&b)?.messages, params.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    let responses = gateway.complete_many(&requests);

    let mut out = GenerationOutcome::default();
    let mut by_key: HashMap<String, usize> = HashMap::new();
    for (ex, resp) in samples.examples.iter().zip(responses) {
        let resp = resp?;
        let questions = parse_questions(&resp.text);
        if questions.is_empty() {
            log::warn!("no question parsed from the completion for `{}`", ex.id);
            out.misses.push(ex.id.clone());
            continue;
        }
        for q in questions.into_iter().take(per_sample) {
            out.parsed_total += 1;
            let key = normalize(&q);
            match by_key.get(&key) {
                Some(&i) => {
                    if !out.bsqs[i].sources.contains(&ex.id) {
                        out.bsqs[i].sources.push(ex.id.clone());
                    }
                }
                None => {
                    let mut b = Bsq::new(format!("raw-{:04}", out.bsqs.len() + 1), q, Origin::Llm)?;
                    b.sources.push(ex.id.clone());
                    by_key.insert(key, out.bsqs.len());
                    out.bsqs.push(b);
                }
            }
        }
    }
    Ok(out)
}

/// Normalized Levenshtein distance on dedup-normalized text.
pub fn question_distance(a: &str, b: &str) -> f64 {
    1.0 - strsim::normalized_levenshtein(&normalize(a), &normalize(b))
}

pub const NEAR_DUPLICATE_DISTANCE: f64 = 0.15;

/// Greedy grouping suggestion: each question joins the first earlier group
/// whose founding question is within [`NEAR_DUPLICATE_DISTANCE`].
pub fn suggest_groups(raw: &[Bsq]) -> Vec<String> {
    let mut founders: Vec<usize> = Vec::new();
    let mut out = Vec::with_capacity(raw.len());
    for (i, b) in raw.iter().enumerate() {
        let found = founders
            .iter()
            .position(|&f| question_distance(&raw[f].text, &b.text) <= NEAR_DUPLICATE_DISTANCE);
        match found {
            Some(g) => out.push(format!("g{:03}", g + 1)),
            None => {
                founders.push(i);
                out.push(format!("g{:03}", founders.len()));
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewRow {
    pub raw_id: String,
    pub raw_text: String,
    pub suggested_group: String,
    pub group_id: String,
    pub reformulated_text: String,
    pub keep: bool,
}

/// Writes the review CSV. Editable columns are prefilled with the suggestion,
/// so importing an untouched file accepts the suggested grouping.
pub fn export_for_review(raw: &[Bsq], path: &Path) -> Result<()> {
    let groups = suggest_groups(raw);
    let mut first_text: HashMap<&str, &str> = HashMap::new();
    for (b, g) in raw.iter().zip(&groups) {
        first_text.entry(g.as_str()).or_insert(b.text.as_str());
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for (b, g) in raw.iter().zip(&groups) {
        w.serialize(ReviewRow {
            raw_id: b.id.clone(),
            raw_text: b.text.clone(),
            suggested_group: g.clone(),
            group_id: g.clone(),
            reformulated_text: first_text[g.as_str()].to_string(),
            keep: true,
        })?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Internal(e.to_string()))?;
    util::write_atomic(path, &bytes)
}

/// Reads an edited review file into one curated question per group.
pub fn import_curated(path: &Path, raw: &[Bsq]) -> Result<Vec<Bsq>> {
    let raw_ids: HashSet<&str> = raw.iter().map(|b| b.id.as_str()).collect();
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Validation(format!("{}: {other:?}", path.display())),
    })?;
    let mut order: Vec<String> = Vec::new();
    let mut members: HashMap<String, Vec<String>> = HashMap::new();
    let mut texts: HashMap<String, String> = HashMap::new();
    let mut referenced: HashSet<String> = HashSet::new();
    for (i, row) in reader.deserialize::<ReviewRow>().enumerate() {
        let row = row.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 2,
            message: e.to_string(),
        })?;
        if !raw_ids.contains(row.raw_id.as_str()) {
            return Err(Error::validation(format!(
                "review file references unknown raw question id `{}`",
                row.raw_id
            )));
        }
        let group = row.group_id.trim().to_string();
        if group.is_empty() {
            if row.keep {
                return Err(Error::validation(format!("kept question `{}` has no group_id", row.raw_id)));
            }
            continue;
        }
        if !referenced.contains(&group) {
            referenced.insert(group.clone());
            order.push(group.clone());
        }
        let reform = row.reformulated_text.trim();
        if !reform.is_empty() {
            texts.entry(group.clone()).or_insert_with(|| reform.to_string());
        }
        if row.keep {
            members.entry(group).or_default().push(row.raw_id);
        }
    }
    let mut curated = Vec::new();
    for g in order {
        let m = members.remove(&g).unwrap_or_default();
        let has_text = texts.contains_key(&g);
        if m.is_empty() && !has_text {
            continue;
        }
        if m.is_empty() {
            return Err(Error::validation(format!("group `{g}` has no kept member")));
        }
        let text = texts
            .remove(&g)
            .ok_or_else(|| Error::validation(format!("group `{g}` has no reformulated text")))?;
        let mut b = Bsq::new(format!("cq-{g}"), text, Origin::Llm)?;
        b.group_id = Some(g);
        b.sources = m;
        curated.push(b);
    }
    Ok(curated)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AugmentSources {
    pub raw_pool: Vec<Bsq>,
    pub linguistic: Vec<Bsq>,
    pub human: Vec<Bsq>,
    pub paraphrases: Vec<Bsq>,
}

/// Union of curated and extra questions, deduplicated by normalized text.
/// Curated questions come first; every result is active.
pub fn augment(curated: &[Bsq], extras: &AugmentSources) -> Result<Vec<Bsq>> {
    if curated.is_empty() {
        return Err(Error::validation("augmentation needs at least one curated question"));
    }
    let mut seen_text = HashSet::new();
    let mut seen_id = HashSet::new();
    let mut out = Vec::new();
    let all = curated
        .iter()
        .chain(&extras.raw_pool)
        .chain(&extras.linguistic)
        .chain(&extras.human)
        .chain(&extras.paraphrases);
    for b in all {
        b.validate()?;
        if !seen_text.insert(normalize(&b.text)) {
            continue;
        }
        let mut b = b.clone();
        b.active = true;
        let base = b.id.clone();
        let mut k = 2;
        while !seen_id.insert(b.id.clone()) {
            b.id = format!("{base}-{k}");
            k += 1;
        }
        out.push(b);
    }
    Ok(out)
}
