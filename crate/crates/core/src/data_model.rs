//! Corpus representation, deterministic splitting and sampling.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util;

/// Binary gold label. Tasks attach a display alias to each side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Positive,
    Negative,
}

impl Label {
    pub fn is_positive(self) -> bool {
        matches!(self, Label::Positive)
    }

    /// Class index used by trees and metrics: negative = 0, positive = 1.
    pub fn index(self) -> usize {
        match self {
            Label::Negative => 0,
            Label::Positive => 1,
        }
    }

    pub fn from_index(idx: usize) -> Label {
        if idx == 1 {
            Label::Positive
        } else {
            Label::Negative
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Positive => "positive",
            Label::Negative => "negative",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub fields: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<Label>,
}

impl Example {
    pub fn new(id: impl Into<String>, fields: &[(&str, &str)], gold: Option<Label>) -> Self {
        Example {
            id: id.into(),
            fields: fields
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
            gold,
        }
    }

    pub fn field(&self, name: &str) -> &str {
        self.fields.get(name).map(String::as_str).unwrap_or("")
    }

    /// Premise text for multi-field examples: `field: text` blocks joined by a
    /// paragraph break, in schema order.
    pub fn premise(&self, schema: &[String]) -> String {
        if schema.len() == 1 {
            return self.field(&schema[0]).to_string();
        }
        schema
            .iter()
            .map(|name| format!("{name}: {}", self.field(name)))
            .collect::<Vec<_>>()
            .join("\n\n")
    }

    /// All field text concatenated in schema order, without field names.
    pub fn joined_text(&self, schema: &[String]) -> String {
        schema
            .iter()
            .map(|name| self.field(name))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub examples: Vec<Example>,
}

impl Corpus {
    pub fn new(examples: Vec<Example>) -> Result<Self> {
        let corpus = Corpus { examples };
        corpus.check_unique_ids()?;
        Ok(corpus)
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Example> {
        self.examples.iter().find(|e| e.id == id)
    }

    pub fn index(&self) -> BTreeMap<&str, &Example> {
        self.examples.iter().map(|e| (e.id.as_str(), e)).collect()
    }

    pub fn positive_rate(&self) -> f64 {
        let labeled: Vec<_> = self.examples.iter().filter_map(|e| e.gold).collect();
        if labeled.is_empty() {
            return 0.0;
        }
        labeled.iter().filter(|l| l.is_positive()).count() as f64 / labeled.len() as f64
    }

    fn check_unique_ids(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for ex in &self.examples {
            if !seen.insert(ex.id.as_str()) {
                return Err(Error::validation(format!("duplicate example id `{}`", ex.id)));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        util::write_jsonl(path, &self.examples)
    }

    /// Subset in the given id order.
    pub fn select(&self, ids: &[String]) -> Result<Corpus> {
        let index = self.index();
        let examples = ids
            .iter()
            .map(|id| {
                index
                    .get(id.as_str())
                    .map(|e| (*e).clone())
                    .ok_or_else(|| Error::validation(format!("unknown example id `{id}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Corpus { examples })
    }
}

/// Loads a JSON-Lines corpus and validates every record against `schema`.
pub fn load_corpus(path: &Path, schema: &[String]) -> Result<Corpus> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut examples = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message,
        };
        let ex: Example = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        for name in schema {
            if !ex.fields.contains_key(name) {
                return Err(parse_err(format!(
                    "record `{}` is missing field `{name}`",
                    ex.id
                )));
            }
        }
        if ex.fields.values().all(|v| v.trim().is_empty()) {
            return Err(parse_err(format!("record `{}` has only empty fields", ex.id)));
        }
        if !seen.insert(ex.id.clone()) {
            return Err(Error::validation(format!(
                "duplicate example id `{}` at line {}",
                ex.id,
                idx + 1
            )));
        }
        examples.push(ex);
    }
    Ok(Corpus { examples })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    #[default]
    Random,
    /// Test partition is a pre-identified id list; the rest is split train/val.
    FixedTest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub seed: u64,
    #[serde(default)]
    pub mode: SplitMode,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fixed_test_ids: Vec<String>,
}

impl SplitSpec {
    pub fn random(train: f64, val: f64, test: f64, seed: u64) -> Self {
        SplitSpec {
            train_frac: train,
            val_frac: val,
            test_frac: test,
            seed,
            mode: SplitMode::Random,
            fixed_test_ids: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, f) in [
            ("train_frac", self.train_frac),
            ("val_frac", self.val_frac),
            ("test_frac", self.test_frac),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::validation(format!("{name}={f} outside [0, 1]")));
            }
        }
        let sum = self.train_frac + self.val_frac + self.test_frac;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::validation(format!("split fractions sum to {sum}, not 1")));
        }
        if self.mode == SplitMode::FixedTest && self.fixed_test_ids.is_empty() {
            return Err(Error::validation("fixed-test split without test ids"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub spec: SplitSpec,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub train: Corpus,
    pub val: Corpus,
    pub test: Corpus,
}

impl Partition {
    pub fn manifest(&self, spec: &SplitSpec) -> SplitManifest {
        let ids = |c: &Corpus| c.examples.iter().map(|e| e.id.clone()).collect();
        SplitManifest {
            spec: spec.clone(),
            train: ids(&self.train),
            val: ids(&self.val),
            test: ids(&self.test),
        }
    }
}

/// Partitions a fully labeled corpus. Val and test sizes are `floor(frac * N)`;
/// the remainder goes to train.
pub fn split(corpus: &Corpus, spec: &SplitSpec) -> Result<Partition> {
    spec.validate()?;
    if let Some(ex) = corpus.examples.iter().find(|e| e.gold.is_none()) {
        return Err(Error::validation(format!(
            "example `{}` has no gold label and cannot be split",
            ex.id
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    match spec.mode {
        SplitMode::Random => {
            let n = corpus.len();
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let n_val = (spec.val_frac * n as f64 + 1e-9).floor() as usize;
            let n_test = (spec.test_frac * n as f64 + 1e-9).floor() as usize;
            let n_train = n - n_val - n_test;
            let pick = |idx: &[usize]| Corpus {
                examples: idx.iter().map(|&i| corpus.examples[i].clone()).collect(),
            };
            Ok(Partition {
                train: pick(&order[..n_train]),
                val: pick(&order[n_train..n_train + n_val]),
                test: pick(&order[n_train + n_val..]),
            })
        }
        SplitMode::FixedTest => {
            let test_ids: HashSet<&str> = spec.fixed_test_ids.iter().map(String::as_str).collect();
            for id in &test_ids {
                if corpus.get(id).is_none() {
                    return Err(Error::validation(format!("fixed test id `{id}` not in corpus")));
                }
            }
            let test = Corpus {
                examples: corpus
                    .examples
                    .iter()
                    .filter(|e| test_ids.contains(e.id.as_str()))
                    .cloned()
                    .collect(),
            };
            let mut rest: Vec<Example> = corpus
                .examples
                .iter()
                .filter(|e| !test_ids.contains(e.id.as_str()))
                .cloned()
                .collect();
            rest.shuffle(&mut rng);
            let denom = spec.train_frac + spec.val_frac;
            let val_share = if denom > 0.0 { spec.val_frac / denom } else { 0.0 };
            let n_val = (val_share * rest.len() as f64 + 1e-9).floor() as usize;
            let val = rest.split_off(rest.len() - n_val);
            Ok(Partition {
                train: Corpus { examples: rest },
                val: Corpus { examples: val },
                test,
            })
        }
    }
}

/// Rebuilds a partition from a stored manifest.
pub fn apply_manifest(corpus: &Corpus, manifest: &SplitManifest) -> Result<Partition> {
    Ok(Partition {
        train: corpus.select(&manifest.train)?,
        val: corpus.select(&manifest.val)?,
        test: corpus.select(&manifest.test)?,
    })
}

/// Sampling without replacement of `max(1, round(frac * |pool|))` examples.
pub fn sample_fraction(pool: &Corpus, frac: f64, seed: u64) -> Result<Corpus> {
    if pool.is_empty() {
        return Err(Error::validation("cannot sample from an empty pool"));
    }
    if !(frac > 0.0 && frac <= 1.0) {
        return Err(Error::validation(format!("sample fraction {frac} outside (0, 1]")));
    }
    let k = ((frac * pool.len() as f64).round() as usize).clamp(1, pool.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut rng);
    Ok(Corpus {
        examples: order[..k].iter().map(|&i| pool.examples[i].clone()).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricMode {
    /// Precision/recall/F1 of the positive class.
    PositiveClass,
    /// Unweighted mean over both classes.
    Macro,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub p_q: f64,
    pub p_l: f64,
    pub c: usize,
    pub c_plus: usize,
    pub metric_mode: MetricMode,
}

impl TaskConfig {
    /// Scientific-abstract screening defaults.
    pub fn sac() -> Self {
        TaskConfig {
            p_q: 0.013,
            p_l: 0.10,
            c: 13,
            c_plus: 109,
            metric_mode: MetricMode::Macro,
        }
    }

    /// Incoherent-answer detection defaults.
    pub fn iad() -> Self {
        TaskConfig {
            p_q: 0.0015,
            p_l: 0.10,
            c: 10,
            c_plus: 66,
            metric_mode: MetricMode::PositiveClass,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p_q > 0.0 && self.p_q <= self.p_l && self.p_l <= 1.0) {
            return Err(Error::validation(format!(
                "need 0 < p_q <= p_l <= 1, got p_q={} p_l={}",
                self.p_q, self.p_l
            )));
        }
        if self.c > self.c_plus {
            return Err(Error::validation(format!(
                "C={} exceeds C+={}",
                self.c, self.c_plus
            )));
        }
        Ok(())
    }
}
