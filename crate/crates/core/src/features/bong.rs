//! Bag-of-n-grams with tf-idf weighting.
//!
//! Tokens are lowercased runs of two or more word characters. For a term `t`
//! in document `d`:
//!
//! ```text
//! tfidf(t, d) = count(t, d) * (ln((1 + n) / (1 + df(t))) + 1)
//! ```
//!
//! where `n` is the number of fitting documents and `df(t)` how many of them
//! contain `t`; each row is then scaled to unit L2 norm. The vocabulary keeps
//! the `max_features` terms with the highest total count in the fitting
//! documents (ties by term), stored in alphabetical order.

use std::collections::HashMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::matrix::{FeatureDescriptor, FeatureKind, FeatureMatrix};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BongParams {
    pub max_features: usize,
    pub ngram_range: (usize, usize),
}

impl Default for BongParams {
    fn default() -> Self {
        BongParams { max_features: 1000, ngram_range: (1, 2) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BongVocabulary {
    pub params: BongParams,
    pub terms: Vec<String>,
    pub idf: Vec<f64>,
}

fn token_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\b\w\w+\b").unwrap())
}

pub fn ngrams(text: &str, range: (usize, usize)) -> Vec<String> {
    let lower = text.to_lowercase();
    let toks: Vec<&str> = token_re().find_iter(&lower).map(|m| m.as_str()).collect();
    let mut out = Vec::new();
    for n in range.0..=range.1 {
        if n == 0 {
            continue;
        }
        for w in toks.windows(n) {
            out.push(w.join(" "));
        }
    }
    out
}

fn counts(text: &str, range: (usize, usize)) -> HashMap<String, usize> {
    let mut c = HashMap::new();
    for g in ngrams(text, range) {
        *c.entry(g).or_insert(0) += 1;
    }
    c
}

impl BongVocabulary {
    /// Fits on training texts only.
    pub fn fit(train_texts: &[&str], params: &BongParams) -> Result<Self> {
        if train_texts.is_empty() {
            return Err(Error::validation("cannot fit n-gram vocabulary on an empty corpus"));
        }
        let (lo, hi) = params.ngram_range;
        if lo == 0 || lo > hi || params.max_features == 0 {
            return Err(Error::Config(format!(
                "invalid n-gram settings: range ({lo}, {hi}), max_features {}",
                params.max_features
            )));
        }
        let mut total: HashMap<String, usize> = HashMap::new();
        let mut df: HashMap<String, usize> = HashMap::new();
        for t in train_texts {
            for (g, c) in counts(t, params.ngram_range) {
                *total.entry(g.clone()).or_insert(0) += c;
                *df.entry(g).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = total.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(params.max_features);
        let mut terms: Vec<String> = ranked.into_iter().map(|(t, _)| t).collect();
        terms.sort();
        let n = train_texts.len() as f64;
        let idf = terms
            .iter()
            .map(|t| ((1.0 + n) / (1.0 + df[t] as f64)).ln() + 1.0)
            .collect();
        Ok(BongVocabulary { params: params.clone(), terms, idf })
    }

    pub fn transform_one(&self, text: &str) -> Vec<f64> {
        let c = counts(text, self.params.ngram_range);
        let mut row: Vec<f64> = self
            .terms
            .iter()
            .zip(&self.idf)
            .map(|(t, idf)| c.get(t).map_or(0.0, |&k| k as f64 * idf))
            .collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
        row
    }

    pub fn transform(&self, row_ids: Vec<String>, texts: &[&str]) -> Result<FeatureMatrix> {
        let descriptors = self
            .terms
            .iter()
            .enumerate()
            .map(|(j, t)| FeatureDescriptor {
                id: format!("bong:{t}"),
                kind: FeatureKind::Bong,
                label: t.clone(),
                source: j.to_string(),
            })
            .collect();
        let values = texts.iter().flat_map(|t| self.transform_one(t)).collect();
        FeatureMatrix::new(row_ids, descriptors, values)
    }

    pub fn contains(&self, term: &str) -> bool {
        self.terms.binary_search_by(|t| t.as_str().cmp(term)).is_ok()
    }
}
