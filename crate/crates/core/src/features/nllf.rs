use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::matrix::{FeatureDescriptor, FeatureKind, FeatureMatrix};
use crate::bsq::Bsq;
use crate::data_model::Corpus;
use crate::error::{Error, Result};
use crate::nllfg::NllfgModel;
use crate::util;

/// Anything that yields `(yes, no)` scores for a premise/question pair.
pub trait PairScorer: Sync {
    /// Identity of the weights; cache entries are only reused under the same value.
    fn fingerprint(&self) -> &str;
    fn score_pair(&self, premise: &str, question: &str) -> (f64, f64);
}

impl PairScorer for NllfgModel {
    fn fingerprint(&self) -> &str {
        NllfgModel::fingerprint(self)
    }

    fn score_pair(&self, premise: &str, question: &str) -> (f64, f64) {
        crate::nllfg::sigmoid_scores(&self.logits(premise, question))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CacheEntry {
    example_id: String,
    bsq_id: String,
    yes: f64,
    no: f64,
}

/// Score cache for one model, persisted as `<dir>/<fingerprint>.jsonl`.
#[derive(Debug, Default)]
pub struct NllfCache {
    path: Option<PathBuf>,
    fingerprint: String,
    entries: HashMap<(String, String), (f64, f64)>,
}

impl NllfCache {
    pub fn in_memory(fingerprint: &str) -> Self {
        NllfCache { path: None, fingerprint: fingerprint.to_string(), entries: HashMap::new() }
    }

    pub fn open(dir: &Path, fingerprint: &str) -> Result<Self> {
        let path = dir.join(format!("{fingerprint}.jsonl"));
        let mut entries = HashMap::new();
        if path.exists() {
            for e in util::read_jsonl::<CacheEntry>(&path)? {
                entries.insert((e.example_id, e.bsq_id), (e.yes, e.no));
            }
        }
        Ok(NllfCache { path: Some(path), fingerprint: fingerprint.to_string(), entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn save(&self) -> Result<()> {
        let Some(path) = &self.path else { return Ok(()) };
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut rows: Vec<CacheEntry> = self
            .entries
            .iter()
            .map(|((ex, q), (y, n))| CacheEntry { example_id: ex.clone(), bsq_id: q.clone(), yes: *y, no: *n })
            .collect();
        rows.sort_by(|a, b| (&a.example_id, &a.bsq_id).cmp(&(&b.example_id, &b.bsq_id)));
        util::write_jsonl(path, &rows)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NllfStats {
    pub scored: usize,
    pub cached: usize,
}

pub fn descriptors(bsqs: &[&Bsq]) -> Vec<FeatureDescriptor> {
    bsqs.iter()
        .flat_map(|b| {
            ["yes", "no"].map(|side| FeatureDescriptor {
                id: format!("nllf:{}:{side}", b.id),
                kind: FeatureKind::Nllf,
                label: format!("{} [{side}]", b.text),
                source: b.id.clone(),
            })
        })
        .collect()
}

/// One row per example: `(yes_i, no_i)` for each active question in registry order.
pub fn build_nllf(
    scorer: &dyn PairScorer,
    corpus: &Corpus,
    bsqs: &[Bsq],
    schema: &[String],
    cache: &mut NllfCache,
) -> Result<(FeatureMatrix, NllfStats)> {
    if cache.fingerprint != scorer.fingerprint() {
        return Err(Error::Internal(format!(
            "NLLF cache belongs to model {}, scorer is {}",
            cache.fingerprint,
            scorer.fingerprint()
        )));
    }
    let active: Vec<&Bsq> = bsqs.iter().filter(|b| b.active).collect();
    if active.is_empty() {
        return Err(Error::validation("no active questions to score"));
    }
    let mut todo = Vec::new();
    for e in &corpus.examples {
        for b in &active {
            if !cache.entries.contains_key(&(e.id.clone(), b.id.clone())) {
                todo.push((e, *b));
            }
        }
    }
    let fresh: Vec<((String, String), (f64, f64))> = todo
        .par_iter()
        .map(|(e, b)| ((e.id.clone(), b.id.clone()), scorer.score_pair(&e.premise(schema), &b.text)))
        .collect();
    let stats = NllfStats {
        scored: fresh.len(),
        cached: corpus.len() * active.len() - fresh.len(),
    };
    cache.entries.extend(fresh);

    let mut values = Vec::with_capacity(corpus.len() * active.len() * 2);
    for e in &corpus.examples {
        for b in &active {
            let (y, n) = cache.entries[&(e.id.clone(), b.id.clone())];
            values.push(y);
            values.push(n);
        }
    }
    let m = FeatureMatrix::new(
        corpus.examples.iter().map(|e| e.id.clone()).collect(),
        descriptors(&active),
        values,
    )?;
    Ok((m, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bsq::Origin;
    use crate::data_model::Example;
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct Counting {
        calls: AtomicUsize,
    }

    impl PairScorer for Counting {
        fn fingerprint(&self) -> &str {
            "fake"
        }
        fn score_pair(&self, premise: &str, question: &str) -> (f64, f64) {
            self.calls.fetch_add(1, Ordering::SeqCst);
            let x = (premise.len() + question.len()) as f64;
            crate::nllfg::sigmoid_scores(&[x.sin(), x.cos()])
        }
    }

    fn setup(n_q: usize) -> (Corpus, Vec<Bsq>) {
        let corpus = Corpus::new(
            (0..5)
                .map(|i| Example::new(format!("e{i}"), &[("text", &"word ".repeat(i + 1))], None))
                .collect(),
        )
        .unwrap();
        let bsqs = (0..n_q)
            .map(|i| Bsq::new(format!("q{i:03}"), format!("Question number {i}?"), Origin::Llm).unwrap())
            .collect();
        (corpus, bsqs)
    }

    #[test]
    fn width_is_twice_the_active_questions() {
        let schema = ["text".to_string()];
        for c in [1, 66, 109] {
            let (corpus, bsqs) = setup(c);
            let s = Counting { calls: AtomicUsize::new(0) };
            let (m, _) = build_nllf(&s, &corpus, &bsqs, &schema, &mut NllfCache::in_memory("fake")).unwrap();
            assert_eq!(m.width(), 2 * c);
            assert!(m.values.iter().all(|&v| v > 0.0 && v < 1.0));
            assert_eq!(m.descriptors[0].id, "nllf:q000:yes");
            assert_eq!(m.descriptors[1].id, "nllf:q000:no");
        }
    }

    #[test]
    fn inactive_questions_are_skipped() {
        let schema = ["text".to_string()];
        let (corpus, mut bsqs) = setup(3);
        bsqs[1].active = false;
        let s = Counting { calls: AtomicUsize::new(0) };
        let (m, _) = build_nllf(&s, &corpus, &bsqs, &schema, &mut NllfCache::in_memory("fake")).unwrap();
        assert_eq!(m.width(), 4);
        assert_eq!(m.descriptors[2].source, "q002");
    }

    #[test]
    fn warmed_cache_scores_nothing_and_is_bit_identical() {
        let schema = ["text".to_string()];
        let (corpus, bsqs) = setup(4);
        let dir = tempfile::tempdir().unwrap();
        let s = Counting { calls: AtomicUsize::new(0) };
        let mut cache = NllfCache::open(dir.path(), "fake").unwrap();
        let (a, st) = build_nllf(&s, &corpus, &bsqs, &schema, &mut cache).unwrap();
        assert_eq!((st.scored, st.cached), (20, 0));
        cache.save().unwrap();

        let s2 = Counting { calls: AtomicUsize::new(0) };
        let mut warm = NllfCache::open(dir.path(), "fake").unwrap();
        let (b, st) = build_nllf(&s2, &corpus, &bsqs, &schema, &mut warm).unwrap();
        assert_eq!(s2.calls.load(Ordering::SeqCst), 0);
        assert_eq!((st.scored, st.cached), (0, 20));
        assert!(a.values.iter().zip(&b.values).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn foreign_cache_is_refused() {
        let schema = ["text".to_string()];
        let (corpus, bsqs) = setup(1);
        let s = Counting { calls: AtomicUsize::new(0) };
        let r = build_nllf(&s, &corpus, &bsqs, &schema, &mut NllfCache::in_memory("other"));
        assert!(matches!(r, Err(Error::Internal(_))));
    }
}
