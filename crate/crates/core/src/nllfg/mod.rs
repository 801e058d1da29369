//! Sequence-pair Yes/No scorer trained on weak labels, one model for every
//! question.

pub mod network;
pub mod tokenizer;
pub mod train;

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bsq::Bsq;
use crate::data_model::Corpus;
use crate::error::{Error, Result};
use crate::util;
use crate::weak_labeler::{Answer, WeakLabel};

pub use network::{EncoderConfig, Network};
pub use tokenizer::{Encoded, Tokenizer};
pub use train::{EpochMetrics, FitOptions, FitReport, LrSchedule, Selection};

/// Class index of the yes-logit; the no-logit is index 1.
pub const YES: usize = 0;
pub const NO: usize = 1;

/// Scores are clamped this far inside (0, 1) so they stay strictly interior
/// even when a logit saturates the sigmoid in f64.
pub const SCORE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NliPair {
    pub example_id: String,
    pub bsq_id: String,
    pub premise: String,
    pub hypothesis: String,
    pub label: Answer,
}

impl NliPair {
    pub fn target(&self) -> usize {
        match self.label {
            Answer::Yes => YES,
            Answer::No => NO,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NliSplit {
    pub train: Vec<NliPair>,
    pub val: Vec<NliPair>,
}

/// Turns weak labels into premise/hypothesis pairs and splits them 90/10.
/// The validation size is `round(0.1 * n)`, the remainder goes to training.
pub fn build_training_set(
    labels: &[WeakLabel],
    corpus: &Corpus,
    bsqs: &[Bsq],
    schema: &[String],
    seed: u64,
) -> Result<NliSplit> {
    if labels.is_empty() {
        return Err(Error::validation("no weak labels to build training pairs from"));
    }
    let examples = corpus.index();
    let questions: BTreeMap<&str, &Bsq> = bsqs.iter().map(|b| (b.id.as_str(), b)).collect();
    let mut pairs = Vec::with_capacity(labels.len());
    for l in labels {
        let ex = examples
            .get(l.example_id.as_str())
            .ok_or_else(|| Error::validation(format!("label references unknown example `{}`", l.example_id)))?;
        let q = questions
            .get(l.bsq_id.as_str())
            .ok_or_else(|| Error::validation(format!("label references unknown question `{}`", l.bsq_id)))?;
        pairs.push(NliPair {
            example_id: l.example_id.clone(),
            bsq_id: l.bsq_id.clone(),
            premise: ex.premise(schema),
            hypothesis: q.text.clone(),
            label: l.answer,
        });
    }
    pairs.sort_by(|a, b| (&a.example_id, &a.bsq_id).cmp(&(&b.example_id, &b.bsq_id)));
    pairs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = pairs.len();
    let n_val = ((0.1 * n as f64).round() as usize).min(n - 1);
    let val = pairs.split_off(n - n_val);
    Ok(NliSplit { train: pairs, val })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainHyper {
    pub backbone_id: String,
    pub max_len: usize,
    pub max_vocab: usize,
    pub min_count: usize,
    pub oov_buckets: u32,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    #[serde(default)]
    pub schedule: LrSchedule,
    #[serde(default)]
    pub selection: Selection,
    #[serde(default)]
    pub class_weighting: bool,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            backbone_id: "tiny-encoder:h=32,l=2,a=2,ff=64".into(),
            max_len: 512,
            max_vocab: 5000,
            min_count: 1,
            oov_buckets: 64,
            epochs: 7,
            batch: 16,
            lr: 8e-5,
            schedule: LrSchedule::Linear,
            selection: Selection::BestLoss,
            class_weighting: false,
            seed: 0,
        }
    }
}

impl TrainHyper {
    fn fit_options(&self) -> FitOptions {
        FitOptions {
            epochs: self.epochs,
            batch: self.batch,
            lr: self.lr,
            schedule: self.schedule,
            selection: self.selection,
            class_weighting: self.class_weighting,
            weight_decay: 0.0,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NllfgManifest {
    pub backbone_id: String,
    pub encoder: EncoderConfig,
    pub hyper: TrainHyper,
    /// Content hashes of the training inputs, keyed by role.
    pub trained_on: BTreeMap<String, String>,
    pub train_pairs: usize,
    pub val_pairs: usize,
    pub report: FitReport,
}

#[derive(Debug, Clone)]
pub struct NllfgModel {
    pub manifest: NllfgManifest,
    pub tokenizer: Tokenizer,
    pub network: Network,
    fingerprint: String,
}

/// Independent sigmoid of each logit, clamped strictly inside (0, 1).
pub fn sigmoid_scores(logits: &[f64]) -> (f64, f64) {
    let s = |x: f64| (1.0 / (1.0 + (-x).exp())).clamp(SCORE_EPS, 1.0 - SCORE_EPS);
    (s(logits[YES]), s(logits[NO]))
}

fn fingerprint(tokenizer: &Tokenizer, network: &Network) -> String {
    let mut bytes = serde_json::to_vec(tokenizer).expect("tokenizer serializes");
    bytes.extend(network.params.iter().flat_map(|p| p.to_le_bytes()));
    util::sha256_hex(&bytes)
}

fn samples<'a>(pairs: &[NliPair], encs: &'a [Encoded]) -> Vec<train::Sample<'a>> {
    pairs
        .iter()
        .zip(encs)
        .map(|(p, e)| train::Sample { input: e, extra: &[], target: p.target() })
        .collect()
}

pub fn train(split: &NliSplit, hyper: &TrainHyper, trained_on: BTreeMap<String, String>) -> Result<NllfgModel> {
    if split.train.is_empty() {
        return Err(Error::validation("no training pairs"));
    }
    let tok = Tokenizer::fit(
        split.train.iter().flat_map(|p| [p.premise.as_str(), p.hypothesis.as_str()]),
        hyper.max_vocab,
        hyper.min_count,
        hyper.oov_buckets,
    );
    let cfg = EncoderConfig::from_backbone_id(&hyper.backbone_id, tok.vocab_size(), hyper.max_len)?;
    let mut net = Network::new(cfg.clone(), 0, 2, hyper.seed);
    let enc = |pairs: &[NliPair]| -> Vec<Encoded> {
        pairs
            .iter()
            .map(|p| tok.encode_pair(&p.premise, &p.hypothesis, hyper.max_len))
            .collect()
    };
    let train_enc = enc(&split.train);
    let val_enc = enc(&split.val);
    let truncated = train_enc.iter().chain(&val_enc).filter(|e| e.truncated).count();
    if truncated > 0 {
        log::warn!("{truncated} pair(s) exceeded {} tokens; premise tails truncated", hyper.max_len);
    }
    let train_s = samples(&split.train, &train_enc);
    let val_s = samples(&split.val, &val_enc);
    let report = train::fit(&mut net, &train_s, &val_s, &hyper.fit_options())?;
    let fingerprint = fingerprint(&tok, &net);
    Ok(NllfgModel {
        manifest: NllfgManifest {
            backbone_id: hyper.backbone_id.clone(),
            encoder: cfg,
            hyper: hyper.clone(),
            trained_on,
            train_pairs: split.train.len(),
            val_pairs: split.val.len(),
            report,
        },
        tokenizer: tok,
        network: net,
        fingerprint,
    })
}

const MANIFEST: &str = "manifest.json";
const WEIGHTS: &str = "weights.bin";
const TOKENIZER: &str = "tokenizer.json";

impl NllfgModel {
    /// Randomly initialized model with a vocabulary fitted on `texts`.
    pub fn untrained<'a>(texts: impl IntoIterator<Item = &'a str>, hyper: &TrainHyper) -> Result<Self> {
        let tok = Tokenizer::fit(texts, hyper.max_vocab, hyper.min_count, hyper.oov_buckets);
        let cfg = EncoderConfig::from_backbone_id(&hyper.backbone_id, tok.vocab_size(), hyper.max_len)?;
        let net = Network::new(cfg.clone(), 0, 2, hyper.seed);
        let fingerprint = fingerprint(&tok, &net);
        Ok(NllfgModel {
            manifest: NllfgManifest {
                backbone_id: hyper.backbone_id.clone(),
                encoder: cfg,
                hyper: hyper.clone(),
                trained_on: BTreeMap::new(),
                train_pairs: 0,
                val_pairs: 0,
                report: train::FitReport { epochs: Vec::new(), selected_epoch: 0 },
            },
            tokenizer: tok,
            network: net,
            fingerprint,
        })
    }

    /// Content hash of tokenizer and weights; keys the NLLF cache.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn logits(&self, premise: &str, hypothesis: &str) -> Vec<f64> {
        let e = self.tokenizer.encode_pair(premise, hypothesis, self.manifest.hyper.max_len);
        if e.truncated {
            log::warn!("pair exceeded {} tokens; premise tail truncated", self.manifest.hyper.max_len);
        }
        self.network.logits(&e, &[])
    }

    /// `(yes, no)` scores, each in (0, 1) and not normalized against each other.
    pub fn score(&self, premise: &str, bsq: &Bsq) -> (f64, f64) {
        sigmoid_scores(&self.logits(premise, &bsq.text))
    }

    pub fn predict(&self, premise: &str, hypothesis: &str) -> Answer {
        if train::argmax(&self.logits(premise, hypothesis)) == YES {
            Answer::Yes
        } else {
            Answer::No
        }
    }

    /// Argmax accuracy on a set of pairs.
    pub fn accuracy(&self, pairs: &[NliPair]) -> f64 {
        use rayon::prelude::*;
        let hits = pairs
            .par_iter()
            .filter(|p| self.predict(&p.premise, &p.hypothesis) == p.label)
            .count();
        hits as f64 / pairs.len().max(1) as f64
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let bytes: Vec<u8> = self.network.params.iter().flat_map(|p| p.to_le_bytes()).collect();
        util::write_atomic(&dir.join(WEIGHTS), &bytes)?;
        util::write_json(&dir.join(TOKENIZER), &self.tokenizer)?;
        util::write_json(&dir.join(MANIFEST), &self.manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: NllfgManifest = util::read_json(&dir.join(MANIFEST))?;
        let mut tokenizer: Tokenizer = util::read_json(&dir.join(TOKENIZER))?;
        tokenizer.rebuild_index();
        let path = dir.join(WEIGHTS);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.len() % 8 != 0 {
            return Err(Error::Input(format!("{}: truncated weights file", path.display())));
        }
        let params = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let network = Network::from_params(manifest.encoder.clone(), 0, 2, params)?;
        let fingerprint = fingerprint(&tokenizer, &network);
        Ok(NllfgModel { manifest, tokenizer, network, fingerprint })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bsq::Origin;
    use crate::data_model::Example;
    use crate::weak_labeler::LabelMode;

    fn labels(n: usize) -> (Vec<WeakLabel>, Corpus, Vec<Bsq>) {
        let examples: Vec<Example> = (0..n)
            .map(|i| Example::new(format!("e{i:04}"), &[("text", &format!("text {i}"))], None))
            .collect();
        let q = Bsq::new("q1", "Is it odd?", Origin::Llm).unwrap();
        let ls = (0..n)
            .map(|i| WeakLabel {
                example_id: format!("e{i:04}"),
                bsq_id: "q1".into(),
                answer: if i % 2 == 1 { Answer::Yes } else { Answer::No },
                mode: LabelMode::Direct,
                raw_hash: String::new(),
                raw: String::new(),
            })
            .collect();
        (ls, Corpus::new(examples).unwrap(), vec![q])
    }

    #[test]
    fn split_sizes() {
        let schema = vec!["text".to_string()];
        for (n, tr, va) in [(1000, 900, 100), (7, 6, 1), (1, 1, 0)] {
            let (l, c, q) = labels(n);
            let s = build_training_set(&l, &c, &q, &schema, 5).unwrap();
            assert_eq!((s.train.len(), s.val.len()), (tr, va), "n={n}");
        }
    }

    #[test]
    fn split_is_deterministic_and_order_free() {
        let schema = vec!["text".to_string()];
        let (mut l, c, q) = labels(50);
        let a = build_training_set(&l, &c, &q, &schema, 9).unwrap();
        l.reverse();
        let b = build_training_set(&l, &c, &q, &schema, 9).unwrap();
        assert_eq!(a, b);
        let other = build_training_set(&l, &c, &q, &schema, 10).unwrap();
        assert_ne!(a.val, other.val);
    }

    #[test]
    fn pair_targets() {
        let schema = vec!["text".to_string()];
        let (l, c, q) = labels(4);
        let s = build_training_set(&l, &c, &q, &schema, 0).unwrap();
        for p in s.train.iter().chain(&s.val) {
            assert_eq!(p.target(), if p.label == Answer::Yes { YES } else { NO });
            assert_eq!(p.hypothesis, "Is it odd?");
        }
    }

    #[test]
    fn empty_and_unknown_labels_rejected() {
        let schema = vec!["text".to_string()];
        let (mut l, c, q) = labels(3);
        assert!(matches!(build_training_set(&[], &c, &q, &schema, 0), Err(Error::Validation(_))));
        l[0].bsq_id = "nope".into();
        assert!(matches!(build_training_set(&l, &c, &q, &schema, 0), Err(Error::Validation(_))));
    }

    #[test]
    fn sigmoid_arithmetic() {
        let (y, n) = sigmoid_scores(&[4.0, -4.0]);
        assert!((y - 0.9820).abs() < 1e-4 && (n - 0.0180).abs() < 1e-4);
        assert_eq!(sigmoid_scores(&[0.0, 0.0]), (0.5, 0.5));
        let (y, n) = sigmoid_scores(&[800.0, -800.0]);
        assert!(y < 1.0 && n > 0.0);
    }

    #[test]
    fn default_hyper_matches_published_settings() {
        let h = TrainHyper::default();
        assert_eq!((h.epochs, h.batch, h.lr), (7, 16, 8e-5));
        assert_eq!(h.selection, Selection::BestLoss);
        assert_eq!(h.max_len, 512);
        assert!(!h.class_weighting);
    }

    fn keyword_task() -> NliSplit {
        let fillers = ["soil", "water", "crop", "field", "yield", "farm", "season", "plot"];
        let mut pairs = Vec::new();
        for i in 0..160 {
            let has = i % 2 == 0;
            let premise = format!(
                "the {} study of {} {} results",
                fillers[i % 8],
                if has { "mulch" } else { fillers[(i / 8) % 8] },
                fillers[(i + 3) % 8]
            );
            pairs.push(NliPair {
                example_id: format!("e{i}"),
                bsq_id: "q".into(),
                premise,
                hypothesis: "Does the text mention mulch?".into(),
                label: if has { Answer::Yes } else { Answer::No },
            });
        }
        let val = pairs.split_off(140);
        NliSplit { train: pairs, val }
    }

    fn small_hyper() -> TrainHyper {
        TrainHyper {
            backbone_id: "tiny-encoder:h=16,l=1,a=2,ff=32".into(),
            max_len: 32,
            epochs: 8,
            lr: 2e-3,
            seed: 4,
            ..TrainHyper::default()
        }
    }

    #[test]
    fn learns_keyword_presence_and_round_trips() {
        let split = keyword_task();
        let model = train(&split, &small_hyper(), BTreeMap::new()).unwrap();
        let acc = model.accuracy(&split.val);
        assert!(acc >= 0.95, "val accuracy {acc}");
        let best = &model.manifest.report.epochs[model.manifest.report.selected_epoch - 1];
        assert!((best.val_accuracy - acc).abs() <= 0.005);

        let dir = tempfile::tempdir().unwrap();
        model.save(dir.path()).unwrap();
        let back = NllfgModel::load(dir.path()).unwrap();
        assert_eq!(back.fingerprint(), model.fingerprint());
        let q = Bsq::new("q", "Does the text mention mulch?", Origin::Llm).unwrap();
        for p in &split.val {
            assert_eq!(back.score(&p.premise, &q), model.score(&p.premise, &q));
        }
    }

    #[test]
    fn truncated_weights_are_rejected() {
        let split = keyword_task();
        let mut h = small_hyper();
        h.epochs = 1;
        let model = train(&split, &h, BTreeMap::new()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        model.save(dir.path()).unwrap();
        std::fs::write(dir.path().join(WEIGHTS), [0u8; 16]).unwrap();
        assert!(matches!(NllfgModel::load(dir.path()), Err(Error::Input(_))));
    }
}
