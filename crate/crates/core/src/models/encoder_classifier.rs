//! Text classifier on the small encoder, with optional extra feature columns
//! concatenated to the pooled representation before the output layer.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data_model::Corpus;
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::nllfg::train::{self, Sample};
use crate::nllfg::{EncoderConfig, FitOptions, FitReport, LrSchedule, Network, Selection, Tokenizer};
use crate::util;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderHyper {
    pub backbone_id: String,
    pub max_len: usize,
    pub max_vocab: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    #[serde(default)]
    pub schedule: LrSchedule,
    pub selection: Selection,
    pub seed: u64,
}

pub const VANILLA_LR: f64 = 1e-5;
pub const AUGMENTED_LR: f64 = 5e-6;

impl EncoderHyper {
    /// Defaults per task: `sac` keeps the best-accuracy epoch, anything else
    /// the best-loss epoch. Extra features lower the learning rate.
    pub fn for_task(task: &str, augmented: bool) -> Self {
        EncoderHyper {
            backbone_id: "tiny-encoder:h=32,l=2,a=2,ff=64,match=0".into(),
            max_len: 512,
            max_vocab: 20_000,
            epochs: 8,
            batch: 32,
            lr: if augmented { AUGMENTED_LR } else { VANILLA_LR },
            schedule: LrSchedule::Linear,
            selection: if task.eq_ignore_ascii_case("sac") { Selection::BestAccuracy } else { Selection::BestLoss },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderManifest {
    pub hyper: EncoderHyper,
    pub encoder: EncoderConfig,
    pub schema: Vec<String>,
    pub extra_ids: Vec<String>,
    /// Standardization fitted on the training rows.
    pub extra_mean: Vec<f64>,
    pub extra_std: Vec<f64>,
    pub report: FitReport,
}

#[derive(Debug, Clone)]
pub struct EncoderClassifier {
    pub manifest: EncoderManifest,
    pub tokenizer: Tokenizer,
    pub network: Network,
}

fn standardizer(rows: &[Vec<f64>], width: usize) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len().max(1) as f64;
    let mean: Vec<f64> = (0..width).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let std = (0..width)
        .map(|j| {
            let v = rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
            if v > 0.0 {
                v.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    (mean, std)
}

/// Row-aligned extras for a corpus, or empty rows when `extra` is `None`.
fn extra_rows(corpus: &Corpus, extra: Option<&FeatureMatrix>) -> Result<Vec<Vec<f64>>> {
    match extra {
        None => Ok(vec![Vec::new(); corpus.len()]),
        Some(m) => {
            let ids: Vec<String> = corpus.examples.iter().map(|e| e.id.clone()).collect();
            Ok(m.select_rows(&ids)?.rows())
        }
    }
}

impl EncoderClassifier {
    /// `y` holds 0/1 labels aligned with `train`; `extra` may cover more rows
    /// than the corpora and is matched by id.
    pub fn train(
        train_corpus: &Corpus,
        train_y: &[usize],
        val_corpus: &Corpus,
        val_y: &[usize],
        extra: Option<&FeatureMatrix>,
        schema: &[String],
        hyper: &EncoderHyper,
    ) -> Result<Self> {
        if train_y.len() != train_corpus.len() || val_y.len() != val_corpus.len() {
            return Err(Error::Input("labels are not aligned with the examples".into()));
        }
        let texts: Vec<String> = train_corpus.examples.iter().map(|e| e.premise(schema)).collect();
        let tok = Tokenizer::fit(texts.iter().map(String::as_str), hyper.max_vocab, 1, 64);
        let width = extra.map_or(0, |m| m.width());
        let cfg = EncoderConfig::from_backbone_id(&hyper.backbone_id, tok.vocab_size(), hyper.max_len)?;
        let mut net = Network::new(cfg.clone(), width, 2, hyper.seed);

        let tr_raw = extra_rows(train_corpus, extra)?;
        let (mean, std) = standardizer(&tr_raw, width);
        let scale = |rows: Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            rows.into_iter()
                .map(|r| r.iter().enumerate().map(|(j, v)| (v - mean[j]) / std[j]).collect())
                .collect()
        };
        let tr_x = scale(tr_raw);
        let va_x = scale(extra_rows(val_corpus, extra)?);
        let enc = |c: &Corpus| -> Vec<_> {
            c.examples
                .iter()
                .map(|e| tok.encode_single(&e.premise(schema), hyper.max_len))
                .collect()
        };
        let tr_e = enc(train_corpus);
        let va_e = enc(val_corpus);
        let opts = FitOptions {
            epochs: hyper.epochs,
            batch: hyper.batch,
            lr: hyper.lr,
            schedule: hyper.schedule,
            selection: hyper.selection,
            class_weighting: false,
            weight_decay: 0.0,
            seed: hyper.seed,
        };
        let report = train::fit(&mut net, &samples(&tr_e, &tr_x, train_y), &samples(&va_e, &va_x, val_y), &opts)?;
        Ok(EncoderClassifier {
            manifest: EncoderManifest {
                hyper: hyper.clone(),
                encoder: cfg,
                schema: schema.to_vec(),
                extra_ids: extra.map_or(Vec::new(), |m| m.descriptors.iter().map(|d| d.id.clone()).collect()),
                extra_mean: mean,
                extra_std: std,
                report,
            },
            tokenizer: tok,
            network: net,
        })
    }

    /// Predicted 0/1 labels for a corpus.
    pub fn predict(&self, corpus: &Corpus, extra: Option<&FeatureMatrix>) -> Result<Vec<usize>> {
        use rayon::prelude::*;
        let m = &self.manifest;
        let rows = match extra {
            Some(x) => extra_rows(corpus, Some(&x.select_columns(&m.extra_ids)?))?,
            None if m.extra_ids.is_empty() => extra_rows(corpus, None)?,
            None => return Err(Error::Input("classifier was trained with extra features".into())),
        };
        Ok(corpus
            .examples
            .par_iter()
            .zip(rows)
            .map(|(e, r)| {
                let x: Vec<f64> = r.iter().enumerate().map(|(j, v)| (v - m.extra_mean[j]) / m.extra_std[j]).collect();
                let enc = self.tokenizer.encode_single(&e.premise(&m.schema), m.hyper.max_len);
                train::argmax(&self.network.logits(&enc, &x))
            })
            .collect())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let bytes: Vec<u8> = self.network.params.iter().flat_map(|p| p.to_le_bytes()).collect();
        util::write_atomic(&dir.join("weights.bin"), &bytes)?;
        util::write_json(&dir.join("tokenizer.json"), &self.tokenizer)?;
        util::write_json(&dir.join("manifest.json"), &self.manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: EncoderManifest = util::read_json(&dir.join("manifest.json"))?;
        let mut tokenizer: Tokenizer = util::read_json(&dir.join("tokenizer.json"))?;
        tokenizer.rebuild_index();
        let path = dir.join("weights.bin");
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let params = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let network = Network::from_params(manifest.encoder.clone(), manifest.extra_ids.len(), 2, params)?;
        Ok(EncoderClassifier { manifest, tokenizer, network })
    }

    pub fn summary(&self) -> BTreeMap<&'static str, String> {
        BTreeMap::from([
            ("backbone", self.manifest.hyper.backbone_id.clone()),
            ("extra_features", self.manifest.extra_ids.len().to_string()),
            ("parameters", self.network.param_count().to_string()),
            ("selected_epoch", self.manifest.report.selected_epoch.to_string()),
        ])
    }
}

fn samples<'a>(e: &'a [crate::nllfg::Encoded], x: &'a [Vec<f64>], y: &[usize]) -> Vec<Sample<'a>> {
    (0..y.len()).map(|i| Sample { input: &e[i], extra: &x[i], target: y[i] }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::Example;
    use crate::features::{FeatureDescriptor, FeatureKind};

    #[test]
    fn published_defaults() {
        let v = EncoderHyper::for_task("iad", false);
        assert_eq!((v.epochs, v.batch, v.lr), (8, 32, 1e-5));
        assert_eq!(v.selection, Selection::BestLoss);
        let a = EncoderHyper::for_task("sac", true);
        assert_eq!(a.lr, 5e-6);
        assert_eq!(a.selection, Selection::BestAccuracy);
    }

    fn corpus(n: usize) -> (Corpus, Vec<usize>) {
        let words = ["alpha", "beta", "gamma", "delta"];
        let ex = (0..n)
            .map(|i| {
                let text = format!("{} {} report", words[i % 4], if i % 2 == 0 { "mulch" } else { "rain" });
                Example::new(format!("e{i}"), &[("text", &text)], None)
            })
            .collect();
        (Corpus::new(ex).unwrap(), (0..n).map(|i| (i % 2 == 0) as usize).collect())
    }

    fn extra(c: &Corpus) -> FeatureMatrix {
        FeatureMatrix::new(
            c.examples.iter().map(|e| e.id.clone()).collect(),
            vec![FeatureDescriptor { id: "ef:x".into(), kind: FeatureKind::Ef, label: "x".into(), source: "x".into() }],
            (0..c.len()).map(|i| (i % 3) as f64).collect(),
        )
        .unwrap()
    }

    fn quick() -> EncoderHyper {
        EncoderHyper {
            backbone_id: "tiny-encoder:h=16,l=1,a=2,ff=32".into(),
            max_len: 16,
            epochs: 6,
            lr: 3e-3,
            batch: 8,
            ..EncoderHyper::for_task("iad", false)
        }
    }

    #[test]
    fn zero_width_extras_reduce_to_vanilla() {
        let (c, y) = corpus(24);
        let schema = ["text".to_string()];
        let mut h = quick();
        h.epochs = 1;
        let vanilla = EncoderClassifier::train(&c, &y, &c, &y, None, &schema, &h).unwrap();
        let empty = extra(&c).take_columns(&[]).unwrap();
        let zero = EncoderClassifier::train(&c, &y, &c, &y, Some(&empty), &schema, &h).unwrap();
        assert_eq!(vanilla.network.param_count(), zero.network.param_count());
        assert_eq!(vanilla.network.params, zero.network.params);
        let aug = EncoderClassifier::train(&c, &y, &c, &y, Some(&extra(&c)), &schema, &h).unwrap();
        assert_eq!(aug.network.param_count_without_extra(), vanilla.network.param_count());
    }

    #[test]
    fn learns_and_round_trips() {
        let (c, y) = corpus(40);
        let schema = ["text".to_string()];
        let x = extra(&c);
        let m = EncoderClassifier::train(&c, &y, &c, &y, Some(&x), &schema, &quick()).unwrap();
        let pred = m.predict(&c, Some(&x)).unwrap();
        let acc = pred.iter().zip(&y).filter(|(a, b)| a == b).count() as f64 / y.len() as f64;
        assert!(acc >= 0.95, "accuracy {acc}");
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        let back = EncoderClassifier::load(dir.path()).unwrap();
        assert_eq!(back.predict(&c, Some(&x)).unwrap(), pred);
        assert!(matches!(back.predict(&c, None), Err(Error::Input(_))));
    }
}
