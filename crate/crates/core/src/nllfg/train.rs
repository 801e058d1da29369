//! Mini-batch Adam training for [`Network`], shared by the NLLFG and the
//! downstream encoder classifier.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::network::{cross_entropy, Network};
use super::tokenizer::Encoded;
use crate::error::{Error, Result};

/// Examples per parallel work unit; gradients are summed in chunk order so
/// results do not depend on thread scheduling.
const CHUNK: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Selection {
    #[default]
    BestLoss,
    BestAccuracy,
    LastEpoch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    Constant,
    #[default]
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    #[serde(default)]
    pub schedule: LrSchedule,
    #[serde(default)]
    pub selection: Selection,
    /// Inverse-frequency class weights in the loss.
    #[serde(default)]
    pub class_weighting: bool,
    #[serde(default)]
    pub weight_decay: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub epochs: Vec<EpochMetrics>,
    /// 1-based epoch whose weights were kept.
    pub selected_epoch: usize,
}

pub struct Sample<'a> {
    pub input: &'a Encoded,
    pub extra: &'a [f64],
    pub target: usize,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Adam { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64, weight_decay: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * g;
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= lr * (mhat / (vhat.sqrt() + Self::EPS) + weight_decay * params[i]);
        }
    }
}

fn class_weights(samples: &[Sample], n_out: usize, enabled: bool) -> Vec<f64> {
    if !enabled {
        return vec![1.0; n_out];
    }
    let mut counts = vec![0usize; n_out];
    for s in samples {
        counts[s.target] += 1;
    }
    let n = samples.len() as f64;
    counts
        .iter()
        .map(|&c| if c == 0 { 1.0 } else { n / (n_out as f64 * c as f64) })
        .collect()
}

/// Mean loss and accuracy (argmax) over a set, unweighted.
pub fn evaluate(net: &Network, samples: &[Sample]) -> (f64, f64) {
    if samples.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let per: Vec<(f64, bool)> = samples
        .par_iter()
        .map(|s| {
            let logits = net.logits(s.input, s.extra);
            let (loss, _) = cross_entropy(&logits, s.target, 1.0);
            (loss, argmax(&logits) == s.target)
        })
        .collect();
    let n = per.len() as f64;
    let loss = per.iter().map(|p| p.0).sum::<f64>() / n;
    let acc = per.iter().filter(|p| p.1).count() as f64 / n;
    (loss, acc)
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Trains in place and leaves the selected epoch's weights in `net`.
pub fn fit(net: &mut Network, train: &[Sample], val: &[Sample], opts: &FitOptions) -> Result<FitReport> {
    if train.is_empty() {
        return Err(Error::validation("no training examples"));
    }
    if opts.epochs == 0 || opts.batch == 0 || !(opts.lr > 0.0) {
        return Err(Error::Config(format!(
            "epochs, batch and lr must be positive (got {}, {}, {})",
            opts.epochs, opts.batch, opts.lr
        )));
    }
    let weights = class_weights(train, net.n_out, opts.class_weighting);
    let mut adam = Adam::new(net.param_count());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let steps_per_epoch = train.len().div_ceil(opts.batch);
    let total_steps = (steps_per_epoch * opts.epochs) as f64;
    let mut step = 0usize;
    let mut history = Vec::with_capacity(opts.epochs);
    let mut best: Option<(f64, usize, Vec<f64>)> = None;

    for epoch in 1..=opts.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(epoch as u64));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(opts.batch) {
            let partials: Vec<(f64, Vec<f64>)> = batch
                .par_chunks(CHUNK)
                .map(|chunk| {
                    let mut grad = vec![0.0; net.param_count()];
                    let mut loss = 0.0;
                    for &i in chunk {
                        let s = &train[i];
                        let (logits, cache) = net.forward(s.input, s.extra);
                        let (l, dl) = cross_entropy(&logits, s.target, weights[s.target]);
                        loss += l;
                        net.backward(&cache, &dl, &mut grad);
                    }
                    (loss, grad)
                })
                .collect();
            let scale = 1.0 / batch.len() as f64;
            let mut grad = vec![0.0; net.param_count()];
            let mut loss = 0.0;
            for (l, g) in partials {
                loss += l;
                for (a, b) in grad.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Training(format!(
                    "non-finite loss or gradient at epoch {epoch}, step {step} (loss {loss}, lr {})",
                    opts.lr
                )));
            }
            grad.iter_mut().for_each(|g| *g *= scale);
            let lr = match opts.schedule {
                LrSchedule::Constant => opts.lr,
                LrSchedule::Linear => opts.lr * (1.0 - step as f64 / total_steps),
            };
            adam.step(&mut net.params, &grad, lr, opts.weight_decay);
            epoch_loss += loss;
            step += 1;
        }
        let (val_loss, val_accuracy) = if val.is_empty() { (f64::NAN, f64::NAN) } else { evaluate(net, val) };
        let m = EpochMetrics {
            epoch,
            train_loss: epoch_loss / train.len() as f64,
            val_loss,
            val_accuracy,
        };
        log::info!(
            "epoch {epoch}/{}: train loss {:.4}, val loss {:.4}, val acc {:.4}",
            opts.epochs,
            m.train_loss,
            m.val_loss,
            m.val_accuracy
        );
        // Lower score is better.
        let score = match opts.selection {
            _ if val.is_empty() => -(epoch as f64),
            Selection::BestLoss => m.val_loss,
            Selection::BestAccuracy => -m.val_accuracy,
            Selection::LastEpoch => -(epoch as f64),
        };
        history.push(m);
        if best.as_ref().is_none_or(|b| score < b.0) {
            best = Some((score, epoch, net.params.clone()));
        }
    }
    let (_, selected_epoch, params) = best.expect("at least one epoch");
    net.params = params;
    Ok(FitReport { epochs: history, selected_epoch })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nllfg::network::EncoderConfig;
    use crate::nllfg::tokenizer::Tokenizer;

    fn toy() -> (Tokenizer, Vec<(Encoded, usize)>) {
        let texts: Vec<String> = (0..40)
            .map(|i| {
                let filler = ["soil", "water", "crop", "field", "yield"][i % 5];
                if i % 2 == 0 {
                    format!("the {filler} report mentions mulch here")
                } else {
                    format!("the {filler} report mentions rain here")
                }
            })
            .collect();
        let tok = Tokenizer::fit(texts.iter().map(String::as_str), 100, 1, 4);
        let enc = texts
            .iter()
            .enumerate()
            .map(|(i, t)| (tok.encode_single(t, 16), i % 2))
            .collect();
        (tok, enc)
    }

    fn net(tok: &Tokenizer) -> Network {
        let cfg = EncoderConfig::from_backbone_id("tiny-encoder:h=16,l=1,a=2,ff=32", tok.vocab_size(), 16).unwrap();
        Network::new(cfg, 0, 2, 3)
    }

    fn opts() -> FitOptions {
        FitOptions {
            epochs: 6,
            batch: 8,
            lr: 3e-3,
            schedule: LrSchedule::Constant,
            selection: Selection::LastEpoch,
            class_weighting: false,
            weight_decay: 0.0,
            seed: 1,
        }
    }

    #[test]
    fn learns_a_separable_toy_task() {
        let (tok, data) = toy();
        let mut n = net(&tok);
        let samples: Vec<Sample> = data.iter().map(|(e, t)| Sample { input: e, extra: &[], target: *t }).collect();
        let report = fit(&mut n, &samples, &samples, &opts()).unwrap();
        assert_eq!(report.epochs.len(), 6);
        assert!(report.epochs.last().unwrap().val_accuracy >= 0.95, "{report:?}");
    }

    #[test]
    fn training_is_deterministic() {
        let (tok, data) = toy();
        let samples: Vec<Sample> = data.iter().map(|(e, t)| Sample { input: e, extra: &[], target: *t }).collect();
        let mut a = net(&tok);
        let mut b = net(&tok);
        fit(&mut a, &samples, &[], &opts()).unwrap();
        fit(&mut b, &samples, &[], &opts()).unwrap();
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn non_finite_loss_aborts() {
        let (tok, data) = toy();
        let mut n = net(&tok);
        n.params.iter_mut().for_each(|p| *p = f64::NAN);
        let samples: Vec<Sample> = data.iter().map(|(e, t)| Sample { input: e, extra: &[], target: *t }).collect();
        let err = fit(&mut n, &samples, &[], &opts()).unwrap_err();
        assert!(matches!(err, Error::Training(_)));
    }

    #[test]
    fn selection_keeps_the_best_epoch() {
        let (tok, data) = toy();
        let samples: Vec<Sample> = data.iter().map(|(e, t)| Sample { input: e, extra: &[], target: *t }).collect();
        let mut n = net(&tok);
        let mut o = opts();
        o.selection = Selection::BestLoss;
        let report = fit(&mut n, &samples, &samples, &o).unwrap();
        let best = report
            .epochs
            .iter()
            .min_by(|a, b| a.val_loss.partial_cmp(&b.val_loss).unwrap())
            .unwrap();
        assert_eq!(report.selected_epoch, best.epoch);
        let (loss, _) = evaluate(&n, &samples);
        assert!((loss - best.val_loss).abs() < 1e-12);
    }

    #[test]
    fn class_weights_are_inverse_frequency() {
        let e = Encoded { ids: vec![2, 3], segments: vec![0, 0], matches: vec![0, 0], truncated: false };
        let s: Vec<Sample> = [0, 0, 0, 1]
            .iter()
            .map(|&t| Sample { input: &e, extra: &[], target: t })
            .collect();
        let w = class_weights(&s, 2, true);
        assert!((w[0] - 4.0 / 6.0).abs() < 1e-12 && (w[1] - 2.0).abs() < 1e-12);
        assert_eq!(class_weights(&s, 2, false), [1.0, 1.0]);
    }
}
