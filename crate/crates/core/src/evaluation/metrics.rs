use serde::{Deserialize, Serialize};

use crate::data_model::{Label, MetricMode};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn from_labels(gold: &[Label], pred: &[Label]) -> Result<Self> {
        if gold.len() != pred.len() {
            return Err(Error::Input(format!(
                "{} gold labels but {} predictions",
                gold.len(),
                pred.len()
            )));
        }
        Ok(Self::from_indices(gold.iter().map(|l| l.index()), pred.iter().map(|l| l.index())))
    }

    /// 1 = positive, anything else negative.
    pub fn from_indices(gold: impl IntoIterator<Item = usize>, pred: impl IntoIterator<Item = usize>) -> Self {
        let mut c = Confusion::default();
        for (g, p) in gold.into_iter().zip(pred) {
            match (g == 1, p == 1) {
                (true, true) => c.tp += 1,
                (false, true) => c.fp += 1,
                (false, false) => c.tn += 1,
                (true, false) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// The same counts seen from the negative class.
    pub fn flipped(&self) -> Confusion {
        Confusion { tp: self.tn, fp: self.fn_, tn: self.tp, fn_: self.fp }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

/// Division with the empty-denominator convention: 0, and the flag is set.
fn div(num: usize, den: usize, flag: &mut bool) -> f64 {
    if den == 0 {
        *flag = true;
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Precision, recall and F1 of the class counted as `tp` in `c`.
pub fn class_metrics(c: &Confusion, zero_division: &mut bool) -> ClassMetrics {
    let precision = div(c.tp, c.tp + c.fp, zero_division);
    let recall = div(c.tp, c.tp + c.fn_, zero_division);
    // 2PR/(P+R) == 2TP/(2TP+FP+FN) when both are defined.
    let f1 = div(2 * c.tp, 2 * c.tp + c.fp + c.fn_, zero_division);
    ClassMetrics { precision, recall, f1, support: c.tp + c.fn_ }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: MetricMode,
    pub confusion: Confusion,
    pub accuracy: f64,
    pub positive: ClassMetrics,
    pub negative: ClassMetrics,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// Precision/recall/F1 per the mode: positive-class or macro.
    pub headline: (f64, f64, f64),
    /// Set when some ratio had an empty denominator and was reported as 0.
    pub zero_division: bool,
}

impl EvalReport {
    pub fn from_confusion(c: Confusion, mode: MetricMode) -> Self {
        let mut zd = false;
        let positive = class_metrics(&c, &mut zd);
        let negative = class_metrics(&c.flipped(), &mut zd);
        let accuracy = div(c.tp + c.tn, c.total(), &mut zd);
        let macro_precision = (positive.precision + negative.precision) / 2.0;
        let macro_recall = (positive.recall + negative.recall) / 2.0;
        let macro_f1 = (positive.f1 + negative.f1) / 2.0;
        let headline = match mode {
            MetricMode::PositiveClass => (positive.precision, positive.recall, positive.f1),
            MetricMode::Macro => (macro_precision, macro_recall, macro_f1),
        };
        EvalReport {
            mode,
            confusion: c,
            accuracy,
            positive,
            negative,
            macro_precision,
            macro_recall,
            macro_f1,
            headline,
            zero_division: zd,
        }
    }

    pub fn headline_f1(&self) -> f64 {
        self.headline.2
    }
}

pub fn score(pred: &[Label], gold: &[Label], mode: MetricMode) -> Result<EvalReport> {
    if gold.is_empty() {
        return Err(Error::Input("cannot score an empty prediction set".into()));
    }
    Ok(EvalReport::from_confusion(Confusion::from_labels(gold, pred)?, mode))
}

/// Headline F1 from 0/1 indices; used as a fitness by feature selection.
pub fn headline_f1(pred: &[usize], gold: &[usize], mode: MetricMode) -> f64 {
    EvalReport::from_confusion(Confusion::from_indices(gold.iter().copied(), pred.iter().copied()), mode).headline_f1()
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

/// Markdown header for result rows: model, variant, then P/R/F1 per task.
pub fn table_header(tasks: &[&str]) -> String {
    let mut h = String::from("| Model | Variant |");
    let mut sep = String::from("|---|---|");
    for t in tasks {
        h.push_str(&format!(" {t} P | {t} R | {t} F1 |"));
        sep.push_str("---:|---:|---:|");
    }
    format!("{h}\n{sep}")
}

/// One result row; each report contributes its headline triple.
pub fn table_row(model: &str, variant: &str, reports: &[&EvalReport]) -> String {
    let mut row = format!("| {model} | {variant} |");
    for r in reports {
        let (p, rc, f) = r.headline;
        row.push_str(&format!(" {} | {} | {} |", pct(p), pct(rc), pct(f)));
    }
    row
}
