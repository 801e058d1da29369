//! Expert audit of weak verdicts: each system's yes/no answers are scored
//! against expert answers on a shared sample.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{Confusion, EvalReport};
use crate::data_model::MetricMode;
use crate::error::{Error, Result};
use crate::weak_labeler::Answer;

/// One audited item. Verdicts are aligned with `AuditSample::systems`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditItem {
    pub example_id: String,
    pub expert: Option<Answer>,
    pub verdicts: Vec<Answer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditSample {
    pub systems: Vec<String>,
    pub items: Vec<AuditItem>,
}

fn parse_answer(s: &str) -> Option<Option<Answer>> {
    match s.trim().to_lowercase().as_str() {
        "" | "-" | "na" => Some(None),
        "yes" | "y" | "1" | "true" => Some(Some(Answer::Yes)),
        "no" | "n" | "0" | "false" => Some(Some(Answer::No)),
        _ => None,
    }
}

impl AuditSample {
    /// CSV with columns `id,expert,<system>...`; a blank expert cell marks a
    /// missing label.
    pub fn load_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let headers = rdr.headers()?.clone();
        if headers.len() < 3 || &headers[0] != "id" || &headers[1] != "expert" {
            return Err(Error::Parse {
                path: path.into(),
                line: 1,
                message: "expected header `id,expert,<system>...`".into(),
            });
        }
        let systems: Vec<String> = headers.iter().skip(2).map(str::to_string).collect();
        let mut items = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let line = i + 2;
            let cell = |j: usize| -> Result<Option<Answer>> {
                parse_answer(rec.get(j).unwrap_or("")).ok_or_else(|| Error::Parse {
                    path: path.into(),
                    line,
                    message: format!("`{}` is not a yes/no verdict", rec.get(j).unwrap_or("")),
                })
            };
            let expert = cell(1)?;
            let mut verdicts = Vec::new();
            for j in 2..headers.len() {
                verdicts.push(cell(j)?.ok_or_else(|| Error::Parse {
                    path: path.into(),
                    line,
                    message: format!("missing `{}` verdict", &headers[j]),
                })?);
            }
            items.push(AuditItem { example_id: rec[0].to_string(), expert, verdicts });
        }
        Ok(AuditSample { systems, items })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemAudit {
    pub system: String,
    pub report: EvalReport,
}

/// Naive error compounding: if the generator only copied its teacher, its
/// accuracy against the expert would be near `validation_score × teacher_accuracy`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Compounding {
    pub teacher: String,
    pub student: String,
    pub student_validation_score: f64,
    pub teacher_accuracy: f64,
    pub expected: f64,
    pub observed: f64,
    pub compensates: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub items: usize,
    pub excluded_missing_expert: usize,
    pub expert_yes: usize,
    pub expert_no: usize,
    pub systems: Vec<SystemAudit>,
    /// Fraction of items on which each pair of systems gives the same verdict.
    pub agreement: Vec<(String, String, f64)>,
    pub compounding: Option<Compounding>,
}

fn idx(a: Answer) -> usize {
    match a {
        Answer::Yes => 1,
        Answer::No => 0,
    }
}

/// Yes is counted as the positive class.
pub fn audit(sample: &AuditSample, mode: MetricMode) -> Result<AuditReport> {
    let kept: Vec<&AuditItem> = sample.items.iter().filter(|i| i.expert.is_some()).collect();
    for it in &sample.items {
        if it.verdicts.len() != sample.systems.len() {
            return Err(Error::Input(format!(
                "item `{}` has {} verdicts for {} systems",
                it.example_id,
                it.verdicts.len(),
                sample.systems.len()
            )));
        }
    }
    if kept.is_empty() {
        return Err(Error::Input("no audit item carries an expert label".into()));
    }
    let gold: Vec<usize> = kept.iter().map(|i| idx(i.expert.unwrap())).collect();
    let systems = sample
        .systems
        .iter()
        .enumerate()
        .map(|(s, name)| {
            let pred = kept.iter().map(|i| idx(i.verdicts[s]));
            SystemAudit {
                system: name.clone(),
                report: EvalReport::from_confusion(Confusion::from_indices(gold.iter().copied(), pred), mode),
            }
        })
        .collect();
    let mut agreement = Vec::new();
    for a in 0..sample.systems.len() {
        for b in a + 1..sample.systems.len() {
            let same = kept.iter().filter(|i| i.verdicts[a] == i.verdicts[b]).count();
            agreement.push((sample.systems[a].clone(), sample.systems[b].clone(), same as f64 / kept.len() as f64));
        }
    }
    let expert_yes = gold.iter().filter(|&&g| g == 1).count();
    Ok(AuditReport {
        items: kept.len(),
        excluded_missing_expert: sample.items.len() - kept.len(),
        expert_yes,
        expert_no: kept.len() - expert_yes,
        systems,
        agreement,
        compounding: None,
    })
}

impl AuditReport {
    pub fn system(&self, name: &str) -> Option<&EvalReport> {
        self.systems.iter().find(|s| s.system == name).map(|s| &s.report)
    }

    /// Adds the compounding comparison; `student_validation_score` is the
    /// generator's own validation score against its weak labels.
    pub fn with_compounding(mut self, teacher: &str, student: &str, student_validation_score: f64) -> Result<Self> {
        let t = self.system(teacher).ok_or_else(|| Error::Input(format!("no system `{teacher}` in audit")))?;
        let s = self.system(student).ok_or_else(|| Error::Input(format!("no system `{student}` in audit")))?;
        let expected = student_validation_score * t.accuracy;
        self.compounding = Some(Compounding {
            teacher: teacher.into(),
            student: student.into(),
            student_validation_score,
            teacher_accuracy: t.accuracy,
            expected,
            observed: s.accuracy,
            compensates: s.accuracy > expected,
        });
        Ok(self)
    }

    pub fn to_markdown(&self) -> String {
        let mut out = format!(
            "Audited items: {} (expert yes {}, no {}); excluded for missing expert label: {}\n\n",
            self.items, self.expert_yes, self.expert_no, self.excluded_missing_expert
        );
        out.push_str("| System | TP | FP | TN | FN | Accuracy |\n|---|---:|---:|---:|---:|---:|\n");
        for s in &self.systems {
            let c = s.report.confusion;
            out.push_str(&format!(
                "| {} | {} | {} | {} | {} | {:.2} |\n",
                s.system, c.tp, c.fp, c.tn, c.fn_, 100.0 * s.report.accuracy
            ));
        }
        for (a, b, r) in &self.agreement {
            out.push_str(&format!("\nAgreement {a} / {b}: {:.2}%", 100.0 * r));
        }
        if let Some(c) = &self.compounding {
            out.push_str(&format!(
                "\n\nCompounding: {:.2} x {:.2} = {:.3} expected for {}, observed {:.3}{}\n",
                c.student_validation_score,
                c.teacher_accuracy,
                c.expected,
                c.student,
                c.observed,
                if c.compensates { " (above the naive product)" } else { "" }
            ));
        }
        out
    }
}
