//! Per-example explanation documents built from decision paths.

use serde::{Deserialize, Serialize};

use crate::data_model::{Corpus, Label};
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::models::{DecisionPath, DecisionTree};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub example_id: String,
    pub path: DecisionPath,
    pub prediction: Label,
    pub correct: Option<bool>,
    pub markdown: String,
}

fn fmt_value(v: f64) -> String {
    format!("{v:.4}")
}

/// Renders one document. The path must come from `tree`.
pub fn render_one(
    tree: &DecisionTree,
    path: &DecisionPath,
    example_id: &str,
    text: &str,
    gold: Option<Label>,
    class_names: [&str; 2],
) -> Result<Explanation> {
    let prediction = tree
        .replay(path)
        .ok_or_else(|| Error::Internal(format!("decision path for `{example_id}` does not belong to this tree")))?;
    let label = Label::from_index(prediction);
    let correct = gold.map(|g| g == label);
    let mut md = format!("## {example_id}\n\n> {}\n\n", text.replace('\n', "\n> "));
    if path.steps.is_empty() {
        md.push_str("No tests: the tree is a single leaf.\n\n");
    } else {
        md.push_str("| # | Feature | Value | Test | Branch |\n|---:|---|---:|---|---|\n");
        for (i, s) in path.steps.iter().enumerate() {
            let (op, branch) = if s.went_left { ("<=", "left") } else { (">", "right") };
            md.push_str(&format!(
                "| {} | {} | {} | {} {} | {} |\n",
                i + 1,
                tree.feature_labels[s.feature].replace('|', "\\|"),
                fmt_value(s.value),
                op,
                fmt_value(s.threshold),
                branch
            ));
        }
        md.push('\n');
    }
    md.push_str(&format!("Verdict: **{}**", class_names[prediction]));
    match correct {
        Some(true) => md.push_str(" ✓ (matches gold)"),
        Some(false) => md.push_str(&format!(" ✗ (gold: {})", class_names[gold.unwrap().index()])),
        None => {}
    }
    md.push('\n');
    Ok(Explanation { example_id: example_id.into(), path: path.clone(), prediction: label, correct, markdown: md })
}

/// One document per row of `matrix`, whose columns must already be aligned
/// to the tree. Text comes from `corpus` when the id is present there.
pub fn render_explanations(
    tree: &DecisionTree,
    matrix: &FeatureMatrix,
    corpus: &Corpus,
    schema: &[String],
    class_names: [&str; 2],
) -> Result<Vec<Explanation>> {
    let aligned = tree.align(matrix)?;
    let index = corpus.index();
    aligned
        .row_ids
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let path = tree.predict_checked(aligned.row(i))?;
            let ex = index.get(id.as_str());
            let text = ex.map(|e| e.premise(schema)).unwrap_or_default();
            render_one(tree, &path, id, &text, ex.and_then(|e| e.gold), class_names)
        })
        .collect()
}

/// All documents in one Markdown file, preceded by a short summary.
pub fn explanations_markdown(docs: &[Explanation]) -> String {
    let judged: Vec<bool> = docs.iter().filter_map(|d| d.correct).collect();
    let mut out = format!("# Decision explanations\n\n{} examples", docs.len());
    if !judged.is_empty() {
        let right = judged.iter().filter(|&&c| c).count();
        out.push_str(&format!(", {right}/{} correct", judged.len()));
    }
    out.push_str("\n\n");
    for d in docs {
        out.push_str(&d.markdown);
        out.push('\n');
    }
    out
}
